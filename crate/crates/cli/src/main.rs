//! `tci`: dataset synthesis, training, evaluation, inference, diffusion
//! simulation and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or precondition
//! error, 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tci_core::autodiff::Graph;
use tci_core::data::{io, Dataset, Mask, SceneMeta, SceneSample, Split, SynthConfig};
use tci_core::metrics::{compute, DEFAULT_MATCH_DIST};
use tci_core::network::{checkpoint, fit, Model, ModelConfig, TrainConfig};
use tci_core::pmde::{simulate, write_frames, Boundary, PixelField};
use tci_core::verify::{run_suite, DEFAULT_SEEDS};
use tci_core::Error;

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "model.tcif";

#[derive(Parser)]
#[command(name = "tci", version, about = "Thermal-conduction-inspired small target segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
        /// Training fraction.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Disable the attention branch.
        #[arg(long)]
        no_tcia: bool,
        /// Disable the boundary branch.
        #[arg(long)]
        no_tcbm: bool,
        #[arg(long)]
        no_augment: bool,
        /// Read the quantized image files instead of regenerating scenes from their seeds.
        #[arg(long)]
        from_files: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.csv, metrics.txt and the resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        match_dist: Option<f64>,
        #[arg(long)]
        from_files: bool,
    },
    /// Run one image through a checkpoint and dump predictions and feature maps.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Explicit pixel diffusion with frame dumps.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        boundary: Option<BoundaryArg>,
        #[arg(long)]
        dump_every: Option<usize>,
        #[arg(long, value_enum)]
        init: Option<InitField>,
    },
    /// Finite-difference check of every differentiable operation and block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Replicate,
    Periodic,
    Zero,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Self {
        match b {
            BoundaryArg::Replicate => Boundary::Replicate,
            BoundaryArg::Periodic => Boundary::Periodic,
            BoundaryArg::Zero => Boundary::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InitField {
    /// Unit impulse at the center.
    Impulse,
    /// Uniform noise in [0, 1).
    Random,
    /// Bright disk on a dark background.
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetSection {
    n: usize,
    ratio: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n: 200, ratio: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    split: SplitArg,
    batch_size: usize,
    match_dist: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: SplitArg::Test, batch_size: 4, match_dist: DEFAULT_MATCH_DIST }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateSection {
    gamma: f64,
    size: usize,
    steps: usize,
    boundary: Boundary,
    dump_every: usize,
    init: InitField,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            gamma: 0.25,
            size: 64,
            steps: 200,
            boundary: Boundary::Replicate,
            dump_every: 20,
            init: InitField::Disk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckSection {
    seeds: Vec<u64>,
    /// Network used for the end-to-end case.
    network: ModelConfig,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { seeds: DEFAULT_SEEDS.to_vec(), network: ModelConfig::tiny(32) }
    }
}

/// Every parameter a command can read. `seed` drives dataset generation,
/// model initialization and the training shuffle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    dataset: DatasetSection,
    synth: SynthConfig,
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalSection,
    simulate: SimulateSection,
    gradcheck: GradcheckSection,
}

enum Failure {
    Usage(String),
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            toml::from_str(&text).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, path: &Path) -> CliResult {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth { common, out, n, ratio } => {
            let mut cfg = load_config(&common)?;
            cfg.dataset.n = n.unwrap_or(cfg.dataset.n);
            cfg.dataset.ratio = ratio.unwrap_or(cfg.dataset.ratio);
            cmd_synth(&cfg, &out)
        }
        Command::Train {
            common,
            data,
            out,
            epochs,
            batch_size,
            lr,
            weight_decay,
            no_tcia,
            no_tcbm,
            no_augment,
            from_files,
        } => {
            let mut cfg = load_config(&common)?;
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.lr = lr.unwrap_or(t.lr);
            t.weight_decay = weight_decay.unwrap_or(t.weight_decay);
            t.augment &= !no_augment;
            cfg.model.use_tcia &= !no_tcia;
            cfg.model.use_tcbm &= !no_tcbm;
            cmd_train(&cfg, &data, &out, from_files)
        }
        Command::Eval { common, checkpoint, data, out, split, batch_size, match_dist, from_files } => {
            let mut cfg = load_config(&common)?;
            cfg.eval.split = split.unwrap_or(cfg.eval.split);
            cfg.eval.batch_size = batch_size.unwrap_or(cfg.eval.batch_size);
            cfg.eval.match_dist = match_dist.unwrap_or(cfg.eval.match_dist);
            cmd_eval(&cfg, &checkpoint, &data, out.as_deref(), from_files)
        }
        Command::Infer { common, checkpoint, image, out } => {
            let cfg = load_config(&common)?;
            cmd_infer(&cfg, &checkpoint, &image, &out)
        }
        Command::Simulate { common, out, gamma, size, steps, boundary, dump_every, init } => {
            let mut cfg = load_config(&common)?;
            let s = &mut cfg.simulate;
            s.gamma = gamma.unwrap_or(s.gamma);
            s.size = size.unwrap_or(s.size);
            s.steps = steps.unwrap_or(s.steps);
            s.boundary = boundary.map(Boundary::from).unwrap_or(s.boundary);
            s.dump_every = dump_every.unwrap_or(s.dump_every);
            s.init = init.unwrap_or(s.init);
            cmd_simulate(&cfg, &out)
        }
        Command::Gradcheck { common, out, seeds } => {
            let mut cfg = load_config(&common)?;
            if let Some(seeds) = seeds {
                cfg.gradcheck.seeds = seeds;
            }
            cmd_gradcheck(&cfg, out.as_deref())
        }
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult {
    let ds = Dataset::synthesize(&cfg.synth, cfg.dataset.n, cfg.seed, cfg.dataset.ratio)?;
    create_dir(out)?;
    ds.save(out, &cfg.synth)?;
    write_config(cfg, &out.join(CONFIG_FILE))?;
    let targets: usize = ds.manifest.iter().map(|r| r.n_targets).sum();
    println!(
        "wrote {} scenes ({} train, {} test, {targets} targets) to {}",
        ds.samples.len(),
        ds.subset(Split::Train).len(),
        ds.subset(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, from_files: bool) -> CliResult {
    cfg.train.validate()?;
    let ds = Dataset::load(data, !from_files)?;
    let train = ds.subset(Split::Train);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    create_dir(out)?;
    write_config(cfg, &out.join(CONFIG_FILE))?;
    println!("{} parameters, {} training scenes", model.count_params(), train.len());
    let outcome = fit(&mut model, &train, &cfg.train, |e| {
        let l = e.loss;
        println!("epoch {:>3}  seg {:.4}  tb {:.4}  ib {:.4}  total {:.4}", e.epoch, l.seg, l.tb, l.ib, l.total);
    })?;
    let csv_path = out.join("loss.csv");
    fs::write(&csv_path, outcome.curve_csv()).map_err(io_err(&csv_path))?;
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE))?;
    println!("saved {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, data: &Path, out: Option<&Path>, from_files: bool) -> CliResult {
    if cfg.eval.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()).into());
    }
    let model = checkpoint::load(ckpt)?;
    let cfg = &RunConfig { model: model.config.clone(), ..cfg.clone() };
    let ds = Dataset::load(data, !from_files)?;
    let samples: Vec<&SceneSample> = match cfg.eval.split {
        SplitArg::Train => ds.subset(Split::Train),
        SplitArg::Test => ds.subset(Split::Test),
        SplitArg::All => ds.samples.iter().collect(),
    };
    if samples.is_empty() {
        return Err(Error::Config("the selected split is empty".into()).into());
    }
    let preds = model.predict_masks(&samples, cfg.eval.batch_size)?;
    let gts: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = compute(&preds, &gts, cfg.eval.match_dist)?;
    print!("{}", report.table());
    if let Some(dir) = out {
        create_dir(dir)?;
        report.write(dir)?;
        write_config(cfg, &dir.join(CONFIG_FILE))?;
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
}

/// Mean absolute activation over channels of one `1×C×H×W` map.
fn channel_energy(shape: &[usize], data: &[f64]) -> (usize, usize, Vec<f64>) {
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; h * w];
    for plane in data.chunks(h * w).take(c) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v.abs() / c as f64;
        }
    }
    (h, w, out)
}

fn cmd_infer(cfg: &RunConfig, ckpt: &Path, image: &Path, out: &Path) -> CliResult {
    let model = checkpoint::load(ckpt)?;
    let cfg = &RunConfig { model: model.config.clone(), ..cfg.clone() };
    let img = io::load_image(image)?;
    let (h, w) = (img.height, img.width);
    let sample = SceneSample {
        image: img,
        mask: Mask::empty(h, w),
        boundary: Mask::empty(h, w),
        meta: SceneMeta { seed: 0, targets: Vec::new(), clutter_blobs: 0, noise_sigma: 0.0 },
    };
    let g = Graph::new();
    let p = model.bind(&g, false);
    let x = g.constant(&model.batch_images(&[&sample])?);
    let trace = model.forward_trace(&g, &p, x)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }

    let main = sigmoid(&g.data(trace.output.main_logits));
    let mask = Mask { height: h, width: w, data: main.iter().map(|&v| v > 0.5).collect() };
    io::save_mask(&with_suffix(out, "_main_mask.png"), &mask)?;
    for (suffix, var) in [
        ("_main.pgm", trace.output.main_logits),
        ("_body.pgm", trace.output.aux_body_logits),
        ("_boundary.pgm", trace.output.aux_boundary_logits),
    ] {
        let prob = tci_core::data::Image { height: h, width: w, values: sigmoid(&g.data(var)) };
        io::save_image(&with_suffix(out, suffix), &prob)?;
    }
    for (kind, maps) in [("encoder", &trace.encoder), ("decoder", &trace.decoder)] {
        for (k, &v) in maps.iter().enumerate() {
            let stage = if kind == "encoder" { k + 1 } else { maps.len() - k };
            let (fh, fw, energy) = channel_energy(&g.shape(v), &g.data(v));
            io::save_pgm_normalized(&with_suffix(out, &format!("_{kind}{stage}.pgm")), fh, fw, &energy)?;
        }
    }
    write_config(cfg, &with_suffix(out, "_config.toml"))?;
    println!("{} predicted pixels; outputs written with prefix {}", mask.count(), out.display());
    Ok(())
}

fn initial_field(s: &SimulateSection, seed: u64) -> CliResult<PixelField> {
    use rand::{Rng, SeedableRng};
    let n = s.size;
    if n == 0 {
        return Err(Error::Config("size must be positive".into()).into());
    }
    let values: Vec<f64> = match s.init {
        InitField::Impulse => (0..n * n).map(|k| if k == (n / 2) * n + n / 2 { 1.0 } else { 0.0 }).collect(),
        InitField::Random => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..n * n).map(|_| rng.random::<f64>()).collect()
        }
        InitField::Disk => {
            let (c, r) = ((n as f64 - 1.0) / 2.0, n as f64 / 6.0);
            (0..n * n)
                .map(|k| {
                    let (i, j) = ((k / n) as f64, (k % n) as f64);
                    if (i - c).hypot(j - c) <= r { 1.0 } else { 0.0 }
                })
                .collect()
        }
    };
    Ok(PixelField::new(n, n, values, s.boundary, s.gamma)?)
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> CliResult {
    let s = &cfg.simulate;
    let field = initial_field(s, cfg.seed)?;
    let every = (s.dump_every > 0).then_some(s.dump_every);
    let sim = simulate(&field, s.steps, every)?;
    create_dir(out)?;
    write_frames(&out.join("frames"), &sim.frames)?;
    let mut csv = String::from("step,total,min,max\n");
    for (t, f) in &sim.frames {
        csv.push_str(&format!("{t},{:e},{:e},{:e}\n", f.total(), f.min(), f.max()));
    }
    let path = out.join("summary.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    write_config(cfg, &out.join(CONFIG_FILE))?;
    println!(
        "{} steps: total {:.12} -> {:.12}, range [{:.6}, {:.6}]",
        s.steps,
        field.total(),
        sim.field.total(),
        sim.field.min(),
        sim.field.max()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> CliResult {
    let gc = &cfg.gradcheck;
    if gc.seeds.is_empty() {
        return Err(Failure::Usage("at least one seed is required".into()));
    }
    let mut csv = String::from("case,tolerance,max_rel_err,passed\n");
    let results = run_suite(&gc.network, &gc.seeds, |r| {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} max rel err {:.3e}  (tol {:.0e})  {status}", r.name, r.max_error(), r.tolerance);
    })?;
    for r in &results {
        csv.push_str(&format!("{},{:e},{:e},{}\n", r.name, r.tolerance, r.max_error(), r.passed()));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        fs::write(&path, csv).map_err(io_err(&path))?;
        write_config(cfg, &dir.join(CONFIG_FILE))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} cases passed on seeds {:?}", results.len(), gc.seeds);
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} case(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

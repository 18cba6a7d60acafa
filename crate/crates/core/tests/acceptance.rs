//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs in release-level optimization through the workspace test profile.
//! The two learning criteria train full-size models and take several minutes
//! on one core.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tci_core::autodiff::Graph;
use tci_core::data::{Dataset, Mask, SceneSample, Split, SynthConfig};
use tci_core::metrics::{compute, connected_components, evaluate, niou, sample_stats, Connectivity, DEFAULT_MATCH_DIST};
use tci_core::network::{checkpoint, dice_loss, fit, total_loss, Model, ModelConfig, NetworkOutput, TrainConfig, DICE_EPS};
use tci_core::params::ParamStore;
use tci_core::pmde::{laplacian_5pt, simulate, step, Boundary, PixelField};
use tci_core::tcbm::{laplace_conv, tcbm_branch, tcbm_forward, TcbmParams, LAPLACE_KERNEL};
use tci_core::tcia::{stencil_term, tcia_forward, TciaParams};
use tci_core::verify::{network_instance, probe_check_eps, run_suite, DEFAULT_SEEDS};
use tci_core::Tensor;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// 1 -------------------------------------------------------------------------

fn brute_laplacian(h: usize, w: usize, v: &[f64], boundary: Boundary) -> Vec<f64> {
    let read = |i: i64, j: i64| -> f64 {
        let (hh, ww) = (h as i64, w as i64);
        let (i, j) = match boundary {
            Boundary::Replicate => (i.clamp(0, hh - 1), j.clamp(0, ww - 1)),
            Boundary::Periodic => (i.rem_euclid(hh), j.rem_euclid(ww)),
            Boundary::Zero if i < 0 || j < 0 || i >= hh || j >= ww => return 0.0,
            Boundary::Zero => (i, j),
        };
        v[(i * ww + j) as usize]
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            out.push(((read(i + 1, j) + read(i - 1, j)) + (read(i, j + 1) + read(i, j - 1))) - 4.0 * read(i, j));
        }
    }
    out
}

fn stencil_fidelity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut compared = 0usize;
    for field in 0..50 {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let values: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        for boundary in [Boundary::Replicate, Boundary::Periodic, Boundary::Zero] {
            let f = ok(PixelField::new(h, w, values.clone(), boundary, 0.25))?;
            ensure!(laplacian_5pt(&f) == brute_laplacian(h, w, &values, boundary), "field {field} {h}x{w} {boundary:?}");
        }
        let g = Graph::new();
        let x = g.constant(&ok(Tensor::new(&[1, 1, h, w], values.clone()))?);
        let conv = g.data(ok(laplace_conv(&g, x))?);
        ensure!(conv == brute_laplacian(h, w, &values, Boundary::Replicate), "laplace_conv field {field} {h}x{w}");
        compared += h * w;
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(1), "took {:.3} s", secs(t));
    Ok(format!("50 fields, {compared} pixels bit-exact, {:.3} s", secs(t)))
}

// 2 -------------------------------------------------------------------------

fn pmde_physics() -> Outcome {
    let start = Instant::now();
    let n = 64;
    let mut r = rng(2);
    let values: Vec<f64> = (0..n * n).map(|_| r.random::<f64>()).collect();
    let mut f = ok(PixelField::new(n, n, values, Boundary::Replicate, 0.25))?;
    let before = f.total();
    let (mut worst_drift, mut lo, mut hi) = (0.0f64, f.min(), f.max());
    for t in 1..=1000 {
        let next = ok(step(&f))?;
        ensure!(next.max() <= f.max() && next.min() >= f.min(), "maximum principle broken at step {t}");
        ensure!(next.max() <= hi && next.min() >= lo, "range grew at step {t}");
        (lo, hi) = (next.min(), next.max());
        worst_drift = worst_drift.max((next.total() - before).abs());
        f = next;
    }
    ensure!(worst_drift < 1e-10, "sum drift {worst_drift:e}");

    let mut f = ok(PixelField::impulse(n, n, n / 2, n / 2, Boundary::Replicate, 0.25))?;
    let mean = f.mean();
    let mut steps = 0;
    let dev = |f: &PixelField| f.values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    while dev(&f) >= 1e-6 {
        ensure!(steps < 200_000, "impulse not relaxed after {steps} steps");
        f = ok(simulate(&f, 500, None))?.field;
        steps += 500;
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(5), "took {:.3} s", secs(t));
    Ok(format!(
        "sum drift {worst_drift:.1e} over 1000 steps, extrema never expand, impulse within {:.1e} of mean after {steps} steps, {:.2} s",
        dev(&f),
        secs(t)
    ))
}

// 3 -------------------------------------------------------------------------

fn stability_gate() -> Outcome {
    let f = ok(PixelField::new(8, 8, vec![0.5; 64], Boundary::Replicate, 0.25))?;
    for gamma in [0.2500001, 0.3, 1.0] {
        let bad = PixelField { gamma, ..f.clone() };
        ensure!(step(&bad).is_err(), "step accepted gamma {gamma}");
        ensure!(simulate(&bad, 1, None).is_err(), "simulate accepted gamma {gamma}");
        ensure!(PixelField::new(8, 8, vec![0.5; 64], Boundary::Replicate, gamma).is_err(), "constructor accepted {gamma}");
    }
    ensure!(step(&f).is_ok(), "gamma 0.25 refused");
    Ok("gamma in {0.2500001, 0.3, 1.0} refused by step, simulate and the constructor; 0.25 accepted".into())
}

// 4 -------------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let net = ModelConfig::tiny(32);
    let results = ok(run_suite(&net, &DEFAULT_SEEDS, |_| {}))?;
    let suite_time = start.elapsed();
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.2e}", r.name, r.max_error())).collect();
    ensure!(failed.is_empty(), "failed cases: {}", failed.join(", "));
    ensure!(suite_time < Duration::from_secs(120), "suite took {:.1} s", secs(suite_time));
    let worst = |prim: bool| {
        results
            .iter()
            .filter(|r| (r.tolerance < 1e-4) == prim)
            .map(|r| r.max_error())
            .fold(0.0, f64::max)
    };
    // supplementary: every parameter tensor of the network, sampled
    let mut param_checked = 0;
    for seed in DEFAULT_SEEDS {
        let inst = ok(network_instance(&net, seed, 4))?;
        let report = ok(probe_check_eps(&inst.inputs, &inst.op, seed, inst.sample, 1e-4))?;
        ensure!(report.within(1e-4, 1e-10), "network parameters seed {seed}: {:?}", report.worst);
        param_checked += report.checked;
    }
    Ok(format!(
        "{} cases x {} seeds; worst primitive {:.1e} (< 1e-5), worst block/network {:.1e} (< 1e-4); \
         {param_checked} sampled network parameter components also agree; suite {:.1} s",
        results.len(),
        DEFAULT_SEEDS.len(),
        worst(true),
        worst(false),
        secs(suite_time)
    ))
}

// 5 -------------------------------------------------------------------------

fn tcia_block(channels: usize, heads: usize, seed: u64) -> Result<(ParamStore, TciaParams), String> {
    let mut store = ParamStore::new();
    let p = ok(TciaParams::new(&mut store, "tcia", channels, heads, &mut rng(seed)))?;
    Ok((store, p))
}

fn tcia_structure() -> Outcome {
    let mut r = rng(5);
    for case in 0..10 {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let channels = 4 * heads * r.random_range(1..4);
        let shape = [r.random_range(1..3), channels, r.random_range(1..12), r.random_range(1..12)];
        let (store, p) = tcia_block(channels, heads, case)?;
        let g = Graph::new();
        let out = ok(tcia_forward(&g, g.constant(&Tensor::randn(&shape, &mut r)), &p, &store.bind(&g, false)))?;
        ensure!(g.shape(out.out) == shape, "config {case}: shape {:?} -> {:?}", shape, g.shape(out.out));
    }

    let (mut store, p) = tcia_block(16, 2, 7)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in names.iter().zip(store.tensors_mut()) {
        if name.ends_with("bias") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let g = Graph::new();
    let x = g.constant(&Tensor::full(&[2, 16, 9, 7], -0.8));
    ensure!(g.data(ok(tcia_forward(&g, x, &p, &store.bind(&g, false)))?.out).iter().all(|&v| v == 0.0), "constant input not nulled");

    let mut worst_row = 0.0f64;
    for seed in 0..5 {
        let (store, p) = tcia_block(16, 4, seed)?;
        let g = Graph::new();
        let out = ok(tcia_forward(&g, g.constant(&Tensor::randn(&[2, 16, 8, 11], &mut rng(seed + 50))), &p, &store.bind(&g, false)))?;
        for (attn, len) in [(out.attn_horizontal, 8), (out.attn_vertical, 11)] {
            for row in g.data(attn).chunks(len) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst_row <= 1e-12, "attention row sum off by {worst_row:e}");

    // four direction channels of a replicated plane rebuild the 5-point stencil
    let mut interior = 0;
    for seed in 0..20 {
        let mut r = rng(seed + 500);
        let (h, w) = (r.random_range(3..20), r.random_range(3..20));
        let plane: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = h * w;
        let g = Graph::new();
        let x = g.constant(&ok(Tensor::new(&[1, 4, h, w], plane.repeat(4)))?);
        let s = g.data(ok(g.grouped_shift(x))?);
        let d = g.data(ok(stencil_term(&g, x))?);
        let lap = laplacian_5pt(&ok(PixelField::new(h, w, plane.clone(), Boundary::Replicate, 0.25))?);
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let k = i * w + j;
                let rebuilt = ((s[k] + s[n + k]) + (s[2 * n + k] + s[3 * n + k])) - 4.0 * plane[k];
                ensure!(rebuilt == lap[k], "seed {seed} ({i},{j}): {rebuilt} vs {}", lap[k]);
                let from_terms = (d[k] + d[n + k]) + (d[2 * n + k] + d[3 * n + k]);
                ensure!((from_terms - lap[k]).abs() <= 1e-12, "difference terms at ({i},{j})");
                interior += 1;
            }
        }
    }
    Ok(format!(
        "10 shapes preserved; constant input gives exact zeros; row sums within {worst_row:.1e}; \
         stencil rebuilt bit-exactly on {interior} interior pixels"
    ))
}

// 6 -------------------------------------------------------------------------

fn tcbm_block(channels: usize, seed: u64) -> (ParamStore, TcbmParams) {
    let mut store = ParamStore::new();
    let p = TcbmParams::new(&mut store, "tcbm", channels, &mut rng(seed));
    (store, p)
}

fn small_scenes() -> SynthConfig {
    SynthConfig { height: 32, width: 32, max_targets: 1, max_area: 30, ..Default::default() }
}

fn tcbm_identity_and_sensitivity() -> Outcome {
    for seed in 0..5 {
        let (mut store, p) = tcbm_block(4, seed);
        store.get_mut(p.h_step).data[0] = 0.0;
        let x = Tensor::randn(&[2, 4, 7, 6], &mut rng(seed + 10));
        let g = Graph::new();
        ensure!(g.data(ok(tcbm_forward(&g, g.constant(&x), &p, &store.bind(&g, false)))?) == x.data, "seed {seed}: not identity");
    }

    let (n, radius, channels) = (24usize, 8.0, 4);
    let c = (n as f64 - 1.0) / 2.0;
    let dist = |i: usize, j: usize| (i as f64 - c).hypot(j as f64 - c);
    let disk: Vec<f64> = (0..n * n).map(|k| f64::from(dist(k / n, k % n) <= radius)).collect();
    let mut ratios = Vec::new();
    for seed in 0..6 {
        let (store, p) = tcbm_block(channels, seed);
        let x = ok(Tensor::new(&[1, channels, n, n], disk.repeat(channels)))?;
        let g = Graph::new();
        let b = g.data(ok(tcbm_branch(&g, g.constant(&x), &p, &store.bind(&g, false)))?);
        let (mut edge, mut inner) = (Vec::new(), Vec::new());
        for k in 0..n * n {
            let d = dist(k / n, k % n);
            let mag = (0..channels).map(|ch| b[ch * n * n + k].abs()).sum::<f64>() / channels as f64;
            if (d - radius).abs() <= 1.0 {
                edge.push(mag);
            } else if d <= radius - 3.0 {
                inner.push(mag);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        ensure!(mean(&edge) > mean(&inner), "seed {seed}: edge {} <= inner {}", mean(&edge), mean(&inner));
        ratios.push(mean(&edge) / mean(&inner).max(1e-300));
    }

    let ds = ok(Dataset::synthesize(&small_scenes(), 12, 6, 1.0))?;
    let train: Vec<&SceneSample> = ds.samples.iter().collect();
    let mut model = ok(Model::new(ModelConfig::tiny(32), 6))?;
    let bits = |m: &Model| -> Vec<u64> {
        m.stages
            .iter()
            .flat_map(|s| &s.blocks)
            .filter_map(|b| b.tcbm.as_ref())
            .flat_map(|t| t.laplace.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let before = bits(&model);
    let weights_before = ok(checkpoint::encode(&model))?;
    let cfg = TrainConfig { epochs: 10, seed: 6, ..Default::default() };
    ok(fit(&mut model, &train, &cfg, |_| {}))?;
    let after = bits(&model);
    ensure!(!before.is_empty() && before == after, "Laplace kernel changed");
    let reference: Vec<u64> = LAPLACE_KERNEL.iter().flatten().map(|v| v.to_bits()).collect();
    ensure!(after.chunks(9).all(|k| k == reference.as_slice()), "kernel differs from the fixed stencil");
    ensure!(ok(checkpoint::encode(&model))? != weights_before, "training did not change any weight");
    ensure!(model.params.iter().all(|(name, _)| !name.contains("laplace")), "kernel is a trainable parameter");
    Ok(format!(
        "h_step 0 exact on 5 seeds; edge/inner response ratio min {:.2} over 6 seeds; {} kernels bit-identical after 10 epochs",
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        after.len() / 9
    ))
}

// 7 -------------------------------------------------------------------------

fn dice_of(logits: &[f64], target: &[f64], eps: f64) -> Result<f64, String> {
    let shape = [1, 1, 1, logits.len()];
    let g = Graph::new();
    let l = g.constant(&ok(Tensor::new(&shape, logits.to_vec()))?);
    let t = g.constant(&ok(Tensor::new(&shape, target.to_vec()))?);
    Ok(g.scalar(ok(dice_loss(&g, l, t, eps))?))
}

fn hard(mask: &[f64]) -> Vec<f64> {
    mask.iter().map(|&m| if m > 0.5 { 20.0 } else { -20.0 }).collect()
}

fn loss_contracts() -> Outcome {
    let target: Vec<f64> = (0..64).map(|k| f64::from(k % 5 == 0)).collect();
    let perfect = dice_of(&hard(&target), &target, DICE_EPS)?;
    ensure!(perfect < 1e-6, "saturated correct {perfect:e}");
    let big: Vec<f64> = (0..4096).map(|k| f64::from(k % 2 == 0)).collect();
    let flipped: Vec<f64> = hard(&big).iter().map(|v| -v).collect();
    let disjoint = dice_of(&flipped, &big, DICE_EPS)?;
    ensure!((disjoint - 1.0).abs() < 1e-3, "saturated disjoint {disjoint}");
    let half = dice_of(&[40.0, 40.0, -40.0, -40.0], &[1.0, 0.0, 1.0, 0.0], 0.0)?;
    ensure!((half - 0.5).abs() < 1e-6, "hand-count case {half}");

    let ds = ok(Dataset::synthesize(&SynthConfig::default(), 2, 7, 1.0))?;
    let model = ok(Model::new(ModelConfig::default(), 7))?;
    let refs: Vec<&SceneSample> = ds.samples.iter().collect();
    let g = Graph::new();
    let p = model.bind(&g, true);
    let x = g.constant(&ok(model.batch_images(&refs))?);
    let shape = [2, 1, 64, 64];
    let stack = |f: fn(&SceneSample) -> Vec<f64>| -> Result<Tensor, String> {
        ok(Tensor::new(&shape, refs.iter().flat_map(|s| f(s)).collect()))
    };
    let mask = g.constant(&stack(|s| s.mask.as_f64())?);
    let boundary = g.constant(&stack(|s| s.boundary.as_f64())?);
    let out: NetworkOutput = ok(model.forward(&g, &p, x))?;
    let (total, parts) = ok(total_loss(&g, &out, mask, boundary))?;
    ensure!(g.scalar(total) == (parts.seg + parts.tb) + parts.ib, "total != component sum");
    ensure!(parts.total == parts.component_sum(), "reported total != component sum");
    let grads = g.backward(total);
    let mut norms = Vec::new();
    for head in [&model.aux_body_head, &model.aux_boundary_head] {
        let gw = grads.get(p.var(head.out.weight)).ok_or("aux head has no gradient")?;
        let norm = gw.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(norm > 0.0 && norm.is_finite(), "aux head gradient norm {norm}");
        norms.push(norm);
    }
    Ok(format!(
        "dice correct {perfect:.1e}, disjoint {disjoint:.6}, hand case {half:.9}; total == seg + tb + ib exactly; \
         aux head gradient norms {:.2e} / {:.2e}",
        norms[0], norms[1]
    ))
}

// 8 and 9 -------------------------------------------------------------------

struct Learning {
    dataset: Dataset,
}

impl Learning {
    fn new() -> Result<Self, String> {
        Ok(Learning { dataset: ok(Dataset::synthesize(&SynthConfig::default(), 200, 7, 0.8))? })
    }

    fn train(&self) -> Vec<&SceneSample> {
        self.dataset.subset(Split::Train)
    }

    fn test(&self) -> Vec<&SceneSample> {
        self.dataset.subset(Split::Test)
    }
}

const LEARNING_EPOCHS: usize = 30;

fn desk_scale_learning(data: &Learning) -> Outcome {
    let start = Instant::now();
    let (train, test) = (data.train(), data.test());
    ensure!(train.len() == 160 && test.len() == 40, "split {}/{}", train.len(), test.len());
    let mut model = ok(Model::new(ModelConfig::default(), 7))?;
    let cfg = TrainConfig { epochs: LEARNING_EPOCHS, batch_size: 4, lr: 0.05, weight_decay: 0.0004, seed: 7, augment: true };
    let outcome = ok(fit(&mut model, &train, &cfg, |_| {}))?;
    let first = outcome.curve.first().ok_or("empty curve")?.loss.total;
    let last = outcome.curve.last().ok_or("empty curve")?.loss.total;
    let report = ok(evaluate(&model, &test, 4))?;
    let t = start.elapsed();
    let summary = format!(
        "{} params, {LEARNING_EPOCHS} epochs: loss {first:.3} -> {last:.3} (ratio {:.3}); test IoU {:.3}, nIoU {:.3}, Pd {:.3}, Fa {:.1}e-6; {:.0} s",
        model.count_params(),
        last / first,
        report.iou,
        report.niou,
        report.pd,
        report.fa * 1e6,
        secs(t)
    );
    ensure!(last < 0.5 * first, "loss ratio too high: {summary}");
    ensure!(report.iou >= 0.5, "IoU too low: {summary}");
    ensure!(report.pd >= 0.8, "Pd too low: {summary}");
    ensure!(t < Duration::from_secs(15 * 60), "too slow: {summary}");
    Ok(summary)
}

const ABLATION_EPOCHS: usize = 10;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation_ordering(data: &Learning) -> Outcome {
    let start = Instant::now();
    let (train, test) = (data.train(), data.test());
    let mut medians = Vec::new();
    let mut detail = Vec::new();
    for (label, tcia, tcbm) in [("full", true, true), ("tcia-only", true, false), ("baseline", false, false)] {
        let mut ious = Vec::new();
        for seed in 1..=3u64 {
            let config = ModelConfig { use_tcia: tcia, use_tcbm: tcbm, ..ModelConfig::default() };
            let mut model = ok(Model::new(config, seed))?;
            let cfg = TrainConfig { epochs: ABLATION_EPOCHS, seed, ..Default::default() };
            ok(fit(&mut model, &train, &cfg, |_| {}))?;
            ious.push(ok(evaluate(&model, &test, 4))?.iou);
        }
        let m = median(ious.clone());
        detail.push(format!("{label} {m:.3} {ious:.3?}"));
        medians.push(m);
    }
    let summary = format!("median test IoU over seeds 1-3, {ABLATION_EPOCHS} epochs: {}; {:.0} s", detail.join(", "), secs(start.elapsed()));
    ensure!(medians[0] >= medians[1] && medians[1] >= medians[2], "ordering violated: {summary}");
    Ok(summary)
}

// 10 ------------------------------------------------------------------------

fn flood_fill(m: &Mask) -> BTreeSet<Vec<usize>> {
    let (h, w) = (m.height as i64, m.width as i64);
    let mut seen = vec![false; m.data.len()];
    let mut out = BTreeSet::new();
    for start in 0..m.data.len() {
        if !m.data[start] || seen[start] {
            continue;
        }
        let (mut comp, mut stack) = (Vec::new(), vec![start]);
        seen[start] = true;
        while let Some(k) = stack.pop() {
            comp.push(k);
            let (i, j) = (k as i64 / w, k as i64 % w);
            for (di, dj) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                let (r, c) = (i + di, j + dj);
                if r >= 0 && c >= 0 && r < h && c < w {
                    let nb = (r * w + c) as usize;
                    if m.data[nb] && !seen[nb] {
                        seen[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.insert(comp);
    }
    out
}

fn mask_with(h: usize, w: usize, pixels: &[(usize, usize)]) -> Mask {
    let mut m = Mask::empty(h, w);
    for &(i, j) in pixels {
        m.set(i, j, true);
    }
    m
}

fn metrics_oracle() -> Outcome {
    let m = mask_with(8, 8, &[(1, 1), (1, 2), (5, 5)]);
    let r = ok(compute(&[m.clone()], &[m], DEFAULT_MATCH_DIST))?;
    ensure!((r.iou, r.niou, r.pd, r.fa) == (1.0, 1.0, 1.0, 0.0), "perfect case");

    let pred = mask_with(8, 8, &[(3, 3), (3, 4)]);
    let gt = mask_with(8, 8, &[(3, 4), (3, 5), (3, 6)]);
    ensure!(ok(sample_stats(&pred, &gt, DEFAULT_MATCH_DIST))?.iou() == 0.25, "2 vs 3 px case");
    let full = Mask::from_fn(8, 8, |i, j| i < 2 && j < 4);
    let n = ok(niou(&[full.clone(), pred.clone()], &[full.clone(), gt.clone()]))?;
    let pooled = ok(compute(&[full.clone(), pred], &[full, gt], DEFAULT_MATCH_DIST))?.iou;
    ensure!(n == 0.625 && pooled == 9.0 / 12.0, "nIoU {n}, pooled {pooled}");

    let mut gt = mask_with(64, 64, &[(10, 10), (10, 11), (11, 10), (11, 11), (40, 40), (40, 41), (41, 40), (41, 41)]);
    let mut pred = mask_with(64, 64, &[(10, 10), (10, 11), (11, 10), (11, 11), (55, 5), (55, 6), (56, 5)]);
    let r = ok(compute(&[pred.clone()], &[gt.clone()], DEFAULT_MATCH_DIST))?;
    ensure!(r.pd == 0.5 && r.fa == 3.0 / 4096.0, "Pd {} Fa {}", r.pd, r.fa);

    gt = mask_with(32, 32, &[(10, 10), (10, 11), (11, 10), (11, 11)]);
    pred = mask_with(32, 32, &[(10, 20), (10, 21), (11, 20), (11, 21)]);
    let r = ok(compute(&[pred], &[gt], DEFAULT_MATCH_DIST))?;
    ensure!(r.pd == 0.0 && r.per_sample[0].false_pixels == 4, "shifted case");

    let mut r = rng(10);
    for k in 0..100 {
        let p = [0.2, 0.35, 0.5][k % 3];
        let m = Mask::from_fn(16, 16, |_, _| r.random_bool(p));
        let got: BTreeSet<Vec<usize>> =
            connected_components(&m, Connectivity::Eight).components.into_iter().map(|c| c.pixels).collect();
        ensure!(got == flood_fill(&m), "mask {k} labeling differs from flood fill");
    }
    Ok("perfect, 1/4, nIoU 0.625 vs pooled 0.75, Pd 0.5 / Fa 3/4096 and shifted cases exact; 100 flood-fill comparisons identical".into())
}

// 11 ------------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let ds = ok(Dataset::synthesize(&small_scenes(), 10, 11, 0.8))?;
        let train = ds.subset(Split::Train);
        let mut model = ok(Model::new(ModelConfig::tiny(32), 11))?;
        let cfg = TrainConfig { epochs: 4, seed: 11, ..Default::default() };
        let outcome = ok(fit(&mut model, &train, &cfg, |_| {}))?;
        let ckpt = dir.path().join(format!("{tag}.tcif"));
        let csv = dir.path().join(format!("{tag}.csv"));
        ok(checkpoint::save(&model, &ckpt))?;
        ok(std::fs::write(&csv, outcome.curve_csv()))?;
        Ok((ok(std::fs::read(&ckpt))?, ok(std::fs::read(&csv))?))
    };
    let (a_ckpt, a_csv) = run("a")?;
    let (b_ckpt, b_csv) = run("b")?;
    ensure!(a_ckpt == b_ckpt, "checkpoints differ");
    ensure!(a_csv == b_csv, "loss CSVs differ");
    Ok(format!("checkpoints ({} bytes) and loss CSVs identical across two seeded runs", a_ckpt.len()))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let t = secs(start.elapsed());
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{t:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {n:>2} {name}: {detail} [{t:.1} s]");
            }
        }
    };
    report(1, "stencil fidelity", &stencil_fidelity);
    report(2, "diffusion physics", &pmde_physics);
    report(3, "stability gate", &stability_gate);
    report(4, "gradient integrity", &gradient_integrity);
    report(5, "attention structure", &tcia_structure);
    report(6, "boundary block identity and sensitivity", &tcbm_identity_and_sensitivity);
    report(7, "loss contracts", &loss_contracts);
    match Learning::new() {
        Ok(data) => {
            report(8, "learning at desk scale", &|| desk_scale_learning(&data));
            report(9, "ablation ordering", &|| ablation_ordering(&data));
        }
        Err(e) => {
            report(8, "learning at desk scale", &|| Err(e.clone()));
            report(9, "ablation ordering", &|| Err(e.clone()));
        }
    }
    report(10, "metrics oracle", &metrics_oracle);
    report(11, "reproducibility", &reproducibility);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}

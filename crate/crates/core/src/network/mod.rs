//! Encoder/decoder segmentation network built from TCIT blocks.
//!
//! Encoder: four stages, each a strided patch embedding, a depthwise
//! positional convolution and a stack of TCIT blocks. A TCIT block runs the
//! attention branch ([`crate::tcia`]) and the boundary branch
//! ([`crate::tcbm`]) in parallel on the same normalized input, adds both
//! deltas to the residual stream, then applies a pre-norm FFN.
//!
//! Decoder: three transposed convolutions back to the first-stage
//! resolution, each fused with the matching encoder map by addition after a
//! 1×1 alignment, then bilinear upsampling and a 1×1 head. Two auxiliary
//! heads read the accumulated attention and boundary deltas of one encoder
//! stage.

pub mod checkpoint;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvOpts, Graph, PadMode, Var};
use crate::data::{Mask, SceneSample};
use crate::error::{Error, Result};
use crate::params::{init_weight, Bound, ChannelNorm, Conv, Deconv, ParamId, ParamStore, LAYER_NORM_EPS};
use crate::tcbm::{tcbm_delta, TcbmParams};
use crate::tcia::{tcia_forward, TciaParams};
use crate::tensor::Tensor;

pub use loss::{dice_loss, total_loss, LossParts, DICE_EPS};
pub use train::{fit, AdaGrad, EpochLoss, TrainConfig, TrainOutcome};

/// Initial foreground probability of every head. Starting near background
/// keeps a head off the all-foreground plateau of the Dice loss, where the
/// sigmoid saturates and AdaGrad's early unit-size steps can strand it.
pub const HEAD_PRIOR: f64 = 0.01;

pub const STAGES: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; STAGES],
    pub blocks_per_stage: [usize; STAGES],
    pub heads_per_stage: [usize; STAGES],
    pub stage_strides: [usize; STAGES],
    pub ffn_expansion: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub use_tcia: bool,
    pub use_tcbm: bool,
    /// Encoder stage (0-based) whose branch deltas feed the auxiliary heads.
    pub aux_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            heads_per_stage: [1, 2, 4, 8],
            stage_strides: [4, 2, 2, 2],
            ffn_expansion: 4,
            input_height: 64,
            input_width: 64,
            use_tcia: true,
            use_tcbm: true,
            aux_stage: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration: 8 channels and one block per stage.
    pub fn tiny(size: usize) -> Self {
        ModelConfig {
            stage_channels: [8; STAGES],
            blocks_per_stage: [1; STAGES],
            heads_per_stage: [1; STAGES],
            ffn_expansion: 2,
            input_height: size,
            input_width: size,
            ..Default::default()
        }
    }

    /// Downsampling factor of each stage relative to the input.
    pub fn cumulative_strides(&self) -> [usize; STAGES] {
        let mut out = [1; STAGES];
        let mut acc = 1;
        for (o, s) in out.iter_mut().zip(self.stage_strides) {
            acc *= s;
            *o = acc;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_strides.iter().any(|&s| s == 0) {
            return bad("stage strides must be positive".into());
        }
        let total = self.cumulative_strides()[STAGES - 1];
        if self.input_height == 0 || self.input_height % total != 0 || self.input_width == 0 || self.input_width % total != 0 {
            return bad(format!(
                "input {}x{} must be a positive multiple of the total stride {total}",
                self.input_height, self.input_width
            ));
        }
        for s in 0..STAGES {
            let (c, heads) = (self.stage_channels[s], self.heads_per_stage[s]);
            if c == 0 || c % 4 != 0 {
                return bad(format!("stage {} channels {c} must be a positive multiple of 4", s + 1));
            }
            if heads == 0 || c % heads != 0 || (c / 2) % heads != 0 {
                return bad(format!("stage {} channels {c} cannot be split over {heads} heads", s + 1));
            }
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        if self.aux_stage >= STAGES {
            return bad(format!("aux_stage {} out of range 0..{STAGES}", self.aux_stage));
        }
        Ok(())
    }
}

/// One transformer block with parallel attention and boundary branches.
#[derive(Debug, Clone)]
pub struct TcitBlock {
    /// Absent when both branches are disabled. Has no shift: both branches
    /// start with difference stencils that cancel it.
    pub norm1: Option<ChannelNorm>,
    pub tcia: Option<TciaParams>,
    pub tcbm: Option<TcbmParams>,
    pub norm2: ChannelNorm,
    pub ffn_in: Conv,
    pub ffn_out: Conv,
}

/// Result of [`tcit_forward`].
#[derive(Debug, Clone, Copy)]
pub struct TcitOutput {
    pub out: Var,
    pub tcia_delta: Option<Var>,
    pub tcbm_delta: Option<Var>,
}

impl TcitBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let norm1 = (cfg.use_tcia || cfg.use_tcbm).then(|| ChannelNorm::gain_only(store, &format!("{name}.norm1"), channels));
        let tcia = cfg
            .use_tcia
            .then(|| TciaParams::new(store, &format!("{name}.tcia"), channels, heads, rng))
            .transpose()?;
        let tcbm = cfg.use_tcbm.then(|| TcbmParams::new(store, &format!("{name}.tcbm"), channels, rng));
        let norm2 = ChannelNorm::new(store, &format!("{name}.norm2"), channels);
        let hidden = channels * cfg.ffn_expansion;
        let ffn_in = Conv::pointwise(store, &format!("{name}.ffn_in"), channels, hidden, rng);
        let ffn_out = Conv::pointwise(store, &format!("{name}.ffn_out"), hidden, channels, rng);
        Ok(TcitBlock { norm1, tcia, tcbm, norm2, ffn_in, ffn_out })
    }
}

/// `u = x + tcia(n) + tcbm_delta(n)` with `n = norm1(x)`, then
/// `y = u + ffn(norm2(u))`.
pub fn tcit_forward(g: &Graph, x: Var, block: &TcitBlock, p: &Bound) -> Result<TcitOutput> {
    let n = match &block.norm1 {
        Some(norm) => norm.forward(g, p, x)?,
        None => x,
    };
    let mut u = x;
    let mut tcia_delta = None;
    let mut tcbm_delta_out = None;
    if let Some(tcia) = &block.tcia {
        let d = tcia_forward(g, n, tcia, p)?.out;
        u = g.add(u, d)?;
        tcia_delta = Some(d);
    }
    if let Some(tcbm) = &block.tcbm {
        let d = tcbm_delta(g, n, tcbm, p)?;
        u = g.add(u, d)?;
        tcbm_delta_out = Some(d);
    }
    let n2 = block.norm2.forward(g, p, u)?;
    let hidden = g.gelu(block.ffn_in.forward(g, p, n2)?);
    let y = g.add(u, block.ffn_out.forward(g, p, hidden)?)?;
    Ok(TcitOutput { out: y, tcia_delta, tcbm_delta: tcbm_delta_out })
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: Conv,
    /// Depthwise 3×3 positional kernel, `C×1×3×3`.
    pub pos: ParamId,
    pub blocks: Vec<TcitBlock>,
}

/// `x + depthwise₃ₓ₃(x)` with zero padding.
pub fn position_code(g: &Graph, x: Var, kernel: Var) -> Result<Var> {
    let conv = g.depthwise_conv2d(x, kernel, PadMode::Zero)?;
    g.add(x, conv)
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Deconv,
    pub align: Conv,
    pub norm: ChannelNorm,
}

/// Logit maps at input resolution.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    pub main_logits: Var,
    /// Head on the attention-branch deltas.
    pub aux_body_logits: Var,
    /// Head on the boundary-branch deltas.
    pub aux_boundary_logits: Var,
}

/// [`NetworkOutput`] plus intermediate maps for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: NetworkOutput,
    /// Encoder stage outputs 1..4.
    pub encoder: Vec<Var>,
    /// Decoder outputs at stages 3, 2, 1.
    pub decoder: Vec<Var>,
}

/// The full network: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stages: Vec<Stage>,
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
    pub aux_body_head: AuxHead,
    pub aux_boundary_head: AuxHead,
}

impl Model {
    /// Build with weights drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_ch = 1;
        for s in 0..STAGES {
            let (c, stride) = (config.stage_channels[s], config.stage_strides[s]);
            let name = format!("stage{}", s + 1);
            let embed = Conv::new(&mut store, &format!("{name}.embed"), in_ch, c, stride, ConvOpts::patch(stride), &mut rng);
            let pos = store.add(format!("{name}.pos"), init_weight(&[c, 1, 3, 3], 9, &mut rng));
            let blocks = (0..config.blocks_per_stage[s])
                .map(|b| TcitBlock::new(&mut store, &format!("{name}.block{}", b + 1), c, config.heads_per_stage[s], &config, &mut rng))
                .collect::<Result<_>>()?;
            stages.push(Stage { embed, pos, blocks });
            in_ch = c;
        }
        let decoder = (0..STAGES - 1)
            .rev()
            .map(|s| {
                let name = format!("decoder{}", s + 1);
                let c_from = config.stage_channels[s + 1];
                let c_to = config.stage_channels[s];
                DecoderStage {
                    up: Deconv::new(&mut store, &format!("{name}.up"), c_from, c_to, config.stage_strides[s + 1], &mut rng),
                    align: Conv::pointwise(&mut store, &format!("{name}.align"), c_to, c_to, &mut rng),
                    norm: ChannelNorm::new(&mut store, &format!("{name}.norm"), c_to),
                }
            })
            .collect();
        let head = Conv::pointwise(&mut store, "head.main", config.stage_channels[0], 1, &mut rng);
        let aux_c = config.stage_channels[config.aux_stage];
        let aux_body_head = AuxHead::new(&mut store, "head.body", aux_c, &mut rng);
        let aux_boundary_head = AuxHead::new(&mut store, "head.boundary", aux_c, &mut rng);
        let prior_logit = (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln();
        for h in [&head, &aux_body_head.out, &aux_boundary_head.out] {
            if let Some(b) = h.bias {
                store.get_mut(b).data.fill(prior_logit);
            }
        }
        Ok(Model { config, params: store, stages, decoder, head, aux_body_head, aux_boundary_head })
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Strided patch embedding of stage `stage` (0-based).
    pub fn patch_embed(&self, g: &Graph, p: &Bound, x: Var, stage: usize) -> Result<Var> {
        self.stages[stage].embed.forward(g, p, x)
    }

    pub fn forward(&self, g: &Graph, p: &Bound, images: Var) -> Result<NetworkOutput> {
        Ok(self.forward_trace(g, p, images)?.output)
    }

    pub fn forward_trace(&self, g: &Graph, p: &Bound, images: Var) -> Result<ForwardTrace> {
        let shape = g.expect_rank("network", images, 4)?;
        let cfg = &self.config;
        if shape[1] != 1 || shape[2] != cfg.input_height || shape[3] != cfg.input_width {
            return Err(Error::Config(format!(
                "network expects B×1×{}×{} images, got {shape:?}",
                cfg.input_height, cfg.input_width
            )));
        }
        let batch = shape[0];
        let strides = cfg.cumulative_strides();

        let mut x = images;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut aux_body = None;
        let mut aux_boundary = None;
        for (s, stage) in self.stages.iter().enumerate() {
            x = self.patch_embed(g, p, x, s)?;
            x = position_code(g, x, p.var(stage.pos))?;
            let mut body_acc: Option<Var> = None;
            let mut boundary_acc: Option<Var> = None;
            for block in &stage.blocks {
                let out = tcit_forward(g, x, block, p)?;
                x = out.out;
                if s == cfg.aux_stage {
                    body_acc = accumulate(g, body_acc, out.tcia_delta)?;
                    boundary_acc = accumulate(g, boundary_acc, out.tcbm_delta)?;
                }
            }
            if s == cfg.aux_stage {
                let zeros = || g.constant(&Tensor::zeros(&g.shape(x)));
                aux_body = Some(body_acc.unwrap_or_else(zeros));
                aux_boundary = Some(boundary_acc.unwrap_or_else(zeros));
            }
            encoder.push(x);
        }

        let mut decoder = Vec::with_capacity(STAGES - 1);
        let mut d = x;
        for (k, stage) in self.decoder.iter().enumerate() {
            let skip = encoder[STAGES - 2 - k];
            let up = stage.up.forward(g, p, d)?;
            let aligned = stage.align.forward(g, p, skip)?;
            d = g.gelu(stage.norm.forward(g, p, g.add(up, aligned)?)?);
            decoder.push(d);
        }
        let up = g.upsample_bilinear(d, strides[0])?;
        let main_logits = self.head.forward(g, p, up)?;

        let aux_factor = strides[cfg.aux_stage];
        let aux_head = |head: &AuxHead, deltas: Var| -> Result<Var> {
            let logits = head.forward(g, p, spatial_norm(g, deltas)?)?;
            g.upsample_bilinear(logits, aux_factor)
        };
        let aux_body_logits = aux_head(&self.aux_body_head, aux_body.expect("aux stage visited"))?;
        let aux_boundary_logits = aux_head(&self.aux_boundary_head, aux_boundary.expect("aux stage visited"))?;
        debug_assert_eq!(g.shape(main_logits), vec![batch, 1, cfg.input_height, cfg.input_width]);

        Ok(ForwardTrace {
            output: NetworkOutput { main_logits, aux_body_logits, aux_boundary_logits },
            encoder,
            decoder,
        })
    }

    /// Batch images into a `B×1×H×W` tensor.
    pub fn batch_images(&self, samples: &[&SceneSample]) -> Result<Tensor> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.image.height, s.image.width) != (h, w) {
                return Err(Error::Config(format!(
                    "sample is {}x{}, model expects {h}x{w}",
                    s.image.height, s.image.width
                )));
            }
            data.extend_from_slice(&s.image.values);
        }
        Tensor::new(&[samples.len(), 1, h, w], data)
    }

    /// Main-head logits for each sample, computed without gradients.
    pub fn predict_logits(&self, samples: &[&SceneSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let plane = self.config.input_height * self.config.input_width;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let g = Graph::new();
            let p = self.bind(&g, false);
            let x = g.constant(&self.batch_images(chunk)?);
            let logits = g.data(self.forward(&g, &p, x)?.main_logits);
            out.extend(logits.chunks(plane).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Binary predictions of the main head at probability 0.5.
    pub fn predict_masks(&self, samples: &[&SceneSample], batch_size: usize) -> Result<Vec<Mask>> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        Ok(self
            .predict_logits(samples, batch_size)?
            .iter()
            .map(|l| crate::metrics::binarize(h, w, l, 0.5))
            .collect())
    }
}

/// Segmentation head on branch deltas: 3×3 conv, GELU, 1×1 conv to one logit.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub hidden: Conv,
    pub out: Conv,
}

impl AuxHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = Conv::new(store, &format!("{name}.hidden"), channels, channels, 3, ConvOpts::same(3, PadMode::Zero), rng);
        let out = Conv::pointwise(store, &format!("{name}.out"), channels, 1, rng);
        AuxHead { hidden, out }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.gelu(self.hidden.forward(g, p, x)?);
        self.out.forward(g, p, h)
    }
}

/// Standardize each channel of each sample over its spatial positions.
/// Unlike a per-pixel channel norm this keeps where a map is strong.
pub fn spatial_norm(g: &Graph, x: Var) -> Result<Var> {
    let shape = g.expect_rank("spatial_norm", x, 4)?;
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = g.reshape(x, &[b, c, h * w])?;
    let ones = g.constant(&Tensor::full(&[h * w], 1.0));
    let zeros = g.constant(&Tensor::zeros(&[h * w]));
    let n = g.layer_norm(flat, ones, zeros, 2, LAYER_NORM_EPS)?;
    g.reshape(n, &shape)
}

fn accumulate(g: &Graph, acc: Option<Var>, next: Option<Var>) -> Result<Option<Var>> {
    Ok(match (acc, next) {
        (Some(a), Some(n)) => Some(g.add(a, n)?),
        (None, n) => n,
        (a, None) => a,
    })
}

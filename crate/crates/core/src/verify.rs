//! The gradient-check suite: every differentiable primitive plus the
//! attention block, boundary block, transformer block and whole network.
//!
//! Each case is probed through `Σᵢ wᵢ ⊙ (yᵢ − yᵢ⁽⁰⁾)` over its outputs, with
//! fixed random weights `w` and the unperturbed outputs `y⁽⁰⁾`. Centering
//! keeps the scalar near zero so central differences are not lost in the
//! rounding of a large sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvOpts, Graph, PadMode, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_sampled, GradCheck, DEFAULT_EPS};
use crate::network::{dice_loss, position_code, tcit_forward, Model, ModelConfig, TcitBlock, DICE_EPS};
use crate::params::{Bound, ParamStore};
use crate::tcbm::{laplace_conv, tcbm_forward, TcbmParams};
use crate::tcia::{tcia_forward, TciaParams};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

pub type MultiOp = Box<dyn Fn(&Graph, &[Var]) -> Result<Vec<Var>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Primitive,
    Composite,
}

/// Inputs and the function under test for one seed.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub op: MultiOp,
    /// Compare at most this many components per input.
    pub sample: Option<usize>,
}

pub struct Case {
    pub name: &'static str,
    pub kind: Kind,
    pub build: Box<dyn Fn(u64) -> Result<Instance>>,
}

impl Case {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            Kind::Primitive => PRIMITIVE_TOL,
            Kind::Composite => COMPOSITE_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub tolerance: f64,
    /// `(seed, max relative error)` per seed.
    pub errors: Vec<(u64, f64)>,
}

impl CaseResult {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.errors.iter().all(|e| e.1 < self.tolerance)
    }
}

/// Gradient-check `op` through the centered weighted-sum probe.
pub fn probe_check(inputs: &[Tensor], op: &MultiOp, seed: u64, sample: Option<usize>) -> Result<GradCheck> {
    probe_check_eps(inputs, op, seed, sample, DEFAULT_EPS)
}

/// [`probe_check`] with an explicit finite-difference step.
pub fn probe_check_eps(inputs: &[Tensor], op: &MultiOp, seed: u64, sample: Option<usize>, eps: f64) -> Result<GradCheck> {
    let reference: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        op(&g, &vars)?.into_iter().map(|v| g.value(v)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let weights: Vec<Tensor> = reference.iter().map(|r| Tensor::randn(&r.shape, &mut rng)).collect();
    let f = |g: &Graph, v: &[Var]| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for ((y, r), w) in op(g, v)?.into_iter().zip(&reference).zip(&weights) {
            let centered = g.sub(y, g.constant(r))?;
            let term = g.sum(g.mul(centered, g.constant(w))?);
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("op produced at least one output"))
    };
    grad_check_sampled(f, inputs, eps, sample, seed)
}

pub fn run_case(case: &Case, seeds: &[u64]) -> Result<CaseResult> {
    let mut errors = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let inst = (case.build)(seed)?;
        let report = probe_check(&inst.inputs, &inst.op, seed, inst.sample)?;
        errors.push((seed, report.max_rel_err));
    }
    Ok(CaseResult { name: case.name.to_string(), tolerance: case.tolerance(), errors })
}

/// Run every case of [`suite`] on `seeds`, reporting each through `on_case`.
pub fn run_suite(network: &ModelConfig, seeds: &[u64], mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in suite(network) {
        let r = run_case(&case, seeds)?;
        on_case(&r);
        out.push(r);
    }
    Ok(out)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, r)
}

fn single(op: impl Fn(&Graph, &[Var]) -> Result<Var> + 'static) -> MultiOp {
    Box::new(move |g, v| Ok(vec![op(g, v)?]))
}

fn prim(name: &'static str, build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, MultiOp) + 'static) -> Case {
    Case {
        name,
        kind: Kind::Primitive,
        build: Box::new(move |seed| {
            let (inputs, op) = build(&mut rng(seed));
            Ok(Instance { inputs, op, sample: None })
        }),
    }
}

/// Inputs are `[x, params...]`; the op rebinds parameters from the input vars.
fn module_instance(x: Tensor, store: &ParamStore, sample: Option<usize>, op: impl Fn(&Graph, Var, &Bound) -> Result<Vec<Var>> + 'static) -> Instance {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let op: MultiOp = Box::new(move |g, v| op(g, v[0], &Bound::from_vars(v[1..].to_vec())));
    Instance { inputs, op, sample }
}

/// Perturb freshly initialized parameters so zero biases and unit gains do
/// not hide terms from the check.
fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        let noise = Tensor::randn(&t.shape, r);
        for (v, n) in t.data.iter_mut().zip(&noise.data) {
            *v += 0.1 * n;
        }
    }
}

pub fn suite(network: &ModelConfig) -> Vec<Case> {
    let mut cases = vec![
        prim("add", |r| (vec![randn(&[3, 4], r), randn(&[3, 4], r)], single(|g, v| g.add(v[0], v[1])))),
        prim("sub", |r| (vec![randn(&[3, 4], r), randn(&[3, 4], r)], single(|g, v| g.sub(v[0], v[1])))),
        prim("mul", |r| (vec![randn(&[3, 4], r), randn(&[3, 4], r)], single(|g, v| g.mul(v[0], v[1])))),
        prim("div", |r| {
            let mut b = randn(&[3, 4], r);
            b.data.iter_mut().for_each(|v| *v = v.signum() * (1.0 + v.abs()));
            (vec![randn(&[3, 4], r), b], single(|g, v| g.div(v[0], v[1])))
        }),
        prim("scalar_mul", |r| (vec![randn(&[5], r)], single(|g, v| Ok(g.scalar_mul(v[0], -1.7))))),
        prim("add_scalar", |r| (vec![randn(&[5], r)], single(|g, v| Ok(g.add_scalar(v[0], 0.3))))),
        prim("scale", |r| (vec![randn(&[2, 3], r), randn(&[1], r)], single(|g, v| g.scale(v[0], v[1])))),
        prim("sigmoid", |r| (vec![randn(&[10], r)], single(|g, v| Ok(g.sigmoid(v[0]))))),
        prim("gelu", |r| (vec![randn(&[10], r)], single(|g, v| Ok(g.gelu(v[0]))))),
        prim("sum", |r| (vec![randn(&[2, 3, 2], r)], single(|g, v| Ok(g.sum(v[0]))))),
        prim("mean_reduce", |r| (vec![randn(&[2, 3, 4], r)], single(|g, v| g.mean_reduce(v[0], 1)))),
        prim("broadcast_add", |r| (vec![randn(&[2, 3, 4], r), randn(&[3], r)], single(|g, v| g.broadcast_add(v[0], v[1], 1)))),
        prim("matmul", |r| (vec![randn(&[4, 5], r), randn(&[5, 3], r)], single(|g, v| g.matmul(v[0], v[1])))),
        prim("bmm", |r| (vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)], single(|g, v| g.bmm(v[0], v[1])))),
        prim("softmax", |r| (vec![randn(&[2, 3, 5], r)], single(|g, v| g.softmax(v[0], 2)))),
        prim("layer_norm", |r| {
            (vec![randn(&[2, 4, 3], r), randn(&[4], r), randn(&[4], r)], single(|g, v| g.layer_norm(v[0], v[1], v[2], 1, 1e-5)))
        }),
        prim("reshape", |r| (vec![randn(&[2, 6], r)], single(|g, v| g.reshape(v[0], &[3, 4])))),
        prim("permute", |r| (vec![randn(&[2, 3, 4], r)], single(|g, v| g.permute(v[0], &[2, 0, 1])))),
        prim("expand", |r| (vec![randn(&[2, 1, 3], r)], single(|g, v| g.expand(v[0], 1, 4)))),
        prim("grouped_shift", |r| (vec![randn(&[1, 8, 4, 5], r)], single(|g, v| g.grouped_shift(v[0])))),
        prim("upsample_bilinear", |r| (vec![randn(&[1, 2, 3, 3], r)], single(|g, v| g.upsample_bilinear(v[0], 4)))),
        prim("conv2d_zero", |r| {
            let opts = ConvOpts::same(3, PadMode::Zero);
            (vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)], single(move |g, v| g.conv2d(v[0], v[1], opts)))
        }),
        prim("conv2d_replicate", |r| {
            let opts = ConvOpts::same(3, PadMode::Replicate);
            (vec![randn(&[1, 2, 5, 4], r), randn(&[2, 2, 3, 3], r)], single(move |g, v| g.conv2d(v[0], v[1], opts)))
        }),
        prim("conv2d_pointwise", |r| {
            let opts = ConvOpts::same(1, PadMode::Zero);
            (vec![randn(&[2, 3, 3, 3], r), randn(&[2, 3, 1, 1], r)], single(move |g, v| g.conv2d(v[0], v[1], opts)))
        }),
        prim("patch_embed", |r| {
            let opts = ConvOpts::patch(4);
            (vec![randn(&[1, 1, 8, 8], r), randn(&[3, 1, 4, 4], r)], single(move |g, v| g.conv2d(v[0], v[1], opts)))
        }),
        prim("deconv2d", |r| (vec![randn(&[1, 3, 3, 3], r), randn(&[3, 2, 2, 2], r)], single(|g, v| g.deconv2d(v[0], v[1], 2)))),
        prim("depthwise_zero", |r| {
            (vec![randn(&[2, 3, 4, 4], r), randn(&[3, 1, 3, 3], r)], single(|g, v| g.depthwise_conv2d(v[0], v[1], PadMode::Zero)))
        }),
        prim("depthwise_replicate", |r| {
            (vec![randn(&[1, 2, 4, 5], r), randn(&[2, 1, 3, 3], r)], single(|g, v| g.depthwise_conv2d(v[0], v[1], PadMode::Replicate)))
        }),
        prim("position_code", |r| (vec![randn(&[1, 3, 4, 4], r), randn(&[3, 1, 3, 3], r)], single(|g, v| position_code(g, v[0], v[1])))),
        prim("laplace_conv", |r| (vec![randn(&[2, 2, 4, 5], r)], single(|g, v| laplace_conv(g, v[0])))),
        prim("dice_loss", |r| {
            let target = Tensor::new(&[1, 1, 4, 4], (0..16).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
            let logits = randn(&[1, 1, 4, 4], r);
            (vec![logits], single(move |g, v| dice_loss(g, v[0], g.constant(&target), DICE_EPS)))
        }),
    ];

    cases.push(Case {
        name: "tcia",
        kind: Kind::Composite,
        build: Box::new(|seed| {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let p = TciaParams::new(&mut store, "tcia", 8, 2, &mut r)?;
            jitter(&mut store, &mut r);
            let x = randn(&[2, 8, 4, 5], &mut r);
            Ok(module_instance(x, &store, None, move |g, x, b| Ok(vec![tcia_forward(g, x, &p, b)?.out])))
        }),
    });
    cases.push(Case {
        name: "tcbm",
        kind: Kind::Composite,
        build: Box::new(|seed| {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let p = TcbmParams::new(&mut store, "tcbm", 4, &mut r);
            jitter(&mut store, &mut r);
            let x = randn(&[1, 4, 5, 5], &mut r);
            Ok(module_instance(x, &store, None, move |g, x, b| Ok(vec![tcbm_forward(g, x, &p, b)?])))
        }),
    });
    cases.push(Case {
        name: "tcit",
        kind: Kind::Composite,
        build: Box::new(|seed| {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let cfg = ModelConfig { ffn_expansion: 2, ..ModelConfig::tiny(32) };
            let block = TcitBlock::new(&mut store, "block", 8, 2, &cfg, &mut r)?;
            jitter(&mut store, &mut r);
            let x = randn(&[1, 8, 4, 4], &mut r);
            Ok(module_instance(x, &store, Some(24), move |g, x, b| Ok(vec![tcit_forward(g, x, &block, b)?.out])))
        }),
    });
    // Every input pixel; parameters enter as constants. Parameter adjoints of
    // the whole network are below the rounding floor of a 1e-5 step for
    // some components, see `network_instance`.
    let net_cfg = network.clone();
    cases.push(Case {
        name: "network",
        kind: Kind::Composite,
        build: Box::new(move |seed| {
            let (model, x) = network_setup(&net_cfg, seed)?;
            let op: MultiOp = Box::new(move |g, v| {
                let out = model.forward(g, &model.bind(g, false), v[0])?;
                Ok(vec![out.main_logits, out.aux_body_logits, out.aux_boundary_logits])
            });
            Ok(Instance { inputs: vec![x], op, sample: None })
        }),
    });
    cases
}

fn network_setup(cfg: &ModelConfig, seed: u64) -> Result<(Model, Tensor)> {
    let mut r = rng(seed);
    let mut model = Model::new(cfg.clone(), seed)?;
    jitter(&mut model.params, &mut r);
    let x = randn(&[1, 1, cfg.input_height, cfg.input_width], &mut r);
    Ok((model, x))
}

/// Whole-network check over the image and every parameter tensor, sampling
/// `per_tensor` components of each. With a 1e-5 step, components whose
/// adjoint is below about 1e-6 are lost in forward-pass rounding, so callers
/// pick the step.
pub fn network_instance(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> Result<Instance> {
    let (model, x) = network_setup(cfg, seed)?;
    let params = model.params.clone();
    Ok(module_instance(x, &params, Some(per_tensor), move |g, x, b| {
        let out = model.forward(g, b, x)?;
        Ok(vec![out.main_logits, out.aux_body_logits, out.aux_boundary_logits])
    }))
}

//! Thermal conduction boundary module: a residual convolution block whose
//! branch starts with a fixed 5-point Laplace stencil,
//! `y = x + h · conv₂(gelu(conv₁(∇²x)))`.

use rand::Rng;

use crate::autodiff::{ConvOpts, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamId, ParamStore};
use crate::pmde::{laplacian_plane, Boundary};
use crate::tensor::Tensor;

/// The fixed Laplace kernel. Not a parameter; never updated.
pub const LAPLACE_KERNEL: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

pub const H_STEP_INIT: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct TcbmParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub h_step: ParamId,
    pub laplace: [[f64; 3]; 3],
    pub channels: usize,
}

impl TcbmParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let opts = ConvOpts::same(3, PadMode::Replicate);
        TcbmParams {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, opts, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, opts, rng),
            h_step: store.add(format!("{name}.h_step"), Tensor::scalar(H_STEP_INIT)),
            laplace: LAPLACE_KERNEL,
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * (self.channels * self.channels * 9 + self.channels) + 1
    }
}

/// Per-channel Laplacian of `x[B×C×H×W]` with replicate padding. Produces
/// bit-identical values to [`crate::pmde::laplacian_5pt`] on each plane.
pub fn laplace_conv(g: &Graph, x: Var) -> Result<Var> {
    laplace_with_kernel(g, x, &LAPLACE_KERNEL)
}

/// Apply a cross-shaped 3×3 stencil (corners must be zero).
fn laplace_with_kernel(g: &Graph, x: Var, kernel: &[[f64; 3]; 3]) -> Result<Var> {
    if kernel != &LAPLACE_KERNEL {
        return Err(Error::Config("the boundary module only supports the fixed 5-point Laplace kernel".into()));
    }
    let shape = g.expect_rank("laplace_conv", x, 4)?;
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let plane = h * w;
    let out = g.with(x, |xv, _| {
        let mut out = vec![0.0; xv.len()];
        for p in 0..planes {
            laplacian_plane(&xv[p * plane..(p + 1) * plane], h, w, Boundary::Replicate, &mut out[p * plane..(p + 1) * plane]);
        }
        out
    });
    Ok(g.push(shape, out, &[x], move |ctx| {
        // adjoint: each output pixel sends -4g to itself and +g to every
        // (clamped) neighbor it read
        let mut gx = vec![0.0; ctx.grad.len()];
        for p in 0..planes {
            let gp = &ctx.grad[p * plane..(p + 1) * plane];
            let dst = &mut gx[p * plane..(p + 1) * plane];
            for i in 0..h {
                for j in 0..w {
                    let v = gp[i * w + j];
                    dst[i * w + j] -= 4.0 * v;
                    dst[(i + 1).min(h - 1) * w + j] += v;
                    dst[i.saturating_sub(1) * w + j] += v;
                    dst[i * w + (j + 1).min(w - 1)] += v;
                    dst[i * w + j.saturating_sub(1)] += v;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// The scaled residual branch `h · conv₂(gelu(conv₁(∇²x)))`.
pub fn tcbm_delta(g: &Graph, x: Var, p: &TcbmParams, bound: &Bound) -> Result<Var> {
    let branch = tcbm_branch(g, x, p, bound)?;
    g.scale(branch, bound.var(p.h_step))
}

/// The unscaled branch `conv₂(gelu(conv₁(∇²x)))`.
pub fn tcbm_branch(g: &Graph, x: Var, p: &TcbmParams, bound: &Bound) -> Result<Var> {
    let shape = g.expect_rank("tcbm", x, 4)?;
    if shape[1] != p.channels {
        return Err(Error::Config(format!("boundary block built for {} channels got input {shape:?}", p.channels)));
    }
    let lap = laplace_with_kernel(g, x, &p.laplace)?;
    let hidden = g.gelu(p.conv1.forward(g, bound, lap)?);
    p.conv2.forward(g, bound, hidden)
}

pub fn tcbm_forward(g: &Graph, x: Var, p: &TcbmParams, bound: &Bound) -> Result<Var> {
    let delta = tcbm_delta(g, x, p, bound)?;
    g.add(x, delta)
}

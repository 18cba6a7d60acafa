//! Thermal-conduction-inspired attention.
//!
//! The input feature map is split into four channel quarters that are
//! shifted one pixel down, up, right and left; subtracting the input gives
//! per-direction neighbor differences, whose sum over the four directions is
//! the 5-point Laplacian. These differences are projected to queries, keys
//! and values, squeezed by averaging along the width (horizontal branch, H
//! tokens) and along the height (vertical branch, W tokens), and passed
//! through multi-head attention on each axis. The two axis outputs are
//! broadcast back over the map, added, projected to the input width and
//! scaled by a learnable diffusion coefficient. The caller adds the residual.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Initial diffusion coefficient, inside the explicit-scheme stability range.
pub const GAMMA_INIT: f64 = 0.2;

/// Learnable pieces of one attention block.
#[derive(Debug, Clone)]
pub struct TciaParams {
    pub proj_q: Conv,
    pub proj_k: Conv,
    pub proj_v: Conv,
    pub proj_out: Conv,
    pub gamma: ParamId,
    pub channels: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
    pub heads: usize,
}

impl TciaParams {
    /// Projections use `C_qk = C_v = channels / 2`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Self::with_dims(store, name, channels, channels / 2, channels / 2, heads, rng)
    }

    pub fn with_dims<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        qk_dim: usize,
        v_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!("attention channels {channels} must be a positive multiple of 4")));
        }
        if heads == 0 || qk_dim == 0 || v_dim == 0 || qk_dim % heads != 0 || v_dim % heads != 0 {
            return Err(Error::Config(format!(
                "query/key width {qk_dim} and value width {v_dim} must be positive multiples of {heads} heads"
            )));
        }
        Ok(TciaParams {
            proj_q: Conv::pointwise(store, &format!("{name}.q"), channels, qk_dim, rng),
            proj_k: Conv::pointwise_unbiased(store, &format!("{name}.k"), channels, qk_dim, rng),
            proj_v: Conv::pointwise(store, &format!("{name}.v"), channels, v_dim, rng),
            proj_out: Conv::pointwise(store, &format!("{name}.out"), v_dim, channels, rng),
            gamma: store.add(format!("{name}.gamma"), Tensor::scalar(GAMMA_INIT)),
            channels,
            qk_dim,
            v_dim,
            heads,
        })
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        (c * self.qk_dim + self.qk_dim) + c * self.qk_dim + (c * self.v_dim + self.v_dim) + (self.v_dim * c + c) + 1
    }
}

/// Which spatial axis is averaged away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squeeze {
    /// Mean over the width: one token per row.
    Horizontal,
    /// Mean over the height: one token per column.
    Vertical,
}

/// Neighbor-minus-center differences, one direction per channel quarter.
pub fn stencil_term(g: &Graph, x: Var) -> Result<Var> {
    let shifted = g.grouped_shift(x)?;
    g.sub(shifted, x)
}

/// `B×C×H×W` → `B×L×C` tokens.
pub fn axis_squeeze(g: &Graph, x: Var, axis: Squeeze) -> Result<Var> {
    g.expect_rank("axis_squeeze", x, 4)?;
    let reduced = match axis {
        Squeeze::Horizontal => g.mean_reduce(x, 3)?,
        Squeeze::Vertical => g.mean_reduce(x, 2)?,
    };
    g.permute(reduced, &[0, 2, 1])
}

/// Multi-head scaled dot-product attention over `B×L×C` token sequences.
/// Returns `(B×L×C_v output, (B·heads)×L×L attention weights)`.
fn multi_head(g: &Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let (qs, vs) = (g.shape(q), g.shape(v));
    let (b, l, cq, cv) = (qs[0], qs[1], qs[2], vs[2]);
    let (dq, dv) = (cq / heads, cv / heads);
    let split = |t: Var, d: usize| -> Result<Var> {
        let t = g.reshape(t, &[b, l, heads, d])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * heads, l, d])
    };
    let (qh, kh, vh) = (split(q, dq)?, split(k, dq)?, split(v, dv)?);
    let kt = g.permute(kh, &[0, 2, 1])?;
    let scores = g.scalar_mul(g.bmm(qh, kt)?, 1.0 / (dq as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let out = g.bmm(attn, vh)?;
    let out = g.reshape(out, &[b, heads, l, dv])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok((g.reshape(out, &[b, l, cv])?, attn))
}

/// Output of [`tcia_forward`].
#[derive(Debug, Clone, Copy)]
pub struct TciaOutput {
    /// `γ·attention(stencil)` with the input's shape, before the residual.
    pub out: Var,
    /// Row-stochastic attention weights of the horizontal branch, `(B·heads)×H×H`.
    pub attn_horizontal: Var,
    /// Same for the vertical branch, `(B·heads)×W×W`.
    pub attn_vertical: Var,
}

pub fn tcia_forward(g: &Graph, x: Var, p: &TciaParams, bound: &Bound) -> Result<TciaOutput> {
    let shape = g.expect_rank("tcia", x, 4)?;
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != p.channels {
        return Err(Error::Config(format!("attention block built for {} channels got input {shape:?}", p.channels)));
    }
    let s = stencil_term(g, x)?;
    let q = p.proj_q.forward(g, bound, s)?;
    let k = p.proj_k.forward(g, bound, s)?;
    let v = p.proj_v.forward(g, bound, s)?;

    let branch = |axis: Squeeze| -> Result<(Var, Var)> {
        let (qt, kt, vt) = (axis_squeeze(g, q, axis)?, axis_squeeze(g, k, axis)?, axis_squeeze(g, v, axis)?);
        let (tokens, attn) = multi_head(g, qt, kt, vt, p.heads)?;
        // B×L×Cv → B×Cv×L, then broadcast back along the squeezed axis
        let t = g.permute(tokens, &[0, 2, 1])?;
        let map = match axis {
            Squeeze::Horizontal => g.expand(g.reshape(t, &[b, p.v_dim, h, 1])?, 3, w)?,
            Squeeze::Vertical => g.expand(g.reshape(t, &[b, p.v_dim, 1, w])?, 2, h)?,
        };
        Ok((map, attn))
    };
    let (horizontal, attn_horizontal) = branch(Squeeze::Horizontal)?;
    let (vertical, attn_vertical) = branch(Squeeze::Vertical)?;
    let fused = g.add(horizontal, vertical)?;
    let projected = p.proj_out.forward(g, bound, fused)?;
    let out = g.scale(projected, bound.var(p.gamma))?;
    Ok(TciaOutput { out, attn_horizontal, attn_vertical })
}

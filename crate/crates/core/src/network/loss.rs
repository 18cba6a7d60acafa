//! Soft Dice loss and the three-term training objective.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

use super::NetworkOutput;

pub const DICE_EPS: f64 = 1.0;

/// `1 − (2Σxy + ε) / (Σx + Σy + ε)` with `x = sigmoid(logits)`, pooled over
/// the whole batch.
pub fn dice_loss(g: &Graph, logits: Var, target: Var, eps: f64) -> Result<Var> {
    let (ls, ts) = (g.shape(logits), g.shape(target));
    if ls != ts {
        return Err(Error::dim("dice_loss", format!("logits {ls:?} vs target {ts:?}")));
    }
    let x = g.sigmoid(logits);
    let inter = g.sum(g.mul(x, target)?);
    let num = g.add_scalar(g.scalar_mul(inter, 2.0), eps);
    let den = g.add_scalar(g.add(g.sum(x), g.sum(target))?, eps);
    let ratio = g.div(num, den)?;
    Ok(g.add_scalar(g.scalar_mul(ratio, -1.0), 1.0))
}

/// Component values of [`total_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// Main head against the target mask.
    pub seg: f64,
    /// Boundary head against the boundary mask.
    pub tb: f64,
    /// Body head against the target mask.
    pub ib: f64,
    pub total: f64,
}

impl LossParts {
    /// Sum of the three components in the order used by [`total_loss`].
    pub fn component_sum(&self) -> f64 {
        (self.seg + self.tb) + self.ib
    }
}

/// Unit-weighted sum of the main, boundary and body Dice terms.
pub fn total_loss(g: &Graph, out: &NetworkOutput, mask: Var, boundary: Var) -> Result<(Var, LossParts)> {
    let seg = dice_loss(g, out.main_logits, mask, DICE_EPS)?;
    let tb = dice_loss(g, out.aux_boundary_logits, boundary, DICE_EPS)?;
    let ib = dice_loss(g, out.aux_body_logits, mask, DICE_EPS)?;
    let total = g.add(g.add(seg, tb)?, ib)?;
    let parts = LossParts { seg: g.scalar(seg), tb: g.scalar(tb), ib: g.scalar(ib), total: g.scalar(total) };
    Ok((total, parts))
}

//! AdaGrad optimization and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::loss::{total_loss, LossParts};
use super::Model;

pub const ADAGRAD_EPS: f64 = 1e-10;

/// AdaGrad with decoupled weight decay:
/// `acc += g²; p ← p − lr·g/(√acc + 1e-10) − lr·wd·p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGrad {
    pub lr: f64,
    pub weight_decay: f64,
    accum: Vec<Vec<f64>>,
}

impl AdaGrad {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdaGrad { lr, weight_decay, accum: Vec::new() }
    }

    /// Squared-gradient accumulators, one per tensor.
    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accum
    }

    /// Update `params` in place with the given per-tensor gradients.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adagrad", format!("{} tensors vs {} gradients", params.len(), grads.len())));
        }
        if self.accum.is_empty() {
            self.accum = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.accum.len() != params.len() {
            return Err(Error::dim("adagrad", "parameter set changed between steps"));
        }
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accum) {
            if g.len() != p.numel() || acc.len() != p.numel() {
                return Err(Error::dim("adagrad", format!("gradient length {} for tensor {:?}", g.len(), p.shape)));
            }
            for ((w, &gi), a) in p.data.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a += gi * gi;
                let decay = self.lr * self.weight_decay * *w;
                *w -= self.lr * gi / (a.sqrt() + ADAGRAD_EPS) + decay;
            }
        }
        Ok(())
    }

    /// Step using adjoints of the bound parameters.
    pub fn step_store(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) -> Result<()> {
        let g: Vec<Vec<f64>> =
            store.iter().zip(bound.vars()).map(|((_, t), v)| grads.get_or_zeros(*v, t.numel())).collect();
        self.step(store.tensors_mut(), &g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds shuffling and flip augmentation.
    pub seed: u64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 4, lr: 0.05, weight_decay: 0.0004, seed: 0, augment: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// Mean loss components over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<EpochLoss>,
}

impl TrainOutcome {
    /// `epoch,l_seg,l_tb,l_ib,total` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,l_seg,l_tb,l_ib,total\n");
        for e in &self.curve {
            let l = e.loss;
            s.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", e.epoch, l.seg, l.tb, l.ib, l.total));
        }
        s
    }
}

/// One forward/backward pass and optimizer update on `batch`.
pub fn train_step(model: &mut Model, opt: &mut AdaGrad, batch: &[&SceneSample]) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let g = Graph::new();
    let bound = model.bind(&g, true);
    let images = g.constant(&model.batch_images(batch)?);
    let (h, w) = (model.config.input_height, model.config.input_width);
    let stack = |f: &dyn Fn(&SceneSample) -> Vec<f64>| {
        let data = batch.iter().flat_map(|s| f(s)).collect();
        Tensor::new(&[batch.len(), 1, h, w], data)
    };
    let mask = g.constant(&stack(&|s| s.mask.as_f64())?);
    let boundary = g.constant(&stack(&|s| s.boundary.as_f64())?);
    let out = model.forward(&g, &bound, images)?;
    let (total, parts) = total_loss(&g, &out, mask, boundary)?;
    if !parts.total.is_finite() {
        return Err(Error::Config(format!("training diverged: loss {}", parts.total)));
    }
    let grads = g.backward(total);
    opt.step_store(&mut model.params, &bound, &grads)?;
    Ok(parts)
}

/// Train `model` on `samples`, calling `on_epoch` after each epoch.
pub fn fit(
    model: &mut Model,
    samples: &[&SceneSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdaGrad::new(config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let owned: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| {
                    let mut s = samples[i].clone();
                    if config.augment {
                        if rng.random_bool(0.5) {
                            s = s.flip_horizontal();
                        }
                        if rng.random_bool(0.5) {
                            s = s.flip_vertical();
                        }
                    }
                    s
                })
                .collect();
            let refs: Vec<&SceneSample> = owned.iter().collect();
            let parts = train_step(model, &mut opt, &refs)?;
            sum.seg += parts.seg;
            sum.tb += parts.tb;
            sum.ib += parts.ib;
            batches += 1;
        }
        let n = batches as f64;
        let mut loss = LossParts { seg: sum.seg / n, tb: sum.tb / n, ib: sum.ib / n, total: 0.0 };
        loss.total = loss.component_sum();
        let e = EpochLoss { epoch, loss };
        on_epoch(&e);
        curve.push(e);
    }
    Ok(TrainOutcome { curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_on_quadratic_moves_by_lr() {
        let w0 = 0.7;
        let mut p = vec![Tensor::new(&[1], vec![w0]).unwrap()];
        let mut opt = AdaGrad::new(0.05, 0.0);
        opt.step(&mut p, &[vec![2.0 * w0]]).unwrap();
        let expected = w0 - 0.05 * (2.0 * w0) / ((4.0 * w0 * w0).sqrt() + 1e-10);
        assert_eq!(p[0].data[0], expected);
        assert!((p[0].data[0] - (w0 - 0.05)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -2.0]).unwrap()];
        let mut opt = AdaGrad::new(0.1, 0.01);
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p[0].data, vec![1.0 - 0.1 * 0.01 * 1.0, -2.0 + 0.1 * 0.01 * 2.0]);

        let mut q = vec![Tensor::new(&[1], vec![3.0]).unwrap()];
        AdaGrad::new(0.1, 0.0).step(&mut q, &[vec![0.0]]).unwrap();
        assert_eq!(q[0].data, vec![3.0]);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(AdaGrad::new(0.1, 0.0).step(&mut p, &[vec![0.0]]).is_err());
        assert!(AdaGrad::new(0.1, 0.0).step(&mut p, &[]).is_err());
    }
}

//! Named learnable tensors and the layers built from them.

use rand::Rng;

use crate::autodiff::{ConvOpts, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Learnable tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter on `g`, differentiable or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| if trainable { g.param(t) } else { g.constant(t) }).collect())
    }

    /// Copy adjoints from `grads` into each tensor's `grad` field.
    pub fn store_grads(&mut self, bound: &Bound, grads: &crate::autodiff::Gradients) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.0) {
            t.grad = Some(grads.get_or_zeros(*v, t.numel()));
        }
    }

    /// Replace values by position, checking names and shapes.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for ((name, t), (want_name, slot)) in entries.into_iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if &name != want_name || t.shape != slot.shape {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match {want_name} {:?}",
                    t.shape, slot.shape
                )));
            }
            slot.data = t.data;
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap handles listed in [`ParamStore`] declaration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` weights.
pub fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// 2-D convolution with optional bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        opts: ConvOpts,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Conv { weight, bias, opts }
    }

    /// 1×1 convolution without bias.
    pub fn pointwise_unbiased<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(&[out_ch, in_ch, 1, 1], in_ch, rng));
        Conv { weight, bias: None, opts: ConvOpts::same(1, PadMode::Zero) }
    }

    /// Per-pixel linear map (1×1 convolution).
    pub fn pointwise<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(store, name, in_ch, out_ch, 1, ConvOpts::same(1, PadMode::Zero), rng)
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.weight), self.opts)?;
        match self.bias {
            Some(b) => g.broadcast_add(y, p.var(b), 1),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Deconv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(&[in_ch, out_ch, stride, stride], in_ch, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Deconv { weight, bias, stride }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.deconv2d(x, p.var(self.weight), self.stride)?;
        g.broadcast_add(y, p.var(self.bias), 1)
    }
}

/// Layer norm over the channel axis of `B×C×H×W` maps.
#[derive(Debug, Clone, Copy)]
pub struct ChannelNorm {
    pub gain: ParamId,
    pub bias: Option<ParamId>,
    channels: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[channels], 1.0));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[channels])));
        ChannelNorm { gain, bias, channels }
    }

    /// Gain only; the shift is fixed at zero.
    pub fn gain_only(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[channels], 1.0));
        ChannelNorm { gain, bias: None, channels }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let bias = match self.bias {
            Some(b) => p.var(b),
            None => g.constant(&Tensor::zeros(&[self.channels])),
        };
        g.layer_norm(x, p.var(self.gain), bias, 1, LAYER_NORM_EPS)
    }
}

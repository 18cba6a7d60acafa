//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in insertion order while the forward
//! pass runs. [`Graph::backward`] walks the tape in exact reverse order and
//! accumulates adjoints additively, so a value consumed by several operations
//! receives the sum of all contributions. Graphs are meant to be rebuilt for
//! each forward pass.
//!
//! ```
//! use tci_core::autodiff::Graph;
//! use tci_core::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod elementwise;
mod gemm;
mod linalg;
mod nn;
mod shape;

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{ConvOpts, PadMode};
pub use elementwise::{gelu as gelu_scalar, sigmoid as sigmoid_scalar};

pub(crate) use gemm::{gemm_nn, gemm_nt, gemm_tn};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for the node it belongs to.
pub(crate) struct BackwardCtx<'a> {
    /// Adjoint of the node's output.
    pub grad: &'a [f64],
    /// The node's forward output.
    pub output: &'a [f64],
    /// Forward values of the node's inputs, in argument order.
    pub inputs: Vec<&'a [f64]>,
    /// Whether each input needs an adjoint.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Graph::backward`]. Only leaf nodes retain theirs.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record `t` as a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Record `t` as a differentiated leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), true)
    }

    /// Record `t` as a constant.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: n.requires_grad, grad: None }
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a node with shape {:?}", n.shape);
        n.value[0]
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0; nodes[root.0].value.len()]);

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_slice()).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, parents: Vec::new(), requires_grad, backward: None });
        Var(nodes.len() - 1)
    }

    /// Append an operation node. The closure is dropped when no input needs
    /// an adjoint.
    pub(crate) fn push<F>(&self, shape: Vec<usize>, value: Vec<f64>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = requires_grad.then(|| Box::new(backward) as BackwardFn);
        nodes.push(Node {
            shape,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Borrow the value and shape of `v`.
    pub(crate) fn with<R>(&self, v: Var, f: impl FnOnce(&[f64], &[usize]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        f(&n.value, &n.shape)
    }

    pub(crate) fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&[f64], &[usize], &[f64], &[usize]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        f(&na.value, &na.shape, &nb.value, &nb.shape)
    }

    pub(crate) fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<Vec<usize>> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(Error::dim(op, format!("expected rank {rank}, got shape {shape:?}")));
        }
        Ok(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap().with_grad());
        let a = g.sum(x);
        let b = g.sum(x);
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(&Tensor::full(&[3], 2.0));
        let x = g.leaf(&Tensor::full(&[3], 1.0).with_grad());
        let loss = g.sum(g.mul(c, x).unwrap());
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn no_grad_graph_records_no_closures() {
        let g = Graph::new();
        let x = g.constant(&Tensor::full(&[2], 1.0));
        let y = g.sigmoid(x);
        assert!(!g.requires_grad(y));
    }
}

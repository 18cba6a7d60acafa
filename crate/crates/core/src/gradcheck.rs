//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Number of scalar components compared.
    pub checked: usize,
    /// (input index, flat component, analytic, numeric) of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Every compared component in the same layout as `worst`.
    pub components: Vec<(usize, usize, f64, f64)>,
}

impl GradCheck {
    /// True when every component satisfies `|a - n| <= rtol·max(|a|, |n|) + atol`.
    pub fn within(&self, rtol: f64, atol: f64) -> bool {
        self.components.iter().all(|&(_, _, a, n)| (a - n).abs() <= rtol * a.abs().max(n.abs()) + atol)
    }
}

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of the scalar `f` with respect to every
/// component of every input against `(f(x+ε) - f(x-ε)) / 2ε`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, None, 0)
}

/// As [`grad_check`], but compare at most `max_per_input` randomly chosen
/// components of each input (all of them when `None`).
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t)).collect();
        let out = f(&g, &vars)?;
        scalar_of(&g, out)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = inputs.to_vec();
    let mut report = GradCheck { max_rel_err: 0.0, checked: 0, worst: None, components: Vec::new() };
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].numel();
        let analytic = grads.get_or_zeros(*var, n);
        let coords: Vec<usize> = match max_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let base = inputs[which].data[idx];
            probe[which].data[idx] = base + eps;
            let plus = eval(&probe)?;
            probe[which].data[idx] = base - eps;
            let minus = eval(&probe)?;
            probe[which].data[idx] = base;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            report.components.push((which, idx, analytic[idx], numeric));
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((which, idx, analytic[idx], numeric));
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let shape = g.shape(v);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::dim("grad_check", format!("function must return one value, got shape {shape:?}")));
    }
    Ok(g.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.7]).unwrap();
        let report = grad_check(|g, v| Ok(g.sum(v[0])), &[x], DEFAULT_EPS).unwrap();
        // only rounding of the perturbed sum remains: ~ulp(4.6) / 2ε
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn square_at_zero_has_zero_gradient() {
        let x = Tensor::zeros(&[5]);
        let g = Graph::new();
        let v = g.param(&x);
        let loss = g.sum(g.mul(v, v).unwrap());
        assert_eq!(g.backward(loss).get(v).unwrap(), &[0.0; 5]);
        let report = grad_check(|g, v| Ok(g.sum(g.mul(v[0], v[0])?)), &[x], DEFAULT_EPS).unwrap();
        assert!(report.max_rel_err < 1e-12, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relative error of a scaled copy is visible
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::zeros(&[3]);
        assert!(grad_check(|_, v| Ok(v[0]), &[x], DEFAULT_EPS).is_err());
    }
}

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::split_axis;

impl Graph {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let out = self.with(a, |x, _| {
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..n {
                        let e = (x[at(k)] - max).exp();
                        out[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        out[at(k)] /= total;
                    }
                }
            }
            out
        });
        Ok(self.push(shape, out, &[a], move |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalize over `axis` to zero mean and unit variance, then apply the
    /// per-feature `gain` and `bias` (each of length `shape[axis]`).
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::dim("layer_norm", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        for p in [gain, bias] {
            let ps = self.shape(p);
            if ps.iter().product::<usize>() != n {
                return Err(Error::dim("layer_norm", format!("affine shape {ps:?} does not match {n} features")));
            }
        }
        let nf = n as f64;
        let normalize = move |x: &[f64], o: usize, i: usize, xhat: &mut [f64]| -> f64 {
            let at = |k: usize| (o * n + k) * inner + i;
            let mean = (0..n).map(|k| x[at(k)]).sum::<f64>() / nf;
            let var = (0..n).map(|k| (x[at(k)] - mean).powi(2)).sum::<f64>() / nf;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (k, h) in xhat.iter_mut().enumerate() {
                *h = (x[at(k)] - mean) * inv_std;
            }
            inv_std
        };

        let out = {
            let x = self.data(a);
            let (gv, bv) = (self.data(gain), self.data(bias));
            let mut out = vec![0.0; x.len()];
            let mut xhat = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    normalize(&x, o, i, &mut xhat);
                    for k in 0..n {
                        out[(o * n + k) * inner + i] = gv[k] * xhat[k] + bv[k];
                    }
                }
            }
            out
        };
        Ok(self.push(shape, out, &[a, gain, bias], move |ctx| {
            let (x, gv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = vec![0.0; x.len()];
            let mut g_gain = vec![0.0; n];
            let mut g_bias = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let inv_std = normalize(x, o, i, &mut xhat);
                    let at = |k: usize| (o * n + k) * inner + i;
                    for k in 0..n {
                        let gk = g[at(k)];
                        g_gain[k] += gk * xhat[k];
                        g_bias[k] += gk;
                        dxhat[k] = gk * gv[k];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / nf;
                    for k in 0..n {
                        gx[at(k)] = inv_std * (dxhat[k] - mean_d - xhat[k] * mean_dx);
                    }
                }
            }
            vec![ctx.needs[0].then_some(gx), ctx.needs[1].then_some(g_gain), ctx.needs[2].then_some(g_bias)]
        }))
    }
}

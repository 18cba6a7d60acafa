use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::split_axis;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.with2(a, b, |x, _, y, _| x.iter().zip(y).map(|(p, q)| p + q).collect());
        Ok(self.push(shape, out, &[a, b], |ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.to_vec()), ctx.needs[1].then(|| ctx.grad.to_vec())]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.with2(a, b, |x, _, y, _| x.iter().zip(y).map(|(p, q)| p - q).collect());
        Ok(self.push(shape, out, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
            ]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.with2(a, b, |x, _, y, _| x.iter().zip(y).map(|(p, q)| p * q).collect());
        Ok(self.push(shape, out, &[a, b], |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(g, q)| g * q).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(g, p)| g * p).collect()),
            ]
        }))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("div", a, b)?;
        let out = self.with2(a, b, |x, _, y, _| x.iter().zip(y).map(|(p, q)| p / q).collect());
        Ok(self.push(shape, out, &[a, b], |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(g, q)| g / q).collect()),
                ctx.needs[1].then(|| {
                    ctx.grad.iter().zip(x).zip(y).map(|((g, p), q)| -g * p / (q * q)).collect()
                }),
            ]
        }))
    }

    pub fn scalar_mul(&self, a: Var, c: f64) -> Var {
        let shape = self.shape(a);
        let out = self.with(a, |x, _| x.iter().map(|v| v * c).collect());
        self.push(shape, out, &[a], move |ctx| vec![Some(ctx.grad.iter().map(|g| g * c).collect())])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let shape = self.shape(a);
        let out = self.with(a, |x, _| x.iter().map(|v| v + c).collect());
        self.push(shape, out, &[a], |ctx| vec![Some(ctx.grad.to_vec())])
    }

    /// Multiply every element of `a` by the one-element node `s`.
    pub fn scale(&self, a: Var, s: Var) -> Result<Var> {
        let s_shape = self.shape(s);
        if s_shape.iter().product::<usize>() != 1 {
            return Err(Error::dim("scale", format!("scale factor must hold one value, got {s_shape:?}")));
        }
        let shape = self.shape(a);
        let out = self.with2(a, s, |x, _, sv, _| x.iter().map(|v| v * sv[0]).collect());
        Ok(self.push(shape, out, &[a, s], |ctx| {
            let (x, sv) = (ctx.inputs[0], ctx.inputs[1][0]);
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * sv).collect()),
                ctx.needs[1].then(|| vec![ctx.grad.iter().zip(x).map(|(g, v)| g * v).sum()]),
            ]
        }))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let out = self.with(a, |x, _| x.iter().map(|&v| sigmoid(v)).collect());
        self.push(shape, out, &[a], |ctx| {
            vec![Some(ctx.grad.iter().zip(ctx.output).map(|(g, s)| g * s * (1.0 - s)).collect())]
        })
    }

    /// Tanh-approximated GELU, smooth everywhere.
    pub fn gelu(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let out = self.with(a, |x, _| x.iter().map(|&v| gelu(v)).collect());
        self.push(shape, out, &[a], |ctx| {
            vec![Some(ctx.grad.iter().zip(ctx.inputs[0]).map(|(g, &v)| g * gelu_deriv(v)).collect())]
        })
    }

    /// Sum of all elements, as a one-element node.
    pub fn sum(&self, a: Var) -> Var {
        let n = self.with(a, |x, _| x.len());
        let total = self.with(a, |x, _| x.iter().sum());
        self.push(vec![1], vec![total], &[a], move |ctx| vec![Some(vec![ctx.grad[0]; n])])
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_reduce(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::dim("mean_reduce", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = self.with(a, |x, _| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                    out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            out
        });
        Ok(self.push(out_shape, out, &[a], move |ctx| {
            let inv = 1.0 / n as f64;
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let g = &ctx.grad[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                    dst.iter_mut().zip(g).for_each(|(d, s)| *d = s * inv);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Add the vector `b` (length `a.shape[axis]`) along `axis` of `a`.
    pub fn broadcast_add(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        let b_shape = self.shape(b);
        if axis >= shape.len() || b_shape.iter().product::<usize>() != shape[axis] {
            return Err(Error::dim(
                "broadcast_add",
                format!("cannot add {b_shape:?} along axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let out = self.with2(a, b, |x, _, bv, _| {
            let mut out = x.to_vec();
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    out[base..base + inner].iter_mut().for_each(|v| *v += bv[k]);
                }
            }
            out
        });
        Ok(self.push(shape, out, &[a, b], move |ctx| {
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![0.0; n];
                for o in 0..outer {
                    for (k, acc) in gb.iter_mut().enumerate() {
                        let base = (o * n + k) * inner;
                        *acc += ctx.grad[base..base + inner].iter().sum::<f64>();
                    }
                }
                gb
            });
            vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
        }))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh())
}

fn gelu_deriv(v: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v)
}

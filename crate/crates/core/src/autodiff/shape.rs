use super::{Graph, Var};
use crate::error::{Error, Result};

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Interpolation taps for one axis of a bilinear resize (half-pixel centers).
fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|d| {
            let pos = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl Graph {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a);
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::dim("reshape", format!("cannot reshape {from:?} to {shape:?}")));
        }
        let out = self.data(a);
        Ok(self.push(shape.to_vec(), out, &[a], |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        // for each output position, the flat input index
        let n: usize = shape.iter().product();
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            gather.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum::<usize>());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let out = self.with(a, |x, _| gather.iter().map(|&s| x[s]).collect());
        Ok(self.push(out_shape, out, &[a], move |ctx| {
            let mut gx = vec![0.0; ctx.grad.len()];
            for (g, &s) in ctx.grad.iter().zip(&gather) {
                gx[s] = *g;
            }
            vec![Some(gx)]
        }))
    }

    /// Repeat an extent-1 `axis` to extent `n`.
    pub fn expand(&self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::dim("expand", format!("axis {axis} of {shape:?} must have extent 1")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let out = self.with(a, |x, _| {
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
                }
            }
            out
        });
        Ok(self.push(out_shape, out, &[a], move |ctx| {
            let mut gx = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &ctx.grad[(o * n + k) * inner..(o * n + k + 1) * inner];
                    gx[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Shift four contiguous channel quarters of `a[B×C×H×W]` by one pixel:
    /// quarter 0 reads row `i+1`, quarter 1 row `i-1`, quarter 2 column
    /// `j+1`, quarter 3 column `j-1`. Reads past the border are clamped.
    pub fn grouped_shift(&self, a: Var) -> Result<Var> {
        let shape = self.expect_rank("grouped_shift", a, 4)?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if c % 4 != 0 {
            return Err(Error::Config(format!("grouped_shift needs channels divisible by 4, got {c}")));
        }
        let quarter = c / 4;
        let mut gather = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                let (di, dj): (isize, isize) = match ci / quarter {
                    0 => (1, 0),
                    1 => (-1, 0),
                    2 => (0, 1),
                    _ => (0, -1),
                };
                let plane = (bi * c + ci) * h * w;
                for i in 0..h {
                    let si = (i as isize + di).clamp(0, h as isize - 1) as usize;
                    for j in 0..w {
                        let sj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                        gather.push(plane + si * w + sj);
                    }
                }
            }
        }
        let out = self.with(a, |x, _| gather.iter().map(|&s| x[s]).collect());
        Ok(self.push(shape, out, &[a], move |ctx| {
            let mut gx = vec![0.0; ctx.grad.len()];
            for (g, &s) in ctx.grad.iter().zip(&gather) {
                gx[s] += g;
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear upsampling of `a[B×C×H×W]` by an integer factor, with
    /// half-pixel sample centers and edge clamping.
    pub fn upsample_bilinear(&self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.expect_rank("upsample_bilinear", a, 4)?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ho, wo) = (h * factor, w * factor);
        let rows = bilinear_taps(h, factor);
        let cols = bilinear_taps(w, factor);
        let out = self.with(a, |x, _| {
            let mut out = vec![0.0; planes * ho * wo];
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for (oy, &(r0, r1, ly)) in rows.iter().enumerate() {
                    for (ox, &(c0, c1, lx)) in cols.iter().enumerate() {
                        let top = src[r0 * w + c0] * (1.0 - lx) + src[r0 * w + c1] * lx;
                        let bot = src[r1 * w + c0] * (1.0 - lx) + src[r1 * w + c1] * lx;
                        dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
                    }
                }
            }
            out
        });
        let out_shape = vec![shape[0], shape[1], ho, wo];
        Ok(self.push(out_shape, out, &[a], move |ctx| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let g = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(r0, r1, ly)) in rows.iter().enumerate() {
                    for (ox, &(c0, c1, lx)) in cols.iter().enumerate() {
                        let v = g[oy * wo + ox];
                        dst[r0 * w + c0] += v * (1.0 - ly) * (1.0 - lx);
                        dst[r0 * w + c1] += v * (1.0 - ly) * lx;
                        dst[r1 * w + c0] += v * ly * (1.0 - lx);
                        dst[r1 * w + c1] += v * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

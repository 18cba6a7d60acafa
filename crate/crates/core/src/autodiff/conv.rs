use std::rc::Rc;

use super::{gemm_nn, gemm_nt, gemm_tn, Graph, Var};
use crate::error::{Error, Result};

/// How reads outside the input are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvOpts {
    /// Stride 1 with "same" padding for an odd kernel of size `k`.
    pub fn same(k: usize, mode: PadMode) -> Self {
        ConvOpts { stride: 1, pad: k / 2, mode }
    }

    /// Non-overlapping patches: kernel size equals stride, no padding.
    pub fn patch(stride: usize) -> Self {
        ConvOpts { stride, pad: 0, mode: PadMode::Zero }
    }
}

const OUTSIDE: usize = usize::MAX;

/// Source index (within one channel plane) for every im2col entry, or
/// `OUTSIDE` for zero padding. Rows are ordered (kernel row, kernel col).
fn patch_table(h: usize, w: usize, kh: usize, kw: usize, ho: usize, wo: usize, opts: ConvOpts) -> Vec<usize> {
    let mut table = Vec::with_capacity(kh * kw * ho * wo);
    for ki in 0..kh {
        for kj in 0..kw {
            for oy in 0..ho {
                let iy = (oy * opts.stride + ki) as isize - opts.pad as isize;
                for ox in 0..wo {
                    let ix = (ox * opts.stride + kj) as isize - opts.pad as isize;
                    let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                    let src = match (inside, opts.mode) {
                        (true, _) => iy as usize * w + ix as usize,
                        (false, PadMode::Zero) => OUTSIDE,
                        (false, PadMode::Replicate) => {
                            let cy = iy.clamp(0, h as isize - 1) as usize;
                            let cx = ix.clamp(0, w as isize - 1) as usize;
                            cy * w + cx
                        }
                    };
                    table.push(src);
                }
            }
        }
    }
    table
}

/// Gather `[C·kk × HoWo]` columns from `plane_data[C×H×W]`.
fn im2col(x: &[f64], channels: usize, plane: usize, table: &[usize], cols: &mut [f64]) {
    let per_channel = table.len();
    for c in 0..channels {
        let src = &x[c * plane..(c + 1) * plane];
        let dst = &mut cols[c * per_channel..(c + 1) * per_channel];
        for (d, &s) in dst.iter_mut().zip(table) {
            *d = if s == OUTSIDE { 0.0 } else { src[s] };
        }
    }
}

/// Scatter-add columns back onto a `[C×H×W]` buffer.
fn col2im(cols: &[f64], channels: usize, plane: usize, table: &[usize], x: &mut [f64]) {
    let per_channel = table.len();
    for c in 0..channels {
        let src = &cols[c * per_channel..(c + 1) * per_channel];
        let dst = &mut x[c * plane..(c + 1) * plane];
        for (v, &s) in src.iter().zip(table) {
            if s != OUTSIDE {
                dst[s] += v;
            }
        }
    }
}

fn output_extent(op: &'static str, n: usize, k: usize, opts: ConvOpts) -> Result<usize> {
    if opts.stride == 0 {
        return Err(Error::dim(op, "stride must be positive"));
    }
    let padded = n + 2 * opts.pad;
    if k > padded {
        return Err(Error::dim(op, format!("kernel extent {k} exceeds padded input extent {padded}")));
    }
    Ok((padded - k) / opts.stride + 1)
}

impl Graph {
    /// Cross-correlation of `x[B×C×H×W]` with `w[O×C×kh×kw]`.
    pub fn conv2d(&self, x: Var, w: Var, opts: ConvOpts) -> Result<Var> {
        let xs = self.expect_rank("conv2d", x, 4)?;
        let ws = self.expect_rank("conv2d", w, 4)?;
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return Err(Error::dim("conv2d", format!("input {xs:?} has {c} channels, kernel {ws:?} expects {kc}")));
        }
        let odd = kh % 2 == 1 && kw % 2 == 1;
        let matched = kh == opts.stride && kw == opts.stride;
        if !odd && !matched {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} must be odd or match stride {}", opts.stride)));
        }
        let ho = output_extent("conv2d", h, kh, opts)?;
        let wo = output_extent("conv2d", wd, kw, opts)?;

        let plane = h * wd;
        let spatial = ho * wo;
        let ckk = c * kh * kw;
        let pointwise = kh == 1 && kw == 1 && opts.stride == 1 && opts.pad == 0;
        let table = Rc::new(if pointwise { Vec::new() } else { patch_table(h, wd, kh, kw, ho, wo, opts) });

        let out = self.with2(x, w, |xv, _, wv, _| {
            let mut out = vec![0.0; b * o * spatial];
            let mut cols = vec![0.0; if pointwise { 0 } else { ckk * spatial }];
            for bi in 0..b {
                let xb = &xv[bi * c * plane..(bi + 1) * c * plane];
                let ob = &mut out[bi * o * spatial..(bi + 1) * o * spatial];
                if pointwise {
                    gemm_nn(o, c, spatial, wv, xb, ob);
                } else {
                    im2col(xb, c, plane, &table, &mut cols);
                    gemm_nn(o, ckk, spatial, wv, &cols, ob);
                }
            }
            out
        });

        Ok(self.push(vec![b, o, ho, wo], out, &[x, w], move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = ctx.needs[0].then(|| vec![0.0; b * c * plane]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; o * ckk]);
            let mut cols = vec![0.0; if pointwise { 0 } else { ckk * spatial }];
            let mut gcols = vec![0.0; if pointwise { 0 } else { ckk * spatial }];
            for bi in 0..b {
                let xb = &xv[bi * c * plane..(bi + 1) * c * plane];
                let gb = &g[bi * o * spatial..(bi + 1) * o * spatial];
                if pointwise {
                    if let Some(gw) = gw.as_mut() {
                        gemm_nt(o, spatial, c, gb, xb, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm_tn(c, o, spatial, wv, gb, &mut gx[bi * c * plane..(bi + 1) * c * plane]);
                    }
                    continue;
                }
                if let Some(gw) = gw.as_mut() {
                    im2col(xb, c, plane, &table, &mut cols);
                    gemm_nt(o, spatial, ckk, gb, &cols, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(ckk, o, spatial, wv, gb, &mut gcols);
                    col2im(&gcols, c, plane, &table, &mut gx[bi * c * plane..(bi + 1) * c * plane]);
                }
            }
            vec![gx, gw]
        }))
    }

    /// Transposed convolution of `x[B×C×H×W]` with `w[C×O×kh×kw]`, the
    /// adjoint of [`Graph::conv2d`] with the same stride and no padding.
    /// Output extents are `(H-1)·stride + kh` by `(W-1)·stride + kw`.
    pub fn deconv2d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.expect_rank("deconv2d", x, 4)?;
        let ws = self.expect_rank("deconv2d", w, 4)?;
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (kc, o, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return Err(Error::dim("deconv2d", format!("input {xs:?} has {c} channels, kernel {ws:?} expects {kc}")));
        }
        if stride == 0 {
            return Err(Error::dim("deconv2d", "stride must be positive"));
        }
        let (ho, wo) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        // The forward pass scatters exactly where a stride-matched conv2d on
        // the output would gather from.
        let opts = ConvOpts { stride, pad: 0, mode: PadMode::Zero };
        let table = Rc::new(patch_table(ho, wo, kh, kw, h, wd, opts));
        let (plane_in, plane_out) = (h * wd, ho * wo);
        let okk = o * kh * kw;

        let out = self.with2(x, w, |xv, _, wv, _| {
            let mut out = vec![0.0; b * o * plane_out];
            let mut cols = vec![0.0; okk * plane_in];
            for bi in 0..b {
                cols.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(okk, c, plane_in, wv, &xv[bi * c * plane_in..], &mut cols);
                col2im(&cols, o, plane_out, &table, &mut out[bi * o * plane_out..(bi + 1) * o * plane_out]);
            }
            out
        });

        Ok(self.push(vec![b, o, ho, wo], out, &[x, w], move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = ctx.needs[0].then(|| vec![0.0; b * c * plane_in]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; c * okk]);
            let mut gcols = vec![0.0; okk * plane_in];
            for bi in 0..b {
                im2col(&g[bi * o * plane_out..(bi + 1) * o * plane_out], o, plane_out, &table, &mut gcols);
                if let Some(gx) = gx.as_mut() {
                    gemm_nn(c, okk, plane_in, wv, &gcols, &mut gx[bi * c * plane_in..(bi + 1) * c * plane_in]);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm_nt(c, plane_in, okk, &xv[bi * c * plane_in..], &gcols, gw);
                }
            }
            vec![gx, gw]
        }))
    }

    /// Per-channel stride-1 convolution of `x[B×C×H×W]` with `w[C×1×k×k]`
    /// (`k` odd), output the same size as the input.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, mode: PadMode) -> Result<Var> {
        let xs = self.expect_rank("depthwise_conv2d", x, 4)?;
        let ws = self.expect_rank("depthwise_conv2d", w, 4)?;
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[2];
        if ws[0] != c || ws[1] != 1 || ws[3] != k || k % 2 == 0 {
            return Err(Error::dim("depthwise_conv2d", format!("kernel {ws:?} does not fit input {xs:?}")));
        }
        let opts = ConvOpts::same(k, mode);
        output_extent("depthwise_conv2d", h, k, opts)?;
        output_extent("depthwise_conv2d", wd, k, opts)?;
        let plane = h * wd;
        let kk = k * k;
        let table = Rc::new(patch_table(h, wd, k, k, h, wd, opts));

        let out = self.with2(x, w, |xv, _, wv, _| {
            let mut out = vec![0.0; b * c * plane];
            for bc in 0..b * c {
                let ci = bc % c;
                let src = &xv[bc * plane..(bc + 1) * plane];
                let dst = &mut out[bc * plane..(bc + 1) * plane];
                for t in 0..kk {
                    let wt = wv[ci * kk + t];
                    if wt == 0.0 {
                        continue;
                    }
                    for (d, &s) in dst.iter_mut().zip(&table[t * plane..(t + 1) * plane]) {
                        if s != OUTSIDE {
                            *d += wt * src[s];
                        }
                    }
                }
            }
            out
        });

        Ok(self.push(xs, out, &[x, w], move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = ctx.needs[0].then(|| vec![0.0; b * c * plane]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; c * kk]);
            for bc in 0..b * c {
                let ci = bc % c;
                let gp = &g[bc * plane..(bc + 1) * plane];
                let src = &xv[bc * plane..(bc + 1) * plane];
                for t in 0..kk {
                    let taps = &table[t * plane..(t + 1) * plane];
                    if let Some(gw) = gw.as_mut() {
                        gw[ci * kk + t] += gp
                            .iter()
                            .zip(taps)
                            .filter(|(_, &s)| s != OUTSIDE)
                            .map(|(gv, &s)| gv * src[s])
                            .sum::<f64>();
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wt = wv[ci * kk + t];
                        let dst = &mut gx[bc * plane..(bc + 1) * plane];
                        for (gv, &s) in gp.iter().zip(taps) {
                            if s != OUTSIDE {
                                dst[s] += wt * gv;
                            }
                        }
                    }
                }
            }
            vec![gx, gw]
        }))
    }
}

//! Infrared small target detection metrics.
//!
//! Pixel level: pooled IoU over a set and nIoU, the mean of per-sample IoUs.
//! Target level: Pd, the fraction of ground-truth components matched by a
//! predicted component whose centroid lies within `match_dist` pixels
//! (one-to-one, greedy by distance), and Fa, the pixels of unmatched
//! predicted components over all image pixels.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::sigmoid_scalar as sigmoid;
use crate::data::{Mask, SceneSample};
use crate::error::{Error, Result};
use crate::network::Model;

pub const DEFAULT_MATCH_DIST: f64 = 3.0;

/// Threshold sigmoid probabilities: foreground iff `σ(logit) > threshold`.
pub fn binarize(height: usize, width: usize, logits: &[f64], threshold: f64) -> Mask {
    Mask { height, width, data: logits.iter().map(|&l| sigmoid(l) > threshold).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Flat pixel indices, ascending.
    pub pixels: Vec<usize>,
    /// (row, col) mean of pixel coordinates.
    pub centroid: (f64, f64),
}

/// Label image plus the component list; label `k + 1` is `components[k]`,
/// 0 is background. Components are numbered in raster order of their first pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub labels: Vec<usize>,
    pub components: Vec<Component>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Two-pass union-find labeling.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Labeling {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            for &(di, dj) in back {
                let (r, c) = (i as isize + di, j as isize + dj);
                if r < 0 || c < 0 || c >= w as isize || !mask.get(r as usize, c as usize) {
                    continue;
                }
                let (a, b) = (find(&mut parent, i * w + j), find(&mut parent, r as usize * w + c as usize));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut labels = vec![0; h * w];
    let mut root_label = vec![0usize; h * w];
    let mut components: Vec<Component> = Vec::new();
    for k in 0..h * w {
        if !mask.data[k] {
            continue;
        }
        let root = find(&mut parent, k);
        if root_label[root] == 0 {
            components.push(Component { pixels: Vec::new(), centroid: (0.0, 0.0) });
            root_label[root] = components.len();
        }
        labels[k] = root_label[root];
        components[root_label[root] - 1].pixels.push(k);
    }
    for c in &mut components {
        let n = c.pixels.len() as f64;
        let (sr, sc) = c.pixels.iter().fold((0.0, 0.0), |(sr, sc), &k| (sr + (k / w) as f64, sc + (k % w) as f64));
        c.centroid = (sr / n, sc / n);
    }
    Labeling { labels, components }
}

/// Counts for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleStats {
    /// Pixels in both.
    pub tp: usize,
    /// Ground-truth pixels.
    pub t: usize,
    /// Predicted pixels.
    pub p: usize,
    pub gt_targets: usize,
    pub matched_targets: usize,
    pub false_pixels: usize,
    pub total_pixels: usize,
}

impl SampleStats {
    /// `TP / (T + P - TP)`, defined as 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.t + self.p - self.tp;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

/// Compare one predicted mask with its ground truth.
pub fn sample_stats(pred: &Mask, gt: &Mask, match_dist: f64) -> Result<SampleStats> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(
            "metrics",
            format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    let tp = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let gt_cc = connected_components(gt, Connectivity::Eight);
    let pred_cc = connected_components(pred, Connectivity::Eight);

    let mut pairs = Vec::new();
    for (gi, g) in gt_cc.components.iter().enumerate() {
        for (pi, p) in pred_cc.components.iter().enumerate() {
            let d = ((g.centroid.0 - p.centroid.0).powi(2) + (g.centroid.1 - p.centroid.1).powi(2)).sqrt();
            if d <= match_dist {
                pairs.push((d, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt_cc.components.len()];
    let mut pred_used = vec![false; pred_cc.components.len()];
    let mut matched = 0;
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matched += 1;
        }
    }
    let false_pixels = pred_cc
        .components
        .iter()
        .zip(&pred_used)
        .filter(|(_, used)| !**used)
        .map(|(c, _)| c.pixels.len())
        .sum();

    Ok(SampleStats {
        tp,
        t: gt.count(),
        p: pred.count(),
        gt_targets: gt_cc.components.len(),
        matched_targets: matched,
        false_pixels,
        total_pixels: gt.data.len(),
    })
}

/// Aggregated metrics over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    /// False-alarm pixel rate (a fraction, not scaled).
    pub fa: f64,
    /// Set when the evaluation set holds no ground-truth target; `pd` is then 1.
    pub no_targets: bool,
    pub per_sample: Vec<SampleStats>,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn from_stats(per_sample: Vec<SampleStats>) -> Self {
        let sum = |f: fn(&SampleStats) -> usize| per_sample.iter().map(f).sum::<usize>();
        let (tp, t, p) = (sum(|s| s.tp), sum(|s| s.t), sum(|s| s.p));
        let union = t + p - tp;
        let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        let n = per_sample.len();
        let niou = if n == 0 { 1.0 } else { per_sample.iter().map(SampleStats::iou).sum::<f64>() / n as f64 };
        let gt_targets = sum(|s| s.gt_targets);
        let pd = if gt_targets == 0 { 1.0 } else { sum(|s| s.matched_targets) as f64 / gt_targets as f64 };
        let pixels = sum(|s| s.total_pixels);
        let fa = if pixels == 0 { 0.0 } else { sum(|s| s.false_pixels) as f64 / pixels as f64 };
        MetricReport { iou, niou, pd, fa, no_targets: gt_targets == 0, per_sample, n_samples: n }
    }

    /// Per-sample rows followed by one `all` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,tp,t,p,gt_targets,matched_targets,false_pixels,total_pixels,iou\n");
        for (i, s) in self.per_sample.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{:.6}",
                s.tp, s.t, s.p, s.gt_targets, s.matched_targets, s.false_pixels, s.total_pixels,
                s.iou()
            );
        }
        let _ = writeln!(out, "# iou={:.6},niou={:.6},pd={:.6},fa={:.9}", self.iou, self.niou, self.pd, self.fa);
        out
    }

    /// Human-readable summary with Fa in units of 1e-6.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>8} {:>12}", "samples", "IoU", "nIoU", "Pd", "Fa(x1e-6)");
        let _ = writeln!(
            out,
            "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>12.2}",
            self.n_samples,
            self.iou,
            self.niou,
            self.pd,
            self.fa * 1e6
        );
        if self.no_targets {
            out.push_str("note: no ground-truth targets in the set; Pd reported as 1\n");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("metrics.csv"), self.to_csv()).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        std::fs::write(dir.join("metrics.txt"), self.table()).map_err(|e| Error::io(dir.join("metrics.txt"), e))
    }
}

/// Metrics over paired prediction and ground-truth masks.
pub fn compute(preds: &[Mask], gts: &[Mask], match_dist: f64) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::dim("metrics", format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let stats = preds.iter().zip(gts).map(|(p, g)| sample_stats(p, g, match_dist)).collect::<Result<_>>()?;
    Ok(MetricReport::from_stats(stats))
}

pub fn iou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    Ok(compute(preds, gts, DEFAULT_MATCH_DIST)?.iou)
}

pub fn niou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    Ok(compute(preds, gts, DEFAULT_MATCH_DIST)?.niou)
}

/// `(Pd, Fa)` over the set.
pub fn pd_fa(preds: &[Mask], gts: &[Mask], match_dist: f64) -> Result<(f64, f64)> {
    let r = compute(preds, gts, match_dist)?;
    Ok((r.pd, r.fa))
}

/// Run the model on every sample and score its main head at probability 0.5.
pub fn evaluate(model: &Model, samples: &[&SceneSample], batch_size: usize) -> Result<MetricReport> {
    let preds = model.predict_masks(samples, batch_size)?;
    let gts: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    compute(&preds, &gts, DEFAULT_MATCH_DIST)
}

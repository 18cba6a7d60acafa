//! Synthetic infrared small-target scenes and dataset files.
//!
//! A scene is a smooth low-frequency background with a few broad dim clutter
//! blobs and additive Gaussian noise, plus a handful of small anisotropic
//! Gaussian targets. Each target's mask is its half-maximum ellipse; the
//! boundary label is the morphological gradient of the mask. Generation is
//! a pure function of `(SynthConfig, seed)`.

pub mod io;
pub mod morphology;

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use morphology::make_boundary;

/// Grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Mask { height, width, data }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Inclusive range of mask pixels per target.
    pub min_area: usize,
    pub max_area: usize,
    /// Largest major/minor axis ratio of a target.
    pub max_elongation: f64,
    /// Peak intensity added by a target.
    pub min_contrast: f64,
    pub max_contrast: f64,
    pub background_level: f64,
    /// Peak amplitude of the smooth background field.
    pub background_amplitude: f64,
    pub background_modes: usize,
    pub max_clutter: usize,
    pub clutter_amplitude: f64,
    pub clutter_min_sigma: f64,
    pub clutter_max_sigma: f64,
    pub noise_sigma: f64,
    /// Minimum gap in pixels between target ellipses.
    pub min_separation: f64,
    /// Target centers keep this distance from the image border.
    pub border_margin: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            min_targets: 1,
            max_targets: 3,
            min_area: 4,
            max_area: 60,
            max_elongation: 2.0,
            min_contrast: 0.35,
            max_contrast: 0.6,
            background_level: 0.3,
            background_amplitude: 0.12,
            background_modes: 4,
            max_clutter: 2,
            clutter_amplitude: 0.12,
            clutter_min_sigma: 5.0,
            clutter_max_sigma: 9.0,
            noise_sigma: 0.03,
            min_separation: 4.0,
            border_margin: 4,
        }
    }
}

impl SynthConfig {
    /// Semi-major axis bound of the half-maximum ellipse of the largest target.
    fn max_radius(&self) -> f64 {
        (self.max_area as f64 * self.max_elongation / PI).sqrt() + 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.min_targets > self.max_targets {
            return bad(format!("min_targets {} > max_targets {}", self.min_targets, self.max_targets));
        }
        if self.min_area == 0 || self.min_area > self.max_area {
            return bad(format!("target area range [{}, {}] is empty", self.min_area, self.max_area));
        }
        if !(self.max_elongation >= 1.0) {
            return bad("max_elongation must be at least 1".into());
        }
        if !(self.min_contrast > 0.0 && self.min_contrast <= self.max_contrast) {
            return bad("contrast range must be positive and ordered".into());
        }
        if self.min_contrast <= self.noise_sigma {
            return bad(format!(
                "min_contrast {} must exceed noise_sigma {} for targets to be detectable",
                self.min_contrast, self.noise_sigma
            ));
        }
        if self.noise_sigma < 0.0 || self.clutter_min_sigma <= 0.0 || self.clutter_min_sigma > self.clutter_max_sigma {
            return bad("noise and clutter parameters must be non-negative and ordered".into());
        }
        if self.max_targets > 0 {
            let margin = self.border_margin as f64;
            let free_h = self.height as f64 - 2.0 * margin;
            let free_w = self.width as f64 - 2.0 * margin;
            let cell = 2.0 * self.max_radius() + self.min_separation;
            if free_h < cell || free_w < cell || self.max_targets as f64 * cell * cell > 0.5 * free_h * free_w {
                return bad(format!(
                    "{} targets of up to {} px cannot be placed in a {}x{} image",
                    self.max_targets, self.max_area, self.height, self.width
                ));
            }
        }
        Ok(())
    }
}

/// Geometry and photometry of one generated target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub row: f64,
    pub col: f64,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub angle: f64,
    pub contrast: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub targets: Vec<TargetMeta>,
    pub clutter_blobs: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub mask: Mask,
    pub boundary: Mask,
    pub meta: SceneMeta,
}

impl SceneSample {
    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.image.height, self.image.width);
        let flip = |i: usize, j: usize| i * w + (w - 1 - j);
        self.remap(h, w, flip)
    }

    pub fn flip_vertical(&self) -> Self {
        let (h, w) = (self.image.height, self.image.width);
        let flip = |i: usize, j: usize| (h - 1 - i) * w + j;
        self.remap(h, w, flip)
    }

    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> usize) -> Self {
        let mut out = self.clone();
        for i in 0..h {
            for j in 0..w {
                let s = src(i, j);
                out.image.values[i * w + j] = self.image.values[s];
                out.mask.data[i * w + j] = self.mask.data[s];
                out.boundary.data[i * w + j] = self.boundary.data[s];
            }
        }
        out
    }
}

struct Ellipse {
    row: f64,
    col: f64,
    su: f64,
    sv: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared Mahalanobis distance of pixel center `(i, j)`.
    fn q(&self, i: usize, j: usize) -> f64 {
        let (dy, dx) = (i as f64 - self.row, j as f64 - self.col);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.su).powi(2) + (v / self.sv).powi(2)
    }

    /// Half-maximum radius along the major axis.
    fn radius(&self) -> f64 {
        self.su.max(self.sv) * (2.0 * LN_2).sqrt()
    }
}

const PLACEMENT_ATTEMPTS: usize = 2000;

/// Generate one scene; a pure function of `(config, seed)`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<SceneSample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // smooth background: a few low-frequency plane waves
    let mut values = vec![config.background_level; h * w];
    let modes: Vec<(f64, f64, f64, f64)> = (0..config.background_modes)
        .map(|_| {
            let fy = rng.random_range(0.0..2.0) / h as f64;
            let fx = rng.random_range(0.0..2.0) / w as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.0..1.0);
            (fy, fx, phase, amp)
        })
        .collect();
    let amp_total: f64 = modes.iter().map(|m| m.3).sum::<f64>().max(1e-12);
    for i in 0..h {
        for j in 0..w {
            let s: f64 = modes
                .iter()
                .map(|&(fy, fx, phase, amp)| amp * (2.0 * PI * (fy * i as f64 + fx * j as f64) + phase).cos())
                .sum();
            values[i * w + j] += config.background_amplitude * s / amp_total;
        }
    }

    // broad dim clutter
    let clutter_blobs = rng.random_range(0..=config.max_clutter);
    for _ in 0..clutter_blobs {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let sigma = rng.random_range(config.clutter_min_sigma..=config.clutter_max_sigma);
        let amp = rng.random_range(0.5..=1.0) * config.clutter_amplitude;
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                values[i * w + j] += amp * (-0.5 * d2 / (sigma * sigma)).exp();
            }
        }
    }

    // targets
    let n_targets = rng.random_range(config.min_targets..=config.max_targets);
    let mut mask = Mask::empty(h, w);
    let mut placed: Vec<Ellipse> = Vec::with_capacity(n_targets);
    let mut targets = Vec::with_capacity(n_targets);
    let threshold = 2.0 * LN_2;
    let margin = config.border_margin as f64;
    for _ in 0..n_targets {
        let mut accepted = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let area = rng.random_range(config.min_area as f64..=config.max_area as f64);
            let elong = rng.random_range(1.0..=config.max_elongation);
            let prod = area / (2.0 * PI * LN_2);
            let e = {
                let angle = rng.random_range(0.0..PI);
                Ellipse {
                    row: rng.random_range(margin..h as f64 - 1.0 - margin),
                    col: rng.random_range(margin..w as f64 - 1.0 - margin),
                    su: (prod * elong).sqrt(),
                    sv: (prod / elong).sqrt(),
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            };
            let clear = placed.iter().all(|p| {
                let d = ((p.row - e.row).powi(2) + (p.col - e.col).powi(2)).sqrt();
                d >= p.radius() + e.radius() + config.min_separation
            });
            if !clear {
                continue;
            }
            let pixels: Vec<usize> = (0..h * w).filter(|&k| e.q(k / w, k % w) <= threshold).collect();
            if (config.min_area..=config.max_area).contains(&pixels.len()) {
                accepted = Some((e, pixels, rng.random_range(config.min_contrast..=config.max_contrast)));
                break;
            }
        }
        let Some((e, pixels, contrast)) = accepted else {
            return Err(Error::Config(format!(
                "could not place {n_targets} targets within {PLACEMENT_ATTEMPTS} attempts; the configuration is too crowded"
            )));
        };
        for i in 0..h {
            for j in 0..w {
                let q = e.q(i, j);
                if q < 40.0 {
                    values[i * w + j] += contrast * (-0.5 * q).exp();
                }
            }
        }
        for &k in &pixels {
            mask.data[k] = true;
        }
        targets.push(TargetMeta {
            row: e.row,
            col: e.col,
            sigma_major: e.su,
            sigma_minor: e.sv,
            angle: e.sin.atan2(e.cos),
            contrast,
            area: pixels.len(),
        });
        placed.push(e);
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let boundary = make_boundary(&mask);
    Ok(SceneSample {
        image: Image { height: h, width: w, values },
        mask,
        boundary,
        meta: SceneMeta { seed, targets, clutter_blobs, noise_sigma: config.noise_sigma },
    })
}

/// Per-sample seeds derived from one dataset seed.
pub fn sample_seeds(dataset_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn generate_dataset(config: &SynthConfig, n: usize, dataset_seed: u64) -> Result<Vec<SceneSample>> {
    sample_seeds(dataset_seed, n).into_iter().map(|s| generate(config, s)).collect()
}

/// Shuffle `0..n` with `seed` and cut it into train (`round(ratio·n)`) and
/// test indices, each sorted.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One row of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub n_targets: usize,
    pub split: Split,
}

/// A dataset on disk or in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub manifest: Vec<ManifestRow>,
}

pub const SYNTH_CONFIG_FILE: &str = "synth.toml";

impl Dataset {
    /// Generate `n` scenes and split them `ratio` : `1 - ratio`.
    pub fn synthesize(config: &SynthConfig, n: usize, seed: u64, ratio: f64) -> Result<Self> {
        let samples = generate_dataset(config, n, seed)?;
        let (train, _) = split(n, ratio, seed)?;
        let manifest = samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestRow {
                id: format!("{i:05}"),
                seed: s.meta.seed,
                n_targets: s.meta.targets.len(),
                split: if train.binary_search(&i).is_ok() { Split::Train } else { Split::Test },
            })
            .collect();
        Ok(Dataset { samples, manifest })
    }

    pub fn subset(&self, which: Split) -> Vec<&SceneSample> {
        self.samples.iter().zip(&self.manifest).filter(|(_, m)| m.split == which).map(|(s, _)| s).collect()
    }

    /// Write `images/{id}.pgm`, `masks/{id}.png`, `boundaries/{id}.png`,
    /// `manifest.csv` and the generator config.
    pub fn save(&self, dir: &Path, config: &SynthConfig) -> Result<()> {
        for sub in ["images", "masks", "boundaries"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for (s, row) in self.samples.iter().zip(&self.manifest) {
            io::save_image(&dir.join("images").join(format!("{}.pgm", row.id)), &s.image)?;
            io::save_mask(&dir.join("masks").join(format!("{}.png", row.id)), &s.mask)?;
            io::save_mask(&dir.join("boundaries").join(format!("{}.png", row.id)), &s.boundary)?;
        }
        let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
        for row in &self.manifest {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("manifest.csv"), e))?;
        let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(SYNTH_CONFIG_FILE), text).map_err(|e| Error::io(dir.join(SYNTH_CONFIG_FILE), e))
    }

    /// Load a dataset directory. With `regenerate` and a stored generator
    /// config, images are rebuilt from their seeds at full precision instead
    /// of read back from the 8-bit files.
    pub fn load(dir: &Path, regenerate: bool) -> Result<Self> {
        let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
        let manifest: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let synth_path = dir.join(SYNTH_CONFIG_FILE);
        let config = if regenerate && synth_path.exists() {
            let text = fs::read_to_string(&synth_path).map_err(|e| Error::io(&synth_path, e))?;
            Some(toml::from_str::<SynthConfig>(&text).map_err(|e| Error::format(&synth_path, e.to_string()))?)
        } else {
            None
        };
        let mut samples = Vec::with_capacity(manifest.len());
        for row in &manifest {
            let sample = match &config {
                Some(cfg) => generate(cfg, row.seed)?,
                None => {
                    let image = io::load_image(&dir.join("images").join(format!("{}.pgm", row.id)))?;
                    let mask = io::load_mask(&dir.join("masks").join(format!("{}.png", row.id)))?;
                    let boundary = io::load_mask(&dir.join("boundaries").join(format!("{}.png", row.id)))?;
                    if (mask.height, mask.width) != (image.height, image.width) {
                        return Err(Error::format(dir, format!("mask size differs from image for id {}", row.id)));
                    }
                    let meta = SceneMeta { seed: row.seed, targets: Vec::new(), clutter_blobs: 0, noise_sigma: 0.0 };
                    SceneSample { image, mask, boundary, meta }
                }
            };
            samples.push(sample);
        }
        Ok(Dataset { samples, manifest })
    }
}

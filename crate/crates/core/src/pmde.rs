//! Explicit finite-difference simulation of pixel diffusion.
//!
//! One step applies `P ← P + γ·∇²P` with the 5-point Laplacian, the
//! source-free form of the 2-D heat equation on a unit grid. The scheme is
//! stable and obeys the discrete maximum principle for `0 < γ ≤ 1/4`; other
//! values are refused.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::save_pgm_normalized;
use crate::error::{Error, Result};

/// Upper stability limit of the explicit 2-D scheme.
pub const MAX_GAMMA: f64 = 0.25;

/// How neighbors outside the grid are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Out-of-range neighbors repeat the nearest edge value (zero flux).
    #[default]
    Replicate,
    /// The grid wraps around.
    Periodic,
    /// Out-of-range neighbors are zero.
    Zero,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicate" => Ok(Boundary::Replicate),
            "periodic" => Ok(Boundary::Periodic),
            "zero" => Ok(Boundary::Zero),
            other => Err(Error::Config(format!("unknown boundary '{other}' (replicate, periodic, zero)"))),
        }
    }
}

pub fn stability_bound(gamma: f64) -> bool {
    gamma > 0.0 && gamma <= MAX_GAMMA
}

fn check_gamma(gamma: f64) -> Result<()> {
    if stability_bound(gamma) {
        Ok(())
    } else {
        Err(Error::Stability { gamma })
    }
}

/// A scalar field on an `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub boundary: Boundary,
    pub gamma: f64,
}

impl PixelField {
    pub fn new(height: usize, width: usize, values: Vec<f64>, boundary: Boundary, gamma: f64) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dim(
                "pixel_field",
                format!("{height}x{width} grid cannot hold {} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("pixel field values must be finite".into()));
        }
        check_gamma(gamma)?;
        Ok(PixelField { height, width, values, boundary, gamma })
    }

    /// Zero field with a single `1.0` at `(row, col)`.
    pub fn impulse(height: usize, width: usize, row: usize, col: usize, boundary: Boundary, gamma: f64) -> Result<Self> {
        let mut values = vec![0.0; height * width];
        if row >= height || col >= width {
            return Err(Error::dim("impulse", format!("({row}, {col}) outside {height}x{width}")));
        }
        values[row * width + col] = 1.0;
        Self::new(height, width, values, boundary, gamma)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.values.len() as f64
    }
}

/// Neighbor value at signed offset from `(i, j)` under `boundary`.
#[inline]
fn neighbor(values: &[f64], h: usize, w: usize, i: isize, j: isize, boundary: Boundary) -> f64 {
    let (hi, wi) = (h as isize, w as isize);
    match boundary {
        Boundary::Replicate => values[i.clamp(0, hi - 1) as usize * w + j.clamp(0, wi - 1) as usize],
        Boundary::Periodic => values[i.rem_euclid(hi) as usize * w + j.rem_euclid(wi) as usize],
        Boundary::Zero => {
            if i < 0 || i >= hi || j < 0 || j >= wi {
                0.0
            } else {
                values[i as usize * w + j as usize]
            }
        }
    }
}

/// 5-point Laplacian of a row-major `h × w` plane into `out`.
///
/// Neighbors are summed as `((down + up) + (right + left)) - 4·center`; the
/// pairing is invariant under 90° rotation, so rotation-symmetric fields
/// stay bit-exactly symmetric.
pub fn laplacian_plane(values: &[f64], h: usize, w: usize, boundary: Boundary, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let (ii, jj) = (i as isize, j as isize);
            let vertical = neighbor(values, h, w, ii + 1, jj, boundary) + neighbor(values, h, w, ii - 1, jj, boundary);
            let horizontal = neighbor(values, h, w, ii, jj + 1, boundary) + neighbor(values, h, w, ii, jj - 1, boundary);
            out[i * w + j] = (vertical + horizontal) - 4.0 * values[i * w + j];
        }
    }
}

pub fn laplacian_5pt(field: &PixelField) -> Vec<f64> {
    let mut out = vec![0.0; field.values.len()];
    laplacian_plane(&field.values, field.height, field.width, field.boundary, &mut out);
    out
}

/// One explicit step `P + γ·∇²P`.
pub fn step(field: &PixelField) -> Result<PixelField> {
    check_gamma(field.gamma)?;
    let lap = laplacian_5pt(field);
    let values = field.values.iter().zip(&lap).map(|(p, l)| p + field.gamma * l).collect();
    Ok(PixelField { values, ..field.clone() })
}

/// Result of [`simulate`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub field: PixelField,
    /// `(step index, field)` snapshots, including step 0 when recording.
    pub frames: Vec<(usize, PixelField)>,
}

/// Apply `steps` explicit steps, recording a snapshot every `dump_every`
/// steps when given.
pub fn simulate(field: &PixelField, steps: usize, dump_every: Option<usize>) -> Result<Simulation> {
    check_gamma(field.gamma)?;
    if dump_every == Some(0) {
        return Err(Error::Config("dump interval must be positive".into()));
    }
    let mut frames = Vec::new();
    let mut current = field.clone();
    for t in 0..=steps {
        if dump_every.is_some_and(|k| t % k == 0) {
            frames.push((t, current.clone()));
        }
        if t < steps {
            current = step(&current)?;
        }
    }
    Ok(Simulation { field: current, frames })
}

/// Write snapshots as min-max normalized 8-bit PGM files
/// `frame_{t:06}.pgm` under `dir`.
pub fn write_frames(dir: &Path, frames: &[(usize, PixelField)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in frames {
        save_pgm_normalized(&dir.join(format!("frame_{t:06}.pgm")), f.height, f.width, &f.values)?;
    }
    Ok(())
}

//! Intensity and grid normalisation applied before each cascade stage.
//!
//! The order is fixed: Lanczos resampling onto the stage grid, per-slice
//! CLAHE, then min-max normalisation.

use serde::{Deserialize, Serialize};

use crate::volume::{Grid3, Shape3, Volume3D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    MinMax,
    ZScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub lanczos_radius: usize,
    pub clahe_clip: f64,
    pub clahe_tiles: [usize; 2],
    pub normalization: NormMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            lanczos_radius: 3,
            clahe_clip: 2.0,
            clahe_tiles: [8, 8],
            normalization: NormMode::MinMax,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lanczos_radius < 2 {
            return Err(Error::Invalid(format!(
                "lanczos radius must be >= 2, got {}",
                self.lanczos_radius
            )));
        }
        if !(self.clahe_clip > 0.0) {
            return Err(Error::Invalid(format!("CLAHE clip limit must be > 0, got {}", self.clahe_clip)));
        }
        if self.clahe_tiles.iter().any(|&t| t == 0) {
            return Err(Error::Invalid("CLAHE tile grid must be at least 1x1".into()));
        }
        Ok(())
    }
}

/// Full stage preprocessing: resample to `target`, equalise, normalise.
pub fn preprocess(vol: &Volume3D, target: Shape3, cfg: &PreprocessConfig) -> Result<Volume3D> {
    cfg.validate()?;
    let resampled = resample_lanczos(vol, target, cfg.lanczos_radius)?;
    let equalised = clahe_slices(&resampled, cfg);
    Ok(normalize_intensity(&equalised, cfg.normalization))
}

fn lanczos_kernel(x: f64, a: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x.abs() >= a {
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        a * px.sin() * (px / a).sin() / (px * px)
    }
}

/// Normalised taps for resampling one axis from `src` to `dst` samples.
/// Downsampling stretches the kernel by the scale factor.
fn lanczos_taps(src: usize, dst: usize, a: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    let scale = ratio.max(1.0);
    let support = a as f64 * scale;
    (0..dst)
        .map(|t| {
            let center = (t as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| {
                    let w = lanczos_kernel((i as f64 - center) / scale, a as f64);
                    (i.clamp(0, src as isize - 1) as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

fn resample_axis(g: &Grid3<f64>, axis: usize, dst: usize, a: usize) -> Grid3<f64> {
    let src = g.shape();
    if src[axis] == dst {
        return g.clone();
    }
    let taps = lanczos_taps(src[axis], dst, a);
    let mut shape = src;
    shape[axis] = dst;
    Grid3::from_fn(shape, |x, y, z| {
        let at = [x, y, z];
        taps[at[axis]]
            .iter()
            .map(|&(i, w)| {
                let mut p = at;
                p[axis] = i;
                w * g.get(p[0], p[1], p[2])
            })
            .sum()
    })
}

/// Separable Lanczos-`a` resampling. Physical extent is preserved and the
/// output is clamped to the input range to suppress ringing.
pub fn resample_lanczos(vol: &Volume3D, target: Shape3, a: usize) -> Result<Volume3D> {
    if target.iter().any(|&n| n == 0) {
        return Err(Error::Invalid(format!("resample target must be >= 1 per axis, got {target:?}")));
    }
    if a < 2 {
        return Err(Error::Invalid(format!("lanczos radius must be >= 2, got {a}")));
    }
    let src = vol.shape();
    let (lo, hi) = vol.min_max();
    let mut g = vol.grid.map(f64::from);
    for (axis, &n) in target.iter().enumerate() {
        g = resample_axis(&g, axis, n, a);
    }
    let grid = g.map(|v| (v as f32).clamp(lo, hi));
    let spacing = std::array::from_fn(|i| vol.spacing[i] * src[i] as f64 / target[i] as f64);
    Volume3D::new(grid, spacing, vol.origin)
}

/// Clip-limited adaptive histogram equalisation applied independently to
/// every axial slice (fixed third index). Output lies in `[0, 1]`.
pub fn clahe_slices(vol: &Volume3D, cfg: &PreprocessConfig) -> Volume3D {
    let [h, w, d] = vol.shape();
    let mut out = Grid3::filled([h, w, d], 0.0f32);
    let mut slice = vec![0.0f64; h * w];
    for z in 0..d {
        for x in 0..h {
            for y in 0..w {
                slice[x * w + y] = f64::from(vol.grid.get(x, y, z));
            }
        }
        let eq = clahe_slice(&slice, h, w, cfg.clahe_tiles, cfg.clahe_clip);
        for x in 0..h {
            for y in 0..w {
                out.set(x, y, z, eq[x * w + y] as f32);
            }
        }
    }
    Volume3D {
        grid: out,
        spacing: vol.spacing,
        origin: vol.origin,
    }
}

const CLAHE_BINS: usize = 256;

/// CLAHE on one `h × w` slice stored row-major.
fn clahe_slice(slice: &[f64], h: usize, w: usize, tiles: [usize; 2], clip: f64) -> Vec<f64> {
    let (lo, hi) = slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    if !(hi > lo) {
        return vec![0.0; slice.len()];
    }
    let top = (CLAHE_BINS - 1) as f64;
    let level: Vec<usize> = slice
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * top).round() as usize)
        .collect();

    let (ty, tx) = (tiles[0].min(h), tiles[1].min(w));
    let mut luts = vec![[0.0f64; CLAHE_BINS]; ty * tx];
    for ti in 0..ty {
        for tj in 0..tx {
            let (r0, r1) = (ti * h / ty, (ti + 1) * h / ty);
            let (c0, c1) = (tj * w / tx, (tj + 1) * w / tx);
            let mut hist = [0.0f64; CLAHE_BINS];
            for r in r0..r1 {
                for c in c0..c1 {
                    hist[level[r * w + c]] += 1.0;
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let limit = (clip * n / CLAHE_BINS as f64).max(1.0);
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let add = excess / CLAHE_BINS as f64;
            let lut = &mut luts[ti * tx + tj];
            let mut cdf = 0.0;
            for (b, &count) in hist.iter().enumerate() {
                cdf += count + add;
                lut[b] = (cdf / n).min(1.0);
            }
        }
    }

    let axis = |p: usize, len: usize, t: usize| {
        let f = (p as f64 + 0.5) * t as f64 / len as f64 - 0.5;
        if f <= 0.0 {
            (0, 0, 0.0)
        } else if f >= (t - 1) as f64 {
            (t - 1, t - 1, 0.0)
        } else {
            let i0 = f.floor() as usize;
            (i0, i0 + 1, f - i0 as f64)
        }
    };
    let mut out = vec![0.0; slice.len()];
    for r in 0..h {
        let (a0, a1, fa) = axis(r, h, ty);
        for c in 0..w {
            let (b0, b1, fb) = axis(c, w, tx);
            let l = level[r * w + c];
            let top = (1.0 - fb) * luts[a0 * tx + b0][l] + fb * luts[a0 * tx + b1][l];
            let bottom = (1.0 - fb) * luts[a1 * tx + b0][l] + fb * luts[a1 * tx + b1][l];
            out[r * w + c] = ((1.0 - fa) * top + fa * bottom).clamp(0.0, 1.0);
        }
    }
    out
}

/// Min-max to `[0, 1]` or z-score. Degenerate inputs yield zeros.
pub fn normalize_intensity(vol: &Volume3D, mode: NormMode) -> Volume3D {
    let data = vol.grid.data();
    let grid = match mode {
        NormMode::MinMax => {
            let (lo, hi) = vol.min_max();
            if !(hi > lo) {
                log::warn!("min-max normalisation of a constant volume; returning zeros");
                vol.grid.map(|_| 0.0)
            } else {
                let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
                vol.grid.map(|v| ((f64::from(v) - lo) / span) as f32)
            }
        }
        NormMode::ZScore => {
            let n = data.len() as f64;
            let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                log::warn!("z-score normalisation of a constant volume; returning zeros");
                vol.grid.map(|_| 0.0)
            } else {
                let sd = var.sqrt();
                vol.grid.map(|v| ((f64::from(v) - mean) / sd) as f32)
            }
        }
    };
    Volume3D {
        grid,
        spacing: vol.spacing,
        origin: vol.origin,
    }
}

//! Overlap and surface-distance metrics.
//!
//! Boundaries use 6-connectivity: a foreground voxel is on the boundary when
//! one of its face neighbours is background or lies outside the grid.
//! Point-to-surface distances come from an exact anisotropic Euclidean
//! distance transform of the other mask's boundary.

use serde::{Deserialize, Serialize};

use crate::volume::{BinaryMask, Shape3};
use crate::{Error, Result};

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mask grids differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|X∩Y| / (|X|+|Y|)`, with `dsc(∅, ∅) = 1`.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    same_grid(x, y)?;
    let (mut inter, mut sx, mut sy) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        sx += a as usize;
        sy += b as usize;
        inter += (a & b) as usize;
    }
    if sx + sy == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sx + sy) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySet {
    pub voxels: Vec<[usize; 3]>,
    /// Physical coordinates in millimetres.
    pub points: Vec<[f64; 3]>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

fn is_boundary(m: &BinaryMask, x: usize, y: usize, z: usize) -> bool {
    let [h, w, d] = m.shape();
    if !m.contains(x, y, z) {
        return false;
    }
    if x == 0 || y == 0 || z == 0 || x + 1 == h || y + 1 == w || z + 1 == d {
        return true;
    }
    !(m.contains(x - 1, y, z)
        && m.contains(x + 1, y, z)
        && m.contains(x, y - 1, z)
        && m.contains(x, y + 1, z)
        && m.contains(x, y, z - 1)
        && m.contains(x, y, z + 1))
}

pub fn boundary(m: &BinaryMask, spacing: [f64; 3]) -> BoundarySet {
    let [h, w, d] = m.shape();
    let mut voxels = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if is_boundary(m, x, y, z) {
                    voxels.push([x, y, z]);
                }
            }
        }
    }
    let points = voxels
        .iter()
        .map(|v| [v[0] as f64 * spacing[0], v[1] as f64 * spacing[1], v[2] as f64 * spacing[2]])
        .collect();
    BoundarySet { voxels, points }
}

/// Squared distance transform along one line (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * s;
    let cross = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&last) = v.last() {
            if v.len() > 1 && cross(last, q) <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(cross(*v.last().unwrap(), q));
            v.push(q);
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest site.
fn squared_edt(shape: Shape3, sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = shape;
    let idx = |x: usize, y: usize, z: usize| (x * w + y) * d + z;
    let mut g = vec![f64::INFINITY; h * w * d];
    for s in sites {
        g[idx(s[0], s[1], s[2])] = 0.0;
    }
    let dims = [h, w, d];
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let (a, b) = match axis {
            0 => (w, d),
            1 => (h, d),
            _ => (h, w),
        };
        for i in 0..a {
            for j in 0..b {
                let at = |k: usize| match axis {
                    0 => idx(k, i, j),
                    1 => idx(i, k, j),
                    _ => idx(i, j, k),
                };
                for k in 0..n {
                    line[k] = g[at(k)];
                }
                edt_1d(&line, spacing[axis], &mut out);
                for k in 0..n {
                    g[at(k)] = out[k];
                }
            }
        }
    }
    g
}

/// Distances from each boundary point of `a` to the boundary of `b`, and
/// from each boundary point of `b` to the boundary of `a`, in millimetres.
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<(Vec<f64>, Vec<f64>)> {
    same_grid(a, b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::UndefinedMetric(format!(
            "surface distance needs two non-empty masks ({} and {} voxels)",
            a.count(),
            b.count()
        )));
    }
    let (ba, bb) = (boundary(a, spacing), boundary(b, spacing));
    let da = squared_edt(a.shape(), &bb.voxels, spacing);
    let db = squared_edt(a.shape(), &ba.voxels, spacing);
    let at = |e: &[f64], v: &[usize; 3]| e[a.grid().index(v[0], v[1], v[2])].sqrt();
    Ok((
        ba.voxels.iter().map(|v| at(&da, v)).collect(),
        bb.voxels.iter().map(|v| at(&db, v)).collect(),
    ))
}

/// Average symmetric boundary distance.
pub fn abd(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    let (da, db) = surface_distances(a, b, spacing)?;
    Ok((da.iter().sum::<f64>() + db.iter().sum::<f64>()) / (da.len() + db.len()) as f64)
}

/// Inclusive percentile with linear interpolation; `q` in `[0, 1]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the pooled directed surface distances.
pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    let (mut da, db) = surface_distances(a, b, spacing)?;
    da.extend(db);
    Ok(percentile(&mut da, 0.95))
}

/// Per-case scores; surface metrics are `None` when a mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub abd: Option<f64>,
    pub hd95: Option<f64>,
}

pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<CaseMetrics> {
    let dsc = dsc(pred, gt)?;
    match surface_distances(pred, gt, spacing) {
        Ok((mut da, db)) => {
            let n = (da.len() + db.len()) as f64;
            let abd = (da.iter().sum::<f64>() + db.iter().sum::<f64>()) / n;
            da.extend(db);
            Ok(CaseMetrics {
                dsc,
                abd: Some(abd),
                hd95: Some(percentile(&mut da, 0.95)),
            })
        }
        Err(Error::UndefinedMetric(_)) => Ok(CaseMetrics { dsc, abd: None, hd95: None }),
        Err(e) => Err(e),
    }
}

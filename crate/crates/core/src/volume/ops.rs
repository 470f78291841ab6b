//! Padding, pooling and interpolation on level grids.
//!
//! Pooling windows are `(2×2)×1`: in-plane only, the through-plane axis is
//! never pooled. Odd in-plane sizes are handled by replicating the last row or
//! column.

use super::{FeatureTensor, Grid3, ProbMap, Shape3};
use crate::{Error, Result};

fn pooled_shape(shape: Shape3) -> Shape3 {
    [shape[0].div_ceil(2), shape[1].div_ceil(2), shape[2]]
}

/// `(2,2,1)` max-pooling with stride `(2,2,1)`, per channel.
pub fn max_pool(t: &FeatureTensor) -> FeatureTensor {
    let src = t.shape();
    let out_shape = pooled_shape(src);
    let c = t.channels();
    let mut data = Vec::with_capacity(out_shape[0] * out_shape[1] * out_shape[2] * c);
    for x in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for z in 0..out_shape[2] {
                let (x0, y0) = (2 * x as isize, 2 * y as isize);
                let a = t.voxel_clamped(x0, y0, z as isize);
                let b = t.voxel_clamped(x0 + 1, y0, z as isize);
                let cc = t.voxel_clamped(x0, y0 + 1, z as isize);
                let d = t.voxel_clamped(x0 + 1, y0 + 1, z as isize);
                for k in 0..c {
                    data.push(a[k].max(b[k]).max(cc[k]).max(d[k]));
                }
            }
        }
    }
    FeatureTensor::new(out_shape, c, data).expect("pooled shape is consistent")
}

/// One `(2,2,1)` average pooling step.
pub fn avg_pool(g: &Grid3<f64>) -> Grid3<f64> {
    Grid3::from_fn(pooled_shape(g.shape()), |x, y, z| {
        let (x0, y0, z) = (2 * x as isize, 2 * y as isize, z as isize);
        (g.get_clamped(x0, y0, z)
            + g.get_clamped(x0 + 1, y0, z)
            + g.get_clamped(x0, y0 + 1, z)
            + g.get_clamped(x0 + 1, y0 + 1, z))
            / 4.0
    })
}

/// Applies [`avg_pool`] `levels` times to a label probability map.
pub fn avg_pool_label(g: &ProbMap, levels: usize) -> ProbMap {
    let mut cur = g.grid().clone();
    for _ in 0..levels {
        cur = avg_pool(&cur);
    }
    ProbMap::from_clamped(cur)
}

/// Source coordinate of target sample `t` under half-voxel-aligned resizing.
#[inline]
fn source_coord(t: usize, src: usize, dst: usize) -> f64 {
    ((t as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn linear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|t| {
            let s = source_coord(t, src, dst);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Separable linear resampling to an arbitrary shape (half-voxel aligned,
/// edge-clamped).
pub fn resize_linear(g: &Grid3<f64>, target: Shape3) -> Grid3<f64> {
    let src = g.shape();
    if src == target {
        return g.clone();
    }
    let ax = linear_axis(src[0], target[0]);
    let ay = linear_axis(src[1], target[1]);
    let az = linear_axis(src[2], target[2]);
    Grid3::from_fn(target, |x, y, z| {
        let (x0, x1, fx) = ax[x];
        let (y0, y1, fy) = ay[y];
        let (z0, z1, fz) = az[z];
        let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
        let along_z = |xi: usize, yi: usize| lerp(g.get(xi, yi, z0), g.get(xi, yi, z1), fz);
        let c0 = lerp(along_z(x0, y0), along_z(x0, y1), fy);
        let c1 = lerp(along_z(x1, y0), along_z(x1, y1), fy);
        lerp(c0, c1, fx)
    })
}

/// Trilinear upsampling of a probability map; the result is clamped to `[0, 1]`.
pub fn upsample_trilinear(p: &ProbMap, target: Shape3) -> Result<ProbMap> {
    let src = p.shape();
    if (0..3).any(|a| target[a] < src[a]) {
        return Err(Error::Shape(format!(
            "upsampling target {target:?} is smaller than source {src:?}"
        )));
    }
    Ok(ProbMap::from_clamped(resize_linear(p.grid(), target)))
}

/// Grows every axis by `margins[a]` voxels on both sides, replicating the
/// nearest edge value.
pub fn pad_replicate<T: Copy>(g: &Grid3<T>, margins: [usize; 3]) -> Grid3<T> {
    let s = g.shape();
    let m = margins.map(|v| v as isize);
    Grid3::from_fn(
        [s[0] + 2 * margins[0], s[1] + 2 * margins[1], s[2] + 2 * margins[2]],
        |x, y, z| g.get_clamped(x as isize - m[0], y as isize - m[1], z as isize - m[2]),
    )
}

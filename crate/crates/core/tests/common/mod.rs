//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use gusl_core::volume::BinaryMask;

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major `n×n`).
/// Returns eigenvalues in decreasing order with unit eigenvectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> Vec<(f64, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        let total: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut out: Vec<(f64, Vec<f64>)> = (0..n).map(|j| (m[j * n + j], (0..n).map(|i| v[i * n + j]).collect())).collect();
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    out
}

/// Sample covariance of the windows after removing each window's own mean.
pub fn ac_covariance(windows: &[f32], dim: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = windows
        .chunks_exact(dim)
        .map(|w| {
            let m = w.iter().map(|&v| f64::from(v)).sum::<f64>() / dim as f64;
            w.iter().map(|&v| f64::from(v) - m).collect()
        })
        .collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut c = vec![0.0; dim * dim];
    for r in &rows {
        for i in 0..dim {
            for j in 0..dim {
                c[i * dim + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Foreground voxels with a background or out-of-grid face neighbour.
pub fn boundary_voxels(m: &BinaryMask) -> Vec<[usize; 3]> {
    let s = m.shape();
    let mut out = Vec::new();
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                if !m.contains(x, y, z) {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let on_edge = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|d: &[i64; 3]| {
                    let q: Vec<i64> = (0..3).map(|a| p[a] + d[a]).collect();
                    (0..3).any(|a| q[a] < 0 || q[a] >= s[a] as i64) || !m.contains(q[0] as usize, q[1] as usize, q[2] as usize)
                });
                if on_edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// All-pairs directed distances from the boundary of `a` to that of `b`.
pub fn directed(a: &BinaryMask, b: &BinaryMask, sp: [f64; 3]) -> Vec<f64> {
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    ba.iter()
        .map(|p| {
            bb.iter()
                .map(|q| (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn dsc_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (x, y) = (a.data(), b.data());
    let inter = x.iter().zip(y).filter(|(p, q)| **p == 1 && **q == 1).count();
    let total = x.iter().filter(|v| **v == 1).count() + y.iter().filter(|v| **v == 1).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn abd_oracle(a: &BinaryMask, b: &BinaryMask, sp: [f64; 3]) -> f64 {
    let mut d = directed(a, b, sp);
    d.extend(directed(b, a, sp));
    d.iter().sum::<f64>() / d.len() as f64
}

/// Pooled 95th percentile: sort, then interpolate between neighbouring ranks.
pub fn hd95_oracle(a: &BinaryMask, b: &BinaryMask, sp: [f64; 3]) -> f64 {
    let mut d = directed(a, b, sp);
    d.extend(directed(b, a, sp));
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let i = rank as usize;
    if i + 1 >= d.len() {
        return d[i];
    }
    d[i] * (1.0 - (rank - i as f64)) + d[i + 1] * (rank - i as f64)
}

/// Best weighted child variance of one feature over the `bins − 1` interior
/// uniform thresholds, evaluated by direct partition of the samples.
pub fn rft_scan(col: &[f32], y: &[f64], bins: usize) -> f64 {
    let n = y.len() as f64;
    let var_sum = |v: &[f64]| -> f64 {
        if v.is_empty() {
            return 0.0;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum()
    };
    let vals: Vec<f64> = col.iter().map(|&v| f64::from(v)).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return var_sum(y) / n;
    }
    let width = (hi - lo) / bins as f64;
    (1..bins)
        .map(|k| {
            let t = lo + k as f64 * width;
            let left: Vec<f64> = vals.iter().zip(y).filter(|(v, _)| **v <= t).map(|(_, y)| *y).collect();
            let right: Vec<f64> = vals.iter().zip(y).filter(|(v, _)| **v > t).map(|(_, y)| *y).collect();
            (var_sum(&left) + var_sum(&right)) / n
        })
        .fold(f64::INFINITY, f64::min)
}

/// Squared-error boosting on one feature with exhaustive splits; returns the
/// training MSE after every round (index 0 = base score only).
pub fn boost_1d(x: &[f32], y: &[f64], rounds: usize, depth: usize, eta: f64, min_leaf: usize) -> Vec<f64> {
    let n = y.len();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mse = |p: &[f64]| p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    let mut out = vec![mse(&pred)];
    fn grow(rows: Vec<usize>, x: &[f32], r: &[f64], depth: usize, min_leaf: usize, out: &mut Vec<(Vec<usize>, f64)>) {
        let mean = rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64;
        if depth > 0 && rows.len() >= 2 * min_leaf {
            let mut sorted = rows.clone();
            sorted.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
            let s: f64 = rows.iter().map(|&i| r[i]).sum();
            let nn = rows.len() as f64;
            let mut best: Option<(f64, usize)> = None;
            for k in 0..sorted.len() - 1 {
                let (nl, nr) = (k + 1, sorted.len() - k - 1);
                if nl < min_leaf || nr < min_leaf || x[sorted[k]] == x[sorted[k + 1]] {
                    continue;
                }
                let sl: f64 = sorted[..=k].iter().map(|&i| r[i]).sum();
                let g = sl * sl / nl as f64 + (s - sl).powi(2) / nr as f64 - s * s / nn;
                if g > 0.0 && best.is_none_or(|b| g > b.0) {
                    best = Some((g, k));
                }
            }
            if let Some((_, k)) = best {
                grow(sorted[..=k].to_vec(), x, r, depth - 1, min_leaf, out);
                grow(sorted[k + 1..].to_vec(), x, r, depth - 1, min_leaf, out);
                return;
            }
        }
        out.push((rows, mean));
    }
    for _ in 0..rounds {
        let r: Vec<f64> = (0..n).map(|i| y[i] - pred[i]).collect();
        let mut leaves = Vec::new();
        grow((0..n).collect(), x, &r, depth, min_leaf, &mut leaves);
        let mut next = pred.clone();
        for (rows, v) in leaves {
            for i in rows {
                next[i] += eta * f64::from(v as f32);
            }
        }
        let m = mse(&next);
        if m > *out.last().unwrap() {
            break;
        }
        pred = next;
        out.push(m);
    }
    out
}

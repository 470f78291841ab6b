//! Supervised feature generation (LNT) and selection (RFT).
//!
//! At every level the encoder output is widened to its in-plane `3×3`
//! neighbourhood, extended with `K` least-squares features and then pruned to
//! the dimensions with the lowest RFT loss.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gbdt::{gbdt_fit, GbdtConfig};
use crate::saab::expand_voxel;
use crate::volume::FeatureTensor;
use crate::{derive_seed, Error, Result};

/// Per-dimension best-split losses and the resulting ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct RftReport {
    pub losses: Vec<f64>,
    /// Dimensions sorted by ascending loss, ties by index.
    pub ranking: Vec<usize>,
    pub bins: usize,
}

fn check_matrix(x: &[f32], dims: usize, y: &[f64]) -> Result<usize> {
    let n = y.len();
    if dims == 0 || x.len() != n * dims {
        return Err(Error::Shape(format!("{} values do not form {n} rows of {dims} features", x.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite target at row {i}")));
    }
    Ok(n)
}

/// Loss of one dimension: best over the `bins − 1` uniform thresholds of
/// `(n_L·Var_L + n_R·Var_R)/n`, with `f ≤ t` going left.
fn rft_loss(col: impl Iterator<Item = f64> + Clone, yc: &[f64], bins: usize) -> f64 {
    let n = yc.len() as f64;
    let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let total_ss = {
        let s: f64 = yc.iter().sum();
        yc.iter().map(|v| v * v).sum::<f64>() - s * s / n
    };
    if !(hi > lo) {
        return (total_ss / n).max(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let t = |k: usize| lo + k as f64 * width;
    // segment s holds values in (t_s, t_{s+1}], with t_0 = -inf and t_bins = +inf
    let mut cnt = vec![0.0f64; bins];
    let mut sum = vec![0.0f64; bins];
    let mut sq = vec![0.0f64; bins];
    for (v, &y) in col.zip(yc) {
        let mut s = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        while s > 0 && v <= t(s) {
            s -= 1;
        }
        while s + 1 < bins && v > t(s + 1) {
            s += 1;
        }
        cnt[s] += 1.0;
        sum[s] += y;
        sq[s] += y * y;
    }
    let (tn, ts, tq) = (n, sum.iter().sum::<f64>(), sq.iter().sum::<f64>());
    let (mut ln, mut ls, mut lq) = (0.0, 0.0, 0.0);
    let mut best = f64::INFINITY;
    for s in 0..bins - 1 {
        ln += cnt[s];
        ls += sum[s];
        lq += sq[s];
        let (rn, rs, rq) = (tn - ln, ts - ls, tq - lq);
        let left = if ln > 0.0 { lq - ls * ls / ln } else { 0.0 };
        let right = if rn > 0.0 { rq - rs * rs / rn } else { 0.0 };
        best = best.min((left.max(0.0) + right.max(0.0)) / n);
    }
    best
}

pub fn rft_rank(x: &[f32], dims: usize, y: &[f64], bins: usize) -> Result<RftReport> {
    let n = check_matrix(x, dims, y)?;
    if n < 2 {
        return Err(Error::InsufficientData(format!("RFT needs at least 2 samples, got {n}")));
    }
    if bins < 2 {
        return Err(Error::Invalid(format!("RFT needs at least 2 bins, got {bins}")));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let losses: Vec<f64> = (0..dims)
        .into_par_iter()
        .map(|d| rft_loss((0..n).map(|i| f64::from(x[i * dims + d])), &yc, bins))
        .collect();
    let mut ranking: Vec<usize> = (0..dims).collect();
    ranking.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap().then(a.cmp(&b)));
    Ok(RftReport { losses, ranking, bins })
}

/// The `n_keep` lowest-loss dimensions in rank order.
pub fn rft_select(report: &RftReport, n_keep: usize) -> Result<Vec<usize>> {
    if n_keep == 0 || n_keep > report.ranking.len() {
        return Err(Error::Invalid(format!(
            "n_keep must lie in 1..={}, got {n_keep}",
            report.ranking.len()
        )));
    }
    Ok(report.ranking[..n_keep].to_vec())
}

/// Number of dimensions before the largest second difference of the sorted
/// losses.
pub fn rft_elbow(report: &RftReport) -> usize {
    let l: Vec<f64> = report.ranking.iter().map(|&d| report.losses[d]).collect();
    if l.len() < 3 {
        return l.len();
    }
    let mut best = (f64::NEG_INFINITY, l.len());
    for i in 1..l.len() - 1 {
        let d2 = l[i + 1] - 2.0 * l[i] + l[i - 1];
        if d2 > best.0 {
            best = (d2, i + 1);
        }
    }
    best.1
}

/// Per-subset affine least-squares predictors of the target.
#[derive(Clone, Debug, PartialEq)]
pub struct LntModel {
    pub input_dims: usize,
    pub subsets: Vec<Vec<usize>>,
    /// Per subset: one weight per subset feature, then the intercept.
    pub weights: Vec<Vec<f64>>,
}

impl LntModel {
    pub fn from_parts(input_dims: usize, subsets: Vec<Vec<usize>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if subsets.len() != weights.len() {
            return Err(Error::Corrupt("LNT subset and weight counts differ".into()));
        }
        for (s, w) in subsets.iter().zip(&weights) {
            if s.is_empty() || s.iter().any(|&d| d >= input_dims) || w.len() != s.len() + 1 {
                return Err(Error::Corrupt(format!("LNT subset {s:?} invalid for {input_dims} inputs")));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt("LNT weights not finite".into()));
            }
        }
        Ok(Self { input_dims, subsets, weights })
    }

    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    /// Rounds every weight to the nearest `f32`, the precision used on disk.
    pub fn to_f32_precision(mut self) -> Self {
        for w in self.weights.iter_mut().flatten() {
            *w = f64::from(*w as f32);
        }
        self
    }

    #[inline]
    pub fn feature(&self, t: usize, row: &[f32]) -> f64 {
        let (s, w) = (&self.subsets[t], &self.weights[t]);
        let mut v = w[s.len()];
        for (k, &d) in s.iter().enumerate() {
            v += w[k] * f64::from(row[d]);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LntConfig {
    pub k: usize,
    /// Depth of the boosted trees whose used features define the subsets.
    pub tree_depth: usize,
    pub learning_rate: f64,
}

impl Default for LntConfig {
    fn default() -> Self {
        Self {
            k: 400,
            tree_depth: 3,
            learning_rate: 0.1,
        }
    }
}

/// Least squares with intercept of `y` on the columns `subset`. Singular
/// systems get a ridge of `1e-6·trace/dim`.
fn ols(x: &[f32], dims: usize, y: &[f64], subset: &[usize]) -> Vec<f64> {
    let n = y.len();
    let s = subset.len();
    let ymean = y.iter().sum::<f64>() / n as f64;
    if y.iter().all(|&v| v == y[0]) {
        let mut w = vec![0.0; s + 1];
        w[s] = y[0];
        return w;
    }
    let mut mean = vec![0.0f64; s];
    for i in 0..n {
        for (k, &d) in subset.iter().enumerate() {
            mean[k] += f64::from(x[i * dims + d]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = DMatrix::<f64>::zeros(s, s);
    let mut b = DVector::<f64>::zeros(s);
    let mut row = vec![0.0f64; s];
    for i in 0..n {
        for (k, &d) in subset.iter().enumerate() {
            row[k] = f64::from(x[i * dims + d]) - mean[k];
        }
        let yc = y[i] - ymean;
        for a in 0..s {
            b[a] += row[a] * yc;
            for bb in a..s {
                c[(a, bb)] += row[a] * row[bb];
            }
        }
    }
    for a in 0..s {
        for bb in 0..a {
            c[(a, bb)] = c[(bb, a)];
        }
    }
    let trace = c.trace();
    let well_posed = |m: &DMatrix<f64>| {
        m.clone().cholesky().filter(|ch| {
            let l = ch.l_dirty();
            let diag: Vec<f64> = (0..s).map(|i| l[(i, i)] * l[(i, i)]).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            diag.iter().all(|&d| d > 1e-12 * max)
        })
    };
    let solved = match well_posed(&c) {
        Some(ch) => ch.solve(&b),
        None => {
            let eps = 1e-6 * trace / s as f64;
            let mut r = c.clone();
            for i in 0..s {
                r[(i, i)] += eps.max(f64::MIN_POSITIVE);
            }
            match r.cholesky() {
                Some(ch) => ch.solve(&b),
                None => DVector::zeros(s),
            }
        }
    };
    let mut w: Vec<f64> = solved.iter().copied().collect();
    let intercept = ymean - w.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    w.push(intercept);
    w
}

/// Fits one least-squares predictor per given subset.
pub fn lnt_fit_with_subsets(x: &[f32], dims: usize, y: &[f64], subsets: Vec<Vec<usize>>) -> Result<LntModel> {
    let n = check_matrix(x, dims, y)?;
    let max_size = subsets.iter().map(Vec::len).max().unwrap_or(0);
    if n < max_size + 1 {
        return Err(Error::InsufficientData(format!(
            "LNT needs at least {} samples, got {n}",
            max_size + 1
        )));
    }
    let weights = subsets.par_iter().map(|s| ols(x, dims, y, s)).collect();
    LntModel::from_parts(dims, subsets, weights)
}

/// Derives `K` subsets from the feature usage of a `K`-tree boosted ensemble
/// and fits a least-squares predictor on each.
pub fn lnt_fit(x: &[f32], dims: usize, y: &[f64], cfg: &LntConfig, seed: u64) -> Result<LntModel> {
    let n = check_matrix(x, dims, y)?;
    if cfg.k == 0 {
        return Err(Error::Invalid("LNT needs K >= 1".into()));
    }
    let gcfg = GbdtConfig {
        rounds: cfg.k,
        max_depth: cfg.tree_depth,
        learning_rate: cfg.learning_rate,
        min_samples_leaf: 5.min(n.div_ceil(4)).max(1),
        feature_subsample: 0.8,
        exact_below: 0,
        seed: derive_seed(seed, "lnt-trees", 0),
        ..Default::default()
    };
    let ensemble = gbdt_fit(x, dims, y, &gcfg)?;
    let mut perm: Vec<usize> = (0..dims).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "lnt-partition", 0)));
    let subsets: Vec<Vec<usize>> = (0..cfg.k)
        .map(|t| {
            let used: Vec<usize> = ensemble.trees.get(t).map(|tr| tr.used_features().into_iter().collect()).unwrap_or_default();
            if !used.is_empty() {
                return used;
            }
            let mut part: Vec<usize> = perm.iter().copied().skip(t).step_by(cfg.k).collect();
            if part.is_empty() {
                part.push(perm[t % dims]);
            }
            part.sort_unstable();
            part
        })
        .collect();
    lnt_fit_with_subsets(x, dims, y, subsets)
}

/// `K` new features per row.
pub fn lnt_apply(m: &LntModel, x: &[f32], dims: usize) -> Result<Vec<f32>> {
    if dims != m.input_dims || x.len() % dims != 0 {
        return Err(Error::Shape(format!(
            "LNT expects {} input features, got {dims} ({} values)",
            m.input_dims,
            x.len()
        )));
    }
    Ok(x.chunks(dims)
        .flat_map(|row| (0..m.k()).map(move |t| m.feature(t, row) as f32))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatLearnConfig {
    pub lnt: LntConfig,
    pub rft_bins: usize,
    pub n_keep_max: usize,
    /// Lower bound on the elbow-based feature count.
    pub min_keep: usize,
    /// Voxels sampled per level for LNT and RFT fitting.
    pub max_samples: usize,
}

impl Default for FeatLearnConfig {
    fn default() -> Self {
        Self {
            lnt: LntConfig::default(),
            rft_bins: 16,
            n_keep_max: 1000,
            min_keep: 16,
            max_samples: 20_000,
        }
    }
}

/// Learned feature pipeline of one level: `3×3` expansion, LNT, selection.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeatureModel {
    /// Encoder channels at this level.
    pub channels: usize,
    pub lnt: LntModel,
    /// Indices into `expanded ⊕ lnt`, in rank order.
    pub selected: Vec<usize>,
}

impl LevelFeatureModel {
    pub fn expanded_dims(&self) -> usize {
        9 * self.channels
    }

    pub fn output_dims(&self) -> usize {
        self.selected.len()
    }

    pub fn param_count(&self) -> usize {
        self.lnt.param_count()
    }

    /// Selected feature rows for `voxels` (row-major, `voxels × output_dims`).
    pub fn rows(&self, enc: &FeatureTensor, voxels: &[usize]) -> Result<Vec<f32>> {
        if enc.channels() != self.channels {
            return Err(Error::Shape(format!(
                "level features expect {} channels, got {}",
                self.channels,
                enc.channels()
            )));
        }
        let (e, k) = (self.expanded_dims(), self.output_dims());
        let mut out = vec![0.0f32; voxels.len() * k];
        out.par_chunks_mut(k.max(1) * 256).enumerate().for_each(|(c, chunk)| {
            let mut row = vec![0.0f32; e];
            for (j, dst) in chunk.chunks_mut(k).enumerate() {
                expand_voxel(enc, voxels[c * 256 + j], &mut row);
                for (o, &d) in dst.iter_mut().zip(&self.selected) {
                    *o = if d < e { row[d] } else { self.lnt.feature(d - e, &row) as f32 };
                }
            }
        });
        Ok(out)
    }

    pub fn all_rows(&self, enc: &FeatureTensor) -> Result<Vec<f32>> {
        let all: Vec<usize> = (0..enc.voxels()).collect();
        self.rows(enc, &all)
    }
}

/// Expanded rows for `voxels` without LNT or selection.
fn expanded_rows(enc: &FeatureTensor, voxels: &[usize]) -> Vec<f32> {
    let e = 9 * enc.channels();
    let mut out = vec![0.0f32; voxels.len() * e];
    for (dst, &v) in out.chunks_mut(e).zip(voxels) {
        expand_voxel(enc, v, dst);
    }
    out
}

/// Fits LNT and RFT for one level on sampled voxels of every training case.
/// `targets[c]` holds the level-grid target of case `c`.
pub fn fit_level_features(
    encs: &[&FeatureTensor],
    targets: &[&[f64]],
    cfg: &FeatLearnConfig,
    seed: u64,
) -> Result<LevelFeatureModel> {
    let first = encs
        .first()
        .ok_or_else(|| Error::InsufficientData("feature learning needs at least one case".into()))?;
    if encs.len() != targets.len() {
        return Err(Error::Shape("one target per encoded case is required".into()));
    }
    let (per, channels) = (first.voxels(), first.channels());
    for (e, t) in encs.iter().zip(targets) {
        if e.voxels() != per || e.channels() != channels || t.len() != per {
            return Err(Error::Shape("level features and targets must share one grid".into()));
        }
    }
    let total = per * encs.len();
    let take = cfg.max_samples.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "level-samples", 0));
    let mut picks = rand::seq::index::sample(&mut rng, total, take).into_vec();
    picks.sort_unstable();

    let e = 9 * channels;
    let mut x = Vec::with_capacity(take * e);
    let mut y = Vec::with_capacity(take);
    for c in 0..encs.len() {
        let vox: Vec<usize> = picks.iter().filter(|&&p| p / per == c).map(|&p| p % per).collect();
        x.extend(expanded_rows(encs[c], &vox));
        y.extend(vox.iter().map(|&v| targets[c][v]));
    }
    let lnt = lnt_fit(&x, e, &y, &cfg.lnt, seed)?.to_f32_precision();
    let new = lnt_apply(&lnt, &x, e)?;
    let k = lnt.k();
    let dims = e + k;
    let mut full = Vec::with_capacity(take * dims);
    for i in 0..take {
        full.extend_from_slice(&x[i * e..(i + 1) * e]);
        full.extend_from_slice(&new[i * k..(i + 1) * k]);
    }
    let report = rft_rank(&full, dims, &y, cfg.rft_bins)?;
    let n_keep = rft_elbow(&report).max(cfg.min_keep).min(cfg.n_keep_max).clamp(1, dims);
    let selected = rft_select(&report, n_keep)?;
    log::debug!("level features: {e} expanded + {k} LNT, keeping {n_keep}");
    Ok(LevelFeatureModel { channels, lnt, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_loss(col: &[f64], y: &[f64], bins: usize) -> f64 {
        let n = y.len() as f64;
        let var_ss = |v: &[f64]| {
            if v.is_empty() {
                return 0.0;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
        };
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            return var_ss(y) / n;
        }
        (1..bins)
            .map(|k| {
                let t = lo + k as f64 * ((hi - lo) / bins as f64);
                let l: Vec<f64> = (0..y.len()).filter(|&i| col[i] <= t).map(|i| y[i]).collect();
                let r: Vec<f64> = (0..y.len()).filter(|&i| col[i] > t).map(|i| y[i]).collect();
                (var_ss(&l) + var_ss(&r)) / n
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn rft_binary_and_constant_features() {
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let mut x = Vec::new();
        for &v in &y {
            x.extend_from_slice(&[v as f32, 3.0]);
        }
        let r = rft_rank(&x, 2, &y, 16).unwrap();
        assert!(r.losses[0].abs() < 1e-15);
        assert!((r.losses[1] - 0.25).abs() < 1e-15);
        assert_eq!(r.ranking, vec![0, 1]);
    }

    #[test]
    fn rft_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (64, 6);
        let x: Vec<f32> = (0..n * d).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..n).map(|i| f64::from(x[i * d] > 0.4) + 0.1 * rng.random::<f64>()).collect();
        let r = rft_rank(&x, d, &y, 16).unwrap();
        for k in 0..d {
            let col: Vec<f64> = (0..n).map(|i| f64::from(x[i * d + k])).collect();
            assert!((r.losses[k] - brute_loss(&col, &y, 16)).abs() < 1e-9);
        }
        assert_eq!(r.ranking[0], 0);
    }

    #[test]
    fn rft_invariant_to_affine_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(0..64) as f32 / 8.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let base = rft_rank(&x, 1, &y, 16).unwrap().losses[0];
        let moved: Vec<f32> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(rft_rank(&moved, 1, &y, 16).unwrap().losses[0], base);
        let rev_x: Vec<f32> = x.iter().rev().copied().collect();
        let rev_y: Vec<f64> = y.iter().rev().copied().collect();
        assert!((rft_rank(&rev_x, 1, &rev_y, 16).unwrap().losses[0] - base).abs() < 1e-12);
    }

    #[test]
    fn rft_select_cases() {
        let r = RftReport { losses: vec![0.3, 0.1, 0.1, 0.5], ranking: vec![1, 2, 0, 3], bins: 16 };
        assert_eq!(rft_select(&r, 4).unwrap(), vec![1, 2, 0, 3]);
        assert_eq!(rft_select(&r, 1).unwrap(), vec![1]);
        assert!(rft_select(&r, 0).is_err());
        assert!(rft_select(&r, 5).is_err());
        let e = RftReport { losses: vec![0.1, 0.11, 0.12, 0.5, 0.51], ranking: vec![0, 1, 2, 3, 4], bins: 16 };
        assert_eq!(rft_elbow(&e), 3);
    }

    #[test]
    fn ols_recovers_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let x: Vec<f32> = (0..n * 3).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.5 * f64::from(x[3 * i]) - 2.0 * f64::from(x[3 * i + 1]) + 0.5 * f64::from(x[3 * i + 2]) + 0.25)
            .collect();
        let m = lnt_fit(&x, 3, &y, &LntConfig { k: 1, tree_depth: 8, ..Default::default() }, 0).unwrap();
        assert_eq!(m.k(), 1);
        let forced = lnt_fit_with_subsets(&x, 3, &y, vec![vec![0, 1, 2]]).unwrap();
        let out = lnt_apply(&forced, &x, 3).unwrap();
        for i in 0..n {
            assert!((f64::from(out[i]) - y[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_target_gives_constant_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..40 * 2).map(|_| rng.random()).collect();
        let y = vec![0.3; 40];
        let m = lnt_fit(&x, 2, &y, &LntConfig { k: 3, ..Default::default() }, 1).unwrap();
        assert_eq!(m.k(), 3);
        assert!(lnt_apply(&m, &x, 2).unwrap().iter().all(|&v| v == 0.3f32));
        assert!(lnt_apply(&m, &x, 3).is_err());
    }

    #[test]
    fn singular_subset_uses_ridge() {
        let x: Vec<f32> = (0..30).flat_map(|i| [i as f32, 2.0 * i as f32]).collect();
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let m = lnt_fit_with_subsets(&x, 2, &y, vec![vec![0, 1]]).unwrap();
        let out = lnt_apply(&m, &x, 2).unwrap();
        for i in 0..30 {
            assert!((f64::from(out[i]) - y[i]).abs() < 1e-3);
        }
    }
}

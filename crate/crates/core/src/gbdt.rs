//! Gradient-boosted regression trees with squared-error loss.
//!
//! Each round fits a depth-limited tree to the residuals `y − ŷ` and adds it
//! scaled by the learning rate. Splits maximise variance reduction
//! `S_L²/n_L + S_R²/n_R − S²/n`; leaves hold the mean residual. Large inputs
//! use per-feature quantile histograms, small ones scan every distinct value.
//! A round that would raise the training MSE is dropped and boosting stops,
//! so the recorded per-round training MSE never increases.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{derive_seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Fraction of features offered to each tree.
    pub feature_subsample: f64,
    pub bins: usize,
    /// Below this many samples splits are searched over every distinct value.
    pub exact_below: usize,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            rounds: 300,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            feature_subsample: 0.8,
            bins: 64,
            exact_below: 10_000,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("gbdt config: {m}")));
        if self.rounds == 0 || self.max_depth == 0 {
            return bad(format!("rounds and depth must be >= 1, got {} / {}", self.rounds, self.max_depth));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning rate must lie in (0, 1], got {}", self.learning_rate));
        }
        if !(2..=256).contains(&self.bins) {
            return bad(format!("bins must lie in 2..=256, got {}", self.bins));
        }
        if self.min_samples_leaf == 0 {
            return bad("min samples per leaf must be >= 1".into());
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return bad(format!("feature subsample must lie in (0, 1], got {}", self.feature_subsample));
        }
        Ok(())
    }
}

/// One regression tree as flat node arrays; node 0 is the root and children
/// always follow their parent. Leaves have `feature == -1`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f32>,
    pub left: Vec<i32>,
    pub right: Vec<i32>,
    pub value: Vec<f32>,
}

impl Tree {
    pub fn leaf(value: f32) -> Self {
        Self {
            feature: vec![-1],
            threshold: vec![0.0],
            left: vec![-1],
            right: vec![-1],
            value: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] < 0
    }

    pub fn internal_count(&self) -> usize {
        self.feature.iter().filter(|&&f| f >= 0).count()
    }

    /// Feature index and threshold for internal nodes, one scalar for leaves.
    pub fn param_count(&self) -> usize {
        2 * self.internal_count() + (self.len() - self.internal_count())
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, n: usize) -> usize {
            if t.is_leaf(n) {
                0
            } else {
                1 + walk(t, t.left[n] as usize).max(walk(t, t.right[n] as usize))
            }
        }
        if self.is_empty() {
            0
        } else {
            walk(self, 0)
        }
    }

    pub fn used_features(&self) -> BTreeSet<usize> {
        self.feature.iter().filter(|&&f| f >= 0).map(|&f| f as usize).collect()
    }

    #[inline]
    pub fn predict_row(&self, row: &[f32]) -> f32 {
        let mut n = 0usize;
        loop {
            let f = self.feature[n];
            if f < 0 {
                return self.value[n];
            }
            n = if row[f as usize] <= self.threshold[n] {
                self.left[n] as usize
            } else {
                self.right[n] as usize
            };
        }
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        let len = self.len();
        let corrupt = |m: String| Err(Error::Corrupt(format!("tree: {m}")));
        if len == 0
            || [self.threshold.len(), self.left.len(), self.right.len(), self.value.len()]
                .iter()
                .any(|&l| l != len)
        {
            return corrupt("inconsistent node array lengths".into());
        }
        for i in 0..len {
            let f = self.feature[i];
            if f >= 0 {
                let (l, r) = (self.left[i], self.right[i]);
                if f as usize >= n_features {
                    return corrupt(format!("node {i} splits on feature {f} of {n_features}"));
                }
                if l <= i as i32 || r <= i as i32 || l as usize >= len || r as usize >= len {
                    return corrupt(format!("node {i} has invalid children {l}, {r}"));
                }
                if !self.threshold[i].is_finite() {
                    return corrupt(format!("node {i} has a non-finite threshold"));
                }
            } else if !self.value[i].is_finite() {
                return corrupt(format!("leaf {i} has a non-finite value"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbdtModel {
    pub n_features: usize,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Training MSE after round 0 (base score only), 1, 2, ...
    pub train_mse: Vec<f64>,
}

impl GbdtModel {
    /// A model that predicts `base_score` everywhere.
    pub fn constant(n_features: usize, base_score: f64) -> Self {
        Self {
            n_features,
            base_score,
            learning_rate: 1.0,
            trees: Vec::new(),
            train_mse: Vec::new(),
        }
    }

    pub fn from_parts(
        n_features: usize,
        base_score: f64,
        learning_rate: f64,
        trees: Vec<Tree>,
        train_mse: Vec<f64>,
    ) -> Result<Self> {
        if !base_score.is_finite() || !learning_rate.is_finite() {
            return Err(Error::Corrupt("gbdt base score or learning rate not finite".into()));
        }
        for t in &trees {
            t.validate(n_features)?;
        }
        Ok(Self {
            n_features,
            base_score,
            learning_rate,
            trees,
            train_mse,
        })
    }

    #[inline]
    pub fn predict_row(&self, row: &[f32]) -> f64 {
        let mut p = self.base_score;
        for t in &self.trees {
            p += self.learning_rate * f64::from(t.predict_row(row));
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.trees.iter().map(Tree::param_count).sum()
    }

    /// Average number of comparisons per prediction, bounded by depth.
    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }
}

/// Predictions for the row-major matrix `x` with `n_features` columns.
pub fn gbdt_predict(m: &GbdtModel, x: &[f32], n_features: usize) -> Result<Vec<f64>> {
    if n_features != m.n_features || (n_features > 0 && x.len() % n_features != 0) {
        return Err(Error::Shape(format!(
            "model expects {} features, got {n_features} ({} values)",
            m.n_features,
            x.len()
        )));
    }
    if n_features == 0 {
        return Err(Error::Shape("zero-feature input".into()));
    }
    Ok(x.par_chunks(n_features).map(|r| m.predict_row(r)).collect())
}

enum Columns {
    Binned { bins: Vec<u8>, upper: Vec<Vec<f32>> },
    Exact { values: Vec<f32>, order: Vec<Vec<u32>> },
}

enum NodeData {
    /// `(sum, count)` per selected feature × bin.
    Hist(Vec<[f64; 2]>),
    /// Node rows sorted by value, per selected feature.
    Sorted(Vec<Vec<u32>>),
}

#[derive(Clone, Copy)]
struct Split {
    gain: f64,
    slot: usize,
    /// Histogram bin (binned) or sorted position (exact) of the last left row.
    cut: usize,
    threshold: f32,
}

/// Upper bin edges: every value when few are distinct, else quantiles. The
/// last edge is always the column maximum.
fn bin_edges(col: &[f32], bins: usize) -> Vec<f32> {
    const EDGE_SAMPLE: usize = 100_000;
    let step = col.len().div_ceil(EDGE_SAMPLE).max(1);
    let mut sample: Vec<f32> = col.iter().step_by(step).copied().collect();
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut unique = sample.clone();
    unique.dedup();
    let mut upper = if unique.len() <= bins {
        unique
    } else {
        let n = sample.len();
        let mut u: Vec<f32> = (1..=bins).map(|k| sample[(k * n).div_ceil(bins) - 1]).collect();
        u.dedup();
        u
    };
    let max = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    match upper.last() {
        Some(&l) if l < max => upper.push(max),
        _ => {}
    }
    if upper.len() > bins {
        let last = upper.len() - 2;
        upper.remove(last);
    }
    upper
}

struct Builder<'a> {
    n: usize,
    cols: &'a Columns,
    grad: &'a [f64],
    features: &'a [usize],
    cfg: &'a GbdtConfig,
    tree: Tree,
    leaf_of: Vec<u32>,
}

const PAR_WORK: usize = 1 << 15;

impl Builder<'_> {
    fn hist(&self, rows: &[u32]) -> Vec<[f64; 2]> {
        let Columns::Binned { bins, .. } = self.cols else { unreachable!() };
        let nb = self.cfg.bins;
        let mut h = vec![[0.0f64; 2]; self.features.len() * nb];
        let fill = |(slot, chunk): (usize, &mut [[f64; 2]])| {
            let col = &bins[self.features[slot] * self.n..(self.features[slot] + 1) * self.n];
            for &r in rows {
                let c = &mut chunk[col[r as usize] as usize];
                c[0] += self.grad[r as usize];
                c[1] += 1.0;
            }
        };
        if rows.len() * self.features.len() >= PAR_WORK {
            h.par_chunks_mut(nb).enumerate().for_each(fill);
        } else {
            h.chunks_mut(nb).enumerate().for_each(fill);
        }
        h
    }

    fn gain(&self, sl: f64, nl: f64, s: f64, n: f64) -> f64 {
        let (sr, nr) = (s - sl, n - nl);
        sl * sl / nl + sr * sr / nr - s * s / n
    }

    fn best_split(&self, rows: &[u32], data: &NodeData, s: f64) -> Option<Split> {
        let n = rows.len() as f64;
        let min_leaf = self.cfg.min_samples_leaf as f64;
        let per_slot = |slot: usize| -> Option<Split> {
            let mut best: Option<Split> = None;
            let mut consider = |gain: f64, cut: usize, threshold: f32| {
                if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
                    best = Some(Split { gain, slot, cut, threshold });
                }
            };
            match (data, self.cols) {
                (NodeData::Hist(h), Columns::Binned { upper, .. }) => {
                    let edges = &upper[self.features[slot]];
                    let h = &h[slot * self.cfg.bins..];
                    let (mut sl, mut nl) = (0.0, 0.0);
                    for b in 0..edges.len() - 1 {
                        sl += h[b][0];
                        nl += h[b][1];
                        if nl < min_leaf || h[b][1] == 0.0 {
                            continue;
                        }
                        if n - nl < min_leaf {
                            break;
                        }
                        consider(self.gain(sl, nl, s, n), b, edges[b]);
                    }
                }
                (NodeData::Sorted(lists), Columns::Exact { values, .. }) => {
                    let col = &values[self.features[slot] * self.n..(self.features[slot] + 1) * self.n];
                    let list = &lists[slot];
                    let mut sl = 0.0;
                    for k in 0..list.len() - 1 {
                        sl += self.grad[list[k] as usize];
                        let nl = (k + 1) as f64;
                        if nl < min_leaf {
                            continue;
                        }
                        if n - nl < min_leaf {
                            break;
                        }
                        let v = col[list[k] as usize];
                        if v == col[list[k + 1] as usize] {
                            continue;
                        }
                        consider(self.gain(sl, nl, s, n), k, v);
                    }
                }
                _ => unreachable!(),
            }
            best
        };
        let slots = self.features.len();
        let candidates: Vec<Option<Split>> = if rows.len() * slots >= PAR_WORK {
            (0..slots).into_par_iter().map(per_slot).collect()
        } else {
            (0..slots).map(per_slot).collect()
        };
        candidates.into_iter().flatten().fold(None, |best: Option<Split>, c| match best {
            Some(b) if b.gain >= c.gain => Some(b),
            _ => Some(c),
        })
    }

    fn push_node(&mut self) -> usize {
        self.tree.feature.push(-1);
        self.tree.threshold.push(0.0);
        self.tree.left.push(-1);
        self.tree.right.push(-1);
        self.tree.value.push(0.0);
        self.tree.len() - 1
    }

    fn grow(&mut self, rows: Vec<u32>, data: NodeData, depth: usize) -> usize {
        let idx = self.push_node();
        let s: f64 = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let n = rows.len();
        if depth < self.cfg.max_depth && n >= 2 * self.cfg.min_samples_leaf {
            if let Some(sp) = self.best_split(&rows, &data, s) {
                let f = self.features[sp.slot];
                let goes_left = |r: u32| -> bool {
                    match self.cols {
                        Columns::Binned { bins, .. } => (bins[f * self.n + r as usize] as usize) <= sp.cut,
                        Columns::Exact { values, .. } => values[f * self.n + r as usize] <= sp.threshold,
                    }
                };
                let (lrows, rrows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| goes_left(r));
                let (ldata, rdata) = match data {
                    NodeData::Hist(parent) => {
                        let small_left = lrows.len() <= rrows.len();
                        let small = self.hist(if small_left { &lrows } else { &rrows });
                        let large: Vec<[f64; 2]> = parent
                            .iter()
                            .zip(&small)
                            .map(|(p, c)| [p[0] - c[0], p[1] - c[1]])
                            .collect();
                        if small_left {
                            (NodeData::Hist(small), NodeData::Hist(large))
                        } else {
                            (NodeData::Hist(large), NodeData::Hist(small))
                        }
                    }
                    NodeData::Sorted(lists) => {
                        let mut l = Vec::with_capacity(lists.len());
                        let mut r = Vec::with_capacity(lists.len());
                        for list in lists {
                            let (a, b): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&x| goes_left(x));
                            l.push(a);
                            r.push(b);
                        }
                        (NodeData::Sorted(l), NodeData::Sorted(r))
                    }
                };
                let li = self.grow(lrows, ldata, depth + 1);
                let ri = self.grow(rrows, rdata, depth + 1);
                self.tree.feature[idx] = f as i32;
                self.tree.threshold[idx] = sp.threshold;
                self.tree.left[idx] = li as i32;
                self.tree.right[idx] = ri as i32;
                return idx;
            }
        }
        self.tree.value[idx] = (s / n as f64) as f32;
        for &r in &rows {
            self.leaf_of[r as usize] = idx as u32;
        }
        idx
    }
}

fn mse(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Fits a boosted ensemble on the row-major matrix `x` (`y.len()` rows).
pub fn gbdt_fit(x: &[f32], n_features: usize, y: &[f64], cfg: &GbdtConfig) -> Result<GbdtModel> {
    cfg.validate()?;
    let n = y.len();
    if n == 0 || n_features == 0 {
        return Err(Error::InsufficientData("gbdt needs at least one sample and feature".into()));
    }
    if x.len() != n * n_features {
        return Err(Error::Shape(format!(
            "gbdt input has {} values, expected {n} × {n_features}",
            x.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite target at row {i}")));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite feature at row {}", i / n_features)));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Ok(GbdtModel {
            train_mse: vec![0.0],
            ..GbdtModel::constant(n_features, y[0])
        });
    }
    let base = y.iter().sum::<f64>() / n as f64;
    let mut model = GbdtModel {
        n_features,
        base_score: base,
        learning_rate: cfg.learning_rate,
        trees: Vec::new(),
        train_mse: Vec::new(),
    };
    let mut pred = vec![base; n];
    model.train_mse.push(mse(y, &pred));
    if n < 2 * cfg.min_samples_leaf {
        return Ok(model);
    }

    let column = |f: usize| -> Vec<f32> { (0..n).map(|r| x[r * n_features + f]).collect() };
    let cols = if n < cfg.exact_below {
        let values: Vec<f32> = (0..n_features).flat_map(column).collect();
        let order = (0..n_features)
            .map(|f| {
                let col = &values[f * n..(f + 1) * n];
                let mut o: Vec<u32> = (0..n as u32).collect();
                o.sort_by(|&a, &b| col[a as usize].partial_cmp(&col[b as usize]).unwrap().then(a.cmp(&b)));
                o
            })
            .collect();
        Columns::Exact { values, order }
    } else {
        let per: Vec<(Vec<u8>, Vec<f32>)> = (0..n_features)
            .into_par_iter()
            .map(|f| {
                let col = column(f);
                let upper = bin_edges(&col, cfg.bins);
                let b = col.iter().map(|v| upper.partition_point(|u| u < v) as u8).collect();
                (b, upper)
            })
            .collect();
        let mut bins = Vec::with_capacity(n * n_features);
        let mut upper = Vec::with_capacity(n_features);
        for (b, u) in per {
            bins.extend(b);
            upper.push(u);
        }
        Columns::Binned { bins, upper }
    };

    let n_sub = ((cfg.feature_subsample * n_features as f64).round() as usize).clamp(1, n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gbdt-features", 0));
    let mut grad = vec![0.0f64; n];
    for round in 0..cfg.rounds {
        let mut features = rand::seq::index::sample(&mut rng, n_features, n_sub).into_vec();
        features.sort_unstable();
        for i in 0..n {
            grad[i] = y[i] - pred[i];
        }
        let rows: Vec<u32> = (0..n as u32).collect();
        let mut b = Builder {
            n,
            cols: &cols,
            grad: &grad,
            features: &features,
            cfg,
            tree: Tree::default(),
            leaf_of: vec![0; n],
        };
        let root = match &cols {
            Columns::Binned { .. } => NodeData::Hist(b.hist(&rows)),
            Columns::Exact { order, .. } => NodeData::Sorted(features.iter().map(|&f| order[f].clone()).collect()),
        };
        b.grow(rows, root, 0);
        let Builder { tree, leaf_of, .. } = b;
        if tree.len() == 1 {
            log::debug!("gbdt round {round}: no admissible split, stopping");
            break;
        }
        let next: Vec<f64> = pred
            .iter()
            .zip(&leaf_of)
            .map(|(&p, &l)| p + cfg.learning_rate * f64::from(tree.value[l as usize]))
            .collect();
        let m = mse(y, &next);
        if m > *model.train_mse.last().unwrap() {
            log::debug!("gbdt round {round}: tree would raise training MSE, stopping");
            break;
        }
        pred = next;
        model.train_mse.push(m);
        model.trees.push(tree);
    }
    Ok(model)
}

//! Coarse-to-fine decoding with residual correction.
//!
//! The coarsest level gets an initial regression on every voxel. From there
//! on each level takes a prediction `P_m`, picks a boundary ROI `B`, predicts
//! the residual `R = G − P_m` on `B` and adds it back:
//! `P_r = clamp(P_m + R̂)` on `B`, `P_r = P_m` elsewhere. The corrected map is
//! upsampled to become `P_m` of the next finer level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gbdt::{gbdt_fit, gbdt_predict, GbdtConfig, GbdtModel};
use crate::volume::{upsample_trilinear, Grid3, ProbMap, Shape3};
use crate::{derive_seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    /// Euclidean dilation radius in voxels.
    pub radius: f64,
    /// Training voxels with `|R| > residual_floor` join the ROI.
    pub residual_floor: f64,
    pub max_fraction: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            t_lo: 0.02,
            t_hi: 0.98,
            radius: 2.0,
            residual_floor: 0.05,
            max_fraction: 0.35,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= 1.0) {
            return Err(Error::Invalid(format!(
                "ROI band needs 0 <= t_lo < t_hi <= 1, got {} / {}",
                self.t_lo, self.t_hi
            )));
        }
        if !(self.radius >= 0.0) || !(self.residual_floor >= 0.0) {
            return Err(Error::Invalid("ROI radius and residual floor must be >= 0".into()));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction <= 1.0) {
            return Err(Error::Invalid(format!("ROI max fraction must lie in (0, 1], got {}", self.max_fraction)));
        }
        Ok(())
    }
}

/// Maps of one level during decoding.
#[derive(Clone, Debug)]
pub struct LevelState {
    /// 1 is the finest level.
    pub level: usize,
    pub g: Option<ProbMap>,
    pub p_m: ProbMap,
    pub r: Option<Grid3<f64>>,
    pub b: Vec<usize>,
    pub p_r: ProbMap,
}

/// `R = G − P_m`.
pub fn residual_target(g: &ProbMap, p_m: &ProbMap) -> Result<Grid3<f64>> {
    if g.shape() != p_m.shape() {
        return Err(Error::Shape(format!("residual grids differ: {:?} vs {:?}", g.shape(), p_m.shape())));
    }
    let data = g.data().iter().zip(p_m.data()).map(|(a, b)| a - b).collect();
    Grid3::new(g.shape(), data)
}

/// ROI voxel indices in ascending order. With `r` given (training) the
/// residual voxels join and the cap keeps the largest `|R|`; otherwise the cap
/// keeps the voxels closest to 0.5.
pub fn roi_select(p_m: &ProbMap, r: Option<&Grid3<f64>>, cfg: &RoiConfig) -> Vec<usize> {
    let g = p_m.grid();
    let shape = g.shape();
    let p = g.data();
    let n = p.len();
    let mut in_b = vec![false; n];

    // seeds in doubled coordinates so that face midpoints stay integral
    let mut seeds: Vec<[i64; 3]> = Vec::new();
    for i in 0..n {
        let [x, y, z] = g.coords(i);
        let c = [2 * x as i64, 2 * y as i64, 2 * z as i64];
        if cfg.t_lo < p[i] && p[i] < cfg.t_hi {
            seeds.push(c);
        }
        let above = p[i] > 0.5;
        let nb = [[x + 1, y, z], [x, y + 1, z], [x, y, z + 1]];
        for (a, q) in nb.iter().enumerate() {
            if q[a] < shape[a] && (p[g.index(q[0], q[1], q[2])] > 0.5) != above {
                let mut m = c;
                m[a] += 1;
                seeds.push(m);
            }
        }
    }
    let r2 = (2.0 * cfg.radius) * (2.0 * cfg.radius);
    let reach = (cfg.radius + 0.5).ceil() as i64;
    for s in &seeds {
        let lo: [i64; 3] = std::array::from_fn(|a| (s[a] / 2 - reach).max(0));
        let hi: [i64; 3] = std::array::from_fn(|a| ((s[a] + 1) / 2 + reach).min(shape[a] as i64 - 1));
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let d = [2 * x - s[0], 2 * y - s[1], 2 * z - s[2]];
                    if (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64 <= r2 {
                        in_b[g.index(x as usize, y as usize, z as usize)] = true;
                    }
                }
            }
        }
    }
    if let Some(r) = r {
        for (i, &v) in r.data().iter().enumerate() {
            if v.abs() > cfg.residual_floor {
                in_b[i] = true;
            }
        }
    }
    let mut b: Vec<usize> = (0..n).filter(|&i| in_b[i]).collect();
    let cap = (cfg.max_fraction * n as f64).floor() as usize;
    if b.len() > cap {
        match r {
            Some(r) => {
                let r = r.data();
                b.sort_by(|&i, &j| r[j].abs().partial_cmp(&r[i].abs()).unwrap().then(i.cmp(&j)));
            }
            None => b.sort_by(|&i, &j| {
                (p[i] - 0.5).abs().partial_cmp(&(p[j] - 0.5).abs()).unwrap().then(i.cmp(&j))
            }),
        }
        b.truncate(cap);
        b.sort_unstable();
    }
    b
}

/// `P_r = clamp(P_m + R̂, 0, 1)` on `b`, `P_m` elsewhere.
pub fn compensate(p_m: &ProbMap, r_hat: &[f64], b: &[usize]) -> Result<ProbMap> {
    if r_hat.len() != b.len() {
        return Err(Error::Shape(format!("{} residuals for {} ROI voxels", r_hat.len(), b.len())));
    }
    let mut g = p_m.grid().clone();
    let data = g.data_mut();
    for (&i, &v) in b.iter().zip(r_hat) {
        data[i] = (data[i] + v).clamp(0.0, 1.0);
    }
    Ok(ProbMap::from_clamped(g))
}

/// Feature rows per case and level, as produced by the encoder and the
/// per-level feature models. Levels are indexed from 0 (finest).
pub trait FeatureSource: Sync {
    fn cases(&self) -> usize;
    fn levels(&self) -> usize;
    fn shape(&self, level: usize) -> Shape3;
    fn dims(&self, level: usize) -> usize;
    fn rows(&self, case: usize, level: usize, voxels: &[usize]) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub roi: RoiConfig,
    pub initial: GbdtConfig,
    pub corrector: GbdtConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            roi: RoiConfig::default(),
            initial: GbdtConfig::default(),
            corrector: GbdtConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub roi: RoiConfig,
    pub initial: GbdtModel,
    /// Residual corrector per level, index 0 = finest; `None` is the identity.
    pub correctors: Vec<Option<GbdtModel>>,
}

impl DecoderModel {
    pub fn param_count(&self) -> usize {
        self.initial.param_count() + self.correctors.iter().flatten().map(GbdtModel::param_count).sum::<usize>()
    }
}

/// One line of the decoder training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLog {
    pub level: usize,
    pub roi_size: usize,
    pub corrector_trees: usize,
    /// Mean `(G − P_m)²` over the training ROI.
    pub roi_mse_before: f64,
    /// Mean `(G − P_r)²` over the training ROI.
    pub roi_mse_after: f64,
    pub mean_abs_residual_roi: f64,
    pub mean_abs_residual_full: f64,
    /// Mean `|P_r − G|` over every voxel after propagation.
    pub mean_abs_error: f64,
    pub initial_mse: Option<f64>,
    pub target_variance: Option<f64>,
}

pub fn log_to_json_lines(log: &[LevelLog]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Predicts `R̂` on `b` and compensates.
fn correct(src: &dyn FeatureSource, case: usize, level: usize, model: Option<&GbdtModel>, p_m: &ProbMap, b: &[usize]) -> Result<ProbMap> {
    match model {
        Some(m) if !b.is_empty() => {
            let rows = src.rows(case, level, b)?;
            let r_hat = gbdt_predict(m, &rows, src.dims(level))?;
            compensate(p_m, &r_hat, b)
        }
        _ => Ok(p_m.clone()),
    }
}

fn initial_map(src: &dyn FeatureSource, case: usize, model: &GbdtModel) -> Result<ProbMap> {
    let top = src.levels() - 1;
    let shape = src.shape(top);
    let all: Vec<usize> = (0..shape.iter().product()).collect();
    let pred = gbdt_predict(model, &src.rows(case, top, &all)?, src.dims(top))?;
    Ok(ProbMap::from_clamped(Grid3::new(shape, pred)?))
}

/// Trains the initial regressor and every corrector. `targets[c][l]` is the
/// ground truth of case `c` on level `l` (0 = finest).
pub fn train_decoder(
    src: &dyn FeatureSource,
    targets: &[Vec<ProbMap>],
    cfg: &DecoderConfig,
    seed: u64,
) -> Result<(DecoderModel, Vec<LevelLog>)> {
    cfg.roi.validate()?;
    let (cases, levels) = (src.cases(), src.levels());
    if cases == 0 || levels == 0 || targets.len() != cases {
        return Err(Error::InsufficientData("decoder needs targets for at least one case".into()));
    }
    for (c, t) in targets.iter().enumerate() {
        if t.len() != levels || (0..levels).any(|l| t[l].shape() != src.shape(l)) {
            return Err(Error::Shape(format!("case {c}: targets do not match the level grids")));
        }
    }
    let top = levels - 1;

    // initial regression on every coarsest-level voxel
    let n_top: usize = src.shape(top).iter().product();
    let all: Vec<usize> = (0..n_top).collect();
    let dims = src.dims(top);
    let per_case: Vec<Vec<f32>> = (0..cases).into_par_iter().map(|c| src.rows(c, top, &all)).collect::<Result<_>>()?;
    let x: Vec<f32> = per_case.concat();
    let y: Vec<f64> = targets.iter().flat_map(|t| t[top].data().iter().copied()).collect();
    let icfg = GbdtConfig { seed: derive_seed(seed, "initial", 0), ..cfg.initial.clone() };
    let initial = gbdt_fit(&x, dims, &y, &icfg)?;
    let pred = gbdt_predict(&initial, &x, dims)?;
    let initial_mse = mean(pred.iter().zip(&y).map(|(p, t)| (p.clamp(0.0, 1.0) - t).powi(2)));
    let ymean = mean(y.iter().copied());
    let target_variance = mean(y.iter().map(|v| (v - ymean).powi(2)));
    let mut p_m: Vec<ProbMap> = pred
        .chunks(n_top)
        .map(|c| Grid3::new(src.shape(top), c.to_vec()).map(ProbMap::from_clamped))
        .collect::<Result<_>>()?;
    drop((x, per_case));

    let mut correctors: Vec<Option<GbdtModel>> = vec![None; levels];
    let mut log = Vec::with_capacity(levels);
    for level in (0..levels).rev() {
        if level < top {
            p_m = p_m.iter().map(|p| upsample_trilinear(p, src.shape(level))).collect::<Result<_>>()?;
        }
        let residuals: Vec<Grid3<f64>> =
            (0..cases).map(|c| residual_target(&targets[c][level], &p_m[c])).collect::<Result<_>>()?;
        let rois: Vec<Vec<usize>> = (0..cases)
            .into_par_iter()
            .map(|c| roi_select(&p_m[c], Some(&residuals[c]), &cfg.roi))
            .collect();
        let roi_size: usize = rois.iter().map(Vec::len).sum();
        let dims = src.dims(level);
        let rows: Vec<Vec<f32>> =
            (0..cases).into_par_iter().map(|c| src.rows(c, level, &rois[c])).collect::<Result<_>>()?;
        let x: Vec<f32> = rows.concat();
        drop(rows);
        let y: Vec<f64> = (0..cases).flat_map(|c| rois[c].iter().map(|&i| residuals[c].data()[i]).collect::<Vec<_>>()).collect();

        let ccfg = GbdtConfig { seed: derive_seed(seed, "corrector", level as u64), ..cfg.corrector.clone() };
        let model = if roi_size >= 2 * ccfg.min_samples_leaf.max(1) {
            Some(gbdt_fit(&x, dims, &y, &ccfg)?)
        } else {
            log::info!("level {}: ROI of {roi_size} voxels, corrector skipped", level + 1);
            None
        };
        let r_hat = match &model {
            Some(m) => gbdt_predict(m, &x, dims)?,
            None => vec![0.0; y.len()],
        };
        drop(x);
        let mut k = 0;
        let (mut before, mut after) = (0.0, 0.0);
        for c in 0..cases {
            let (g, pm) = (targets[c][level].data(), p_m[c].data());
            for &i in &rois[c] {
                let pr = (pm[i] + r_hat[k]).clamp(0.0, 1.0);
                before += (g[i] - pm[i]).powi(2);
                after += (g[i] - pr).powi(2);
                k += 1;
            }
        }
        let denom = roi_size.max(1) as f64;
        let mean_abs_residual_roi =
            mean((0..cases).flat_map(|c| rois[c].iter().map(|&i| residuals[c].data()[i].abs()).collect::<Vec<_>>()));
        let mean_abs_residual_full = mean(residuals.iter().flat_map(|r| r.data().iter().map(|v| v.abs())));

        // propagate with the ROI rule used at inference
        let p_r: Vec<ProbMap> = (0..cases)
            .into_par_iter()
            .map(|c| {
                let b = roi_select(&p_m[c], None, &cfg.roi);
                correct(src, c, level, model.as_ref(), &p_m[c], &b)
            })
            .collect::<Result<_>>()?;
        let mean_abs_error = mean(
            (0..cases).flat_map(|c| {
                p_r[c].data().iter().zip(targets[c][level].data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
            }),
        );
        log.push(LevelLog {
            level: level + 1,
            roi_size,
            corrector_trees: model.as_ref().map_or(0, |m| m.trees.len()),
            roi_mse_before: before / denom,
            roi_mse_after: after / denom,
            mean_abs_residual_roi,
            mean_abs_residual_full,
            mean_abs_error,
            initial_mse: (level == top).then_some(initial_mse),
            target_variance: (level == top).then_some(target_variance),
        });
        correctors[level] = model;
        p_m = p_r;
    }
    Ok((DecoderModel { roi: cfg.roi.clone(), initial, correctors }, log))
}

/// Decodes one case; returns the per-level states, index 0 = finest.
pub fn decode(model: &DecoderModel, src: &dyn FeatureSource, case: usize) -> Result<Vec<LevelState>> {
    let levels = src.levels();
    if model.correctors.len() != levels {
        return Err(Error::Shape(format!(
            "decoder has {} levels, features have {levels}",
            model.correctors.len()
        )));
    }
    let mut states: Vec<LevelState> = Vec::with_capacity(levels);
    for level in (0..levels).rev() {
        let p_m = match states.last() {
            None => initial_map(src, case, &model.initial)?,
            Some(prev) => upsample_trilinear(&prev.p_r, src.shape(level))?,
        };
        let b = roi_select(&p_m, None, &model.roi);
        let p_r = correct(src, case, level, model.correctors[level].as_ref(), &p_m, &b)?;
        states.push(LevelState { level: level + 1, g: None, p_m, r: None, b, p_r });
    }
    states.reverse();
    Ok(states)
}

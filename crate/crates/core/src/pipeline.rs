//! Two-stage cascade: whole-volume localisation on a coarse grid, then gland
//! and zonal heads on a crop around the stage-1 centroid.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::LevelLog;
use crate::feat_learn::LevelFeatureModel;
use crate::gusl::{encode_all, fit_head, GuslConfig, GuslModel, Head};
use crate::metrics::{dsc, evaluate, CaseMetrics};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::saab::{encode, fit_encoder, EncoderModel};
use crate::volume::{generate_phantom, resize_linear, BinaryMask, Grid3, PhantomSpec, ProbMap, Shape3, Volume3D};
use crate::{derive_seed, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const PROFILES: [&str; 5] = ["keck-t2cube", "keck-t2w", "isbi2013", "promise12", "phantom"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileGrids {
    pub stage1: Shape3,
    pub stage2: Shape3,
}

pub fn profile_grids(name: &str) -> Result<ProfileGrids> {
    let (stage1, stage2) = match name {
        "keck-t2cube" => ([128, 128, 64], [96, 96, 80]),
        "keck-t2w" => ([128, 128, 24], [128, 128, 18]),
        "isbi2013" | "promise12" => ([128, 128, 32], [160, 160, 16]),
        "phantom" => ([64, 64, 32], [48, 48, 24]),
        _ => {
            return Err(Error::Invalid(format!(
                "unknown profile {name:?}; expected one of {}",
                PROFILES.join(", ")
            )))
        }
    };
    Ok(ProfileGrids { stage1, stage2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub profile: String,
    pub stage1: GuslConfig,
    pub stage2: GuslConfig,
    pub preprocess: PreprocessConfig,
    /// Crop box in original voxels; defaults to the stage-2 grid.
    pub crop_box: Option<Shape3>,
    /// Maximum training-crop displacement per axis, in voxels.
    pub crop_jitter: usize,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: "isbi2013".into(),
            stage1: GuslConfig::default(),
            stage2: GuslConfig::default(),
            preprocess: PreprocessConfig::default(),
            crop_box: None,
            crop_jitter: 4,
            threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    /// Defaults for a named profile. The phantom profile shrinks the model so
    /// that a 20-case cross-validation stays within desk-scale budgets.
    pub fn for_profile(name: &str) -> Result<Self> {
        profile_grids(name)?;
        let mut cfg = Self { profile: name.into(), ..Default::default() };
        if name == "phantom" {
            cfg.preprocess.clahe_tiles = [4, 4];
            for s in [&mut cfg.stage1, &mut cfg.stage2] {
                s.encoder.max_channels = 24;
                s.encoder.max_windows = 60_000;
                s.features.lnt.k = 16;
                s.features.n_keep_max = 96;
                s.features.max_samples = 8_000;
                for g in [&mut s.decoder.initial, &mut s.decoder.corrector] {
                    g.rounds = 60;
                    g.max_depth = 5;
                    g.exact_below = 0;
                }
            }
        }
        Ok(cfg)
    }

    /// Profile defaults overlaid with a (possibly partial) JSON document.
    pub fn from_json(doc: &serde_json::Value, profile_override: Option<&str>) -> Result<Self> {
        let profile = profile_override
            .map(str::to_owned)
            .or_else(|| doc.get("profile").and_then(|p| p.as_str()).map(str::to_owned))
            .unwrap_or_else(|| "phantom".into());
        let mut base = serde_json::to_value(Self::for_profile(&profile)?)?;
        merge_json(&mut base, doc);
        base["profile"] = serde_json::Value::String(profile);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grids(&self) -> Result<ProfileGrids> {
        profile_grids(&self.profile)
    }

    pub fn validate(&self) -> Result<()> {
        self.grids()?;
        self.preprocess.validate()?;
        for s in [&self.stage1, &self.stage2] {
            s.decoder.roi.validate()?;
            s.decoder.initial.validate()?;
            s.decoder.corrector.validate()?;
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Invalid(format!("threshold must lie in [0, 1), got {}", self.threshold)));
        }
        if self.crop_box.is_some_and(|b| b.contains(&0)) {
            return Err(Error::Invalid("crop box sides must be >= 1".into()));
        }
        Ok(())
    }
}

/// Recursively overwrites `base` with the entries of `over`.
pub fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// One labelled training or evaluation case.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub volume: Volume3D,
    pub gland: BinaryMask,
    pub tz: Option<BinaryMask>,
    pub pz: Option<BinaryMask>,
}

impl Case {
    fn validate(&self) -> Result<()> {
        let s = self.volume.shape();
        for (name, m) in [("gland", Some(&self.gland)), ("tz", self.tz.as_ref()), ("pz", self.pz.as_ref())] {
            if let Some(m) = m {
                if m.shape() != s {
                    return Err(Error::Shape(format!(
                        "case {}: {name} mask {:?} does not match volume {s:?}",
                        self.id,
                        m.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `n` seeded default phantoms with zonal masks, ids `phantom_000`, ...
pub fn phantom_cases(n: usize, seed: u64) -> Result<Vec<Case>> {
    phantom_cases_from(&PhantomSpec::default(), n, seed)
}

/// Like [`phantom_cases`], with every case derived from `base` (its own
/// `seed` field is replaced per case).
pub fn phantom_cases_from(base: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<Case>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = PhantomSpec { seed: derive_seed(seed, "phantom", i as u64), ..base.clone() };
            let p = generate_phantom(&spec)?;
            Ok(Case { id: format!("phantom_{i:03}"), volume: p.volume, gland: p.gland, tz: Some(p.tz), pz: Some(p.pz) })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub center: [usize; 3],
    pub size: Shape3,
    pub start: [usize; 3],
}

impl CropSpec {
    /// A box of `size` (shrunk to fit) centred on `center`, shifted inside
    /// `bounds`.
    pub fn new(center: [usize; 3], size: Shape3, bounds: Shape3) -> Self {
        let size: Shape3 = std::array::from_fn(|a| size[a].min(bounds[a]).max(1));
        let start = std::array::from_fn(|a| {
            let s = center[a] as isize - (size[a] / 2) as isize;
            s.clamp(0, (bounds[a] - size[a]) as isize) as usize
        });
        Self { center, size, start }
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.start[a] + self.size[a])
    }

    /// Fraction of the mask's voxels inside the box (1 for an empty mask).
    pub fn containment(&self, m: &BinaryMask) -> f64 {
        let total = m.count();
        if total == 0 {
            return 1.0;
        }
        let g = m.grid();
        let inside = (0..g.len())
            .filter(|&i| g.data()[i] == 1 && {
                let [x, y, z] = g.coords(i);
                self.contains(x, y, z)
            })
            .count();
        inside as f64 / total as f64
    }
}

/// `p > t`, strictly.
pub fn threshold(p: &ProbMap, t: f64) -> BinaryMask {
    BinaryMask::new(p.grid().map(|v| u8::from(v > t))).expect("threshold output is binary")
}

/// Crop box centred on the rounded centroid of `p > 0.5`, or on the volume
/// centre when that mask is empty.
pub fn crop_from_mask(p: &ProbMap, size: Shape3) -> CropSpec {
    let shape = p.shape();
    let center = match threshold(p, 0.5).centroid() {
        Some(c) => std::array::from_fn(|a| (c[a].round() as usize).min(shape[a] - 1)),
        None => std::array::from_fn(|a| shape[a] / 2),
    };
    CropSpec::new(center, size, shape)
}

fn crop_volume(v: &Volume3D, c: &CropSpec) -> Result<Volume3D> {
    let grid = v.grid.crop(c.start, c.size)?;
    let origin = std::array::from_fn(|a| v.origin[a] + c.start[a] as f64 * v.spacing[a]);
    Volume3D::new(grid, v.spacing, origin)
}

fn label_map(m: &BinaryMask, target: Shape3) -> ProbMap {
    ProbMap::from_clamped(resize_linear(ProbMap::from_mask(m).grid(), target))
}

fn crop_label(m: &BinaryMask, c: &CropSpec, target: Shape3) -> Result<ProbMap> {
    let g = m.grid().crop(c.start, c.size)?;
    Ok(label_map(&BinaryMask::new(g)?, target))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub format_version: u32,
    pub config: PipelineConfig,
    pub grids: ProfileGrids,
    pub stage1: GuslModel,
    pub stage2_encoder: EncoderModel,
    pub gland: Head,
    pub tz: Option<Head>,
    pub pz: Option<Head>,
}

impl CascadeModel {
    pub fn crop_box(&self) -> Shape3 {
        self.config.crop_box.unwrap_or(self.grids.stage2)
    }
}

/// Decoder training logs of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLog {
    pub head: String,
    pub levels: Vec<LevelLog>,
}

/// Trains both stages; TZ and PZ heads are trained iff every case has the
/// corresponding mask.
pub fn train(cases: &[Case], cfg: &PipelineConfig, seed: u64) -> Result<(CascadeModel, Vec<HeadLog>)> {
    cfg.validate()?;
    if cases.len() < 5 {
        return Err(Error::InsufficientData(format!("training needs at least 5 cases, got {}", cases.len())));
    }
    for c in cases {
        c.validate()?;
    }
    let grids = cfg.grids()?;
    let mut logs = Vec::new();

    let vols1: Vec<Volume3D> =
        cases.par_iter().map(|c| preprocess(&c.volume, grids.stage1, &cfg.preprocess)).collect::<Result<_>>()?;
    let labels1: Vec<ProbMap> = cases.iter().map(|c| label_map(&c.gland, grids.stage1)).collect();
    let enc1 = fit_encoder(&vols1, &cfg.stage1.encoder, derive_seed(seed, "stage1-encoder", 0))?;
    let encoded = encode_all(&enc1, &vols1)?;
    drop(vols1);
    let (head1, log) = fit_head(&encoded, &labels1, &cfg.stage1, derive_seed(seed, "stage1-head", 0))?;
    drop(encoded);
    logs.push(HeadLog { head: "stage1".into(), levels: log });

    let jitter = cfg.crop_jitter as i64;
    let crops: Vec<CropSpec> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let shape = c.volume.shape();
            let centroid = c.gland.centroid().unwrap_or(shape.map(|n| n as f64 / 2.0));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "crop-jitter", i as u64));
            let center = std::array::from_fn(|a| {
                let j = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
                (centroid[a].round() as i64 + j).clamp(0, shape[a] as i64 - 1) as usize
            });
            CropSpec::new(center, cfg.crop_box.unwrap_or(grids.stage2), shape)
        })
        .collect();
    let vols2: Vec<Volume3D> = cases
        .par_iter()
        .zip(&crops)
        .map(|(c, crop)| preprocess(&crop_volume(&c.volume, crop)?, grids.stage2, &cfg.preprocess))
        .collect::<Result<_>>()?;
    let enc2 = fit_encoder(&vols2, &cfg.stage2.encoder, derive_seed(seed, "stage2-encoder", 0))?;
    let encoded = encode_all(&enc2, &vols2)?;
    drop(vols2);

    let mut head_for = |name: &str, pick: &dyn Fn(&Case) -> Option<&BinaryMask>| -> Result<Option<Head>> {
        if !cases.iter().all(|c| pick(c).is_some()) {
            return Ok(None);
        }
        let labels: Vec<ProbMap> = cases
            .iter()
            .zip(&crops)
            .map(|(c, crop)| crop_label(pick(c).unwrap(), crop, grids.stage2))
            .collect::<Result<_>>()?;
        let (head, log) = fit_head(&encoded, &labels, &cfg.stage2, derive_seed(seed, name, 0))?;
        logs.push(HeadLog { head: name.into(), levels: log });
        Ok(Some(head))
    };
    let gland = head_for("gland", &|c| Some(&c.gland))?.expect("gland masks always present");
    let tz = head_for("tz", &|c| c.tz.as_ref())?;
    let pz = head_for("pz", &|c| c.pz.as_ref())?;

    let model = CascadeModel {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        grids,
        stage1: GuslModel { encoder: enc1, head: head1 },
        stage2_encoder: enc2,
        gland,
        tz,
        pz,
    };
    Ok((model, logs))
}

/// Probability maps at the original resolution.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub stage1: ProbMap,
    pub crop: CropSpec,
    pub gland: ProbMap,
    pub tz: Option<ProbMap>,
    pub pz: Option<ProbMap>,
}

impl Segmentation {
    pub fn masks(&self, t: f64) -> (BinaryMask, Option<BinaryMask>, Option<BinaryMask>) {
        (
            threshold(&self.gland, t),
            self.tz.as_ref().map(|p| threshold(p, t)),
            self.pz.as_ref().map(|p| threshold(p, t)),
        )
    }
}

fn paste(p: &ProbMap, crop: &CropSpec, shape: Shape3) -> ProbMap {
    let local = resize_linear(p.grid(), crop.size);
    let mut out = Grid3::filled(shape, 0.0f64);
    for x in 0..crop.size[0] {
        for y in 0..crop.size[1] {
            for z in 0..crop.size[2] {
                out.set(crop.start[0] + x, crop.start[1] + y, crop.start[2] + z, local.get(x, y, z));
            }
        }
    }
    ProbMap::from_clamped(out)
}

pub fn infer(model: &CascadeModel, vol: &Volume3D) -> Result<Segmentation> {
    let cfg = &model.config;
    let shape = vol.shape();
    let v1 = preprocess(vol, model.grids.stage1, &cfg.preprocess)?;
    let p1 = model.stage1.predict(&v1)?;
    let stage1 = ProbMap::from_clamped(resize_linear(p1.grid(), shape));
    let crop = crop_from_mask(&stage1, model.crop_box());
    let v2 = preprocess(&crop_volume(vol, &crop)?, model.grids.stage2, &cfg.preprocess)?;
    let enc = encode(&model.stage2_encoder, &v2)?;
    let run = |h: &Head| -> Result<ProbMap> { Ok(paste(&h.predict(&enc)?, &crop, shape)) };
    Ok(Segmentation {
        gland: run(&model.gland)?,
        tz: model.tz.as_ref().map(run).transpose()?,
        pz: model.pz.as_ref().map(run).transpose()?,
        stage1,
        crop,
    })
}

/// Seeded case partition: shuffled positions `i` go to fold `i % k`.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Invalid(format!("need 2 <= folds <= cases, got {k} folds for {n} cases")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "folds", 0)));
    let mut folds = vec![Vec::new(); k];
    for (i, &c) in perm.iter().enumerate() {
        folds[i % k].push(c);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    /// Sample standard deviation (`n − 1`); zero for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: None, std: None, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean: Some(mean), std: Some(std), n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub dsc: MeanStd,
    pub abd: MeanStd,
    pub hd95: MeanStd,
}

impl TargetSummary {
    pub fn of<'a>(m: impl Iterator<Item = &'a CaseMetrics> + Clone) -> Self {
        Self {
            dsc: MeanStd::of(&m.clone().map(|c| c.dsc).collect::<Vec<_>>()),
            abd: MeanStd::of(&m.clone().filter_map(|c| c.abd).collect::<Vec<_>>()),
            hd95: MeanStd::of(&m.filter_map(|c| c.hd95).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub fold: usize,
    pub gland: CaseMetrics,
    pub tz: Option<CaseMetrics>,
    pub pz: Option<CaseMetrics>,
    pub stage1_dsc: f64,
    pub crop_containment: f64,
    /// Voxels predicted as both TZ and PZ.
    pub tz_pz_overlap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub gland: TargetSummary,
    pub tz: Option<TargetSummary>,
    pub pz: Option<TargetSummary>,
}

impl Summary {
    fn of(cases: &[&CaseReport]) -> Self {
        let zone = |f: fn(&CaseReport) -> Option<&CaseMetrics>| {
            let v: Vec<&CaseMetrics> = cases.iter().filter_map(|c| f(c)).collect();
            (!v.is_empty()).then(|| TargetSummary::of(v.into_iter()))
        };
        Self {
            gland: TargetSummary::of(cases.iter().map(|c| &c.gland)),
            tz: zone(|c| c.tz.as_ref()),
            pz: zone(|c| c.pz.as_ref()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_cases: Vec<String>,
    pub test_cases: Vec<String>,
    pub summary: Summary,
    pub logs: Vec<HeadLog>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: Vec<FoldReport>,
    pub cases: Vec<CaseReport>,
    pub summary: Summary,
    pub seconds: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl CrossvalReport {
    /// One row per fold plus a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for t in ["gland", "tz", "pz"] {
            for m in ["dsc", "abd", "hd95"] {
                out += &format!(",{t}_{m}_mean,{t}_{m}_std");
            }
        }
        out.push('\n');
        let row = |name: String, s: &Summary| {
            let mut line = name;
            for t in [Some(&s.gland), s.tz.as_ref(), s.pz.as_ref()] {
                for m in [t.map(|t| &t.dsc), t.map(|t| &t.abd), t.map(|t| &t.hd95)] {
                    line += &format!(",{},{}", fmt_opt(m.and_then(|m| m.mean)), fmt_opt(m.and_then(|m| m.std)));
                }
            }
            line + "\n"
        };
        for f in &self.folds {
            out += &row(format!("fold{}", f.fold), &f.summary);
        }
        out += &row("summary".into(), &self.summary);
        out
    }
}

/// Scores one prediction against its case.
pub fn score_case(case: &Case, seg: &Segmentation, t: f64, fold: usize) -> Result<CaseReport> {
    let sp = case.volume.spacing;
    let (g, tz, pz) = seg.masks(t);
    let zone = |pred: Option<&BinaryMask>, gt: Option<&BinaryMask>| -> Result<Option<CaseMetrics>> {
        match (pred, gt) {
            (Some(p), Some(g)) => Ok(Some(evaluate(p, g, sp)?)),
            _ => Ok(None),
        }
    };
    let overlap = match (&tz, &pz) {
        (Some(a), Some(b)) => Some(a.data().iter().zip(b.data()).filter(|(x, y)| **x == 1 && **y == 1).count()),
        _ => None,
    };
    Ok(CaseReport {
        id: case.id.clone(),
        fold,
        gland: evaluate(&g, &case.gland, sp)?,
        tz: zone(tz.as_ref(), case.tz.as_ref())?,
        pz: zone(pz.as_ref(), case.pz.as_ref())?,
        stage1_dsc: dsc(&threshold(&seg.stage1, 0.5), &case.gland)?,
        crop_containment: seg.crop.containment(&case.gland),
        tz_pz_overlap: overlap,
    })
}

pub fn crossval(cases: &[Case], cfg: &PipelineConfig, folds: usize, seed: u64) -> Result<CrossvalReport> {
    let start = Instant::now();
    let parts = fold_partition(cases.len(), folds, seed)?;
    let mut fold_reports = Vec::with_capacity(folds);
    let mut case_reports = Vec::with_capacity(cases.len());
    for (f, test) in parts.iter().enumerate() {
        let t0 = Instant::now();
        let train_set: Vec<Case> =
            (0..cases.len()).filter(|i| !test.contains(i)).map(|i| cases[i].clone()).collect();
        let (model, logs) = train(&train_set, cfg, derive_seed(seed, "fold", f as u64))?;
        let reports: Vec<CaseReport> = test
            .par_iter()
            .map(|&i| score_case(&cases[i], &infer(&model, &cases[i].volume)?, cfg.threshold, f))
            .collect::<Result<_>>()?;
        let refs: Vec<&CaseReport> = reports.iter().collect();
        log::info!(
            "fold {f}: gland DSC {:.4}",
            Summary::of(&refs).gland.dsc.mean.unwrap_or(f64::NAN)
        );
        fold_reports.push(FoldReport {
            fold: f,
            train_cases: train_set.iter().map(|c| c.id.clone()).collect(),
            test_cases: test.iter().map(|&i| cases[i].id.clone()).collect(),
            summary: Summary::of(&refs),
            logs,
            seconds: t0.elapsed().as_secs_f64(),
        });
        case_reports.extend(reports);
    }
    case_reports.sort_by(|a, b| a.id.cmp(&b.id));
    let refs: Vec<&CaseReport> = case_reports.iter().collect();
    Ok(CrossvalReport {
        summary: Summary::of(&refs),
        folds: fold_reports,
        cases: case_reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub saab: usize,
    pub lnt: usize,
    pub trees: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub parameters: usize,
    pub breakdown: ParamBreakdown,
    pub macs: u64,
    pub mac_formula: String,
}

pub const MAC_FORMULA: &str = "per stage: sum over levels of voxels x (Saab anchor length x kept channels); \
per head and level: voxels x (input size of every selected LNT feature + 1) + voxels x trees x max depth \
for the level's regressors (ROI bounded by the full grid)";

fn encoder_macs(e: &EncoderModel) -> u64 {
    e.level_shapes()
        .iter()
        .zip(&e.levels)
        .map(|(s, l)| (s.iter().product::<usize>() * l.macs_per_voxel()) as u64)
        .sum()
}

fn head_macs(h: &Head, shapes: &[Shape3]) -> u64 {
    let lnt_cost = |f: &LevelFeatureModel| -> usize {
        let e = f.expanded_dims();
        f.selected.iter().filter(|&&d| d >= e).map(|&d| f.lnt.subsets[d - e].len() + 1).sum()
    };
    let mut total = 0u64;
    for (l, (f, s)) in h.features.iter().zip(shapes).enumerate() {
        let n = s.iter().product::<usize>() as u64;
        let mut trees = h.decoder.correctors[l].as_ref().map_or(0, |m| m.trees.len() * m.max_depth());
        if l + 1 == shapes.len() {
            trees += h.decoder.initial.trees.len() * h.decoder.initial.max_depth();
        }
        total += n * (lnt_cost(f) + trees) as u64;
    }
    total
}

fn head_breakdown(h: &Head) -> ParamBreakdown {
    ParamBreakdown {
        saab: 0,
        lnt: h.features.iter().map(LevelFeatureModel::param_count).sum(),
        trees: h.decoder.param_count(),
    }
}

pub fn model_report(model: &CascadeModel) -> ModelReport {
    let heads: Vec<&Head> =
        [Some(&model.stage1.head), Some(&model.gland), model.tz.as_ref(), model.pz.as_ref()].into_iter().flatten().collect();
    let mut b = ParamBreakdown {
        saab: model.stage1.encoder.param_count() + model.stage2_encoder.param_count(),
        lnt: 0,
        trees: 0,
    };
    for h in &heads {
        let hb = head_breakdown(h);
        b.lnt += hb.lnt;
        b.trees += hb.trees;
    }
    let s1 = model.stage1.encoder.level_shapes();
    let s2 = model.stage2_encoder.level_shapes();
    let macs = encoder_macs(&model.stage1.encoder)
        + encoder_macs(&model.stage2_encoder)
        + head_macs(&model.stage1.head, &s1)
        + heads[1..].iter().map(|h| head_macs(h, &s2)).sum::<u64>();
    ModelReport {
        parameters: b.saab + b.lnt + b.trees,
        breakdown: b,
        macs,
        mac_formula: MAC_FORMULA.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_match_table() {
        let g = profile_grids("isbi2013").unwrap();
        assert_eq!((g.stage1, g.stage2), ([128, 128, 32], [160, 160, 16]));
        assert_eq!(profile_grids("keck-t2cube").unwrap().stage2, [96, 96, 80]);
        assert_eq!(profile_grids("keck-t2w").unwrap().stage1, [128, 128, 24]);
        assert_eq!(profile_grids("promise12").unwrap().stage2, [160, 160, 16]);
        assert!(profile_grids("nope").is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let p = ProbMap::new(Grid3::filled([2, 2, 2], 0.6)).unwrap();
        assert_eq!(threshold(&p, 0.5).count(), 8);
        let h = ProbMap::new(Grid3::filled([2, 2, 2], 0.5)).unwrap();
        assert_eq!(threshold(&h, 0.5).count(), 0);
    }

    #[test]
    fn crop_centres() {
        let mut g = Grid3::filled([20, 20, 10], 0.0);
        g.set(10, 12, 5, 1.0);
        let c = crop_from_mask(&ProbMap::new(g).unwrap(), [6, 6, 4]);
        assert_eq!(c.center, [10, 12, 5]);
        assert!(c.contains(10, 12, 5));
        let e = crop_from_mask(&ProbMap::zeros([20, 20, 10]), [6, 6, 4]);
        assert_eq!(e.center, [10, 10, 5]);
        let edge = CropSpec::new([0, 19, 9], [6, 6, 40], [20, 20, 10]);
        assert_eq!(edge.start, [0, 14, 0]);
        assert_eq!(edge.size, [6, 6, 10]);
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let f = fold_partition(22, 5, 3).unwrap();
        let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..22).collect::<Vec<_>>());
        assert_eq!(f, fold_partition(22, 5, 3).unwrap());
        assert!(fold_partition(3, 5, 0).is_err());
    }

    #[test]
    fn config_overrides_merge() {
        let doc = serde_json::json!({"stage1": {"decoder": {"roi": {"radius": 3.0}}}, "threshold": 0.4});
        let cfg = PipelineConfig::from_json(&doc, Some("phantom")).unwrap();
        assert_eq!(cfg.stage1.decoder.roi.radius, 3.0);
        assert_eq!(cfg.stage1.decoder.roi.t_lo, 0.02);
        assert_eq!(cfg.stage1.features.lnt.k, 16);
        assert_eq!(cfg.threshold, 0.4);
        assert!(PipelineConfig::from_json(&serde_json::json!({"profile": "bogus"}), None).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, Some(2.0));
        assert!((m.std.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[]).mean, None);
    }
}

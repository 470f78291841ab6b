mod data;
mod overlay;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gusl_core::bundle::{load_model, save_model, MANIFEST};
use gusl_core::metrics::CaseMetrics;
use gusl_core::pipeline::{
    crossval, infer, model_report, phantom_cases_from, train, MeanStd, PipelineConfig, TargetSummary,
};
use gusl_core::volume::{load_nifti, BinaryMask, PhantomSpec};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "gusl", version, about = "Feed-forward prostate segmentation: phantoms, training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; values override the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset profile (keck-t2cube, keck-t2w, isbi2013, promise12, phantom).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; every file the command writes goes below it.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Train a cascade on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment volumes with a trained model.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Model bundle, or a `train` output directory.
        #[arg(long)]
        model: PathBuf,
        /// `.nii` files or case directories holding `image.nii`.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// K-fold cross-validation on a dataset directory.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Parameter and multiply-accumulate counts of a model.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// PNG slices with mask contours (gland yellow, TZ red, PZ green).
    Overlay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gland: Option<PathBuf>,
        #[arg(long)]
        tz: Option<PathBuf>,
        #[arg(long)]
        pz: Option<PathBuf>,
        /// `all`, `mid`, or comma-separated axial indices.
        #[arg(long, default_value = "mid")]
        slices: String,
        /// Integer pixel magnification.
        #[arg(long, default_value_t = 1)]
        scale: u32,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common, .. }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::Crossval { common, .. }
            | Command::Report { common, .. }
            | Command::Overlay { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Crossval { .. } => "crossval",
            Command::Report { .. } => "report",
            Command::Overlay { .. } => "overlay",
        }
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: serde_json::Value,
    args: Vec<String>,
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read(path).map_err(|e| gusl_core::Error::io(path, e))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn pipeline_config(c: &Common) -> Result<PipelineConfig> {
    let doc = match &c.config {
        Some(p) => read_json(p)?,
        None => serde_json::json!({}),
    };
    Ok(PipelineConfig::from_json(&doc, c.profile.as_deref())?)
}

fn seed_of(c: &Common) -> Result<u64> {
    if let Some(s) = c.seed {
        return Ok(s);
    }
    if let Some(p) = &c.config {
        if let Some(s) = read_json(p)?.get("seed") {
            return s.as_u64().context("config field `seed` must be a non-negative integer");
        }
    }
    Ok(0)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| gusl_core::Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_vec_pretty(v)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| gusl_core::Error::io(path, e))?;
    Ok(())
}

fn write_run_info(cmd: &Command, seed: u64, config: serde_json::Value) -> Result<()> {
    let bytes = serde_json::to_vec(&config)?;
    let info = RunInfo {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256: hex::encode(Sha256::digest(&bytes)),
        config,
        args: std::env::args().skip(1).collect(),
    };
    write_json(&cmd.common().out.join("run.json"), &info)
}

/// Accepts a bundle directory or a `train` output holding `model/`.
fn resolve_model(p: &Path) -> PathBuf {
    let nested = p.join("model");
    if !p.join(MANIFEST).exists() && nested.join(MANIFEST).exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

#[derive(Serialize)]
struct EvalRow {
    id: String,
    gland: CaseMetrics,
    tz: Option<CaseMetrics>,
    pz: Option<CaseMetrics>,
}

#[derive(Serialize)]
struct EvalReport {
    cases: Vec<EvalRow>,
    gland: TargetSummary,
    tz: Option<TargetSummary>,
    pz: Option<TargetSummary>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn summary_row(name: &str, s: &TargetSummary) -> String {
    let ms = |m: &MeanStd| format!("{},{}", fmt_opt(m.mean), fmt_opt(m.std));
    format!("summary_{name},{},{},{}\n", ms(&s.dsc), ms(&s.abd), ms(&s.hd95))
}

fn run(cmd: Command) -> Result<()> {
    let common = cmd.common().clone();
    if let Some(j) = common.jobs {
        if j == 0 {
            bail!(gusl_core::Error::Invalid("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().ok();
    }
    let seed = seed_of(&common)?;
    let out = common.out.clone();
    match &cmd {
        Command::Phantom { n, .. } => {
            if *n == 0 {
                bail!(gusl_core::Error::Invalid("--n must be >= 1".into()));
            }
            let doc = match &common.config {
                Some(p) => read_json(p)?,
                None => serde_json::json!({}),
            };
            let spec: PhantomSpec = serde_json::from_value(doc.get("phantom").cloned().unwrap_or(doc.clone()))
                .map_err(|e| gusl_core::Error::Invalid(format!("phantom spec: {e}")))?;
            spec.validate()?;
            let cases = phantom_cases_from(&spec, *n, seed)?;
            create_dir(&out)?;
            let files = data::write_dataset(&out, &cases)?;
            write_json(&out.join("manifest.json"), &serde_json::json!({ "seed": seed, "spec": spec, "files": files }))?;
            write_run_info(&cmd, seed, serde_json::to_value(&spec)?)?;
            println!("wrote {} cases ({} files) to {}", cases.len(), files.len(), out.display());
        }
        Command::Train { data, .. } => {
            let cfg = pipeline_config(&common)?;
            let cases = data::load_dataset(data)?;
            let (model, logs) = train(&cases, &cfg, seed)?;
            create_dir(&out)?;
            save_model(&model, &out.join("model"))?;
            write_json(&out.join("train_log.json"), &logs)?;
            write_run_info(&cmd, seed, serde_json::to_value(&cfg)?)?;
            println!("trained on {} cases; model written to {}", cases.len(), out.join("model").display());
        }
        Command::Infer { model, input, .. } => {
            let model = load_model(&resolve_model(model))?;
            create_dir(&out)?;
            for path in input {
                let (name, image) = data::resolve_input(path)?;
                let vol = load_nifti(&image)?;
                let seg = infer(&model, &vol)?;
                let dir = out.join(&name);
                create_dir(&dir)?;
                let (g, tz, pz) = seg.masks(model.config.threshold);
                data::write_prediction(&dir, "gland", &g, &seg.gland, &vol)?;
                if let (Some(m), Some(p)) = (&tz, &seg.tz) {
                    data::write_prediction(&dir, "tz", m, p, &vol)?;
                }
                if let (Some(m), Some(p)) = (&pz, &seg.pz) {
                    data::write_prediction(&dir, "pz", m, p, &vol)?;
                }
                write_json(&dir.join("crop.json"), &seg.crop)?;
                println!("{name}: {} gland voxels", g.count());
            }
            write_run_info(&cmd, seed, serde_json::to_value(&model.config)?)?;
        }
        Command::Eval { pred, gt, .. } => {
            let truth = data::load_dataset(gt)?;
            let mut rows = Vec::with_capacity(truth.len());
            for c in &truth {
                let sp = c.volume.spacing;
                let load = |name: &str| -> Result<BinaryMask> {
                    Ok(BinaryMask::from_volume(&load_nifti(pred.join(&c.id).join(format!("{name}.nii")))?)?)
                };
                let zone = |name: &str, gt: Option<&BinaryMask>| -> Result<Option<CaseMetrics>> {
                    gt.map(|g| Ok(gusl_core::metrics::evaluate(&load(name)?, g, sp)?)).transpose()
                };
                rows.push(EvalRow {
                    id: c.id.clone(),
                    gland: gusl_core::metrics::evaluate(&load("gland")?, &c.gland, sp)?,
                    tz: zone("tz", c.tz.as_ref())?,
                    pz: zone("pz", c.pz.as_ref())?,
                });
            }
            let zone_summary = |f: fn(&EvalRow) -> Option<&CaseMetrics>| {
                let v: Vec<&CaseMetrics> = rows.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| TargetSummary::of(v.into_iter()))
            };
            let report = EvalReport {
                gland: TargetSummary::of(rows.iter().map(|r| &r.gland)),
                tz: zone_summary(|r| r.tz.as_ref()),
                pz: zone_summary(|r| r.pz.as_ref()),
                cases: rows,
            };
            let mut csv = String::from("case,target,dsc,abd,hd95\n");
            for r in &report.cases {
                for (t, m) in [("gland", Some(&r.gland)), ("tz", r.tz.as_ref()), ("pz", r.pz.as_ref())] {
                    if let Some(m) = m {
                        csv += &format!("{},{t},{:.6},{},{}\n", r.id, m.dsc, fmt_opt(m.abd), fmt_opt(m.hd95));
                    }
                }
            }
            csv += "row,dsc_mean,dsc_std,abd_mean,abd_std,hd95_mean,hd95_std\n";
            for (t, s) in [("gland", Some(&report.gland)), ("tz", report.tz.as_ref()), ("pz", report.pz.as_ref())] {
                if let Some(s) = s {
                    csv += &summary_row(t, s);
                }
            }
            create_dir(&out)?;
            write_json(&out.join("metrics.json"), &report)?;
            write_file(&out.join("metrics.csv"), csv)?;
            write_run_info(&cmd, seed, serde_json::json!({ "pred": pred, "gt": gt }))?;
            println!("gland DSC {:.4} over {} cases", report.gland.dsc.mean.unwrap_or(f64::NAN), report.cases.len());
        }
        Command::Crossval { data, folds, .. } => {
            let cfg = pipeline_config(&common)?;
            let cases = data::load_dataset(data)?;
            let report = crossval(&cases, &cfg, *folds, seed)?;
            create_dir(&out)?;
            write_json(&out.join("crossval.json"), &report)?;
            write_file(&out.join("crossval.csv"), report.to_csv())?;
            write_run_info(&cmd, seed, serde_json::to_value(&cfg)?)?;
            print!("{}", report.to_csv());
        }
        Command::Report { model, .. } => {
            let m = load_model(&resolve_model(model))?;
            let r = model_report(&m);
            create_dir(&out)?;
            write_json(&out.join("report.json"), &r)?;
            write_run_info(&cmd, seed, serde_json::to_value(&m.config)?)?;
            println!("{} parameters, {} MACs per inference", r.parameters, r.macs);
        }
        Command::Overlay { image, gland, tz, pz, slices, scale, .. } => {
            let vol = load_nifti(image)?;
            let load = |p: &Option<PathBuf>| -> Result<Option<BinaryMask>> {
                p.as_ref().map(|p| Ok(BinaryMask::from_volume(&load_nifti(p)?)?)).transpose()
            };
            let masks = overlay::Masks { gland: load(gland)?, tz: load(tz)?, pz: load(pz)? };
            let picked = overlay::parse_slices(slices, vol.shape()[2])?;
            create_dir(&out)?;
            let written = overlay::write_overlays(&vol, &masks, &picked, *scale, &out)?;
            write_run_info(&cmd, seed, serde_json::json!({ "slices": slices, "scale": scale }))?;
            println!("wrote {} overlay(s) to {}", written, out.display());
        }
    }
    Ok(())
}

/// 2 when the failure came from the filesystem, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.downcast_ref::<gusl_core::Error>().is_some_and(gusl_core::Error::is_io) || c.downcast_ref::<std::io::Error>().is_some()
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

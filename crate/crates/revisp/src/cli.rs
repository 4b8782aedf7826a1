//! Command-line surface. Failures print one JSON error record to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use revisp_core::gradient_suite::gradient_suite;
use revisp_core::metrics::{
    raw_to_lab, split_protocol, EvalReport, EvalRow, HistogramSet, RunInfo,
};
use revisp_core::pseudo_pairs::{isp_rand, CcmPool};
use revisp_core::selector::Model;
use revisp_core::trainer::{Trainer, TrainingSet};
use revisp_core::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{checkpoint_id, read_header, Checkpoint};
use crate::config::RunConfig;
use crate::error::{format_err, io_err, Error, ErrorRecord, Result};
use crate::image_io::{load_raw, load_rgb, save_raw, save_rgb, sidecar_path, RawSidecar};
use crate::manifest::{Manifest, ManifestEntry};
use crate::report::{append_metrics, write_report_csv, write_report_json, RunRecord};

/// Caps the worker pool when set.
pub const THREADS_ENV: &str = "SRISP_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.srisp";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "revisp",
    version,
    about = "Reference-guided RGB to RAW conversion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the RAW images of a manifest.
    Train(TrainArgs),
    /// Convert an RGB image into a RAW-like image resembling a reference.
    Convert(ConvertArgs),
    /// Render randomized pseudo-RGB images for the RAWs of a manifest.
    GenPseudo(GenPseudoArgs),
    /// Paired PSNR and angular error with the half-split protocol.
    EvalPaired(EvalPairedArgs),
    /// Lab histogram intersection between two RAW sets.
    EvalHi(EvalHiArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's header.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, metrics and the run record.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration JSON; defaults apply to missing fields.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Total epochs to reach, overriding the configuration.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint at its epoch boundary.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also keep a checkpoint every N epochs (0 = only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// 8-bit RGB image.
    #[arg(long)]
    pub input: PathBuf,
    /// 16-bit RAW PNG whose look the output should match.
    #[arg(long)]
    pub reference: PathBuf,
    /// Sidecar of the reference; defaults to the `.json` beside it.
    #[arg(long)]
    pub reference_meta: Option<PathBuf>,
    /// Output RAW PNG; its sidecar copies the reference's.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the EMA teacher instead of the student.
    #[arg(long)]
    pub teacher: bool,
}

#[derive(Debug, Args)]
pub struct GenPseudoArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON array of `{name, ccm}` records replacing the built-in matrices.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Run configuration whose `rand_isp` section sets the ranges.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPairedArgs {
    /// Entries with `raw_path` plus `pred_path`, or `rgb_path` with `--ckpt`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub teacher: bool,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalHiArgs {
    /// Manifest of generated RAW images.
    #[arg(long)]
    pub generated: PathBuf,
    /// Manifest of real RAW images.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Case list JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Parses `std::env::args`, runs the command and maps failures to exit codes:
/// 2 for usage errors, 1 for everything else.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit(&ErrorRecord::new(
                "usage",
                e.render().to_string().trim_end(),
            ));
            return ExitCode::from(2);
        }
    };
    if let Err(msg) = init_threads() {
        emit(&ErrorRecord::new("usage", msg));
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit(&e.record());
            ExitCode::from(1)
        }
    }
}

fn emit(record: &ErrorRecord) {
    eprintln!(
        "{}",
        serde_json::to_string(record).expect("record serializes")
    );
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Convert(a) => convert(a),
        Command::GenPseudo(a) => gen_pseudo(a),
        Command::EvalPaired(a) => eval_paired(a),
        Command::EvalHi(a) => eval_hi(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("value serializes")
    );
}

/// `out.png` → `out.run.json`.
fn run_record_beside(file: &Path) -> PathBuf {
    file.with_extension("run.json")
}

/// PP_rand rendering of each RAW, seeded per image so order and threads do not matter.
pub fn render_pseudo(raws: &[Tensor], config: &RunConfig) -> Result<Vec<Tensor>> {
    let cfg = &config.rand_isp;
    raws.par_iter()
        .enumerate()
        .map(|(i, raw)| Ok(isp_rand(raw, cfg, &mut cfg.rng_for(i as u64))?))
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut config, resumed) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => {
            let cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            (a.seed.map_or(cfg.clone(), |s| cfg.with_seed(s)), None)
        }
    };
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    config.validate(a.config.as_deref().unwrap_or(&a.manifest))?;

    let manifest = Manifest::load(&a.manifest)?;
    let raws = manifest
        .raw_indices()
        .into_par_iter()
        .map(|i| manifest.load_raw(i).map(|r| r.raw))
        .collect::<Result<Vec<_>>>()?;
    let rgbs = manifest
        .unpaired_rgb_indices()
        .into_par_iter()
        .map(|i| manifest.load_rgb(i))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainingSet {
        pseudo_rgbs: render_pseudo(&raws, &config)?,
        raws,
        rgbs,
    };

    create_dir(&a.out)?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut trainer = match resumed {
        Some(ckpt) => {
            let mut t = ckpt.into_trainer();
            t.config.epochs = config.train.epochs;
            t
        }
        None => {
            if metrics_path.exists() {
                std::fs::remove_file(&metrics_path).map_err(io_err(&metrics_path))?;
            }
            Trainer::new(config.train.clone())?
        }
    };
    let mut last = None;
    while trainer.epoch < config.train.epochs {
        let metrics = trainer.run_epoch(&data)?;
        append_metrics(&metrics_path, &metrics)?;
        last = metrics.last().copied().or(last);
        if a.checkpoint_every > 0 && trainer.epoch % a.checkpoint_every == 0 {
            let p = a
                .out
                .join(format!("checkpoint-e{:04}.srisp", trainer.epoch));
            Checkpoint::from_trainer(&trainer, &config).save(&p)?;
        }
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::from_trainer(&trainer, &config);
    ckpt.save(&ckpt_path)?;
    RunRecord::new("train", Some(config.train.seed), Some(ckpt.config.hash()))
        .save(&a.out.join(RUN_RECORD_FILE))?;
    print_json(&json!({
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "last_loss": last.map(|m| m.loss_total),
        "checkpoint": ckpt_path,
        "checkpoint_id": checkpoint_id(&ckpt_path)?,
    }));
    Ok(())
}

fn pick_model(ckpt: Checkpoint, teacher: bool) -> Model {
    if teacher {
        ckpt.teacher
    } else {
        ckpt.student
    }
}

fn convert(a: ConvertArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let config_hash = ckpt.config.hash();
    let model = pick_model(ckpt, a.teacher);
    let meta = a
        .reference_meta
        .clone()
        .unwrap_or_else(|| sidecar_path(&a.reference));
    if !meta.exists() {
        return Err(format_err(&a.reference, "missing sidecar"));
    }
    let sidecar = RawSidecar::load(&meta)?;
    let reference = load_raw(&a.reference, &sidecar)?;
    let input = load_rgb(&a.input)?;
    let out = model.convert(&input, &reference)?;
    save_raw(&out, &sidecar, &a.out)?;
    RunRecord::new("convert", None, Some(config_hash)).save(&run_record_beside(&a.out))?;
    Ok(())
}

fn gen_pseudo(a: GenPseudoArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.rand_isp.seed = a.seed;
    if let Some(p) = &a.pool {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        config.rand_isp.pool =
            CcmPool::from_json(&text).map_err(|e| format_err(p, e.to_string()))?;
    }
    let manifest = Manifest::load(&a.manifest)?;
    let indices = manifest.raw_indices();
    create_dir(&a.out)?;
    let entries = indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| -> Result<ManifestEntry> {
            let raw = manifest.load_raw(i)?;
            let cfg = &config.rand_isp;
            let x = isp_rand(&raw.raw, cfg, &mut cfg.rng_for(k as u64))?;
            let name = format!("pseudo_{k:05}.png");
            save_rgb(&x, &a.out.join(&name))?;
            let src = &manifest.entries[i];
            let absolute = |p: &Option<PathBuf>| -> Result<Option<PathBuf>> {
                p.as_ref()
                    .map(|p| {
                        let full = manifest.resolve(p);
                        full.canonicalize().map_err(io_err(&full))
                    })
                    .transpose()
            };
            Ok(ManifestEntry {
                rgb_path: Some(name.into()),
                raw_path: absolute(&src.raw_path)?,
                meta_path: absolute(&src.meta_path)?,
                pred_path: None,
                camera_id: src.camera_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(entries).save(&a.out.join(MANIFEST_FILE))?;
    RunRecord::new("gen-pseudo", Some(a.seed), Some(config.hash()))
        .save(&a.out.join(RUN_RECORD_FILE))?;
    Ok(())
}

/// Metrics of both units of manifest entry `i`.
fn eval_entry(manifest: &Manifest, i: usize, model: Option<&Model>) -> Result<Vec<EvalRow>> {
    let gt = manifest.load_raw(i)?.raw;
    let entry = &manifest.entries[i];
    let id = |half: &str| format!("{}:{i}:{half}", entry.camera_id);
    let (split, preds) = if entry.pred_path.is_some() {
        let split = split_protocol(&manifest.load_pred(i)?, &gt)?;
        let preds = split
            .units
            .iter()
            .map(|u| u.rgb.clone())
            .collect::<Vec<_>>();
        (split, preds)
    } else if let (Some(model), Some(_)) = (model, &entry.rgb_path) {
        let split = split_protocol(&manifest.load_rgb(i)?, &gt)?;
        let preds = split
            .units
            .iter()
            .map(|u| model.convert(&u.rgb, &split.reference))
            .collect::<revisp_core::Result<Vec<_>>>()?;
        (split, preds)
    } else {
        return Err(format_err(
            &manifest.root,
            format!("entry {i}: needs pred_path, or rgb_path with --ckpt"),
        ));
    };
    let landscape = if split.rotated { gt.rot90(1)? } else { gt };
    if split.reassemble_raw()? != landscape {
        return Err(Error::Check(format!(
            "entry {i}: split does not reassemble"
        )));
    }
    split
        .units
        .iter()
        .zip(&preds)
        .zip(["top", "bottom"])
        .map(|((u, p), half)| Ok(EvalRow::compute(id(half), p, &u.raw)?))
        .collect()
}

fn eval_paired(a: EvalPairedArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let (model, run) = match &a.ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let run = RunInfo {
                seed: ckpt.config.train.seed,
                checkpoint_id: checkpoint_id(p)?,
            };
            (Some(pick_model(ckpt, a.teacher)), run)
        }
        None => (
            None,
            RunInfo {
                seed: 0,
                checkpoint_id: String::new(),
            },
        ),
    };
    let rows: Vec<EvalRow> = manifest
        .raw_indices()
        .into_par_iter()
        .map(|i| eval_entry(&manifest, i, model.as_ref()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let seed = run.seed;
    let report = EvalReport::new(run, rows, None)?;
    if let Some(p) = &a.csv {
        write_report_csv(&report, p)?;
    }
    match &a.out {
        Some(p) => {
            write_report_json(&report, p)?;
            RunRecord::new("eval-paired", Some(seed), None).save(&run_record_beside(p))?;
        }
        None => print_json(&report),
    }
    Ok(())
}

/// Lab histograms of every RAW in a manifest, pooled.
pub fn pooled_histogram(manifest: &Manifest) -> Result<HistogramSet> {
    manifest
        .raw_indices()
        .into_par_iter()
        .map(|i| -> Result<HistogramSet> {
            let r = manifest.load_raw(i)?;
            let mut h = HistogramSet::default();
            h.add_image(&raw_to_lab(&r.raw, &r.sidecar.ccm)?)?;
            Ok(h)
        })
        .try_reduce(HistogramSet::default, |mut a, b| {
            a.merge(&b)?;
            Ok(a)
        })
}

#[derive(Debug, Serialize)]
struct HiReport {
    hi: f64,
    generated_images: usize,
    reference_images: usize,
}

fn eval_hi(a: EvalHiArgs) -> Result<()> {
    let generated = Manifest::load(&a.generated)?;
    let reference = Manifest::load(&a.reference)?;
    for (m, p) in [(&generated, &a.generated), (&reference, &a.reference)] {
        if m.raw_indices().is_empty() {
            return Err(format_err(p, "manifest lists no RAW images"));
        }
    }
    let hi = pooled_histogram(&reference)?.intersection(&pooled_histogram(&generated)?)?;
    let report = HiReport {
        hi,
        generated_images: generated.raw_indices().len(),
        reference_images: reference.raw_indices().len(),
    };
    match &a.out {
        Some(p) => {
            crate::error::write_json(p, &report)?;
            RunRecord::new("eval-hi", None, None).save(&run_record_beside(p))?;
        }
        None => print_json(&report),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = gradient_suite(a.seed)?;
    for c in &cases {
        println!(
            "{} {:<32} worst {:.3e} tol {:.0e} probes {} straddled {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.rel_tol,
            c.probes,
            c.straddled
        );
    }
    if let Some(p) = &a.out {
        crate::error::write_json(p, &cases)?;
        RunRecord::new("gradcheck", Some(a.seed), None).save(&run_record_beside(p))?;
    }
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.ckpt).map_err(io_err(&a.ckpt))?;
    let (header, _) = read_header(&bytes, &a.ckpt)?;
    print_json(&json!({
        "checkpoint_id": crate::config::sha256_hex(&bytes),
        "schema": header.schema,
        "epoch": header.epoch,
        "step": header.step,
        "optimizer": header.optimizer,
        "config_hash": header.config_hash,
        "model": header.config.train.model,
        "tensors": header.tensors,
    }));
    Ok(())
}

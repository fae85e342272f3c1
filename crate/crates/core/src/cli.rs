//! Command-line entry points: dataset synthesis, training, evaluation and inference.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{load_dataset, load_features, make_windows, synth_generate, write_dataset, Dataset, ManifestEntry, SynthConfig, VideoRecord, Window};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_video, EvalReport};
use crate::model::Model;
use crate::training::{train, Checkpoint, EpochLog, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EMA_CHECKPOINT_FILE: &str = "model_ema.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSONL_FILE: &str = "report.jsonl";
pub const HOLDOUT_DIR: &str = "heldout";

#[derive(Debug, Parser)]
#[command(name = "dualdetr", version, about = "Dual-level query-based temporal action detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides both the training and the synthesis seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train on a dataset and write checkpoints and an epoch log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; defaults to `data.train_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints, config and epoch log.
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Report detection and segmentation mAP of a checkpoint.
    Eval {
        /// Checkpoint file to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to `data.eval_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model configuration; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report files; the report always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace existing report files.
        #[arg(long)]
        overwrite: bool,
    },
    /// Detect actions in one feature file.
    Infer {
        /// Checkpoint file to run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary feature file of one video.
        #[arg(long)]
        features: PathBuf,
        /// Model configuration; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seconds per snippet; defaults to `synth.snippet_stride_seconds`.
        #[arg(long)]
        stride_seconds: Option<f64>,
        /// Records scoring below this are dropped.
        #[arg(long, default_value_t = 0.0)]
        min_score: f64,
    },
}

pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() && !overwrite && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::Config(format!(
            "output directory {} is not empty (pass --overwrite to replace it)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class_{c}")).collect()
}

/// Writes the synthetic training set to `out` and, when held-out videos
/// are configured, a second dataset drawn from the same generator to
/// `out/heldout`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<Vec<ManifestEntry>> {
    let n = cfg.synth.num_videos;
    let mut videos = synth_generate(&SynthConfig {
        num_videos: n + cfg.holdout_videos,
        ..cfg.synth.clone()
    })?;
    let heldout = videos.split_off(n);
    let classes = class_names(cfg.model.num_classes);
    let echo = cfg.echo();
    let entries = write_dataset(out, &classes, &videos, &echo, overwrite)?;
    if !heldout.is_empty() {
        write_dataset(&out.join(HOLDOUT_DIR), &classes, &heldout, &echo, overwrite)?;
    }
    Ok(entries)
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<()> {
    if ds.classes.len() != cfg.model.num_classes {
        return Err(Error::Data(format!(
            "{} lists {} classes but model.num_classes is {}",
            dir.display(),
            ds.classes.len(),
            cfg.model.num_classes
        )));
    }
    if let Some(v) = ds.videos.iter().find(|v| v.features.cols() != cfg.model.d_model) {
        return Err(Error::Data(format!(
            "{}: feature width {} differs from model.d_model {}",
            v.video_id,
            v.features.cols(),
            cfg.model.d_model
        )));
    }
    if ds.videos.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no videos", dir.display())));
    }
    Ok(())
}

fn dataset_dir(flag: Option<&Path>, fallback: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| fallback.cloned())
        .ok_or_else(|| Error::Config(format!("no {what} dataset: pass --data or set data.{what}_dir")))
}

/// Training windows of every video.
pub fn training_windows(cfg: &RunConfig, videos: &[VideoRecord]) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(make_windows(v, cfg.data.window, cfg.data.train_stride_ratio)?);
    }
    Ok(out)
}

pub fn format_epoch(e: &EpochLog) -> String {
    format!(
        "epoch = {} lr = {:e} loss = {:.6} cls = {:.6} iou = {:.6} l1 = {:.6} windows = {} skipped = {}",
        e.epoch, e.lr, e.loss.total, e.loss.cls, e.loss.iou, e.loss.l1, e.windows, e.skipped
    )
}

/// Trains on `data` and writes the final checkpoint, the averaged
/// checkpoint (when enabled), the epoch log and the config echo to `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    overwrite: bool,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let dir = dataset_dir(data, cfg.data.train_dir.as_ref(), "train")?;
    let ds = load_dataset(&dir)?;
    check_dataset(cfg, &ds, &dir)?;
    prepare_out_dir(out, overwrite)?;
    let echo = cfg.echo();
    write_file(&out.join(CONFIG_FILE), &echo)?;
    let windows = training_windows(cfg, &ds.videos)?;
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    let mut log: String = echo.lines().map(|l| format!("# {l}\n")).collect();
    let log_path = out.join(TRAIN_LOG_FILE);
    let outcome = train(&mut model, &windows, &cfg.train, |e| {
        log.push_str(&format_epoch(e));
        log.push('\n');
        // progress stays on disk even if a later epoch fails
        let _ = fs::write(&log_path, &log);
        on_epoch(e);
    })?;
    write_file(&log_path, &log)?;
    Checkpoint::from_store(&model.store, &echo).save(&out.join(CHECKPOINT_FILE))?;
    if let Some(ema) = &outcome.ema {
        Checkpoint::from_store(ema, &echo).save(&out.join(EMA_CHECKPOINT_FILE))?;
    }
    Ok(outcome)
}

/// Builds the model described by `config` (or the checkpoint's stored
/// config) and loads the checkpoint's weights into it.
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, Model)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(&format!("{} (stored config)", checkpoint.display()), &ckpt.config)?,
    };
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    ckpt.apply(&mut model.store)?;
    Ok((cfg, model))
}

pub fn cmd_eval(checkpoint: &Path, data: Option<&Path>, config: Option<&Path>, out: Option<&Path>, overwrite: bool) -> Result<(RunConfig, EvalReport)> {
    let (cfg, model) = load_model(checkpoint, config)?;
    let dir = dataset_dir(data, cfg.data.eval_dir.as_ref(), "eval")?;
    let ds = load_dataset(&dir)?;
    check_dataset(&cfg, &ds, &dir)?;
    let report = evaluate(&model, &ds.videos, cfg.data.window, cfg.data.eval_stride_ratio, cfg.frame_rate)?;
    if let Some(out) = out {
        prepare_out_dir(out, overwrite)?;
        write_file(&out.join(REPORT_FILE), &report.to_text(&cfg.echo()))?;
        write_file(&out.join(REPORT_JSONL_FILE), &report.to_jsonl())?;
    }
    Ok((cfg, report))
}

/// One output record of inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRecord {
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

/// Per-class detection records for one feature file, best first.
pub fn cmd_infer(
    checkpoint: &Path,
    features: &Path,
    config: Option<&Path>,
    stride_seconds: Option<f64>,
    min_score: f64,
) -> Result<(RunConfig, Vec<DetectionRecord>)> {
    let (cfg, model) = load_model(checkpoint, config)?;
    let feats = load_features(features)?;
    if feats.cols() != cfg.model.d_model {
        return Err(Error::Shape(format!(
            "{}: feature width {} differs from model.d_model {}",
            features.display(),
            feats.cols(),
            cfg.model.d_model
        )));
    }
    let stride = stride_seconds.unwrap_or(cfg.synth.snippet_stride_seconds);
    if !(stride > 0.0) {
        return Err(Error::Config("--stride-seconds must be positive".into()));
    }
    let video = VideoRecord {
        video_id: features.display().to_string(),
        duration_seconds: feats.rows() as f64 * stride,
        features: feats,
        annotations: Vec::new(),
        snippet_stride_seconds: stride,
    };
    let dets = predict_video(&model, &video, cfg.data.window, cfg.data.eval_stride_ratio)?;
    let mut records: Vec<DetectionRecord> = dets
        .iter()
        .flat_map(|d| {
            d.scores.iter().enumerate().map(|(class, &score)| DetectionRecord {
                start: d.start.min(d.end).max(0.0),
                end: d.start.max(d.end).min(video.duration_seconds),
                class,
                score,
            })
        })
        .filter(|r| r.score >= min_score)
        .collect();
    records.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok((cfg, records))
}

pub fn format_records(records: &[DetectionRecord], echo: &str) -> String {
    let mut s: String = echo.lines().map(|l| format!("# {l}\n")).collect();
    s.push_str("# start_seconds,end_seconds,class_id,score\n");
    for r in records {
        s.push_str(&format!("{:.4},{:.4},{},{:.4}\n", r.start, r.end, r.class, r.score));
    }
    s
}

/// Runs one command, printing results to stdout and progress to stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, overwrite } => {
            let cfg = resolve_config(&cfg)?;
            let entries = cmd_synth(&cfg, &out, overwrite)?;
            println!("wrote {} videos to {}", entries.len(), out.display());
            if cfg.holdout_videos > 0 {
                println!("wrote {} held-out videos to {}", cfg.holdout_videos, out.join(HOLDOUT_DIR).display());
            }
        }
        Command::Train { cfg: args, data, out, overwrite } => {
            let cfg = resolve_config(&args)?;
            let result = cmd_train(&cfg, data.as_deref(), &out, overwrite, |e| eprintln!("{}", format_epoch(e)));
            if let Err(e) = result {
                eprintln!("run configuration:");
                for l in cfg.echo().lines() {
                    eprintln!("  {l}");
                }
                return Err(e);
            }
            println!("checkpoints written to {}", out.display());
        }
        Command::Eval { checkpoint, data, config, out, overwrite } => {
            let (cfg, report) = cmd_eval(&checkpoint, data.as_deref(), config.as_deref(), out.as_deref(), overwrite)?;
            print!("{}", report.to_text(&cfg.echo()));
        }
        Command::Infer { checkpoint, features, config, stride_seconds, min_score } => {
            let (cfg, records) = cmd_infer(&checkpoint, &features, config.as_deref(), stride_seconds, min_score)?;
            print!("{}", format_records(&records, &cfg.echo()));
        }
    }
    Ok(())
}

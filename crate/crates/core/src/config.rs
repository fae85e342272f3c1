//! Run configuration as a flat `key = value` text file.
//!
//! Lines starting with `#` are comments. An optional first key
//! `preset = default|tiny` selects the base values that later keys
//! override. Unknown keys, repeated keys and malformed values are errors.
//! [`RunConfig::echo`] writes every key and parses back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Default,
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected default or tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Window length in snippets.
    pub window: usize,
    pub train_stride_ratio: f64,
    pub eval_stride_ratio: f64,
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    /// `num_classes` and `dim` always follow the model.
    pub synth: SynthConfig,
    /// Extra videos drawn from the same generator and written as a
    /// separate held-out dataset.
    pub holdout_videos: usize,
    pub train: TrainConfig,
    /// Frames per second for segmentation mAP.
    pub frame_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Default)
    }
}

fn on_off(s: &str) -> Result<bool> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("expected on or off, got `{s}`"))),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parsed<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("invalid value `{s}`")))
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn path(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self {
            model: ModelConfig::default(),
            data: DataConfig {
                window: 256,
                train_stride_ratio: 0.75,
                eval_stride_ratio: 0.25,
                train_dir: None,
                eval_dir: None,
            },
            synth: SynthConfig::default(),
            holdout_videos: 0,
            train: TrainConfig::default(),
            frame_rate: 2.0,
        };
        if p == Preset::Tiny {
            c.model = ModelConfig::tiny(3);
            c.data.window = 128;
            c.holdout_videos = 50;
            c.train.lr = 1e-3;
            c.train.batch_size = 2;
            c.train.epochs = 15;
        }
        c.sync();
        c
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    fn sync(&mut self) {
        self.synth.num_classes = self.model.num_classes;
        self.synth.dim = self.model.d_model;
    }

    /// Sets both the training and the synthetic-data seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, d, s, t) = (&mut self.model, &mut self.data, &mut self.synth, &mut self.train);
        match key {
            "model.d_model" => m.d_model = parsed(v)?,
            "model.enc_layers" => m.enc_layers = parsed(v)?,
            "model.dec_layers" => m.dec_layers = parsed(v)?,
            "model.num_queries" => m.num_queries = parsed(v)?,
            "model.heads" => m.heads = parsed(v)?,
            "model.points" => m.points = parsed(v)?,
            "model.ffn_dim" => m.ffn_dim = parsed(v)?,
            "model.num_classes" => m.num_classes = parsed(v)?,
            "ablation.level" => m.ablation.level = v.parse()?,
            "ablation.branch" => m.ablation.branching = v.parse()?,
            "ablation.align" => m.ablation.align = on_off(v)?,
            "ablation.init" => m.ablation.init = v.parse()?,
            "ablation.refine" => m.ablation.refine = v.parse()?,
            "data.window" => d.window = parsed(v)?,
            "data.train_stride_ratio" => d.train_stride_ratio = parsed(v)?,
            "data.eval_stride_ratio" => d.eval_stride_ratio = parsed(v)?,
            "data.train_dir" => d.train_dir = path(v),
            "data.eval_dir" => d.eval_dir = path(v),
            "synth.seed" => s.seed = parsed(v)?,
            "synth.num_videos" => s.num_videos = parsed(v)?,
            "synth.holdout_videos" => self.holdout_videos = parsed(v)?,
            "synth.length" => s.length = parsed(v)?,
            "synth.overlap_level" => s.overlap_level = parsed(v)?,
            "synth.noise_sigma" => s.noise_sigma = parsed(v)?,
            "synth.snippet_stride_seconds" => s.snippet_stride_seconds = parsed(v)?,
            "synth.min_instances" => s.min_instances = parsed(v)?,
            "synth.max_instances" => s.max_instances = parsed(v)?,
            "synth.min_duration" => s.min_duration = parsed(v)?,
            "synth.max_duration" => s.max_duration = parsed(v)?,
            "train.lr" => t.lr = parsed(v)?,
            "train.weight_decay" => t.weight_decay = parsed(v)?,
            "train.epochs" => t.epochs = parsed(v)?,
            "train.lr_drop_epochs" => t.lr_drop_epochs = parsed(v)?,
            "train.lr_drop_factor" => t.lr_drop_factor = parsed(v)?,
            "train.clip_norm" => t.clip_norm = parsed(v)?,
            "train.ema" => t.ema = on_off(v)?,
            "train.ema_decay" => t.ema_decay = parsed(v)?,
            "train.batch_size" => t.batch_size = parsed(v)?,
            "train.seed" => t.seed = parsed(v)?,
            "cost.cls" => t.cost.cls = parsed(v)?,
            "cost.iou" => t.cost.iou = parsed(v)?,
            "cost.l1" => t.cost.l1 = parsed(v)?,
            "loss.cls" => t.loss.cls = parsed(v)?,
            "loss.iou" => t.loss.iou = parsed(v)?,
            "loss.l1" => t.loss.l1 = parsed(v)?,
            "eval.frame_rate" => self.frame_rate = parsed(v)?,
            _ => return Err(Error::Config("unknown key".into())),
        }
        Ok(())
    }

    /// Parses config text. `origin` names the source in error messages.
    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(at(format!("key `{k}` given twice")));
            }
            if k == "preset" {
                if cfg.is_some() {
                    return Err(at("preset must be the first key".into()));
                }
                cfg = Some(Self::preset(v.parse().map_err(|e| at(message(e)))?));
                continue;
            }
            cfg.get_or_insert_with(Self::default)
                .set(k, v)
                .map_err(|e| at(format!("{k}: {}", message(e))))?;
        }
        let mut cfg = cfg.unwrap_or_default();
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let d = &self.data;
        if d.window == 0 {
            return Err(Error::Config("data.window must be at least 1".into()));
        }
        if self.model.num_queries > d.window {
            return Err(Error::Config(format!(
                "model.num_queries {} exceeds data.window {}",
                self.model.num_queries, d.window
            )));
        }
        for (k, r) in [("train", d.train_stride_ratio), ("eval", d.eval_stride_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("data.{k}_stride_ratio {r} must lie in (0, 1]")));
            }
        }
        for p in [&d.train_dir, &d.eval_dir].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config("eval.frame_rate must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn echo(&self) -> String {
        let (m, d, s, t) = (&self.model, &self.data, &self.synth, &self.train);
        let a = &m.ablation;
        let p = |x: &Option<PathBuf>| x.as_ref().map_or(String::new(), |p| p.display().to_string());
        let entries: Vec<(&str, String)> = vec![
            ("model.d_model", m.d_model.to_string()),
            ("model.enc_layers", m.enc_layers.to_string()),
            ("model.dec_layers", m.dec_layers.to_string()),
            ("model.num_queries", m.num_queries.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.points", m.points.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("ablation.level", a.level.to_string()),
            ("ablation.branch", a.branching.to_string()),
            ("ablation.align", flag(a.align).into()),
            ("ablation.init", a.init.to_string()),
            ("ablation.refine", a.refine.to_string()),
            ("data.window", d.window.to_string()),
            ("data.train_stride_ratio", d.train_stride_ratio.to_string()),
            ("data.eval_stride_ratio", d.eval_stride_ratio.to_string()),
            ("data.train_dir", p(&d.train_dir)),
            ("data.eval_dir", p(&d.eval_dir)),
            ("synth.seed", s.seed.to_string()),
            ("synth.num_videos", s.num_videos.to_string()),
            ("synth.holdout_videos", self.holdout_videos.to_string()),
            ("synth.length", s.length.to_string()),
            ("synth.overlap_level", s.overlap_level.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.snippet_stride_seconds", s.snippet_stride_seconds.to_string()),
            ("synth.min_instances", s.min_instances.to_string()),
            ("synth.max_instances", s.max_instances.to_string()),
            ("synth.min_duration", s.min_duration.to_string()),
            ("synth.max_duration", s.max_duration.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr_drop_epochs", t.lr_drop_epochs.to_string()),
            ("train.lr_drop_factor", t.lr_drop_factor.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.ema", flag(t.ema).into()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("cost.cls", t.cost.cls.to_string()),
            ("cost.iou", t.cost.iou.to_string()),
            ("cost.l1", t.cost.l1.to_string()),
            ("loss.cls", t.loss.cls.to_string()),
            ("loss.iou", t.loss.iou.to_string()),
            ("loss.l1", t.loss.l1.to_string()),
            ("eval.frame_rate", self.frame_rate.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

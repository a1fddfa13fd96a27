//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored, unknown or repeated keys are
//! errors, and every key has a default. [`RunConfig::to_text`] renders every
//! key, so the echo of a parsed file parses back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::AttentionMode;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Trailing fraction of the training data held out for evaluation when
    /// no separate evaluation set is given.
    pub val_fraction: f64,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            val_fraction: 0.1,
            data: None,
            eval_data: None,
            out: None,
        }
    }
}

/// Every key with its meaning, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("height", "image height in pixels"),
    ("width", "image width in pixels"),
    ("channels", "image channels"),
    ("patch", "patch side in pixels"),
    ("dim", "token width D"),
    ("heads", "attention heads"),
    ("depth", "total number of blocks L"),
    ("lt_blocks", "trailing blocks with label tokens N2 (0 in baseline mode)"),
    ("labels", "number of labels c"),
    ("mode", "full_self | one_way | one_way_no_label_self | baseline"),
    ("dropout", "dropout rate in [0, 1)"),
    ("epochs", "training epochs"),
    ("batch_size", "samples per optimizer step"),
    ("micro_batch", "samples per forward/backward pass"),
    ("lr", "peak Adam learning rate"),
    ("schedule", "constant | cosine"),
    ("weight_decay", "L2 coefficient added to gradients"),
    ("seed", "seed for init, shuffling and dropout"),
    ("val_fraction", "held-out tail of the training data when eval_data is unset"),
    ("data", "training dataset path"),
    ("eval_data", "evaluation dataset path"),
    ("out", "run directory"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Paper-scale preset: ViT-S/16 at 224² with the published learning rate.
    pub fn vit_small_preset(labels: usize) -> Self {
        RunConfig {
            model: ModelConfig::vit_small(labels),
            train: TrainConfig {
                lr: 1e-5,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// The same run with every path cleared, so that artifacts embedding the
    /// config do not depend on where they were written.
    pub fn without_paths(&self) -> Self {
        RunConfig {
            data: None,
            eval_data: None,
            out: None,
            ..self.clone()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut lt_blocks = cfg.model.lt_blocks;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&(known, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
            };
            if seen.contains(&known) {
                return Err(Error::Config(format!("line {}: key `{key}` given twice", lineno + 1)));
            }
            seen.push(known);
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match known {
                "height" => m.height = parse_value(key, value)?,
                "width" => m.width = parse_value(key, value)?,
                "channels" => m.channels = parse_value(key, value)?,
                "patch" => m.patch = parse_value(key, value)?,
                "dim" => m.dim = parse_value(key, value)?,
                "heads" => m.heads = parse_value(key, value)?,
                "depth" => m.depth = parse_value(key, value)?,
                "lt_blocks" => lt_blocks = parse_value(key, value)?,
                "labels" => m.labels = parse_value(key, value)?,
                "mode" => m.mode = parse_value(key, value)?,
                "dropout" => m.dropout = parse_value(key, value)?,
                "epochs" => t.epochs = parse_value(key, value)?,
                "batch_size" => t.batch_size = parse_value(key, value)?,
                "micro_batch" => t.micro_batch = parse_value(key, value)?,
                "lr" => t.lr = parse_value(key, value)?,
                "schedule" => t.schedule = parse_value(key, value)?,
                "weight_decay" => t.weight_decay = parse_value(key, value)?,
                "seed" => t.seed = parse_value(key, value)?,
                "val_fraction" => cfg.val_fraction = parse_value(key, value)?,
                "data" => cfg.data = path_value(value),
                "eval_data" => cfg.eval_data = path_value(value),
                "out" => cfg.out = path_value(value),
                _ => unreachable!("key table and match arms agree"),
            }
        }
        if cfg.model.mode == AttentionMode::Baseline {
            if seen.contains(&"lt_blocks") && lt_blocks != 0 {
                return Err(Error::Config(format!(
                    "baseline mode has no label tokens, but lt_blocks = {lt_blocks}"
                )));
            }
            lt_blocks = 0;
        }
        if lt_blocks > cfg.model.depth {
            return Err(Error::Config(format!(
                "lt_blocks ({lt_blocks}) exceeds depth ({})",
                cfg.model.depth
            )));
        }
        cfg.model.lt_blocks = lt_blocks;
        cfg.model.image_blocks = cfg.model.depth - lt_blocks;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        for p in [&self.data, &self.eval_data, &self.out].into_iter().flatten() {
            let s = p.to_string_lossy();
            if s.contains('#') || s.contains('\n') || s.trim() != s {
                return Err(Error::Config(format!("path `{s}` cannot be written to a config file")));
            }
        }
        Ok(())
    }

    /// Every key, one per line, with its description as a comment above it.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let path = |p: &Option<PathBuf>| p.as_deref().map(Path::to_string_lossy).unwrap_or_default().into_owned();
        let values = [
            m.height.to_string(),
            m.width.to_string(),
            m.channels.to_string(),
            m.patch.to_string(),
            m.dim.to_string(),
            m.heads.to_string(),
            m.depth.to_string(),
            m.lt_blocks.to_string(),
            m.labels.to_string(),
            m.mode.to_string(),
            m.dropout.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.micro_batch.to_string(),
            t.lr.to_string(),
            t.schedule.to_string(),
            t.weight_decay.to_string(),
            t.seed.to_string(),
            self.val_fraction.to_string(),
            path(&self.data),
            path(&self.eval_data),
            path(&self.out),
        ];
        let mut s = String::new();
        for ((key, doc), value) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

//! Run configuration and its `key=value` file format.
//!
//! ```text
//! version=1
//! # comment
//! seed=7
//! model.variant=deformtrace
//! data.length=200
//! train.epochs=50
//! ```
//!
//! The first non-comment line must be the version header. Keys not listed in
//! [`RunConfig::to_text`] output are rejected, as are duplicates.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::relay::EnhanceOperand;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `model.input_channels` always equals `data.channels`.
    pub model: ModelConfig,
    /// Training split; `data.samples` is its size.
    pub data: DataConfig,
    pub test_samples: usize,
    pub train: TrainConfig,
    /// Shared by model initialization, data generation and shuffling.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl RunConfig {
    /// The desk-scale recipe: tiny model on 5000/1000 synthetic samples.
    pub fn tiny() -> Self {
        let data = DataConfig { samples: 5000, ..DataConfig::default() };
        Self {
            model: ModelConfig::tiny(data.channels),
            data,
            test_samples: 1000,
            train: TrainConfig::default(),
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }

    /// Propagates the shared seed and checks every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.model.input_channels = self.data.channels;
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    /// Test split configuration: same generator, stream indices after the
    /// training split.
    pub fn test_data(&self) -> (DataConfig, usize) {
        (DataConfig { samples: self.test_samples, ..self.data.clone() }, self.data.samples)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let s = |v: &dyn Display| v.to_string();
        vec![
            ("seed", s(&self.seed)),
            ("out", self.out.display().to_string()),
            ("model.variant", s(&m.variant)),
            ("model.channels", s(&m.channels)),
            ("model.levels", s(&m.levels)),
            ("model.encoder_layers", s(&m.encoder_layers)),
            ("model.decoder_layers", s(&m.decoder_layers)),
            ("model.samples", s(&m.samples)),
            ("model.queries", s(&m.queries)),
            ("model.relays", s(&m.relays)),
            ("model.heads", s(&m.heads)),
            ("model.state_dim", s(&m.state_dim)),
            ("model.lambda_enh", s(&m.lambda_enh)),
            ("model.lambda_coop", s(&m.lambda_coop)),
            ("model.gamma", s(&m.gamma)),
            ("model.fps", s(&m.fps)),
            ("model.stride", s(&m.stride)),
            ("model.enhance_operand", operand_name(m.enhance_operand).into()),
            ("model.relay_per_layer", s(&m.relay_per_layer)),
            ("model.aux_loss", s(&m.aux_loss)),
            ("model.match_class", s(&m.match_weights.class)),
            ("model.match_l1", s(&m.match_weights.l1)),
            ("model.match_iou", s(&m.match_weights.iou)),
            ("model.focal_alpha", s(&m.focal.alpha)),
            ("model.focal_gamma", s(&m.focal.gamma)),
            ("data.train_samples", s(&d.samples)),
            ("data.test_samples", s(&self.test_samples)),
            ("data.channels", s(&d.channels)),
            ("data.length", s(&d.length)),
            ("data.difficulty", s(&d.difficulty)),
            ("data.ramp", s(&d.ramp)),
            ("data.min_duration", s(&d.min_duration)),
            ("data.max_duration", s(&d.max_duration)),
            ("data.max_segments", s(&d.max_segments)),
            ("train.epochs", s(&t.epochs)),
            ("train.batch_size", s(&t.batch_size)),
            ("train.lr", s(&t.lr)),
            ("train.warmup_epochs", s(&t.warmup_epochs)),
            ("train.weight_decay", s(&t.weight_decay)),
            ("train.clip", s(&t.clip)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("version={CONFIG_VERSION}\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Parses a config file body over the [`RunConfig::tiny`] defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny();
        let mut seen = HashSet::new();
        let mut version_seen = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            if !version_seen {
                if key != "version" {
                    return Err(Error::Config(format!("line {}: config must start with version={CONFIG_VERSION}", n + 1)));
                }
                let v: u32 = parse_value(key, value)?;
                if v != CONFIG_VERSION {
                    return Err(Error::Config(format!("config version {v}, this build reads {CONFIG_VERSION}")));
                }
                version_seen = true;
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        if !version_seen {
            return Err(Error::Config(format!("missing version={CONFIG_VERSION} header")));
        }
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model.variant" => m.variant = Variant::parse(v)?,
            "model.channels" => m.channels = parse_value(key, v)?,
            "model.levels" => m.levels = parse_value(key, v)?,
            "model.encoder_layers" => m.encoder_layers = parse_value(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse_value(key, v)?,
            "model.samples" => m.samples = parse_value(key, v)?,
            "model.queries" => m.queries = parse_value(key, v)?,
            "model.relays" => m.relays = parse_value(key, v)?,
            "model.heads" => m.heads = parse_value(key, v)?,
            "model.state_dim" => m.state_dim = parse_value(key, v)?,
            "model.lambda_enh" => m.lambda_enh = parse_value(key, v)?,
            "model.lambda_coop" => m.lambda_coop = parse_value(key, v)?,
            "model.gamma" => m.gamma = parse_value(key, v)?,
            "model.fps" => m.fps = parse_value(key, v)?,
            "model.stride" => m.stride = parse_value(key, v)?,
            "model.enhance_operand" => {
                m.enhance_operand = match v {
                    "post_scan" => EnhanceOperand::PostScan,
                    "embedding" => EnhanceOperand::Embedding,
                    _ => return Err(Error::Config(format!("unknown enhance operand `{v}`"))),
                }
            }
            "model.relay_per_layer" => m.relay_per_layer = parse_value(key, v)?,
            "model.aux_loss" => m.aux_loss = parse_value(key, v)?,
            "model.match_class" => m.match_weights.class = parse_value(key, v)?,
            "model.match_l1" => m.match_weights.l1 = parse_value(key, v)?,
            "model.match_iou" => m.match_weights.iou = parse_value(key, v)?,
            "model.focal_alpha" => m.focal.alpha = parse_value(key, v)?,
            "model.focal_gamma" => m.focal.gamma = parse_value(key, v)?,
            "data.train_samples" => d.samples = parse_value(key, v)?,
            "data.test_samples" => self.test_samples = parse_value(key, v)?,
            "data.channels" => d.channels = parse_value(key, v)?,
            "data.length" => d.length = parse_value(key, v)?,
            "data.difficulty" => d.difficulty = parse_value(key, v)?,
            "data.ramp" => d.ramp = parse_value(key, v)?,
            "data.min_duration" => d.min_duration = parse_value(key, v)?,
            "data.max_duration" => d.max_duration = parse_value(key, v)?,
            "data.max_segments" => d.max_segments = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.lr" => t.lr = parse_value(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse_value(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, v)?,
            "train.clip" => t.clip = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

fn operand_name(o: EnhanceOperand) -> &'static str {
    match o {
        EnhanceOperand::PostScan => "post_scan",
        EnhanceOperand::Embedding => "embedding",
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

//! Flat key=value run configuration.
//!
//! One namespace for every tunable in the pipeline. Files hold one
//! `key=value` per line (`#` comments and blank lines allowed); unknown
//! keys are errors. Serialization emits keys in a fixed canonical order
//! so parse -> serialize -> parse is the identity and resolved configs
//! can be embedded verbatim in output artifacts.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::rng::RNG_KIND;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    UnknownKey(String),
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    MalformedLine {
        line_no: usize,
        line: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io: {e}"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key: {k}"),
            ConfigError::InvalidValue { key, value, reason } => {
                write!(f, "invalid value for {key}: {value} ({reason})")
            }
            ConfigError::MalformedLine { line_no, line } => {
                write!(f, "malformed config line {line_no}: {line}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

/// How the diversity metric aggregates over sample pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsdMode {
    /// Maximum over pairs of the time-averaged distance.
    MaxPair,
    /// Mean over pairs, for comparison runs.
    MeanPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data_h: usize,
    pub data_f: usize,
    pub data_dt: f64,
    pub encoder_node_hidden: usize,
    pub encoder_edge_hidden: usize,
    pub encoder_radius: f64,
    pub gmm_k: usize,
    pub reg_alpha1: f64,
    pub reg_alpha2: f64,
    pub reg_alpha3: f64,
    pub reg_beta1: f64,
    pub reg_beta2: f64,
    pub reg_beta3: f64,
    pub decoder_hidden: usize,
    pub decoder_huber_delta: f64,
    pub decoder_init_from_context: bool,
    pub train_lambda1: f64,
    pub train_lambda2: f64,
    pub train_lambda3: f64,
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_lr0: f64,
    pub train_decay: f64,
    pub train_clip_norm: f64,
    pub train_checkpoint_every: usize,
    pub gen_samples: usize,
    pub gen_collision_radius: f64,
    pub gen_max_attempts_factor: usize,
    pub metrics_bins: usize,
    pub metrics_v_min: f64,
    pub metrics_asd_mode: AsdMode,
    pub rng_kind: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_h: 8,
            data_f: 12,
            data_dt: 0.4,
            encoder_node_hidden: 128,
            encoder_edge_hidden: 128,
            encoder_radius: 3.0,
            gmm_k: 4,
            reg_alpha1: 1.0,
            reg_alpha2: 1.0,
            reg_alpha3: 1.0,
            reg_beta1: 1.0,
            reg_beta2: 2.0,
            reg_beta3: 0.5,
            decoder_hidden: 128,
            decoder_huber_delta: 1.0,
            decoder_init_from_context: true,
            train_lambda1: 1.0,
            train_lambda2: 1.0,
            train_lambda3: 1.0,
            train_epochs: 100,
            train_batch_size: 256,
            train_lr0: 0.001,
            train_decay: 0.9999,
            train_clip_norm: 1.0,
            train_checkpoint_every: 0,
            gen_samples: 20,
            gen_collision_radius: 0.2,
            gen_max_attempts_factor: 10,
            metrics_bins: 20,
            metrics_v_min: 0.05,
            metrics_asd_mode: AsdMode::MaxPair,
            rng_kind: RNG_KIND.to_string(),
        }
    }
}

/// Canonical key order for serialization and echoes.
pub const CONFIG_KEYS: &[&str] = &[
    "data.h",
    "data.f",
    "data.dt",
    "encoder.node_hidden",
    "encoder.edge_hidden",
    "encoder.radius",
    "gmm.k",
    "reg.alpha1",
    "reg.alpha2",
    "reg.alpha3",
    "reg.beta1",
    "reg.beta2",
    "reg.beta3",
    "decoder.hidden",
    "decoder.huber_delta",
    "decoder.init_from_context",
    "train.lambda1",
    "train.lambda2",
    "train.lambda3",
    "train.epochs",
    "train.batch_size",
    "train.lr0",
    "train.decay",
    "train.clip_norm",
    "train.checkpoint_every",
    "gen.samples",
    "gen.collision_radius",
    "gen.max_attempts_factor",
    "metrics.bins",
    "metrics.v_min",
    "metrics.asd_mode",
    "rng.kind",
];

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::MalformedLine {
                line_no: idx + 1,
                line: raw.to_string(),
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: "unparseable".to_string(),
            })
        }
        match key {
            "data.h" => self.data_h = parse(key, value)?,
            "data.f" => self.data_f = parse(key, value)?,
            "data.dt" => self.data_dt = parse(key, value)?,
            "encoder.node_hidden" => self.encoder_node_hidden = parse(key, value)?,
            "encoder.edge_hidden" => self.encoder_edge_hidden = parse(key, value)?,
            "encoder.radius" => self.encoder_radius = parse(key, value)?,
            "gmm.k" => self.gmm_k = parse(key, value)?,
            "reg.alpha1" => self.reg_alpha1 = parse(key, value)?,
            "reg.alpha2" => self.reg_alpha2 = parse(key, value)?,
            "reg.alpha3" => self.reg_alpha3 = parse(key, value)?,
            "reg.beta1" => self.reg_beta1 = parse(key, value)?,
            "reg.beta2" => self.reg_beta2 = parse(key, value)?,
            "reg.beta3" => self.reg_beta3 = parse(key, value)?,
            "decoder.hidden" => self.decoder_hidden = parse(key, value)?,
            "decoder.huber_delta" => self.decoder_huber_delta = parse(key, value)?,
            "decoder.init_from_context" => self.decoder_init_from_context = parse(key, value)?,
            "train.lambda1" => self.train_lambda1 = parse(key, value)?,
            "train.lambda2" => self.train_lambda2 = parse(key, value)?,
            "train.lambda3" => self.train_lambda3 = parse(key, value)?,
            "train.epochs" => self.train_epochs = parse(key, value)?,
            "train.batch_size" => self.train_batch_size = parse(key, value)?,
            "train.lr0" => self.train_lr0 = parse(key, value)?,
            "train.decay" => self.train_decay = parse(key, value)?,
            "train.clip_norm" => self.train_clip_norm = parse(key, value)?,
            "train.checkpoint_every" => self.train_checkpoint_every = parse(key, value)?,
            "gen.samples" => self.gen_samples = parse(key, value)?,
            "gen.collision_radius" => self.gen_collision_radius = parse(key, value)?,
            "gen.max_attempts_factor" => self.gen_max_attempts_factor = parse(key, value)?,
            "metrics.bins" => self.metrics_bins = parse(key, value)?,
            "metrics.v_min" => self.metrics_v_min = parse(key, value)?,
            "metrics.asd_mode" => {
                self.metrics_asd_mode = match value {
                    "max" => AsdMode::MaxPair,
                    "mean" => AsdMode::MeanPair,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason: "expected max or mean".to_string(),
                        })
                    }
                }
            }
            "rng.kind" => self.rng_kind = value.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "data.h" => self.data_h.to_string(),
            "data.f" => self.data_f.to_string(),
            "data.dt" => self.data_dt.to_string(),
            "encoder.node_hidden" => self.encoder_node_hidden.to_string(),
            "encoder.edge_hidden" => self.encoder_edge_hidden.to_string(),
            "encoder.radius" => self.encoder_radius.to_string(),
            "gmm.k" => self.gmm_k.to_string(),
            "reg.alpha1" => self.reg_alpha1.to_string(),
            "reg.alpha2" => self.reg_alpha2.to_string(),
            "reg.alpha3" => self.reg_alpha3.to_string(),
            "reg.beta1" => self.reg_beta1.to_string(),
            "reg.beta2" => self.reg_beta2.to_string(),
            "reg.beta3" => self.reg_beta3.to_string(),
            "decoder.hidden" => self.decoder_hidden.to_string(),
            "decoder.huber_delta" => self.decoder_huber_delta.to_string(),
            "decoder.init_from_context" => self.decoder_init_from_context.to_string(),
            "train.lambda1" => self.train_lambda1.to_string(),
            "train.lambda2" => self.train_lambda2.to_string(),
            "train.lambda3" => self.train_lambda3.to_string(),
            "train.epochs" => self.train_epochs.to_string(),
            "train.batch_size" => self.train_batch_size.to_string(),
            "train.lr0" => self.train_lr0.to_string(),
            "train.decay" => self.train_decay.to_string(),
            "train.clip_norm" => self.train_clip_norm.to_string(),
            "train.checkpoint_every" => self.train_checkpoint_every.to_string(),
            "gen.samples" => self.gen_samples.to_string(),
            "gen.collision_radius" => self.gen_collision_radius.to_string(),
            "gen.max_attempts_factor" => self.gen_max_attempts_factor.to_string(),
            "metrics.bins" => self.metrics_bins.to_string(),
            "metrics.v_min" => self.metrics_v_min.to_string(),
            "metrics.asd_mode" => match self.metrics_asd_mode {
                AsdMode::MaxPair => "max".to_string(),
                AsdMode::MeanPair => "mean".to_string(),
            },
            "rng.kind" => self.rng_kind.clone(),
            _ => unreachable!("get called with unknown key {key}"),
        }
    }

    /// Canonical `key=value` lines, one per key.
    pub fn to_lines(&self) -> Vec<String> {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}", self.get(k)))
            .collect()
    }

    pub fn serialize(&self) -> String {
        let mut s = self.to_lines().join("\n");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, value: String, reason: &str| {
            Err(ConfigError::InvalidValue {
                key: key.to_string(),
                value,
                reason: reason.to_string(),
            })
        };
        if self.data_h < 2 {
            return fail("data.h", self.data_h.to_string(), "need at least 2 past steps");
        }
        if self.data_f < 1 {
            return fail("data.f", self.data_f.to_string(), "need at least 1 future step");
        }
        if !(self.data_dt > 0.0) {
            return fail("data.dt", self.data_dt.to_string(), "must be positive");
        }
        if self.encoder_node_hidden == 0 || self.encoder_edge_hidden == 0 {
            return fail("encoder.node_hidden", "0".into(), "hidden sizes must be positive");
        }
        if self.encoder_radius < 0.0 {
            return fail("encoder.radius", self.encoder_radius.to_string(), "must be non-negative");
        }
        if self.gmm_k == 0 {
            return fail("gmm.k", "0".into(), "need at least one component");
        }
        for (key, v) in [
            ("reg.alpha1", self.reg_alpha1),
            ("reg.alpha2", self.reg_alpha2),
            ("reg.alpha3", self.reg_alpha3),
            ("train.lambda1", self.train_lambda1),
            ("train.lambda2", self.train_lambda2),
            ("train.lambda3", self.train_lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(key, v.to_string(), "must be finite and non-negative");
            }
        }
        for (key, v) in [
            ("reg.beta1", self.reg_beta1),
            ("reg.beta2", self.reg_beta2),
            ("reg.beta3", self.reg_beta3),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(key, v.to_string(), "must be finite and positive");
            }
        }
        if self.decoder_hidden == 0 {
            return fail("decoder.hidden", "0".into(), "must be positive");
        }
        if !(self.decoder_huber_delta > 0.0) {
            return fail(
                "decoder.huber_delta",
                self.decoder_huber_delta.to_string(),
                "must be positive",
            );
        }
        if !(self.train_lr0 > 0.0) {
            return fail("train.lr0", self.train_lr0.to_string(), "must be positive");
        }
        if !(self.train_decay > 0.0 && self.train_decay <= 1.0) {
            return fail("train.decay", self.train_decay.to_string(), "must be in (0, 1]");
        }
        if !(self.train_clip_norm > 0.0) {
            return fail(
                "train.clip_norm",
                self.train_clip_norm.to_string(),
                "must be positive",
            );
        }
        if self.train_batch_size == 0 {
            return fail("train.batch_size", "0".into(), "must be positive");
        }
        if self.gen_samples == 0 {
            return fail("gen.samples", "0".into(), "must be positive");
        }
        if self.gen_collision_radius < 0.0 {
            return fail(
                "gen.collision_radius",
                self.gen_collision_radius.to_string(),
                "must be non-negative",
            );
        }
        if self.gen_max_attempts_factor < 1 {
            return fail("gen.max_attempts_factor", "0".into(), "must be at least 1");
        }
        if self.metrics_bins == 0 {
            return fail("metrics.bins", "0".into(), "must be positive");
        }
        if self.metrics_v_min < 0.0 {
            return fail("metrics.v_min", self.metrics_v_min.to_string(), "must be non-negative");
        }
        if self.rng_kind != RNG_KIND {
            return fail("rng.kind", self.rng_kind.clone(), "only chacha8 is supported");
        }
        Ok(())
    }

    /// Context dimension consumed by the mixture heads and the decoder.
    pub fn context_dim(&self) -> usize {
        self.encoder_node_hidden + self.encoder_edge_hidden
    }
}

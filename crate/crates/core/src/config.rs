//! Run configuration: flat `section.key = value` text, a fixed schema with
//! defaults, and typed accessors that build the module configs. Unknown
//! keys are rejected so typos fail loudly. The resolved config is written
//! next to every run's outputs.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::datagen::{ExposureMode, ExposurePolicy, RigSpec};
use crate::losses::LossWeights;
use crate::metrics::HisNorm;
use crate::optimizer::{TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {0}: {1}")]
    Parse(usize, String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{0}': {1}")]
    BadValue(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    U64,
    Usize,
    F64Pos,
    F64NonNeg,
    Mode,
    Policy,
    HisNorm,
    Rgb,
}

const SCHEMA: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::U64),
    ("dataset.width", "192", Kind::Usize),
    ("dataset.height", "130", Kind::Usize),
    ("dataset.hfov_deg", "60", Kind::F64Pos),
    ("dataset.frames", "8", Kind::Usize),
    ("dataset.frame_rate_hz", "10", Kind::F64Pos),
    ("dataset.speed_mps", "2", Kind::F64NonNeg),
    ("dataset.gaussians", "500", Kind::Usize),
    ("dataset.policy", "var", Kind::Policy),
    ("dataset.iso_mean", "8", Kind::F64Pos),
    ("dataset.iso_std", "4", Kind::F64NonNeg),
    ("dataset.iso_floor", "1", Kind::U64),
    ("train.iterations", "600", Kind::U64),
    ("train.mode", "p2gs", Kind::Mode),
    ("train.lr_color", "0.01", Kind::F64Pos),
    ("train.lr_opacity", "0.005", Kind::F64Pos),
    ("train.lr_exposure", "0.005", Kind::F64Pos),
    ("train.lr_gamma", "0.005", Kind::F64Pos),
    ("train.lambda_dssim", "0.2", Kind::F64NonNeg),
    ("train.lambda_exp", "0.1", Kind::F64NonNeg),
    ("train.lambda_escale", "0.01", Kind::F64NonNeg),
    ("train.lambda_evar", "0.1", Kind::F64NonNeg),
    ("train.lambda_gamma", "0.1", Kind::F64NonNeg),
    ("train.gamma_prior", "2.2", Kind::F64Pos),
    ("train.views_per_step", "0", Kind::Usize),
    ("train.pairs_per_step", "1", Kind::Usize),
    ("train.checkpoint_every", "0", Kind::U64),
    ("train.exposure_init_std", "0.05", Kind::F64Pos),
    ("train.background", "0,0,0", Kind::Rgb),
    ("eval.his_norm", "rms", Kind::HisNorm),
];

fn schema_entry(key: &str) -> Option<&'static (&'static str, &'static str, Kind)> {
    SCHEMA.iter().find(|(k, _, _)| *k == key)
}

fn check_value(key: &str, value: &str, kind: Kind) -> Result<(), ConfigError> {
    let bad = |msg: String| ConfigError::BadValue(key.to_string(), msg);
    match kind {
        Kind::U64 => {
            value
                .parse::<u64>()
                .map_err(|_| bad(format!("'{value}' is not an unsigned integer")))?;
        }
        Kind::Usize => {
            value
                .parse::<usize>()
                .map_err(|_| bad(format!("'{value}' is not an unsigned integer")))?;
        }
        Kind::F64Pos => {
            let v: f64 = value
                .parse()
                .map_err(|_| bad(format!("'{value}' is not a number")))?;
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{v} must be positive")));
            }
        }
        Kind::F64NonNeg => {
            let v: f64 = value
                .parse()
                .map_err(|_| bad(format!("'{value}' is not a number")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{v} must be non-negative")));
            }
        }
        Kind::Mode => {
            if TrainMode::parse(value).is_none() {
                return Err(bad(format!("'{value}' is not 'p2gs' or 'ldr-baseline'")));
            }
        }
        Kind::Policy => {
            if value != "const" && value != "var" {
                return Err(bad(format!("'{value}' is not 'const' or 'var'")));
            }
        }
        Kind::HisNorm => {
            if value != "rms" && value != "raw" {
                return Err(bad(format!("'{value}' is not 'rms' or 'raw'")));
            }
        }
        Kind::Rgb => {
            let parts: Vec<&str> = value.split(',').collect();
            if parts.len() != 3 || parts.iter().any(|p| p.trim().parse::<f64>().is_err()) {
                return Err(bad(format!("'{value}' is not r,g,b")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    ConfigError::Parse(n + 1, format!("expected 'key = value', got '{line}'"))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        Ok(cfg)
    }

    /// Set one key, rejecting unknown keys and malformed values. CLI
    /// overrides go through here after the file, so flags win.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (_, _, kind) =
            schema_entry(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        check_value(key, value, *kind)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' not in schema"))
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get(key).parse().unwrap()
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get(key).parse().unwrap()
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get(key).parse().unwrap()
    }

    pub fn seed(&self) -> u64 {
        self.get_u64("seed")
    }

    /// Sorted `key = value` lines; parsing this text reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn rig(&self) -> RigSpec {
        RigSpec {
            cameras: RigSpec::desk().cameras,
            width: self.get_usize("dataset.width"),
            height: self.get_usize("dataset.height"),
            hfov_deg: self.get_f64("dataset.hfov_deg"),
            frame_rate_hz: self.get_f64("dataset.frame_rate_hz"),
            frame_count: self.get_usize("dataset.frames"),
            speed_mps: self.get_f64("dataset.speed_mps"),
        }
    }

    pub fn exposure_policy(&self) -> ExposurePolicy {
        ExposurePolicy {
            mode: match self.get("dataset.policy") {
                "const" => ExposureMode::Const,
                _ => ExposureMode::Var,
            },
            iso_mean: self.get_f64("dataset.iso_mean"),
            iso_std: self.get_f64("dataset.iso_std"),
            iso_floor: self.get_u64("dataset.iso_floor") as u32,
            seed: self.seed(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_dssim: self.get_f64("train.lambda_dssim"),
            lambda_exp: self.get_f64("train.lambda_exp"),
            lambda_escale: self.get_f64("train.lambda_escale"),
            lambda_evar: self.get_f64("train.lambda_evar"),
            lambda_gamma: self.get_f64("train.lambda_gamma"),
            gamma_prior: self.get_f64("train.gamma_prior"),
        }
    }

    pub fn background(&self) -> [f64; 3] {
        let parts: Vec<f64> = self
            .get("train.background")
            .split(',')
            .map(|p| p.trim().parse().unwrap())
            .collect();
        [parts[0], parts[1], parts[2]]
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.get_u64("train.iterations"),
            seed: self.seed(),
            mode: TrainMode::parse(self.get("train.mode")).unwrap(),
            lr_color: self.get_f64("train.lr_color"),
            lr_opacity: self.get_f64("train.lr_opacity"),
            lr_exposure: self.get_f64("train.lr_exposure"),
            lr_gamma: self.get_f64("train.lr_gamma"),
            weights: self.loss_weights(),
            views_per_step: self.get_usize("train.views_per_step"),
            pairs_per_step: self.get_usize("train.pairs_per_step"),
            checkpoint_every: self.get_u64("train.checkpoint_every"),
            exposure_init_std: self.get_f64("train.exposure_init_std"),
            background: self.background(),
        }
    }

    pub fn his_norm(&self) -> HisNorm {
        match self.get("eval.his_norm") {
            "raw" => HisNorm::Raw,
            _ => HisNorm::Rms,
        }
    }
}

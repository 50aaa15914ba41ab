//! Run configuration: one TOML file, `--set` overrides, cross-section checks.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fskws_core::augment::AugmentConfig;
use fskws_core::buffer::BufferConfig;
use fskws_core::dsp::DspConfig;
use fskws_core::encoder::EncoderConfig;
use fskws_core::eval::{ThresholdMode, TrialSpec};
use fskws_core::inference::{DetectionConfig, THRESHOLD_DISABLED};
use fskws_core::proto::Distance;
use fskws_core::source::{DatasetOptions, OracleGenConfig};
use fskws_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "FSKWS_CONFIG";

/// A problem with the configuration rather than with the data or the run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    /// Keyword dataset used by `evaluate` and `export-embeddings` when no `--dataset` is given.
    pub dataset: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { output_dir: PathBuf::from("runs/default"), dataset: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_targets: usize,
    pub n_unknown: usize,
    pub k_shots: Vec<usize>,
    pub n_trials: usize,
    pub distance: Distance,
    pub threshold: ThresholdMode,
    /// Held-out synthetic classes when no dataset is given.
    pub oracle_classes: usize,
    pub oracle_support: usize,
    pub oracle_test: usize,
    /// Corrupt test queries with noise at an SNR drawn from this range.
    pub query_snr_db: Option<(f64, f64)>,
    /// Row label in the report table.
    pub method: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = TrialSpec::default();
        Self {
            n_targets: t.n_targets,
            n_unknown: t.n_unknown,
            k_shots: t.k_shots,
            n_trials: t.n_trials,
            distance: t.distance,
            threshold: t.threshold,
            oracle_classes: 30,
            oracle_support: 40,
            oracle_test: 20,
            query_snr_db: None,
            method: "proto".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub d_th: f64,
    pub distance: Distance,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { d_th: THRESHOLD_DISABLED, distance: Distance::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub dsp: DspConfig,
    pub augment: AugmentConfig,
    pub oracle: OracleGenConfig,
    pub buffer: BufferConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
    pub dataset: DatasetOptions,
}

impl RunConfig {
    /// Parse TOML text, apply `key.path=value` overrides, then validate.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from `path` (or built-in defaults when `None`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: fskws_core::Result<()>| r.map_err(|e| config_err(e.to_string()));
        wrap(self.dsp.validate())?;
        wrap(self.augment.validate())?;
        wrap(self.oracle.validate())?;
        wrap(self.buffer.validate())?;
        wrap(self.encoder.validate())?;
        wrap(self.train.validate())?;
        wrap(self.train.check_buffer(&self.buffer))?;
        wrap(self.trial_spec(0).validate())?;
        wrap(self.detection().validate())?;
        if self.train.distance != self.eval.distance || self.train.distance != self.detect.distance {
            return Err(config_err("train.distance, eval.distance and detect.distance must agree"));
        }
        if self.dsp.n_mfcc != self.encoder.input_dim {
            return Err(config_err(format!("dsp.n_mfcc ({}) must equal encoder.input_dim ({})", self.dsp.n_mfcc, self.encoder.input_dim)));
        }
        let frames = self.dsp.frame_count(self.dsp.clip_len());
        if frames < self.encoder.min_frames() {
            return Err(config_err(format!("clips give {frames} frames but the encoder needs {}", self.encoder.min_frames())));
        }
        let e = &self.eval;
        if e.oracle_classes < e.n_targets + e.n_unknown {
            return Err(config_err("eval.oracle_classes must be at least n_targets + n_unknown"));
        }
        if e.oracle_support < e.k_shots.iter().copied().max().unwrap_or(0) || e.oracle_test == 0 {
            return Err(config_err("eval.oracle_support must cover the largest K and eval.oracle_test must be positive"));
        }
        if let Some((lo, hi)) = e.query_snr_db {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(config_err("eval.query_snr_db must be an ordered pair of finite numbers"));
            }
        }
        Ok(())
    }

    /// Trial protocol; `seed` comes from the evaluation stream of the global seed.
    pub fn trial_spec(&self, seed: u64) -> TrialSpec {
        TrialSpec {
            n_targets: self.eval.n_targets,
            n_unknown: self.eval.n_unknown,
            k_shots: self.eval.k_shots.clone(),
            n_trials: self.eval.n_trials,
            seed,
            distance: self.eval.distance,
            threshold: self.eval.threshold,
        }
    }

    pub fn detection(&self) -> DetectionConfig {
        DetectionConfig { d_th: self.detect.d_th, distance: self.detect.distance }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }

    /// Write `<name>.config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{name}.config.toml"));
        fskws_core::encoder::write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override {spec:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override {spec:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

//! Run configuration: JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset_io::Dataset;
use crate::gateway::{self, ExecSettings, ModelSpec, RetryPolicy, SpecError};
use crate::prompt_kit::{self, PromptError, PromptSet};
use crate::ranker::{SelectError, SelectionSize, Strategy};

/// Fixed conventions folded into every fingerprint.
pub const DECISIONS: [(&str, &str); 6] = [
    ("std", "population"),
    ("fraction_rounding", "floor"),
    ("rank_tie_break", "ascending_sample_id"),
    ("argmax_tie_break", "smallest_score"),
    ("degenerate_cell", "token_score_zero"),
    ("ablation_reference", "largest_param_count_prompt_0"),
];

pub const DEFAULT_K: u32 = 5;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("alpha must be finite and >= 0, got {0}")]
    BadAlpha(f64),
    #[error("set either fraction or count, not both")]
    FractionAndCount,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Selection(#[from] SelectError),
    #[error("max_inflight and max_inflight_global must be >= 1")]
    BadConcurrency,
    #[error("retry.max_attempts must be >= 1")]
    BadRetry,
    #[error("histogram_bins must be >= 1")]
    BadBins,
}

fn default_prompts() -> String {
    "default".into()
}
fn default_k() -> u32 {
    DEFAULT_K
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}
fn default_max_inflight() -> usize {
    gateway::DEFAULT_MAX_INFLIGHT
}
fn default_max_inflight_global() -> usize {
    gateway::DEFAULT_MAX_INFLIGHT_GLOBAL
}
fn default_timeout_ms() -> u64 {
    gateway::DEFAULT_TIMEOUT_MS
}
fn default_bins() -> usize {
    20
}
fn default_curve() -> Vec<f64> {
    (1..=10).map(|t| t as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    /// `"default"` for the built-in templates, otherwise a path to a JSON array.
    #[serde(default = "default_prompts")]
    pub prompts: String,
    #[serde(default = "default_k")]
    pub k: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub count: Option<usize>,
    /// Defaults to `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_max_inflight_global")]
    pub max_inflight_global: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_curve")]
    pub curve_fractions: Vec<f64>,
    /// Optional JSON object `{sample_id: tag}` for per-tag selection shares.
    #[serde(default)]
    pub tags_path: Option<PathBuf>,
}

fn default_strategy() -> Strategy {
    Strategy::Selectit
}

/// Command-line overrides; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub k: Option<u32>,
    pub alpha: Option<f64>,
    pub fraction: Option<f64>,
    pub count: Option<usize>,
    pub strategy: Option<Strategy>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Minimal configuration with defaults for everything optional.
    pub fn new(dataset_path: impl Into<PathBuf>, models: Vec<ModelSpec>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset_path: dataset_path.into(),
            prompts: default_prompts(),
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            models,
            strategy: Strategy::Selectit,
            fraction: None,
            count: None,
            cache_dir: None,
            out_dir: out_dir.into(),
            seed: 0,
            max_inflight: default_max_inflight(),
            max_inflight_global: default_max_inflight_global(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout_ms(),
            histogram_bins: default_bins(),
            curve_fractions: default_curve(),
            tags_path: None,
        }
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset_path);
        resolve(&mut cfg.out_dir);
        if let Some(c) = cfg.cache_dir.as_mut() {
            resolve(c);
        }
        if let Some(t) = cfg.tags_path.as_mut() {
            resolve(t);
        }
        if cfg.prompts != "default" {
            let mut p = PathBuf::from(&cfg.prompts);
            resolve(&mut p);
            cfg.prompts = p.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(k) = o.k {
            self.k = k;
        }
        if let Some(a) = o.alpha {
            self.alpha = a;
        }
        if let Some(f) = o.fraction {
            self.fraction = Some(f);
            self.count = None;
        }
        if let Some(c) = o.count {
            self.count = Some(c);
            self.fraction = None;
        }
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
    }

    pub fn selection_size(&self) -> Result<SelectionSize, ConfigError> {
        let size = match (self.fraction, self.count) {
            (Some(_), Some(_)) => return Err(ConfigError::FractionAndCount),
            (Some(f), None) => SelectionSize::Fraction(f),
            (None, Some(c)) => SelectionSize::Count(c),
            (None, None) => SelectionSize::Fraction(DEFAULT_FRACTION),
        };
        Ok(size.validate()?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = prompt_kit::check_k(self.k)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(ConfigError::BadAlpha(self.alpha));
        }
        gateway::validate_specs(&self.models, k)?;
        self.selection_size()?;
        if self.max_inflight == 0 || self.max_inflight_global == 0 {
            return Err(ConfigError::BadConcurrency);
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::BadRetry);
        }
        if self.histogram_bins == 0 {
            return Err(ConfigError::BadBins);
        }
        Ok(())
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ConfigError> {
        Ok(if self.prompts == "default" {
            prompt_kit::default_prompt_set(self.k)?
        } else {
            prompt_kit::load_prompt_set(&self.prompts, self.k)?
        })
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
            .join("probs.jsonl")
    }

    pub fn exec_settings(&self) -> ExecSettings {
        ExecSettings {
            max_inflight: self.max_inflight,
            max_inflight_global: self.max_inflight_global,
            retry: self.retry,
            timeout_ms: self.timeout_ms,
        }
    }

    /// Hash of everything that changes results: scale, alpha, prompt texts,
    /// model identities and weights, selection settings, the dataset's sample
    /// ids and the fixed conventions. Paths, endpoints, credentials and
    /// concurrency settings are excluded.
    pub fn fingerprint(&self, prompts: &PromptSet, dataset: &Dataset) -> String {
        let models: Vec<_> = self
            .models
            .iter()
            .map(|m| {
                json!({
                    "model_id": m.model_id,
                    "api_model_name": m.api_model_name,
                    "param_count_b": m.param_count_b,
                    "top_logprobs": m.top_logprobs,
                })
            })
            .collect();
        let mut ids = Sha256::new();
        for s in &dataset.samples {
            ids.update(s.sample_id.as_str().as_bytes());
            ids.update(b"\n");
        }
        let decisions: serde_json::Map<String, serde_json::Value> =
            DECISIONS.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        let canonical = json!({
            "k": prompts.k,
            "alpha": self.alpha,
            "prompts": prompts.templates(),
            "models": models,
            "strategy": self.strategy,
            "selection": self.selection_size().ok(),
            "seed": self.seed,
            "dataset": hex8(&ids.finalize()),
            "decisions": decisions,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        hex8(&digest)
    }
}

fn hex8(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

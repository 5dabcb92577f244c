//! The `score`, `select`, `report` and `cache` commands over a run directory.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! cache/probs.jsonl          raw score-token probabilities (append-only)
//! breakdowns.jsonl           one score lattice per sample, dataset order
//! selected.json              chosen samples, Alpaca format, dataset order
//! selection_report.jsonl     header line + one line per sample, rank order
//! selections/<strategy>.jsonl  every strategy selected so far
//! reports/*.csv
//! run_meta.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::config::{ConfigError, RunConfig, DECISIONS};
use crate::dataset_io::{self, Dataset, DatasetError};
use crate::gateway::{self, ExecError};
use crate::ranker::{self, SelectError, SelectionReport, Strategy};
use crate::score_cache::{self, CacheError, ScoreCache, VerifyReport};
use crate::scoring::{self, LatticeShape, ScoreBreakdown, ScoringError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const BREAKDOWNS_FILE: &str = "breakdowns.jsonl";
pub const SELECTED_FILE: &str = "selected.json";
pub const REPORT_FILE: &str = "selection_report.jsonl";
pub const SELECTIONS_DIR: &str = "selections";
pub const REPORTS_DIR: &str = "reports";
pub const META_FILE: &str = "run_meta.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{failed} of {planned} inference cells failed (first: {first_error}); completed cells are cached")]
    PartialInference {
        failed: usize,
        planned: usize,
        first_error: String,
    },
    #[error("required input missing: {0}")]
    MissingInput(PathBuf),
    #[error("cache {path} has {corrupt} corrupt line(s)")]
    CorruptCache { path: PathBuf, corrupt: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("cannot start HTTP client: {0}")]
    Client(String),
    #[error("malformed {path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Select(SelectError::UnknownStrategy(_)) => EXIT_CONFIG,
            PipelineError::Dataset(DatasetError::MalformedJson { .. } | DatasetError::SchemaViolation { .. }) => {
                EXIT_CONFIG
            }
            PipelineError::PartialInference { .. } => EXIT_PARTIAL,
            _ => EXIT_IO,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-invocation options that are not part of the run configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Timestamp written instead of the wall clock, for reproducible outputs.
    pub frozen_time: Option<String>,
}

impl RunOptions {
    pub fn frozen(ts: impl Into<String>) -> Self {
        RunOptions {
            frozen_time: Some(ts.into()),
        }
    }

    fn now(&self) -> String {
        self.frozen_time
            .clone()
            .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
    }
}

struct Prepared {
    dataset: Dataset,
    prompts: crate::prompt_kit::PromptSet,
    fingerprint: String,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    cfg.validate()?;
    let prompts = cfg.prompt_set()?;
    let dataset = dataset_io::load_dataset(&cfg.dataset_path)?;
    let fingerprint = cfg.fingerprint(&prompts, &dataset);
    Ok(Prepared {
        dataset,
        prompts,
        fingerprint,
    })
}

fn ensure_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Merges `section` into `run_meta.json` under `stage`.
fn update_meta(cfg: &RunConfig, fingerprint: &str, opts: &RunOptions, stage: &str, section: Value) -> Result<(), PipelineError> {
    let path = cfg.out_dir.join(META_FILE);
    let mut meta = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str::<Value>(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    let obj = meta.as_object_mut().expect("object");
    let decisions: serde_json::Map<String, Value> =
        DECISIONS.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    obj.insert("config_fingerprint".into(), json!(fingerprint));
    obj.insert("decisions".into(), Value::Object(decisions));
    obj.insert(
        stage.into(),
        json!({ "completed_at": opts.now(), "summary": section }),
    );
    let mut text = serde_json::to_string_pretty(&meta).expect("json");
    text.push('\n');
    write_file(&path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub samples: usize,
    pub rejected_records: usize,
    pub lattice_cells: usize,
    pub cached_before: usize,
    pub fetched: usize,
    pub request_attempts: u64,
    pub failed: usize,
    pub degenerate_cells: usize,
}

impl ScoreSummary {
    /// The part of the summary that depends only on the run's inputs, not on
    /// how much of the cache was already warm.
    fn outputs(&self) -> Value {
        json!({
            "samples": self.samples,
            "rejected_records": self.rejected_records,
            "lattice_cells": self.lattice_cells,
            "failed": self.failed,
            "degenerate_cells": self.degenerate_cells,
        })
    }
}

/// Fills the cache for every missing (sample, prompt, model) cell, then
/// writes one score breakdown per sample.
pub fn cmd_score(cfg: &RunConfig, opts: &RunOptions) -> Result<ScoreSummary, PipelineError> {
    let Prepared {
        dataset,
        prompts,
        fingerprint,
    } = prepare(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let mut cache = ScoreCache::open(cfg.cache_path())?;

    let plan = gateway::score_plan(&dataset, &prompts, &cfg.models, |k| cache.contains(k));
    let lattice_cells = dataset.count() * prompts.len() * cfg.models.len();
    let mut summary = ScoreSummary {
        samples: dataset.count(),
        rejected_records: dataset.rejections.len(),
        lattice_cells,
        cached_before: lattice_cells - plan.len(),
        fetched: 0,
        request_attempts: 0,
        failed: 0,
        degenerate_cells: 0,
    };

    if !plan.is_empty() {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| PipelineError::Client(e.to_string()))?;
        let settings = cfg.exec_settings();
        let stamp = || opts.now();
        let outcome = runtime
            .block_on(gateway::execute_plan(
                &plan,
                &dataset,
                &prompts,
                &cfg.models,
                &settings,
                &mut cache,
                &stamp,
            ))
            .map_err(|e| match e {
                ExecError::Cache(c) => PipelineError::Cache(c),
                ExecError::Gateway(g) => PipelineError::Client(g.to_string()),
            })?;
        cache.sync()?;
        summary.fetched = outcome.written;
        summary.request_attempts = outcome.attempts;
        summary.failed = outcome.failures.len();
        if let Some((key, failure)) = outcome.failures.first() {
            update_meta(cfg, &fingerprint, opts, "score", summary.outputs())?;
            return Err(PipelineError::PartialInference {
                failed: outcome.failures.len(),
                planned: plan.len(),
                first_error: format!(
                    "sample {} prompt {} model {}: {failure}",
                    key.sample_id, key.prompt_id, key.model_id
                ),
            });
        }
    }

    let breakdowns = score_all(&dataset, &cache, cfg, prompts.len(), &fingerprint)?;
    summary.degenerate_cells = breakdowns.iter().map(|b| b.degenerate_cells).sum();
    write_breakdowns(&cfg.out_dir.join(BREAKDOWNS_FILE), &breakdowns)?;
    update_meta(cfg, &fingerprint, opts, "score", summary.outputs())?;
    Ok(summary)
}

/// Scores every sample of `dataset` from cached records only.
pub fn score_all(
    dataset: &Dataset,
    cache: &ScoreCache,
    cfg: &RunConfig,
    prompt_count: usize,
    fingerprint: &str,
) -> Result<Vec<ScoreBreakdown>, PipelineError> {
    let shape = LatticeShape {
        k: cfg.k as u8,
        prompt_count,
        alpha: cfg.alpha,
    };
    dataset
        .samples
        .iter()
        .map(|s| {
            let records: Vec<_> = cache
                .records_for(&s.sample_id)
                .filter(|r| r.k == shape.k)
                .collect();
            Ok(scoring::score_sample(&s.sample_id, &records, &cfg.models, shape, fingerprint)?)
        })
        .collect()
}

pub fn write_breakdowns(path: &Path, breakdowns: &[ScoreBreakdown]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for b in breakdowns {
        out.push_str(&serde_json::to_string(b).expect("breakdown serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_breakdowns(path: &Path) -> Result<Vec<ScoreBreakdown>, PipelineError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingInput(path.to_path_buf()))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectSummary {
    pub strategy: Strategy,
    pub total: usize,
    pub selected: usize,
    pub boundary_score: Option<f64>,
}

/// Ranks the scored samples under the configured strategy and writes the
/// curated dataset plus its selection report.
pub fn cmd_select(cfg: &RunConfig, opts: &RunOptions) -> Result<SelectSummary, PipelineError> {
    let breakdowns = read_breakdowns(&cfg.out_dir.join(BREAKDOWNS_FILE))?;
    let Prepared {
        dataset, fingerprint, ..
    } = prepare(cfg)?;
    let size = cfg.selection_size()?;
    let ranked = ranker::rank(&breakdowns, cfg.strategy, &dataset, cfg.seed)?;
    let report = ranker::select_top(&ranked, cfg.strategy, size, &fingerprint)?;
    let selected = ranker::emit_selected(
        &dataset,
        &report,
        cfg.out_dir.join(SELECTED_FILE),
        cfg.out_dir.join(REPORT_FILE),
    )?;
    let sel_dir = cfg.out_dir.join(SELECTIONS_DIR);
    ensure_dir(&sel_dir)?;
    report.write(sel_dir.join(format!("{}.jsonl", cfg.strategy)))?;

    let summary = SelectSummary {
        strategy: cfg.strategy,
        total: report.header.total,
        selected,
        boundary_score: report.header.boundary_score,
    };
    update_meta(cfg, &fingerprint, opts, "select", json!(summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub files: Vec<String>,
    pub strategies_compared: Vec<Strategy>,
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput(path))
    }
}

/// Writes the length, curve, histogram (and, with several strategies
/// selected, overlap) CSVs under `reports/`.
pub fn cmd_report(cfg: &RunConfig, opts: &RunOptions) -> Result<ReportSummary, PipelineError> {
    let report_path = require(cfg.out_dir.join(REPORT_FILE))?;
    let breakdowns_path = require(cfg.out_dir.join(BREAKDOWNS_FILE))?;
    let report = SelectionReport::read(&report_path)?;
    let breakdowns = read_breakdowns(&breakdowns_path)?;
    let Prepared {
        dataset, fingerprint, ..
    } = prepare(cfg)?;

    let out = cfg.out_dir.join(REPORTS_DIR);
    ensure_dir(&out)?;
    let mut files = Vec::new();

    let stats = analysis::length_stats(&dataset, &report)?;
    analysis::write_length_stats_csv(out.join("length_stats.csv"), &stats)?;
    files.push("length_stats.csv".to_owned());

    let curve = analysis::fraction_curve(&report.ranked_ids(), &dataset, &cfg.curve_fractions)?;
    analysis::write_fraction_curve_csv(out.join("fraction_curve.csv"), &curve)?;
    files.push("fraction_curve.csv".to_owned());

    let scores: Vec<f64> = breakdowns.iter().map(|b| b.s_model).collect();
    let hist = analysis::score_histogram(&scores, cfg.histogram_bins, cfg.k as f64)?;
    analysis::write_histogram_csv(out.join("histogram.csv"), &hist)?;
    files.push("histogram.csv".to_owned());

    let mut by_strategy: BTreeMap<Strategy, SelectionReport> = BTreeMap::new();
    for s in Strategy::ALL {
        let p = cfg.out_dir.join(SELECTIONS_DIR).join(format!("{s}.jsonl"));
        if p.exists() {
            by_strategy.insert(s, SelectionReport::read(&p)?);
        }
    }
    by_strategy.entry(report.header.strategy).or_insert_with(|| report.clone());
    let strategies_compared: Vec<Strategy> = by_strategy.keys().copied().collect();
    if by_strategy.len() >= 2 {
        let anchor = by_strategy
            .get(&Strategy::Selectit)
            .unwrap_or(&report);
        let anchor_strategy = anchor.header.strategy;
        let individuals: Vec<&SelectionReport> = Strategy::INDIVIDUAL
            .iter()
            .filter(|s| **s != anchor_strategy)
            .filter_map(|s| by_strategy.get(s))
            .collect();
        let mut rows = analysis::overlap_table(anchor, &individuals)?;
        for (s, r) in &by_strategy {
            if *s != anchor_strategy && !Strategy::INDIVIDUAL.contains(s) {
                rows.push(analysis::overlap_stats(anchor, r)?);
            }
        }
        analysis::write_overlap_csv(out.join("overlap.csv"), &rows)?;
        files.push("overlap.csv".to_owned());
    }

    if let Some(tags_path) = &cfg.tags_path {
        let tags = analysis::load_tags(tags_path)?;
        let rows = analysis::tag_proportions(&report, &tags);
        analysis::write_tag_csv(out.join("tag_proportions.csv"), &rows)?;
        files.push("tag_proportions.csv".to_owned());
    }

    let summary = ReportSummary {
        files,
        strategies_compared,
    };
    update_meta(cfg, &fingerprint, opts, "report", json!(summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheAction {
    Stats,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheStats {
    pub path: PathBuf,
    pub total: usize,
    pub lines: usize,
    pub per_model_prompt: Vec<(String, u8, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum CacheOutcome {
    Stats(CacheStats),
    Verify(VerifyReport),
}

/// `stats` counts records per (model, prompt); `verify` fails when any line is corrupt.
pub fn cmd_cache(cfg: &RunConfig, action: CacheAction) -> Result<CacheOutcome, PipelineError> {
    let path = cfg.cache_path();
    match action {
        CacheAction::Stats => {
            let cache = ScoreCache::open(&path)?;
            Ok(CacheOutcome::Stats(CacheStats {
                total: cache.len(),
                lines: cache.line_count(),
                per_model_prompt: cache
                    .stats()
                    .into_iter()
                    .map(|((m, p), n)| (m, p, n))
                    .collect(),
                path,
            }))
        }
        CacheAction::Verify => {
            let report = score_cache::verify(&path)?;
            Ok(CacheOutcome::Verify(report))
        }
    }
}

/// Like [`cmd_cache`] with `Verify`, but corrupt lines are an error.
pub fn verify_strict(cfg: &RunConfig) -> Result<VerifyReport, PipelineError> {
    let path = cfg.cache_path();
    let report = score_cache::verify(&path)?;
    if report.corrupt.is_empty() {
        Ok(report)
    } else {
        Err(PipelineError::CorruptCache {
            path,
            corrupt: report.corrupt.len(),
        })
    }
}

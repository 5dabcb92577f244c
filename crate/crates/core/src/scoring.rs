//! Uncertainty-aware quality scores.
//!
//! Three levels of self-reflection are stacked:
//!
//! * token level: the argmax rating over the normalized score-token
//!   probabilities, scaled by how far the argmax probability stands above the
//!   rest (`s_token = s_base * sum_i |p_i - p_base| / (K - 1)`);
//! * sentence level: the mean token score over the rating prompts, damped by
//!   their spread (`s_sent = mean / (1 + alpha * std)`, population std);
//! * model level: a parameter-count weighted average of the sentence scores
//!   of several models.
//!
//! The single-strategy ablations reuse the same formulas with the raw argmax
//! rating `s_base` as input instead of `s_token`.
//!
//! All functions here are pure.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::SampleId;
use crate::gateway::{ModelSpec, ProbRecord};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("all score-token probabilities are zero")]
    DegenerateSample,
    #[error("probability vector needs at least 2 entries, got {0}")]
    TooFewScores(usize),
    #[error("invalid probability {value} at score {score}")]
    InvalidProbability { score: usize, value: f64 },
    #[error("length mismatch: {scores} scores vs {weights} parameter counts")]
    LengthMismatch { scores: usize, weights: usize },
    #[error("model-level score needs at least one model")]
    NoModels,
    #[error("parameter count must be positive and finite, got {0}")]
    InvalidParamCount(f64),
    #[error("sample {sample_id}: missing cell (prompt {prompt_id}, model {model_id})")]
    MissingCell {
        sample_id: SampleId,
        prompt_id: u8,
        model_id: String,
    },
    #[error("sample {sample_id}: record for (prompt {prompt_id}, model {model_id}) has {found} probabilities, expected {expected}")]
    ScaleMismatch {
        sample_id: SampleId,
        prompt_id: u8,
        model_id: String,
        expected: usize,
        found: usize,
    },
}

/// Score-token probabilities rescaled to sum to one. Index `j` holds score `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedProbs {
    p: Vec<f64>,
}

impl NormalizedProbs {
    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    /// Probability of rating `score` (1-based).
    pub fn prob(&self, score: u8) -> f64 {
        self.p[score as usize - 1]
    }
}

pub fn normalize(raw: &[f64]) -> Result<NormalizedProbs, ScoringError> {
    if raw.len() < 2 {
        return Err(ScoringError::TooFewScores(raw.len()));
    }
    for (j, &v) in raw.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(ScoringError::InvalidProbability { score: j + 1, value: v });
        }
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Err(ScoringError::DegenerateSample);
    }
    Ok(NormalizedProbs {
        p: raw.iter().map(|v| v / total).collect(),
    })
}

/// Argmax rating and its probability; ties go to the smallest rating.
pub fn base_score(np: &NormalizedProbs) -> (u8, f64) {
    let mut best = 0;
    for (j, &v) in np.p.iter().enumerate().skip(1) {
        if v > np.p[best] {
            best = j;
        }
    }
    ((best + 1) as u8, np.p[best])
}

/// Mean absolute gap between the argmax probability and every score
/// probability (the argmax term included, contributing zero), over `K - 1`.
pub fn disparity(np: &NormalizedProbs) -> f64 {
    let (_, p_base) = base_score(np);
    let gap: f64 = np.p.iter().map(|p| (p - p_base).abs()).sum();
    gap / (np.k() - 1) as f64
}

pub fn token_score(np: &NormalizedProbs) -> f64 {
    let (s_base, _) = base_score(np);
    s_base as f64 * disparity(np)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    var.sqrt()
}

/// Mean of the per-prompt scores divided by `1 + alpha * std`.
pub fn sentence_score(token_scores: &[f64], alpha: f64) -> f64 {
    debug_assert!(!token_scores.is_empty());
    mean(token_scores) / (1.0 + alpha * population_std(token_scores))
}

pub fn model_weights(params_b: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if params_b.is_empty() {
        return Err(ScoringError::NoModels);
    }
    if let Some(&bad) = params_b.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(ScoringError::InvalidParamCount(bad));
    }
    let total: f64 = params_b.iter().sum();
    Ok(params_b.iter().map(|t| t / total).collect())
}

/// Convex combination of per-model sentence scores, weighted by parameter count.
pub fn model_score(sent_scores: &[f64], params_b: &[f64]) -> Result<f64, ScoringError> {
    if sent_scores.len() != params_b.len() {
        return Err(ScoringError::LengthMismatch {
            scores: sent_scores.len(),
            weights: params_b.len(),
        });
    }
    let weights = model_weights(params_b)?;
    Ok(weights.iter().zip(sent_scores).map(|(w, s)| w * s).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub model_id: String,
    pub prompt_id: u8,
    /// `None` when no score token was observed (degenerate cell).
    pub s_base: Option<u8>,
    pub p_base: Option<f64>,
    pub s_token: f64,
}

impl CellScore {
    pub fn is_degenerate(&self) -> bool {
        self.s_base.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub param_count_b: f64,
    /// Token-level scores in prompt order.
    pub token_scores: Vec<f64>,
    pub s_sent: f64,
    /// Sentence-level formula applied to the raw argmax ratings.
    pub s_sent_from_base: f64,
    pub mean_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub sample_id: SampleId,
    pub config_fingerprint: String,
    pub cells: Vec<CellScore>,
    pub models: Vec<ModelScore>,
    pub s_model: f64,
    /// Model-level formula over per-model mean argmax ratings.
    pub s_model_from_base: f64,
    /// Token-level score of the reference model on prompt 0.
    pub s_token_single: f64,
    /// Sentence-level score from argmax ratings of the reference model.
    pub s_sent_single: f64,
    pub reference_model: String,
    pub degenerate_cells: usize,
}

/// The model with the largest parameter count; the first one listed wins ties.
pub fn reference_model(specs: &[ModelSpec]) -> Option<&ModelSpec> {
    specs.iter().fold(None, |best: Option<&ModelSpec>, m| match best {
        Some(b) if b.param_count_b >= m.param_count_b => Some(b),
        _ => Some(m),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeShape {
    /// Rating scale bound; every record carries this many probabilities.
    pub k: u8,
    pub prompt_count: usize,
    pub alpha: f64,
}

/// Computes the full score lattice of one sample from its `prompt_count × models` records.
pub fn score_sample(
    sample_id: &SampleId,
    records: &[&ProbRecord],
    specs: &[ModelSpec],
    shape: LatticeShape,
    config_fingerprint: &str,
) -> Result<ScoreBreakdown, ScoringError> {
    let reference = reference_model(specs).ok_or(ScoringError::NoModels)?;
    let by_cell: HashMap<(u8, &str), &ProbRecord> = records
        .iter()
        .filter(|r| &r.sample_id == sample_id)
        .map(|r| ((r.prompt_id, r.model_id.as_str()), *r))
        .collect();

    let mut cells = Vec::with_capacity(specs.len() * shape.prompt_count);
    let mut models = Vec::with_capacity(specs.len());
    let mut degenerate_cells = 0;

    for spec in specs {
        let mut token_scores = Vec::with_capacity(shape.prompt_count);
        let mut base_scores = Vec::with_capacity(shape.prompt_count);
        for prompt_id in 0..shape.prompt_count as u8 {
            let rec = by_cell
                .get(&(prompt_id, spec.model_id.as_str()))
                .ok_or_else(|| ScoringError::MissingCell {
                    sample_id: sample_id.clone(),
                    prompt_id,
                    model_id: spec.model_id.clone(),
                })?;
            if rec.probs.len() != shape.k as usize {
                return Err(ScoringError::ScaleMismatch {
                    sample_id: sample_id.clone(),
                    prompt_id,
                    model_id: spec.model_id.clone(),
                    expected: shape.k as usize,
                    found: rec.probs.len(),
                });
            }
            let cell = match normalize(&rec.probs) {
                Ok(np) => {
                    let (s_base, p_base) = base_score(&np);
                    CellScore {
                        model_id: spec.model_id.clone(),
                        prompt_id,
                        s_base: Some(s_base),
                        p_base: Some(p_base),
                        s_token: token_score(&np),
                    }
                }
                Err(ScoringError::DegenerateSample) => {
                    degenerate_cells += 1;
                    CellScore {
                        model_id: spec.model_id.clone(),
                        prompt_id,
                        s_base: None,
                        p_base: None,
                        s_token: 0.0,
                    }
                }
                Err(e) => return Err(e),
            };
            token_scores.push(cell.s_token);
            base_scores.push(cell.s_base.map_or(0.0, f64::from));
            cells.push(cell);
        }
        models.push(ModelScore {
            model_id: spec.model_id.clone(),
            param_count_b: spec.param_count_b,
            s_sent: sentence_score(&token_scores, shape.alpha),
            s_sent_from_base: sentence_score(&base_scores, shape.alpha),
            mean_base: mean(&base_scores),
            token_scores,
        });
    }

    let params: Vec<f64> = models.iter().map(|m| m.param_count_b).collect();
    let sent: Vec<f64> = models.iter().map(|m| m.s_sent).collect();
    let base_means: Vec<f64> = models.iter().map(|m| m.mean_base).collect();
    let s_model = model_score(&sent, &params)?;
    let s_model_from_base = model_score(&base_means, &params)?;

    let ref_model = models
        .iter()
        .find(|m| m.model_id == reference.model_id)
        .expect("reference model is one of the specs");

    Ok(ScoreBreakdown {
        sample_id: sample_id.clone(),
        config_fingerprint: config_fingerprint.to_owned(),
        s_model,
        s_model_from_base,
        s_token_single: ref_model.token_scores[0],
        s_sent_single: ref_model.s_sent_from_base,
        reference_model: reference.model_id.clone(),
        degenerate_cells,
        cells,
        models,
    })
}

//! Score-token probabilities from OpenAI-compatible completion endpoints.
//!
//! One request per (sample, prompt, model): `max_tokens = 1`, `temperature = 0`,
//! `logprobs = top_logprobs`. The top-logprob map of the first generated
//! token is searched for the digits `"1"..="K"` (bare or with a leading
//! space; both variants are summed). Digits not present get probability 0 and
//! are flagged in the missing mask.
//!
//! This is the only module that performs network I/O.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, Semaphore};

use crate::dataset_io::{Dataset, SampleId};
use crate::prompt_kit::PromptSet;
use crate::score_cache::{CacheError, CacheKey, ScoreCache};

pub const DEFAULT_TOP_LOGPROBS: u32 = 20;
pub const DEFAULT_MAX_INFLIGHT: usize = 8;
pub const DEFAULT_MAX_INFLIGHT_GLOBAL: usize = 64;
pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;
const BODY_EXCERPT_CHARS: usize = 256;

fn default_top_logprobs() -> u32 {
    DEFAULT_TOP_LOGPROBS
}

/// One scoring backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub endpoint_url: String,
    pub api_model_name: String,
    /// Parameter count in billions; the model-level weight.
    pub param_count_b: f64,
    /// Name of the environment variable holding a bearer token; empty for none.
    #[serde(default)]
    pub auth_env_var: String,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("model {0}: param_count_b must be positive and finite")]
    NonPositiveParams(String),
    #[error("duplicate model_id {0}")]
    DuplicateModelId(String),
    #[error("model {model_id}: top_logprobs {top} is below K={k}")]
    TopLogprobsTooSmall { model_id: String, top: u32, k: u8 },
    #[error("model entry {0}: empty model_id")]
    EmptyModelId(usize),
    #[error("at least one model is required")]
    NoModels,
}

pub fn validate_specs(specs: &[ModelSpec], k: u8) -> Result<(), SpecError> {
    if specs.is_empty() {
        return Err(SpecError::NoModels);
    }
    let mut seen = std::collections::HashSet::new();
    for (i, s) in specs.iter().enumerate() {
        if s.model_id.is_empty() {
            return Err(SpecError::EmptyModelId(i));
        }
        if !(s.param_count_b.is_finite() && s.param_count_b > 0.0) {
            return Err(SpecError::NonPositiveParams(s.model_id.clone()));
        }
        if s.top_logprobs < k as u32 {
            return Err(SpecError::TopLogprobsTooSmall {
                model_id: s.model_id.clone(),
                top: s.top_logprobs,
                k,
            });
        }
        if !seen.insert(&s.model_id) {
            return Err(SpecError::DuplicateModelId(s.model_id.clone()));
        }
    }
    Ok(())
}

/// Raw (unnormalized) score-token probabilities for one (sample, prompt, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRecord {
    pub sample_id: SampleId,
    pub prompt_id: u8,
    pub model_id: String,
    pub k: u8,
    /// `probs[j]` is the probability of rating `j + 1`.
    pub probs: Vec<f64>,
    pub missing_mask: Vec<bool>,
    pub retrieved_at: String,
    pub backend_fingerprint: String,
}

impl ProbRecord {
    /// Builds a record whose missing mask marks the zero entries.
    pub fn new(
        sample_id: SampleId,
        prompt_id: u8,
        model_id: &str,
        probs: Vec<f64>,
        retrieved_at: String,
        backend_fingerprint: String,
    ) -> Self {
        let missing_mask = probs.iter().map(|p| *p == 0.0).collect();
        ProbRecord {
            sample_id,
            prompt_id,
            model_id: model_id.to_owned(),
            k: probs.len() as u8,
            probs,
            missing_mask,
            retrieved_at,
            backend_fingerprint,
        }
    }

    pub fn from_payload(key: &CacheKey, payload: ProbPayload, retrieved_at: String) -> Self {
        ProbRecord {
            sample_id: key.sample_id.clone(),
            prompt_id: key.prompt_id,
            model_id: key.model_id.clone(),
            k: key.k,
            probs: payload.probs,
            missing_mask: payload.missing_mask,
            retrieved_at,
            backend_fingerprint: payload.backend_fingerprint,
        }
    }

    pub fn key(&self) -> CacheKey {
        CacheKey {
            sample_id: self.sample_id.clone(),
            prompt_id: self.prompt_id,
            model_id: self.model_id.clone(),
            k: self.k,
        }
    }

    /// Checks shape and value ranges.
    pub fn check(&self) -> Result<(), String> {
        let k = self.k as usize;
        if self.probs.len() != k || self.missing_mask.len() != k {
            return Err(format!(
                "expected {k} probabilities and mask entries, found {} and {}",
                self.probs.len(),
                self.missing_mask.len()
            ));
        }
        for (j, (&p, &missing)) in self.probs.iter().zip(&self.missing_mask).enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} for score {} outside [0, 1]", j + 1));
            }
            if missing && p != 0.0 {
                return Err(format!("score {} is masked missing but has probability {p}", j + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbPayload {
    pub probs: Vec<f64>,
    pub missing_mask: Vec<bool>,
    pub backend_fingerprint: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
            GatewayError::Protocol(_) => false,
        }
    }
}

/// Terminal failure of a retried request.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{error} (after {attempts} attempt(s))")]
pub struct FetchFailure {
    pub attempts: u32,
    pub error: GatewayError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
}

fn default_max_backoff_ms() -> u64 {
    30_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 500,
            max_backoff_ms: default_max_backoff_ms(),
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `attempt` (1-based count of failures so far).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = self
            .base_backoff_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(32))
            .min(self.max_backoff_ms);
        if exp == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::thread_rng().gen_range(0..=exp))
    }
}

/// Runs `attempt` until it succeeds, fails with a non-retryable error, or
/// `policy.max_attempts` is reached. Returns the value and the attempt count.
pub async fn retry_with_policy<T, F, Fut>(
    policy: &RetryPolicy,
    mut attempt: F,
) -> Result<(T, u32), FetchFailure>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Result<T, GatewayError>>,
{
    let max = policy.max_attempts.max(1);
    let mut n = 0;
    loop {
        n += 1;
        match attempt().await {
            Ok(v) => return Ok((v, n)),
            Err(error) if error.is_retryable() && n < max => {
                tracing::debug!(attempt = n, %error, "retrying");
                tokio::time::sleep(policy.backoff(n)).await;
            }
            Err(error) => return Err(FetchFailure { attempts: n, error }),
        }
    }
}

/// Pulls the score-token probabilities out of a completions response body.
pub fn extract_probs(body: &Value, k: u8) -> Result<ProbPayload, GatewayError> {
    let top = body
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .and_then(Value::as_object)
        .ok_or_else(|| {
            GatewayError::Protocol("response lacks choices[0].logprobs.top_logprobs[0]".into())
        })?;

    let mut probs = vec![0.0; k as usize];
    let mut missing_mask = vec![true; k as usize];
    for (token, lp) in top {
        let digit = match token.strip_prefix(' ').unwrap_or(token) {
            d if d.len() == 1 => d.as_bytes()[0],
            _ => continue,
        };
        if !(b'1'..=b'0' + k).contains(&digit) {
            continue;
        }
        let lp = lp
            .as_f64()
            .ok_or_else(|| GatewayError::Protocol(format!("logprob for {token:?} is not a number")))?;
        if lp.is_nan() || lp > 1e-9 {
            return Err(GatewayError::Protocol(format!("invalid logprob {lp} for {token:?}")));
        }
        let j = (digit - b'1') as usize;
        probs[j] += lp.min(0.0).exp();
        missing_mask[j] = false;
    }
    // Rounding can push a summed pair a hair above 1.
    for p in &mut probs {
        *p = p.min(1.0);
    }

    let model = body.get("model").and_then(Value::as_str).unwrap_or("");
    let backend_fingerprint = match body.get("system_fingerprint").and_then(Value::as_str) {
        Some(fp) if !fp.is_empty() => format!("{model}/{fp}"),
        _ => model.to_owned(),
    };
    Ok(ProbPayload {
        probs,
        missing_mask,
        backend_fingerprint,
    })
}

#[derive(Debug, Clone)]
pub struct Gateway {
    client: reqwest::Client,
}

impl Gateway {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Gateway { client })
    }

    pub fn completions_url(spec: &ModelSpec) -> String {
        format!("{}/v1/completions", spec.endpoint_url.trim_end_matches('/'))
    }

    /// One completion request; no retries.
    pub async fn fetch_probs(
        &self,
        spec: &ModelSpec,
        rendered_prompt: &str,
        k: u8,
    ) -> Result<ProbPayload, GatewayError> {
        let body = json!({
            "model": spec.api_model_name,
            "prompt": rendered_prompt,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": spec.top_logprobs,
        });
        let mut req = self.client.post(Self::completions_url(spec)).json(&body);
        if !spec.auth_env_var.is_empty() {
            if let Ok(token) = std::env::var(&spec.auth_env_var) {
                req = req.bearer_auth(token);
            }
        }
        let resp = req
            .send()
            .await
            .map_err(|e| GatewayError::Transport(error_chain(&e)))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| GatewayError::Transport(error_chain(&e)))?;
        if !status.is_success() {
            return Err(GatewayError::HttpStatus {
                status: status.as_u16(),
                body: text.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Protocol(format!("response is not JSON: {e}")))?;
        extract_probs(&value, k)
    }

    pub async fn fetch_with_retry(
        &self,
        spec: &ModelSpec,
        rendered_prompt: &str,
        k: u8,
        policy: &RetryPolicy,
    ) -> Result<(ProbPayload, u32), FetchFailure> {
        retry_with_policy(policy, || self.fetch_probs(spec, rendered_prompt, k)).await
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        src = s.source();
    }
    msg
}

/// One (sample, prompt, model) evaluation still to be fetched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub sample_index: usize,
    pub prompt_id: u8,
    pub model_index: usize,
    pub key: CacheKey,
}

/// Enumerates the lattice in sample order, then prompt, then model, skipping
/// keys for which `is_cached` returns true.
pub fn score_plan(
    dataset: &Dataset,
    prompts: &PromptSet,
    specs: &[ModelSpec],
    is_cached: impl Fn(&CacheKey) -> bool,
) -> Vec<WorkItem> {
    let mut items = Vec::new();
    for (sample_index, sample) in dataset.samples.iter().enumerate() {
        for prompt in &prompts.prompts {
            for (model_index, spec) in specs.iter().enumerate() {
                let key = CacheKey {
                    sample_id: sample.sample_id.clone(),
                    prompt_id: prompt.prompt_id,
                    model_id: spec.model_id.clone(),
                    k: prompts.k,
                };
                if !is_cached(&key) {
                    items.push(WorkItem {
                        sample_index,
                        prompt_id: prompt.prompt_id,
                        model_index,
                        key,
                    });
                }
            }
        }
    }
    items
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecSettings {
    pub max_inflight: usize,
    pub max_inflight_global: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
}

impl Default for ExecSettings {
    fn default() -> Self {
        ExecSettings {
            max_inflight: DEFAULT_MAX_INFLIGHT,
            max_inflight_global: DEFAULT_MAX_INFLIGHT_GLOBAL,
            retry: RetryPolicy::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Default)]
pub struct PlanOutcome {
    pub written: usize,
    pub attempts: u64,
    pub failures: Vec<(CacheKey, FetchFailure)>,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Fetches every work item with a per-endpoint in-flight cap and a global
/// cap, and appends results to `cache` in plan order. The caller's task is
/// the only cache writer; fetches hand results over a channel.
pub async fn execute_plan(
    items: &[WorkItem],
    dataset: &Dataset,
    prompts: &PromptSet,
    specs: &[ModelSpec],
    settings: &ExecSettings,
    cache: &mut ScoreCache,
    timestamp: &(dyn Fn() -> String + Sync),
) -> Result<PlanOutcome, ExecError> {
    let gateway = Gateway::new(Duration::from_millis(settings.timeout_ms))?;
    let mut endpoint_caps: HashMap<&str, Arc<Semaphore>> = HashMap::new();
    for s in specs {
        endpoint_caps
            .entry(s.endpoint_url.as_str())
            .or_insert_with(|| Arc::new(Semaphore::new(settings.max_inflight.max(1))));
    }
    let endpoint_caps = &endpoint_caps;
    let gateway = &gateway;
    let k = prompts.k;

    let (tx, mut rx) = mpsc::channel::<(usize, Result<(ProbPayload, u32), FetchFailure>)>(
        settings.max_inflight_global.max(1) * 2,
    );

    let producer = async move {
        futures::stream::iter(items.iter().enumerate())
            .map(|(i, item)| async move {
                let spec = &specs[item.model_index];
                let sample = &dataset.samples[item.sample_index];
                let text = prompts.prompts[item.prompt_id as usize].render(sample, k);
                let cap = &endpoint_caps[spec.endpoint_url.as_str()];
                let result = retry_with_policy(&settings.retry, || async {
                    let _permit = cap.acquire().await.expect("semaphore never closed");
                    gateway.fetch_probs(spec, &text, k).await
                })
                .await;
                (i, result)
            })
            .buffer_unordered(settings.max_inflight_global.max(1))
            .for_each(|res| {
                let tx = tx.clone();
                async move {
                    // The receiver only goes away on a cache write error.
                    let _ = tx.send(res).await;
                }
            })
            .await;
    };

    let writer = async {
        let mut outcome = PlanOutcome::default();
        let mut pending = BTreeMap::new();
        let mut next = 0usize;
        while let Some((i, res)) = rx.recv().await {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&next) {
                let key = &items[next].key;
                match res {
                    Ok((payload, attempts)) => {
                        outcome.attempts += attempts as u64;
                        cache.put(ProbRecord::from_payload(key, payload, timestamp()))?;
                        outcome.written += 1;
                    }
                    Err(failure) => {
                        outcome.attempts += failure.attempts as u64;
                        tracing::warn!(sample = %key.sample_id, prompt = key.prompt_id, model = %key.model_id, error = %failure, "cell failed");
                        outcome.failures.push((key.clone(), failure));
                    }
                }
                next += 1;
            }
        }
        Ok::<_, CacheError>(outcome)
    };

    let ((), outcome) = futures::join!(producer, writer);
    Ok(outcome?)
}

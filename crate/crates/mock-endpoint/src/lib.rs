//! A deterministic `/v1/completions` server for tests and offline runs.
//!
//! Responses depend only on `(model, prompt)`: the top-logprob table is drawn
//! from a ChaCha8 stream seeded by SHA-256 of the pair. Every request is
//! counted, and the in-flight peak is tracked so callers can check their
//! concurrency limits.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;

pub const SYSTEM_FINGERPRINT: &str = "mock-1";
const FILLER: [&str; 6] = [" The", " A", "\n", " I", " This", "."];

/// What the server does with each request.
#[derive(Debug, Clone, Default)]
pub struct Behavior {
    /// Return this `top_logprobs[0]` table for every request.
    pub fixed: Option<Map<String, Value>>,
    /// The first `fail_first` requests get `fail_status`.
    pub fail_first: u64,
    pub fail_status: u16,
    /// Every request gets this status.
    pub always_status: Option<u16>,
    /// Sleep before answering.
    pub delay: Duration,
    /// Roughly one prompt in `no_digit_every` gets a table without digits.
    pub no_digit_every: Option<u32>,
}

impl Behavior {
    pub fn fixed(table: Value) -> Self {
        Behavior {
            fixed: table.as_object().cloned(),
            ..Behavior::default()
        }
    }

    pub fn failing_first(n: u64, status: u16) -> Self {
        Behavior {
            fail_first: n,
            fail_status: status,
            ..Behavior::default()
        }
    }

    pub fn always(status: u16) -> Self {
        Behavior {
            always_status: Some(status),
            ..Behavior::default()
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// Counters shared between the server and the test that started it.
#[derive(Debug, Default)]
pub struct Stats {
    requests: AtomicU64,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    per_prompt: Mutex<HashMap<(String, String), u64>>,
}

impl Stats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Largest number of requests seen for a single (model, prompt) pair.
    pub fn max_repeats(&self) -> u64 {
        self.per_prompt.lock().unwrap().values().copied().max().unwrap_or(0)
    }

    pub fn distinct_prompts(&self) -> usize {
        self.per_prompt.lock().unwrap().len()
    }
}

struct InFlight<'a>(&'a Stats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a Stats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.peak.fetch_max(now, Ordering::SeqCst);
        InFlight(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct AppState {
    behavior: Behavior,
    stats: Arc<Stats>,
}

#[derive(Debug, Deserialize)]
struct CompletionRequest {
    model: String,
    prompt: String,
    #[serde(default)]
    logprobs: Option<usize>,
}

fn seed_for(model: &str, prompt: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0x1f]);
    h.update(prompt.as_bytes());
    h.finalize().into()
}

/// The token → logprob table served for `(model, prompt)`, before truncation
/// to the requested top-N.
pub fn logprob_table(model: &str, prompt: &str, no_digit_every: Option<u32>) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::from_seed(seed_for(model, prompt));
    let digits = no_digit_every.is_none_or(|n| rng.gen_range(0..n.max(1)) != 0);

    let mut weights: Vec<(String, f64)> = Vec::new();
    if digits {
        for d in 1..=9u8 {
            let w: f64 = rng.gen::<f64>().powi(3) + 1e-4;
            weights.push((format!(" {d}"), w));
            if rng.gen_bool(0.25) {
                weights.push((d.to_string(), w * rng.gen_range(0.05..0.5)));
            }
        }
    }
    for f in FILLER {
        weights.push((f.to_owned(), rng.gen::<f64>() * 0.05 + 1e-3));
    }
    // Leave some mass for tokens not listed.
    let total: f64 = weights.iter().map(|(_, w)| w).sum::<f64>() * rng.gen_range(1.02..1.3);
    weights
        .into_iter()
        .map(|(t, w)| (t, (w / total).ln()))
        .collect()
}

fn top_n(mut table: Vec<(String, f64)>, n: usize) -> Map<String, Value> {
    table.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    table.truncate(n);
    table.into_iter().map(|(t, lp)| (t, json!(lp))).collect()
}

async fn completions(State(state): State<Arc<AppState>>, Json(req): Json<CompletionRequest>) -> Response {
    let stats = &state.stats;
    let _guard = InFlight::enter(stats);
    let n = stats.requests.fetch_add(1, Ordering::SeqCst);
    *stats
        .per_prompt
        .lock()
        .unwrap()
        .entry((req.model.clone(), req.prompt.clone()))
        .or_default() += 1;

    let b = &state.behavior;
    if !b.delay.is_zero() {
        tokio::time::sleep(b.delay).await;
    }
    let status = b
        .always_status
        .or((n < b.fail_first).then_some(b.fail_status));
    if let Some(code) = status {
        let code = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (code, Json(json!({"error": {"message": "injected failure"}}))).into_response();
    }

    let top = match &b.fixed {
        Some(t) => t.clone(),
        None => top_n(
            logprob_table(&req.model, &req.prompt, b.no_digit_every),
            req.logprobs.unwrap_or(5).max(1),
        ),
    };
    let text = top
        .iter()
        .max_by(|a, b| {
            let (x, y) = (a.1.as_f64().unwrap_or(f64::MIN), b.1.as_f64().unwrap_or(f64::MIN));
            x.total_cmp(&y)
        })
        .map(|(t, _)| t.clone())
        .unwrap_or_default();
    Json(json!({
        "id": format!("cmpl-{n}"),
        "object": "text_completion",
        "model": req.model,
        "system_fingerprint": SYSTEM_FINGERPRINT,
        "choices": [{
            "index": 0,
            "text": text,
            "finish_reason": "length",
            "logprobs": {"tokens": [text], "top_logprobs": [top]},
        }],
    }))
    .into_response()
}

pub fn router(behavior: Behavior, stats: Arc<Stats>) -> Router {
    Router::new()
        .route("/v1/completions", post(completions))
        .with_state(Arc::new(AppState { behavior, stats }))
}

/// A server running on its own thread and runtime; stopped on drop.
pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(behavior: Behavior) -> Self {
        Self::start_on("127.0.0.1:0".parse().unwrap(), behavior).expect("mock server binds")
    }

    pub fn start_on(addr: SocketAddr, behavior: Behavior) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(Stats::default());
        let app = router(behavior, stats.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .expect("mock runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(MockServer {
            addr,
            stats,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

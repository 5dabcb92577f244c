use std::time::{Duration, Instant};

use selective_core::dataset_io::{Dataset, Sample};
use selective_core::gateway::{
    execute_plan, score_plan, ExecSettings, Gateway, GatewayError, ModelSpec, RetryPolicy,
};
use selective_core::prompt_kit::default_prompt_set;
use selective_core::score_cache::ScoreCache;
use selective_mock::{Behavior, MockServer};
use serde_json::json;

fn spec(url: &str, id: &str) -> ModelSpec {
    ModelSpec {
        model_id: id.into(),
        endpoint_url: url.into(),
        api_model_name: format!("{id}-api"),
        param_count_b: 7.0,
        auth_env_var: String::new(),
        top_logprobs: 20,
    }
}

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_backoff_ms: 1,
        max_backoff_ms: 5,
    }
}

#[test]
fn fixed_table_is_exponentiated() {
    let ln = f64::ln;
    let server = MockServer::start(Behavior::fixed(json!({
        " 5": ln(0.30), " 1": ln(0.05), " 2": ln(0.05), " 3": ln(0.05), " 4": ln(0.05), " The": ln(0.2)
    })));
    let gw = Gateway::new(Duration::from_secs(5)).unwrap();
    let p = rt().block_on(gw.fetch_probs(&spec(&server.url(), "m"), "rate this", 5)).unwrap();
    // exp(ln x) is x to within one ulp or so.
    for (got, want) in p.probs.iter().zip([0.05, 0.05, 0.05, 0.05, 0.30]) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
    assert_eq!(p.missing_mask, vec![false; 5]);
    assert_eq!(p.backend_fingerprint, "m-api/mock-1");
}

#[test]
fn no_digits_means_all_missing() {
    let server = MockServer::start(Behavior::fixed(json!({" The": -0.5, " A": -1.5, "\n": -3.0})));
    let gw = Gateway::new(Duration::from_secs(5)).unwrap();
    let p = rt().block_on(gw.fetch_probs(&spec(&server.url(), "m"), "x", 5)).unwrap();
    assert_eq!(p.probs, vec![0.0; 5]);
    assert_eq!(p.missing_mask, vec![true; 5]);
}

#[test]
fn spaced_and_bare_digits_are_summed() {
    let server = MockServer::start(Behavior::fixed(json!({"3": 0.1f64.ln(), " 3": 0.2f64.ln()})));
    let gw = Gateway::new(Duration::from_secs(5)).unwrap();
    let p = rt().block_on(gw.fetch_probs(&spec(&server.url(), "m"), "x", 5)).unwrap();
    assert!((p.probs[2] - 0.3).abs() < 1e-15);
    assert_eq!(p.missing_mask, vec![true, true, false, true, true]);
}

#[test]
fn two_503s_then_success_takes_three_attempts() {
    let server = MockServer::start(Behavior::failing_first(2, 503));
    let gw = Gateway::new(Duration::from_secs(5)).unwrap();
    let (p, attempts) = rt()
        .block_on(gw.fetch_with_retry(&spec(&server.url(), "m"), "x", 5, &fast_retry(4)))
        .unwrap();
    assert_eq!(attempts, 3);
    assert_eq!(p.probs.len(), 5);
    assert_eq!(server.stats().requests(), 3);
}

#[test]
fn rate_limit_is_retried() {
    let server = MockServer::start(Behavior::failing_first(1, 429));
    let gw = Gateway::new(Duration::from_secs(5)).unwrap();
    let (_, attempts) = rt()
        .block_on(gw.fetch_with_retry(&spec(&server.url(), "m"), "x", 5, &fast_retry(4)))
        .unwrap();
    assert_eq!(attempts, 2);
}

#[test]
fn auth_failure_is_not_retried() {
    let server = MockServer::start(Behavior::always(401));
    let gw = Gateway::new(Duration::from_secs(5)).unwrap();
    let err = rt()
        .block_on(gw.fetch_with_retry(&spec(&server.url(), "m"), "x", 5, &fast_retry(4)))
        .unwrap_err();
    assert_eq!(err.attempts, 1);
    assert!(matches!(err.error, GatewayError::HttpStatus { status: 401, .. }));
    assert_eq!(server.stats().requests(), 1);
}

#[test]
fn persistent_timeouts_exhaust_the_budget() {
    let server = MockServer::start(Behavior::default().with_delay(Duration::from_millis(800)));
    let gw = Gateway::new(Duration::from_millis(100)).unwrap();
    let err = rt()
        .block_on(gw.fetch_with_retry(&spec(&server.url(), "m"), "x", 5, &fast_retry(2)))
        .unwrap_err();
    assert_eq!(err.attempts, 2);
    assert!(matches!(err.error, GatewayError::Transport(_)));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let url = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let gw = Gateway::new(Duration::from_secs(2)).unwrap();
    let err = rt()
        .block_on(gw.fetch_with_retry(&spec(&url, "m"), "x", 5, &fast_retry(3)))
        .unwrap_err();
    assert_eq!(err.attempts, 3);
    assert!(err.error.is_retryable());
}

fn corpus(n: usize) -> Dataset {
    Dataset::from_samples(
        (0..n)
            .map(|i| Sample::new(format!("Instruction {i}"), String::new(), format!("Answer {i}")))
            .collect(),
    )
}

#[test]
fn plan_for_the_full_alpaca_shape() {
    let ds = corpus(52_002);
    let prompts = default_prompt_set(5).unwrap();
    let specs = [spec("http://a", "m1"), spec("http://a", "m2"), spec("http://b", "m3")];
    let plan = score_plan(&ds, &prompts, &specs, |_| false);
    assert_eq!(plan.len(), 52_002 * 5 * 3);
    // Sample-major, then prompt, then model.
    assert_eq!((plan[0].sample_index, plan[0].prompt_id, plan[0].model_index), (0, 0, 0));
    assert_eq!((plan[1].sample_index, plan[1].prompt_id, plan[1].model_index), (0, 0, 1));
    assert_eq!((plan[3].sample_index, plan[3].prompt_id, plan[3].model_index), (0, 1, 0));
    assert_eq!(plan[15].sample_index, 1);
}

#[test]
fn execute_writes_in_plan_order_and_respects_cap() {
    let server = MockServer::start(Behavior::default().with_delay(Duration::from_millis(5)));
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(40);
    let prompts = default_prompt_set(5).unwrap();
    let specs = [spec(&server.url(), "m1"), spec(&server.url(), "m2")];
    let plan = score_plan(&ds, &prompts, &specs, |_| false);
    let mut cache = ScoreCache::open(dir.path().join("c.jsonl")).unwrap();
    let settings = ExecSettings {
        max_inflight: 3,
        max_inflight_global: 16,
        retry: fast_retry(2),
        timeout_ms: 5_000,
    };
    let started = Instant::now();
    let out = rt()
        .block_on(execute_plan(&plan, &ds, &prompts, &specs, &settings, &mut cache, &|| "t".into()))
        .unwrap();
    assert!(started.elapsed() < Duration::from_secs(30));
    assert_eq!(out.written, 400);
    assert!(out.failures.is_empty());
    assert!(server.stats().peak_in_flight() <= 3, "peak {}", server.stats().peak_in_flight());
    assert_eq!(server.stats().max_repeats(), 1);

    let text = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    let keys: Vec<(String, u8, String)> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["sample_id"].as_str().unwrap().to_owned(),
                v["prompt_id"].as_u64().unwrap() as u8,
                v["model_id"].as_str().unwrap().to_owned(),
            )
        })
        .collect();
    let expected: Vec<(String, u8, String)> = plan
        .iter()
        .map(|w| (w.key.sample_id.to_string(), w.key.prompt_id, w.key.model_id.clone()))
        .collect();
    assert_eq!(keys, expected);

    // A second plan over the warm cache is empty.
    assert!(score_plan(&ds, &prompts, &specs, |k| cache.contains(k)).is_empty());
}

#[test]
fn failed_cells_are_reported_and_others_kept() {
    let good = MockServer::start(Behavior::default());
    let bad = MockServer::start(Behavior::always(401));
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(5);
    let prompts = default_prompt_set(5).unwrap();
    let specs = [spec(&good.url(), "ok"), spec(&bad.url(), "denied")];
    let plan = score_plan(&ds, &prompts, &specs, |_| false);
    let mut cache = ScoreCache::open(dir.path().join("c.jsonl")).unwrap();
    let settings = ExecSettings {
        retry: fast_retry(3),
        ..ExecSettings::default()
    };
    let out = rt()
        .block_on(execute_plan(&plan, &ds, &prompts, &specs, &settings, &mut cache, &|| "t".into()))
        .unwrap();
    assert_eq!(out.written, 25);
    assert_eq!(out.failures.len(), 25);
    assert!(out.failures.iter().all(|(k, f)| k.model_id == "denied" && f.attempts == 1));
    assert_eq!(cache.len(), 25);
}

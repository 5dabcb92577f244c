#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selective_core::dataset_io::{write_dataset, Dataset, Sample};
use selective_core::gateway::{ModelSpec, RetryPolicy};
use selective_core::RunConfig;

const WORDS: [&str; 12] = [
    "explain", "river", "quickly", "number", "poem", "list", "seven", "bright", "code", "table", "why", "garden",
];

/// `n` distinct synthetic samples with varied lengths.
pub fn corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
        let len = rng.gen_range(lo..=hi);
        (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    let samples = (0..n)
        .map(|i| {
            let instruction = format!("{} #{i}", words(&mut rng, 2, 12));
            let input = if rng.gen_bool(0.3) { words(&mut rng, 1, 8) } else { String::new() };
            let output = words(&mut rng, 1, 30);
            Sample::new(instruction, input, output)
        })
        .collect();
    Dataset::from_samples(samples)
}

pub fn write_corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("data.json");
    write_dataset(&corpus(n, seed), &path).unwrap();
    path
}

pub fn mock_spec(url: &str, id: &str, theta: f64) -> ModelSpec {
    ModelSpec {
        model_id: id.into(),
        endpoint_url: url.into(),
        api_model_name: id.into(),
        param_count_b: theta,
        auth_env_var: String::new(),
        top_logprobs: 20,
    }
}

pub fn config(dataset: PathBuf, models: Vec<ModelSpec>, out: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::new(dataset, models, out);
    cfg.retry = RetryPolicy {
        max_attempts: 2,
        base_backoff_ms: 1,
        max_backoff_ms: 5,
    };
    cfg.timeout_ms = 5_000;
    cfg
}

/// Relative path → file bytes for everything under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

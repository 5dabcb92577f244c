//! Rank instruction-tuning samples by LLM-rated quality and keep the best.

pub mod analysis;
pub mod config;
pub mod dataset_io;
pub mod gateway;
pub mod pipeline;
pub mod prompt_kit;
pub mod ranker;
pub mod score_cache;
pub mod scoring;

pub use config::RunConfig;
pub use dataset_io::{Dataset, Sample, SampleId};
pub use ranker::Strategy;

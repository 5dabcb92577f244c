use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use selective_core::config::{Overrides, RunConfig};
use selective_core::pipeline::{self, CacheAction, CacheOutcome, PipelineError, RunOptions};
use selective_core::Strategy;
use serde::Serialize;

/// Score instruction data with LLM rating prompts and keep the top slice.
#[derive(Debug, Parser)]
#[command(name = "selective", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, default_value = "run.json")]
    config: PathBuf,
    #[arg(long, global = true)]
    k: Option<u32>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, conflicts_with = "count")]
    fraction: Option<f64>,
    #[arg(long, global = true)]
    count: Option<usize>,
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Write this timestamp instead of the current time.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "1970-01-01T00:00:00.000Z")]
    frozen_time: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fetch missing probabilities and write score breakdowns.
    Score,
    /// Rank samples and write the selected subset.
    Select,
    /// Write analysis CSVs for the current selection.
    Report,
    /// Inspect the probability cache.
    Cache {
        #[arg(value_enum)]
        action: CacheArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CacheArg {
    Stats,
    Verify,
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.apply(&Overrides {
        k: cli.k,
        alpha: cli.alpha,
        fraction: cli.fraction,
        count: cli.count,
        strategy: cli.strategy,
        seed: cli.seed,
        out_dir: cli.out_dir,
    });
    let opts = RunOptions {
        frozen_time: cli.frozen_time,
    };
    match cli.command {
        Command::Score => print_json(&pipeline::cmd_score(&cfg, &opts)?),
        Command::Select => print_json(&pipeline::cmd_select(&cfg, &opts)?),
        Command::Report => print_json(&pipeline::cmd_report(&cfg, &opts)?),
        Command::Cache { action: CacheArg::Stats } => print_json(&pipeline::cmd_cache(&cfg, CacheAction::Stats)?),
        Command::Cache { action: CacheArg::Verify } => {
            let outcome = pipeline::cmd_cache(&cfg, CacheAction::Verify)?;
            print_json(&outcome);
            if let CacheOutcome::Verify(r) = &outcome {
                if !r.corrupt.is_empty() {
                    return Err(PipelineError::CorruptCache {
                        path: cfg.cache_path(),
                        corrupt: r.corrupt.len(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { pipeline::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let config = cli.config.clone();
    match run(cli).with_context(|| format!("config {}", config.display())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .downcast_ref::<PipelineError>()
                .map_or(pipeline::EXIT_IO, PipelineError::exit_code);
            eprintln!("error: {:#}", e);
            ExitCode::from(code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = Cli::try_parse_from(["selective", "select", "--strategy", "model_r", "--fraction", "0.3"]).unwrap();
        assert_eq!(cli.strategy, Some(Strategy::ModelR));
        assert_eq!(cli.fraction, Some(0.3));
        assert!(matches!(cli.command, Command::Select));
        assert!(Cli::try_parse_from(["selective", "select", "--fraction", "0.3", "--count", "4"]).is_err());
    }

    #[test]
    fn bare_frozen_time_uses_the_epoch() {
        let cli = Cli::try_parse_from(["selective", "score", "--frozen-time"]).unwrap();
        assert_eq!(cli.frozen_time.as_deref(), Some("1970-01-01T00:00:00.000Z"));
        let cli = Cli::try_parse_from(["selective", "cache", "verify"]).unwrap();
        assert!(matches!(cli.command, Command::Cache { action: CacheArg::Verify }));
        assert_eq!(cli.frozen_time, None);
    }
}

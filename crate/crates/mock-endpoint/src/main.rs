use std::net::SocketAddr;
use std::time::Duration;

use clap::Parser;
use selective_mock::{Behavior, MockServer};

/// Serve deterministic completions logprobs until interrupted.
#[derive(Debug, Parser)]
#[command(name = "selective-mock", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: SocketAddr,
    /// Delay before each response, in milliseconds.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Fail the first N requests with --fail-status.
    #[arg(long, default_value_t = 0)]
    fail_first: u64,
    #[arg(long, default_value_t = 503)]
    fail_status: u16,
    /// About one prompt in N gets no digit tokens.
    #[arg(long)]
    no_digit_every: Option<u32>,
}

fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let behavior = Behavior {
        delay: Duration::from_millis(args.delay_ms),
        fail_first: args.fail_first,
        fail_status: args.fail_status,
        no_digit_every: args.no_digit_every,
        ..Behavior::default()
    };
    let server = MockServer::start_on(args.addr, behavior)?;
    eprintln!("listening on {}", server.url());
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(tokio::signal::ctrl_c())?;
    eprintln!("served {} requests", server.stats().requests());
    Ok(())
}

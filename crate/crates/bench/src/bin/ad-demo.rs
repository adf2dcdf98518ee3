use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use effstack::stacks::StrategyKind;
use effstack_bench::ad_demo::{self, DEFAULT_ITERS, DEFAULT_X};

/// Differentiates 1 + sum (1 - x)^i at x = 0.5 with effect handlers and
/// prints the derivative.
#[derive(Debug, Parser)]
#[command(name = "ad-demo", version)]
struct Cli {
    #[arg(default_value_t = DEFAULT_ITERS)]
    iters: usize,

    /// Stack strategy (default: $EFFSTACK_STRATEGY, else fixed)
    #[arg(long)]
    strategy: Option<StrategyKind>,

    /// Coroutine frame size in bytes
    #[arg(long)]
    frame_size: Option<usize>,
}

fn run(cli: &Cli) -> Result<()> {
    let strategy = match cli.strategy {
        Some(kind) => kind.build(),
        None => effstack::default_strategy()?,
    };
    println!("iters: {}", cli.iters);
    let out = ad_demo::run_ad(&strategy, cli.iters, DEFAULT_X, cli.frame_size).context("running the AD program")?;
    println!("{:.6}", out.derivative);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rim_core::par::Exec;
use rim_core::run::{run, run_sweep, Command, RunConfig};

/// Random invariant manifolds for spectrally truncated SPDEs.
#[derive(Parser, Debug)]
#[command(name = "rim", version)]
struct Args {
    /// One of: simulate-linear, lyapunov, dichotomy, manifold, validate, spde-compare.
    #[arg(value_parser = parse_command)]
    command: Command,

    /// TOML config, or a run.json written by an earlier run.
    #[arg(long)]
    config: PathBuf,

    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,

    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Sweep this many consecutive seeds into seed_<s>/ subdirectories.
    #[arg(long)]
    seeds: Option<usize>,

    /// Run on one thread even when built with parallel support.
    #[arg(long)]
    sequential: bool,
}

fn parse_command(s: &str) -> Result<Command, String> {
    s.parse().map_err(|e: rim_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    let result = RunConfig::load(&args.config).and_then(|mut config| {
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        match args.seeds {
            Some(n) => run_sweep(args.command, &config, &args.out, n, exec).map(|_| ()),
            None => run(args.command, &config, &args.out, exec).map(|_| ()),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rim {}: {e}", args.command);
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

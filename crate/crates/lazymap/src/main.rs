//! Thin command-line front end over [`lazymap::pipeline`].
//!
//! Exit codes: 0 on success, 2 for configuration and I/O errors, 3 for
//! numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lazymap::config::RunConfig;
use lazymap::{pipeline, Result};

/// Environment override for the output directory; the `--out` flag wins.
const OUT_ENV: &str = "LAZYMAP_OUT";

#[derive(Parser)]
#[command(name = "lazymap", version, about = "Surrogate-driven lazy-map variational inference")]
struct Cli {
    /// TOML run configuration; omitted means built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory all archives and reports live in.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sample generation; 1 by default.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the prior, build the subspace, train the surrogate, synthesize
    /// observations.
    Offline,
    /// Train the lazy transport map against the surrogate objective.
    Online,
    /// Build the Laplace approximation at the MAP point.
    Laplace,
    /// Run pCN reference chains.
    Mcmc,
    /// Train a lazy map directly against the PDE model.
    Lazymap,
    /// Compare all trained methods against the reference posterior.
    Diagnose,
    /// Train one lazy map per archived observation off the shared surrogate.
    Amortize,
    /// Draw prior fields and their marginal standard deviations.
    PriorSample,
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let threads = cli.threads.max(1);
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Offline => pipeline::cmd_offline(&cfg, &out, threads),
        Command::Online => pipeline::cmd_online(&cfg, &out),
        Command::Laplace => pipeline::cmd_laplace(&cfg, &out),
        Command::Mcmc => pipeline::cmd_mcmc(&cfg, &out),
        Command::Lazymap => pipeline::cmd_lazymap(&cfg, &out),
        Command::Diagnose => pipeline::cmd_diagnose(&cfg, &out),
        Command::Amortize => pipeline::cmd_amortize(&cfg, &out),
        Command::PriorSample => pipeline::cmd_prior_sample(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

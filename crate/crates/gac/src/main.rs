use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gac::config::{ExperimentConfig, ExperimentKind};
use gac::experiments::run;

#[derive(Parser)]
#[command(name = "gac", version, about = "Moment, divergence and bound experiments for group action channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw observation batches along the sigma grid.
    Simulate(Common),
    /// Exact and empirical moment tensors.
    Moments(Common),
    /// Moment cutoff search.
    Cutoff(Common),
    /// chi-square and KL divergences along the sigma grid.
    Divergence(Common),
    /// Chapman-Robbins lower bounds along the sigma grid.
    Bound(Common),
    /// Maximum-likelihood fits and their mean squared error.
    Mle(Common),
    /// Closed-form checks on the two worked examples.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Optional for `verify`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "GAC_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (kind, common) = match cli.command {
        Command::Simulate(c) => (ExperimentKind::Simulate, c),
        Command::Moments(c) => (ExperimentKind::Moments, c),
        Command::Cutoff(c) => (ExperimentKind::Cutoff, c),
        Command::Divergence(c) => (ExperimentKind::DivergenceSweep, c),
        Command::Bound(c) => (ExperimentKind::BoundSweep, c),
        Command::Mle(c) => (ExperimentKind::MleSweep, c),
        Command::Verify(c) => (ExperimentKind::Verify, c),
    };
    match execute(kind, common) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("gac: {n} row(s) flagged as failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("gac: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(kind: ExperimentKind, common: Common) -> Result<usize, Box<dyn std::error::Error>> {
    if let Some(t) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if kind == ExperimentKind::Verify => ExperimentConfig::from_toml("")?,
        None => return Err(format!("{} needs --config", kind.as_str()).into()),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let started = Instant::now();
    let output = run(&config, kind)?;
    match common.out.as_ref().or(config.output.as_ref()) {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
            output.to_csv(std::io::BufWriter::new(file))?;
        }
        None => output.to_csv(std::io::stdout().lock())?,
    }
    eprintln!("gac: {} finished in {:.2?}", kind.as_str(), started.elapsed());
    Ok(output.failures)
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cpsl_core::config::Config;
use cpsl_core::Error;

mod commands;
mod serve;

#[derive(Parser)]
#[command(name = "cpsl", version, about = "Layered scene capture, packaging and novel-view rendering")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML file with pipeline parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "CPSL_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a sequence directory into a lossless layer bundle.
    Generate(commands::GenerateArgs),
    /// Re-encode a bundle losslessly, at a fixed quality or under a size budget.
    Pack(commands::PackArgs),
    /// Render one view of a bundle frame to PNG.
    Render(commands::RenderArgs),
    /// Render a yaw sweep and write images plus a metrics CSV.
    Sweep(commands::SweepArgs),
    /// Time unpack, warp, composite and boundary repair.
    Bench(commands::BenchArgs),
    /// Compare an image against a reference.
    Metrics(commands::MetricsArgs),
    /// Write a synthetic sequence directory with ground truth.
    SynthScene(commands::SynthArgs),
    /// Serve a bundle (and optionally a viewer directory) over HTTP.
    Serve(serve::ServeArgs),
}

fn load_config(g: &GlobalArgs) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.threads.is_some() {
        cfg.threads = g.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Generate(a) => commands::generate(&cfg, a),
        Command::Pack(a) => commands::pack(&cfg, a),
        Command::Render(a) => commands::render(&cfg, a),
        Command::Sweep(a) => commands::sweep(&cfg, a),
        Command::Bench(a) => commands::bench(&cfg, a),
        Command::Metrics(a) => commands::metrics(&cfg, a),
        Command::SynthScene(a) => commands::synth_scene(&cfg, a),
        Command::Serve(a) => serve::serve(a),
    }
}

/// 2 input error, 3 infeasible constraint, 4 corrupt bundle.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InfeasibleRateBudget { .. } | Error::LayerBudgetInfeasible { .. }) => 3,
        Some(Error::CorruptContainer(_) | Error::TruncatedStream(_) | Error::VersionMismatch { .. } | Error::CodecUnsupported(_)) => 4,
        Some(_) => 2,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

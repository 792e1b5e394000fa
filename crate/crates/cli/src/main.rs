//! `mirror`: run the reflection loop, build datasets, report statistics,
//! or serve the loop over HTTP.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 runtime error.

mod pipeline;
mod run;
mod serve;
mod session;
mod stats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mirror_core::render::OverlayMode;
use tracing_subscriber::EnvFilter;

use session::Session;

#[derive(Parser)]
#[command(name = "mirror", version, about = "Visual reflection loop and dataset pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one question through the reflection loop.
    Run(RunArgs),
    /// Run one dataset pipeline stage.
    Pipeline(PipelineArgs),
    /// Print a report.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Serve the loop over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Overlay {
    Fresh,
    Cumulative,
}

impl From<Overlay> for OverlayMode {
    fn from(o: Overlay) -> Self {
        match o {
            Overlay::Fresh => OverlayMode::Fresh,
            Overlay::Cumulative => OverlayMode::Cumulative,
        }
    }
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long, env = "MIRROR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_rounds: Option<u32>,
    #[arg(long, value_enum)]
    overlay: Option<Overlay>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Simulate,
    Filter,
    Ground,
    Convert,
    Verify,
    Adapt,
    Export,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Filter => "filter",
            Stage::Ground => "ground",
            Stage::Convert => "convert",
            Stage::Verify => "verify",
            Stage::Adapt => "adapt",
            Stage::Export => "export",
        }
    }
}

#[derive(Args)]
pub struct PipelineArgs {
    #[arg(value_enum)]
    stage: Stage,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "MIRROR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Records processed in parallel. Defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
pub enum StatsCommand {
    /// Trajectory length distribution from trajectory.json files,
    /// directories holding them, or JSONL of trajectory documents.
    Rounds {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Judge-scored quality per dataset subset.
    Quality {
        /// NAME=PATH to a JSONL file of dataset samples. Repeatable.
        #[arg(long = "subset", required = true)]
        subsets: Vec<String>,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "MIRROR_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Record counts per filter stage for simulated dialogues.
    Funnel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, env = "MIRROR_CONFIG")]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("MIRROR_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let code = match cli.command {
        Command::Run(args) => {
            let mut s = Session::new("run", Some(args.out.clone()));
            let result = run::cmd_run(args, &mut s);
            s.finish(result)
        }
        Command::Pipeline(args) => {
            let mut s = Session::new(&format!("pipeline {}", args.stage.name()), Some(args.out.clone()));
            let result = pipeline::cmd_pipeline(args, &mut s);
            s.finish(result)
        }
        Command::Stats(cmd) => stats::cmd_stats(cmd),
        Command::Serve(args) => serve::cmd_serve(args),
    };
    ExitCode::from(code)
}

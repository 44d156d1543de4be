mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqdistill::memory::CountingAllocator;
use seqdistill::Error;

use config::RunConfig;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator::new();

#[derive(Parser, Debug)]
#[command(name = "seqdistill", version, about = "Distill token-sequence corpora into small latent-factorized synthetic datasets")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a corpus from a random Markov chain.
    GenCorpus(commands::GenCorpusArgs),
    /// Train models on real data and store their checkpoints.
    Pretrain(commands::PretrainArgs),
    /// Optimize a synthetic dataset.
    Distill(commands::DistillArgs),
    /// Train a fresh student and report test metrics.
    FitEval(commands::FitEvalArgs),
    /// Check reverse-mode meta-gradients against independent oracles.
    Gradcheck(commands::GradcheckArgs),
}

/// Exit codes: 0 ok, 2 bad input or configuration, 3 numeric failure, 4 gradcheck failure.
pub enum Failure {
    Error(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. }
        | Error::NumericFailure { .. }
        | Error::ReversalDrift { .. }
        | Error::DegenerateTrajectory(_) => 3,
        _ => 2,
    }
}

trait Resolve: Args {
    fn apply(&self, cfg: &mut RunConfig);
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenCorpus(a) => a.apply(&mut cfg),
        Command::Pretrain(a) => a.apply(&mut cfg),
        Command::Distill(a) => a.apply(&mut cfg),
        Command::FitEval(a) => a.apply(&mut cfg),
        Command::Gradcheck(a) => a.apply(&mut cfg),
    }
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&cfg, &a),
        Command::Pretrain(a) => commands::pretrain(&cfg, &a),
        Command::Distill(a) => commands::distill(&cfg, &a),
        Command::FitEval(a) => commands::fit_eval(&cfg, &a),
        Command::Gradcheck(_) => commands::gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    seqdistill::par::init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("gradcheck failed: {msg}");
            ExitCode::from(4)
        }
    }
}

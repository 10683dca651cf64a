//! `afa`: collect data, train representations and policies, evaluate, sweep
//! acquisition costs and plot learning curves.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use afa_train::TrainError;
use clap::{Args, Parser, Subcommand};

/// Exit status for invalid configurations or incompatible inputs.
const EXIT_VALIDATION: u8 = 2;
/// Exit status for failures while running.
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "afa", version, about = "Active feature acquisition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Collect,
    TrainVae,
    TrainPolicy,
    Eval,
    Sweep,
    Plot,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Collect => "collect",
            Task::TrainVae => "train-vae",
            Task::TrainPolicy => "train-policy",
            Task::Eval => "eval",
            Task::Sweep => "sweep",
            Task::Plot => "plot",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect train and test trajectory datasets.
    Collect(RunArgs),
    /// Pre-train an imputation model on a collected dataset.
    TrainVae(RunArgs),
    /// Train the joint control and acquisition policy.
    TrainPolicy(RunArgs),
    /// Evaluate a trained policy and, with a dataset, a trained imputer.
    Eval(RunArgs),
    /// Train one policy per acquisition cost and seed.
    Sweep(RunArgs),
    /// Draw learning curves from metrics files.
    Plot(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Dotted-key override such as `vae.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Command {
    fn split(self) -> (Task, RunArgs) {
        match self {
            Command::Collect(a) => (Task::Collect, a),
            Command::TrainVae(a) => (Task::TrainVae, a),
            Command::TrainPolicy(a) => (Task::TrainPolicy, a),
            Command::Eval(a) => (Task::Eval, a),
            Command::Sweep(a) => (Task::Sweep, a),
            Command::Plot(a) => (Task::Plot, a),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (task, args) = Cli::parse().command.split();
    match commands::run(task, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .any(|e| e.downcast_ref::<TrainError>().is_some_and(TrainError::is_validation));
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}

//! `cfseq` command-line driver. Every invocation prints one JSON status line
//! on stdout; data goes to files under the spec's output directory.

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::CellJob;
use spec::{ExperimentSpec, FieldError};

#[derive(Parser, Debug)]
#[command(name = "cfseq", version, about = "Counterfactual outcome estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent worker processes for suite cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate datasets and counterfactual bundles.
    Simulate(Common),
    /// Train one model per seed; writes run records and checkpoints.
    Train(Common),
    /// Score trained checkpoints (or the simulator itself) on the bundles.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Score the ground-truth simulator instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the ablation grid.
    Ablate(Common),
    /// Bound terms over training, with a λ = 0 control.
    DiagnoseBound(Common),
    /// Paired-distance, cluster and attention tables of trained checkpoints.
    Audit(Common),
    /// Merge tables into one long-format CSV.
    Report(Common),
    #[command(hide = true)]
    Worker {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gamma_index: usize,
        #[arg(long)]
        cell: usize,
        #[arg(long)]
        result: PathBuf,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Simulate(_) => "simulate",
            Cmd::Train(_) => "train",
            Cmd::Evaluate { .. } => "evaluate",
            Cmd::Ablate(_) => "ablate",
            Cmd::DiagnoseBound(_) => "diagnose-bound",
            Cmd::Audit(_) => "audit",
            Cmd::Report(_) => "report",
            Cmd::Worker { .. } => "worker",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::Simulate(c) | Cmd::Train(c) | Cmd::Ablate(c) | Cmd::DiagnoseBound(c) | Cmd::Audit(c) | Cmd::Report(c) => c,
            Cmd::Evaluate { common, .. } | Cmd::Worker { common, .. } => common,
        }
    }
}

fn invalid(command: &str, errors: &[FieldError]) -> ExitCode {
    println!("{}", json!({ "status": "error", "command": command, "exit_code": 2, "kind": "invalid_spec", "errors": errors }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = FieldError { field: "arguments".into(), message: e.kind().to_string() };
            eprintln!("{e}");
            return invalid("", &[err]);
        }
    };
    let name = cli.command.name();
    let common = cli.command.common();
    let spec = match ExperimentSpec::load(&common.spec, common.seed, common.out.clone()) {
        Ok(s) => s,
        Err(errors) => return invalid(name, &errors),
    };
    if common.jobs == 0 {
        return invalid(name, &[FieldError { field: "--jobs".into(), message: "must be >= 1".into() }]);
    }
    let started = Instant::now();
    let outcome = match &cli.command {
        Cmd::Simulate(_) => commands::simulate(&spec),
        Cmd::Train(_) => commands::train_cmd(&spec),
        Cmd::Evaluate { oracle, .. } => commands::evaluate(&spec, *oracle),
        Cmd::Ablate(c) => commands::ablate(&spec, c.jobs),
        Cmd::DiagnoseBound(_) => commands::diagnose_bound(&spec),
        Cmd::Audit(_) => commands::audit(&spec),
        Cmd::Report(_) => commands::report(&spec),
        Cmd::Worker { common, gamma_index, cell, result } => {
            let seed = common.seed.unwrap_or(spec.seeds[0]);
            commands::run_worker(&spec, &CellJob { gamma_index: *gamma_index, seed, cell: *cell }, result).map(|_| vec![result.clone()])
        }
    };
    let wall_s = started.elapsed().as_secs_f64();
    match outcome {
        Ok(artifacts) => {
            println!(
                "{}",
                json!({ "status": "ok", "command": name, "config_hash": spec.config_hash(), "artifacts": artifacts, "wall_s": wall_s })
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!(
                "{}",
                json!({ "status": "error", "command": name, "exit_code": 1, "kind": e.kind(), "message": e.to_string() })
            );
            ExitCode::from(1)
        }
    }
}

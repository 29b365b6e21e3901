use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ngs::dataset::{generate_dataset, Dataset, DatasetSpec};
use ngs::harness::{emit_tables, evaluate_model, load_toml, run_plan, run_training, ExperimentPlan};
use ngs::learning::TrainConfig;
use ngs::perception::PerceptionModel;
use ngs::CompiledGrammar;

#[derive(Parser)]
#[command(name = "ngs", version, about = "Grammar-guided weak supervision for handwritten formula recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a TOML spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model from a TOML config; resumes from OUT/state.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print calculation and symbol accuracy of a saved model as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Run every entry of a TOML experiment plan and emit tables.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
    },
}

/// Writes to stdout; a reader that has gone away (`ngs eval ... | head`) is not an error.
fn emit(text: &str) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cg = CompiledGrammar::arithmetic();
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: DatasetSpec = load_toml(&spec)?;
            let ds = generate_dataset(&cg, &spec)?;
            ds.save(&out).with_context(|| format!("writing {}", out.display()))?;
            emit(&format!("{} train / {} test examples written to {}\n", ds.train.len(), ds.test.len(), out.display()))?;
            Ok(true)
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = load_toml(&config)?;
            let ds = Dataset::load(&data).with_context(|| format!("loading {}", data.display()))?;
            let (_, eval, _) = run_training(&cg, &ds, &cfg, &out)?;
            emit(&(serde_json::to_string_pretty(&eval)? + "\n"))?;
            Ok(true)
        }
        Command::Eval { model, data, split } => {
            let m = PerceptionModel::load(&model)?;
            let ds = Dataset::load(&data).with_context(|| format!("loading {}", data.display()))?;
            let split = match split {
                SplitName::Train => &ds.train,
                SplitName::Test => &ds.test,
            };
            emit(&(serde_json::to_string_pretty(&evaluate_model(&cg, &m, split)?)? + "\n"))?;
            Ok(true)
        }
        Command::Sweep { plan } => {
            let plan: ExperimentPlan = load_toml(&plan)?;
            let report = run_plan(&cg, &plan)?;
            for r in report.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!("run {} failed: {}", r.name, r.error.as_deref().unwrap_or_default());
            }
            let complete = emit_tables(&report, &plan.output_dir, &plan.output_dir.join("tables"))?;
            emit(&std::fs::read_to_string(plan.output_dir.join("tables/calc_acc.txt"))?)?;
            if !complete {
                eprintln!("some table cells are missing");
            }
            Ok(complete)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

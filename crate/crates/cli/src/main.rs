use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crq_core::experiment::{ExperimentConfig, Override, Pipeline, Stage};
use crq_core::report::ReportStatus;
use crq_core::Error;

/// Ternary quantization with cluster-regularized retraining.
#[derive(Debug, Parser)]
#[command(name = "crq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the full-precision reference network.
    Pretrain(Common),
    /// Retrain the reference with the cluster regularizer.
    Retrain(Common),
    /// Quantize the retrained network to ternary weights.
    Quantize(Common),
    /// Fine-tune the quantized model with straight-through updates.
    Finetune(Common),
    /// Measure error rates and quantization error of the saved models.
    Evaluate(Common),
    /// Run the regularized and unregularized arms side by side.
    Compare(Common),
    /// Write CSV curves and tables from the comparison results.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Regularization strength; overrides `train.lambda`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Epoch count for the stage being run.
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated `dotted.key=value` config overrides.
    #[arg(long = "stage-overrides", value_name = "KEY=VALUE,...")]
    stage_overrides: Vec<String>,
}

impl Command {
    fn parts(&self) -> (Vec<Stage>, &Common) {
        match self {
            Command::Pretrain(c) => (vec![Stage::Pretrain], c),
            Command::Retrain(c) => (vec![Stage::Retrain], c),
            Command::Quantize(c) => (vec![Stage::Quantize], c),
            Command::Finetune(c) => (vec![Stage::Finetune], c),
            Command::Evaluate(c) => (vec![Stage::Evaluate], c),
            Command::Compare(c) => (vec![Stage::Compare], c),
            Command::Report(c) => (vec![Stage::Report], c),
            Command::Run(c) => (Stage::ALL.to_vec(), c),
        }
    }
}

fn overrides(common: &Common, stages: &[Stage]) -> Result<Vec<Override>, Error> {
    let mut list = Vec::new();
    for text in &common.stage_overrides {
        list.extend(Override::parse_list(text)?);
    }
    if let Some(seed) = common.seed {
        list.push(Override::parse(&format!("seed={seed}"))?);
    }
    if let Some(lambda) = common.lambda {
        list.push(Override::parse(&format!("train.lambda={lambda:?}"))?);
    }
    if let Some(epochs) = common.epochs {
        let keys: Vec<&str> = if stages.len() == 1 {
            let key = stages[0].epochs_key().ok_or_else(|| {
                Error::Usage(format!("--epochs does not apply to `{}`", stages[0].name()))
            })?;
            vec![key]
        } else {
            vec!["train.pretrain_epochs", "train.retrain_epochs", "train.finetune_epochs"]
        };
        for key in keys {
            list.push(Override::parse(&format!("{key}={epochs}"))?);
        }
    }
    Ok(list)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let (stages, common) = cli.command.parts();
    let config = ExperimentConfig::load(&common.config, &overrides(common, &stages)?)?;
    let pipeline = Pipeline::new(config, &common.out);
    for stage in stages {
        let outcome = pipeline.run_stage(stage)?;
        for path in &outcome.written {
            println!("{}: wrote {}", stage.name(), path.display());
        }
        if let ReportStatus::Warning(msg) = &outcome.status {
            eprintln!("warning: {}: {msg}", stage.name());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(3)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dgp_core::bench::{error_document, run_experiment, ExperimentConfig};
use dgp_core::trainer::Task;
use dgp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dgp", version, about = "Deep Gaussian process benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over random train/test folds.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    inducing: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples_pred: Option<usize>,
    #[arg(long)]
    samples_train: Option<usize>,
    #[arg(long)]
    trace_every: Option<usize>,
    /// Skip the first line of the CSV.
    #[arg(long)]
    header: bool,
    /// Zero-based target column; repeatable. Defaults to the last column.
    #[arg(long = "target-column")]
    target_columns: Vec<usize>,
    /// Output directory for results.json, traces and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "regression" => Ok(Task::Regression),
        "binary-classification" | "classification" => Ok(Task::BinaryClassification),
        _ => Err(format!("unknown task `{s}` (regression | binary-classification)")),
    }
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let mut value: serde_json::Value = serde_json::from_str(&text)?;
            if let (Some(d), Some(obj)) = (&args.dataset, value.as_object_mut()) {
                obj.insert("dataset".into(), d.to_string_lossy().into_owned().into());
            }
            ExperimentConfig::from_json(&value.to_string())?
        }
        None => ExperimentConfig::new(args.dataset.clone().ok_or_else(|| Error::Config {
            field: "dataset".into(),
            message: "pass --dataset or a config file".into(),
        })?),
    };
    if let Some(v) = args.dataset {
        cfg.dataset = v;
    }
    if let Some(v) = args.task {
        cfg.task = v;
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.inducing {
        cfg.inducing = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.minibatch {
        cfg.minibatch = Some(v);
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.test_fraction {
        cfg.test_fraction = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.samples_pred {
        cfg.samples_pred = v;
    }
    if let Some(v) = args.samples_train {
        cfg.samples_train = v;
    }
    if let Some(v) = args.trace_every {
        cfg.trace_every = v;
    }
    if args.header {
        cfg.header = true;
    }
    if !args.target_columns.is_empty() {
        cfg.target_columns = args.target_columns;
    }
    if let Some(v) = args.out {
        cfg.out = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = build_config(args)?;
    let result = run_experiment(&cfg, &mut |fold| {
        eprintln!(
            "fold {}: test_ll {:.4}{} ({:.1}s)",
            fold.fold,
            fold.metrics.test_log_likelihood,
            fold.metrics
                .test_rmse
                .map(|r| format!(" rmse {r:.4}"))
                .or(fold.metrics.test_accuracy.map(|a| format!(" acc {a:.4}")))
                .unwrap_or_default(),
            fold.wall_clock_seconds
        );
    })?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_document(&e));
            ExitCode::from(2)
        }
    }
}

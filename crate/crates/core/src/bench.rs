//! Benchmark harness: CSV ingestion, normalization, random splits,
//! per-fold training and evaluation, and the results document.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{mixture_log_density, mixture_moments, mixture_proba, predict_components, DGPModel, Likelihood};
use crate::rng::{mix_seed, streams, RngStream};
use crate::trainer::{initialize, train, write_trace_csv, InitProtocol, Task, TracePoint, TrainConfig};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STD_CONVENTION: &str = "sample (N-1 divisor)";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub task: Task,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }
}

/// Reads a comma-separated file of reals. `targets` are zero-based column
/// indices; an empty list means the last column. Classification targets
/// must be 0 or 1.
pub fn ingest_csv(path: &Path, targets: &[usize], header: bool, task: Task) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(k + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if header && k == 0 {
            continue;
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("column {}: `{field}` is not a finite number", c + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        if task == Task::BinaryClassification {
            let w = values.len();
            let cols: Vec<usize> = if targets.is_empty() { vec![w - 1] } else { targets.to_vec() };
            for c in cols {
                if let Some(v) = values.get(c) {
                    if *v != 0.0 && *v != 1.0 {
                        return Err(Error::Parse {
                            line,
                            message: format!("label `{v}` in column {} is not 0 or 1", c + 1),
                        });
                    }
                }
            }
        }
        rows.push(values);
    }
    let width = match width {
        Some(w) if !rows.is_empty() => w,
        _ => return Err(Error::EmptyDataset),
    };
    let targets: Vec<usize> = if targets.is_empty() { vec![width - 1] } else { targets.to_vec() };
    if let Some(&bad) = targets.iter().find(|&&c| c >= width) {
        return Err(Error::Config {
            field: "target_columns".into(),
            message: format!("column {bad} is out of range for {width} columns"),
        });
    }
    if targets.len() >= width {
        return Err(Error::Config {
            field: "target_columns".into(),
            message: "no input columns remain".into(),
        });
    }
    if task == Task::BinaryClassification && targets.len() != 1 {
        return Err(Error::Config {
            field: "target_columns".into(),
            message: "classification needs exactly one target column".into(),
        });
    }
    let inputs: Vec<usize> = (0..width).filter(|c| !targets.contains(c)).collect();
    let n = rows.len();
    let x = DenseMatrix::from_fn(n, inputs.len(), |i, j| rows[i][inputs[j]]);
    let y = DenseMatrix::from_fn(n, targets.len(), |i, j| rows[i][targets[j]]);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset { name, x, y, task })
}

/// Column means and standard deviations of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(m: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| {
            let col = m.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = if m.rows() > 1 {
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let std = var.sqrt();
            (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
        })
        .unzip()
}

fn standardize(m: &DenseMatrix, mean: &[f64], std: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| (m[(i, j)] - mean[j]) / std[j])
}

impl NormStats {
    /// Sample statistics of the training split; zero-variance columns get a
    /// unit divisor. Targets are left unscaled when `scale_targets` is off.
    pub fn fit(x: &DenseMatrix, y: &DenseMatrix, scale_targets: bool) -> Self {
        let (x_mean, x_std) = column_stats(x);
        let (y_mean, y_std) = if scale_targets {
            column_stats(y)
        } else {
            (vec![0.0; y.cols()], vec![1.0; y.cols()])
        };
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn apply_x(&self, x: &DenseMatrix) -> DenseMatrix {
        standardize(x, &self.x_mean, &self.x_std)
    }

    pub fn apply_y(&self, y: &DenseMatrix) -> DenseMatrix {
        standardize(y, &self.y_mean, &self.y_std)
    }

    pub fn restore_y(&self, y: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(y.rows(), y.cols(), |i, j| y[(i, j)] * self.y_std[j] + self.y_mean[j])
    }

    /// `Σ_d log std_d`, the change-of-variables term for densities.
    pub fn log_y_scale(&self) -> f64 {
        self.y_std.iter().map(|s| s.ln()).sum()
    }
}

/// A train/test pair, both already normalized with train statistics.
#[derive(Clone, Debug)]
pub struct NormalizedSplit {
    pub x_train: DenseMatrix,
    pub y_train: DenseMatrix,
    pub x_test: DenseMatrix,
    pub y_test: DenseMatrix,
    pub stats: NormStats,
}

pub fn normalize(train: (&DenseMatrix, &DenseMatrix), test: (&DenseMatrix, &DenseMatrix), task: Task) -> Result<NormalizedSplit> {
    if train.0.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let stats = NormStats::fit(train.0, train.1, task == Task::Regression);
    Ok(NormalizedSplit {
        x_train: stats.apply_x(train.0),
        y_train: stats.apply_y(train.1),
        x_test: stats.apply_x(test.0),
        y_test: stats.apply_y(test.1),
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn new(folds: usize, seed: u64) -> Self {
        Self {
            folds,
            test_fraction: 0.1,
            seed,
        }
    }

    pub fn test_size(&self, n: usize) -> usize {
        ((self.test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }

    /// Independent random splits; fold `f` draws from its own stream.
    pub fn fold(&self, n: usize, f: usize) -> Fold {
        let mut rng = RngStream::substream(mix_seed(self.seed, f as u64), streams::SPLIT);
        let perm = rng.permutation(n);
        let t = self.test_size(n);
        let mut test = perm[..t].to_vec();
        let mut train = perm[t..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Fold { train, test }
    }

    pub fn folds(&self, n: usize) -> Vec<Fold> {
        (0..self.folds).map(|f| self.fold(n, f)).collect()
    }
}

/// Test metrics for one trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-point log predictive density in original target units.
    pub test_log_likelihood: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// Scores `model` on a normalized test split. `y_test_raw` is in original
/// units; `y_test` is its normalized counterpart.
pub fn evaluate(
    model: &DGPModel,
    x_test: &DenseMatrix,
    y_test: &DenseMatrix,
    y_test_raw: &DenseMatrix,
    stats: &NormStats,
    samples_pred: usize,
    rng: &mut RngStream,
) -> Result<Metrics> {
    let t = x_test.rows();
    if t == 0 {
        return Err(Error::EmptyDataset);
    }
    let comps = predict_components(model, x_test, rng, samples_pred)?;
    let dens = mixture_log_density(model, &comps, y_test, samples_pred);
    let ll = dens.iter().sum::<f64>() / t as f64 - stats.log_y_scale();
    match model.likelihood() {
        Likelihood::Gaussian { .. } => {
            let moments = mixture_moments(model, &comps, t, samples_pred);
            let pred = stats.restore_y(&moments.mean);
            let sq: f64 = pred
                .data()
                .iter()
                .zip(y_test_raw.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(Metrics {
                test_log_likelihood: ll,
                test_rmse: Some((sq / pred.data().len() as f64).sqrt()),
                test_accuracy: None,
            })
        }
        Likelihood::Bernoulli => {
            let p = mixture_proba(&comps, t, samples_pred);
            let correct = p
                .iter()
                .zip(y_test_raw.data())
                .filter(|(p, y)| (**p > 0.5) == (**y > 0.5))
                .count();
            Ok(Metrics {
                test_log_likelihood: ll,
                test_rmse: None,
                test_accuracy: Some(correct as f64 / t as f64),
            })
        }
    }
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_folds() -> usize {
    20
}

fn default_inducing() -> usize {
    100
}

fn default_iterations() -> usize {
    20_000
}

fn default_lr() -> f64 {
    0.01
}

fn default_samples_pred() -> usize {
    100
}

fn default_samples_train() -> usize {
    1
}

fn default_trace_every() -> usize {
    100
}

fn default_layers() -> usize {
    1
}

fn default_task() -> Task {
    Task::Regression
}

/// Everything needed to reproduce one experiment. Mirrors the CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_inducing")]
    pub inducing: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// `None` means `min(10000, N)`.
    #[serde(default)]
    pub minibatch: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples_pred")]
    pub samples_pred: usize,
    #[serde(default = "default_samples_train")]
    pub samples_train: usize,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    #[serde(default)]
    pub header: bool,
    /// Zero-based target columns; empty means the last column.
    #[serde(default)]
    pub target_columns: Vec<usize>,
    /// Directory for results, traces and checkpoints.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn invalid(field: &str, message: &str) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            task: default_task(),
            layers: default_layers(),
            inducing: default_inducing(),
            iterations: default_iterations(),
            minibatch: None,
            lr: default_lr(),
            folds: default_folds(),
            test_fraction: default_test_fraction(),
            seed: 0,
            samples_pred: default_samples_pred(),
            samples_train: default_samples_train(),
            trace_every: default_trace_every(),
            header: false,
            target_columns: Vec::new(),
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(&json_field(&e), &e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(invalid("dataset", "a CSV path is required"));
        }
        let positive = [
            ("layers", self.layers),
            ("inducing", self.inducing),
            ("iterations", self.iterations),
            ("folds", self.folds),
            ("samples_pred", self.samples_pred),
            ("samples_train", self.samples_train),
            ("trace_every", self.trace_every),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.minibatch == Some(0) {
            return Err(invalid("minibatch", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid("lr", "must be a finite non-negative number"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }

    /// "SGP" for one layer, "DGP-L" otherwise.
    pub fn model_family(&self) -> String {
        if self.layers == 1 {
            "SGP".into()
        } else {
            format!("DGP-{}", self.layers)
        }
    }
}

/// Best-effort field name from a serde error message.
fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over folds divided by `√folds`; absent for
    /// a single fold.
    pub stderr: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, stderr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub num_train: usize,
    pub num_test: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub final_elbo: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub test_log_likelihood: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_rmse: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub num_points: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub library_version: String,
    pub model_family: String,
    pub std_convention: String,
    pub config: ExperimentConfig,
    pub dataset: DatasetInfo,
    pub folds: Vec<FoldResult>,
    pub aggregate: AggregateMetrics,
    pub wall_clock_seconds: f64,
}

impl RunResult {
    /// The document with every timing field zeroed, for reproducibility
    /// comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        for f in &mut r.folds {
            f.wall_clock_seconds = 0.0;
        }
        r
    }
}

/// Output of one fold before aggregation.
pub struct FoldOutcome {
    pub result: FoldResult,
    pub model: DGPModel,
    pub trace: Vec<TracePoint>,
}

/// Trains and scores one fold. On `NonFiniteLoss` the last finite model is
/// written to `fold{f}_checkpoint.json` when an output directory is set.
pub fn run_fold(config: &ExperimentConfig, data: &Dataset, f: usize) -> Result<FoldOutcome> {
    let start = Instant::now();
    let split = SplitSpec {
        folds: config.folds,
        test_fraction: config.test_fraction,
        seed: config.seed,
    };
    let fold = split.fold(data.len(), f);
    let (xtr, ytr) = (data.x.select_rows(&fold.train), data.y.select_rows(&fold.train));
    let (xte, yte) = (data.x.select_rows(&fold.test), data.y.select_rows(&fold.test));
    let norm = normalize((&xtr, &ytr), (&xte, &yte), data.task)?;
    let fold_seed = mix_seed(config.seed, f as u64);
    let mut model = initialize(
        &norm.x_train,
        &norm.y_train,
        config.layers,
        data.task,
        &InitProtocol::new(config.inducing, fold_seed),
    )?;
    let train_cfg = TrainConfig {
        iterations: config.iterations,
        minibatch: config.minibatch,
        lr: config.lr,
        mc_samples: config.samples_train,
        trace_every: config.trace_every,
        seed: fold_seed,
    };
    let trace = match train(&mut model, &norm.x_train, &norm.y_train, &train_cfg) {
        Ok(t) => t,
        Err(e) => {
            if let Some(dir) = &config.out {
                fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
                checkpoint::save(&model, &dir.join(format!("fold{f}_checkpoint.json")))?;
            }
            return Err(e);
        }
    };
    let mut rng = RngStream::substream(fold_seed, streams::PREDICT);
    let metrics = evaluate(
        &model,
        &norm.x_test,
        &norm.y_test,
        &yte,
        &norm.stats,
        config.samples_pred,
        &mut rng,
    )?;
    let final_elbo = trace.last().map_or(f64::NAN, |p| p.elbo);
    Ok(FoldOutcome {
        result: FoldResult {
            fold: f,
            num_train: fold.train.len(),
            num_test: fold.test.len(),
            metrics,
            final_elbo,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
        model,
        trace,
    })
}

/// Runs every fold of `config` in order, writing per-fold traces and
/// checkpoints plus `results.json` when `config.out` is set.
pub fn run_experiment(config: &ExperimentConfig, progress: &mut dyn FnMut(&FoldResult)) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let data = ingest_csv(&config.dataset, &config.target_columns, config.header, config.task)?;
    if let Some(dir) = &config.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut folds = Vec::with_capacity(config.folds);
    for f in 0..config.folds {
        let outcome = run_fold(config, &data, f)?;
        if let Some(dir) = &config.out {
            write_trace_csv(&dir.join(format!("fold{f}_trace.csv")), &outcome.trace)?;
            checkpoint::save(&outcome.model, &dir.join(format!("fold{f}_checkpoint.json")))?;
        }
        progress(&outcome.result);
        folds.push(outcome.result);
    }
    let collect = |f: fn(&Metrics) -> Option<f64>| -> Option<Aggregate> {
        let v: Option<Vec<f64>> = folds.iter().map(|r| f(&r.metrics)).collect();
        v.map(|v| Aggregate::of(&v))
    };
    let aggregate = AggregateMetrics {
        test_log_likelihood: collect(|m| Some(m.test_log_likelihood)).expect("at least one fold"),
        test_rmse: collect(|m| m.test_rmse),
        test_accuracy: collect(|m| m.test_accuracy),
    };
    let result = RunResult {
        library_version: LIBRARY_VERSION.into(),
        model_family: config.model_family(),
        std_convention: STD_CONVENTION.into(),
        config: config.clone(),
        dataset: DatasetInfo {
            name: data.name.clone(),
            num_points: data.len(),
            input_dim: data.input_dim(),
            output_dim: data.y.cols(),
        },
        folds,
        aggregate,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &config.out {
        let path = dir.join("results.json");
        fs::write(&path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

/// The JSON error object printed by the CLI on failure.
pub fn error_document(e: &Error) -> serde_json::Value {
    let mut obj = serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
        }
    });
    match e {
        Error::Config { field, .. } => obj["error"]["field"] = field.clone().into(),
        Error::Parse { line, .. } => obj["error"]["line"] = (*line).into(),
        Error::NonFiniteLoss { step } => obj["error"]["step"] = (*step).into(),
        _ => {}
    }
    obj
}

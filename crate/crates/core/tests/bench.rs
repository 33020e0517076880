use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use dgp_core::bench::*;
use dgp_core::kernels::{Kernel, MeanFunction, RbfArdKernel};
use dgp_core::linalg::{DenseMatrix, LowerTriangular};
use dgp_core::model::{DGPModel, Likelihood};
use dgp_core::rng::RngStream;
use dgp_core::svgp::GPLayer;
use dgp_core::trainer::Task;
use dgp_core::Error;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn three_line_file_last_column_target() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "t.csv", "1,2\n3,4\n5,6");
    let d = ingest_csv(&p, &[], false, Task::Regression).unwrap();
    assert_eq!((d.len(), d.input_dim()), (3, 1));
    assert_eq!(d.x.column(0), vec![1.0, 3.0, 5.0]);
    assert_eq!(d.y.column(0), vec![2.0, 4.0, 6.0]);
    assert_eq!(d.name, "t");
}

#[test]
fn header_row_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "h.csv", "a,b,c\n1,2,3\n4,5,6\n");
    let d = ingest_csv(&p, &[0], true, Task::Regression).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.y.column(0), vec![1.0, 4.0]);
    assert_eq!(d.x.row(1), &[5.0, 6.0]);
}

#[test]
fn malformed_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.csv", "x,y\n1,2\n3,oops\n5,6\n");
    match ingest_csv(&p, &[], true, Task::Regression) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let p = write(dir.path(), "ragged.csv", "1,2\n3,4,5\n");
    assert!(matches!(
        ingest_csv(&p, &[], false, Task::Regression),
        Err(Error::Parse { line: 2, .. })
    ));
    let p = write(dir.path(), "labels.csv", "1,0\n2,1\n3,2\n");
    assert!(matches!(
        ingest_csv(&p, &[], false, Task::BinaryClassification),
        Err(Error::Parse { line: 3, .. })
    ));
}

#[test]
fn empty_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "e.csv", "");
    assert!(matches!(ingest_csv(&p, &[], false, Task::Regression), Err(Error::EmptyDataset)));
    let p = write(dir.path(), "h.csv", "a,b\n");
    assert!(matches!(ingest_csv(&p, &[], true, Task::Regression), Err(Error::EmptyDataset)));
    let p = write(dir.path(), "one.csv", "1\n2\n");
    assert!(matches!(
        ingest_csv(&p, &[], false, Task::Regression),
        Err(Error::Config { ref field, .. }) if field == "target_columns"
    ));
}

#[test]
fn normalization_examples() {
    let x = DenseMatrix::from_rows(&[vec![0.0, 7.0], vec![2.0, 7.0]]).unwrap();
    let y = DenseMatrix::column_vector(&[1.0, 3.0]);
    let s = normalize((&x, &y), (&x, &y), Task::Regression).unwrap();
    let r = 0.5f64.sqrt();
    assert_abs_diff_eq!(s.x_train[(0, 0)], -r, epsilon = 1e-15);
    assert_abs_diff_eq!(s.x_train[(1, 0)], r, epsilon = 1e-15);
    assert_eq!(s.x_train.column(1), vec![0.0, 0.0]);
    assert_eq!(s.stats.x_std[1], 1.0);
    assert_eq!(s.x_test, s.x_train);
}

#[test]
fn classification_targets_are_not_scaled() {
    let x = DenseMatrix::column_vector(&[0.0, 1.0, 2.0]);
    let y = DenseMatrix::column_vector(&[0.0, 1.0, 1.0]);
    let s = normalize((&x, &y), (&x, &y), Task::BinaryClassification).unwrap();
    assert_eq!(s.y_train, y);
    assert_eq!(s.stats.log_y_scale(), 0.0);
}

#[test]
fn statistics_come_from_train_only() {
    let xtr = DenseMatrix::column_vector(&[1.0, 2.0, 3.0]);
    let xte = DenseMatrix::column_vector(&[100.0]);
    let s = normalize((&xtr, &xtr), (&xte, &xte), Task::Regression).unwrap();
    assert_abs_diff_eq!(s.x_test[(0, 0)], 98.0, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn train_columns_have_zero_mean_and_round_trip(
        values in prop::collection::vec(-1e3f64..1e3, 6..40),
        cols in 1usize..4,
    ) {
        let n = values.len() / cols;
        prop_assume!(n >= 2);
        let y = DenseMatrix::from_vec(n, cols, values[..n * cols].to_vec()).unwrap();
        let stats = NormStats::fit(&y, &y, true);
        let z = stats.apply_y(&y);
        for j in 0..cols {
            let m: f64 = z.column(j).iter().sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-12);
        }
        let back = stats.restore_y(&z);
        for (a, b) in back.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn folds_are_disjoint_and_cover(n in 2usize..300, seed in any::<u64>(), f in 0usize..20) {
        let spec = SplitSpec::new(20, seed);
        let fold = spec.fold(n, f);
        prop_assert_eq!(fold.test.len(), spec.test_size(n));
        prop_assert_eq!(fold.train.len() + fold.test.len(), n);
        let mut all: Vec<usize> = fold.train.iter().chain(&fold.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn log_likelihood_units_shift_by_log_std(scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let model = flat_model(Likelihood::gaussian(0.7));
        let x = DenseMatrix::column_vector(&[0.3, -0.2, 1.0]);
        let y_norm = DenseMatrix::column_vector(&[0.1, -0.4, 0.9]);
        let stats = NormStats { x_mean: vec![0.0], x_std: vec![1.0], y_mean: vec![shift], y_std: vec![scale] };
        let raw = stats.restore_y(&y_norm);
        let unit = NormStats { x_mean: vec![0.0], x_std: vec![1.0], y_mean: vec![0.0], y_std: vec![1.0] };
        let a = evaluate(&model, &x, &y_norm, &raw, &stats, 5, &mut RngStream::new(1)).unwrap();
        let b = evaluate(&model, &x, &y_norm, &y_norm, &unit, 5, &mut RngStream::new(1)).unwrap();
        prop_assert_eq!(a.test_log_likelihood, b.test_log_likelihood - scale.ln());
    }
}

/// One-layer model whose posterior is `N(level, ≈0)` everywhere near the origin.
fn point_model(likelihood: Likelihood, level: f64) -> DGPModel {
    let layer = GPLayer::new(
        DenseMatrix::column_vector(&[0.0]),
        Kernel::Rbf(RbfArdKernel::new(1e-4, &[1e3])),
        MeanFunction::Zero { output_dim: 1 },
        DenseMatrix::scalar(level),
        &[LowerTriangular::scaled_identity(1, 1e-9)],
    )
    .unwrap();
    DGPModel::new(vec![layer], likelihood, 10).unwrap()
}

fn flat_model(likelihood: Likelihood) -> DGPModel {
    let layer = GPLayer::new(
        DenseMatrix::column_vector(&[-1.0, 1.0]),
        Kernel::Rbf(RbfArdKernel::new(0.8, &[1.2])),
        MeanFunction::Zero { output_dim: 1 },
        DenseMatrix::column_vector(&[0.2, -0.3]),
        &[LowerTriangular::scaled_identity(2, 0.3)],
    )
    .unwrap();
    DGPModel::new(vec![layer], likelihood, 10).unwrap()
}

#[test]
fn perfect_predictor_log_likelihood_in_original_units() {
    let model = point_model(Likelihood::gaussian(1.0), 0.0);
    let x = DenseMatrix::column_vector(&[0.0, 0.0]);
    let y_norm = DenseMatrix::column_vector(&[0.0, 0.0]);
    let stats = NormStats {
        x_mean: vec![0.0],
        x_std: vec![1.0],
        y_mean: vec![5.0],
        y_std: vec![2.0],
    };
    let raw = stats.restore_y(&y_norm);
    let m = evaluate(&model, &x, &y_norm, &raw, &stats, 10, &mut RngStream::new(0)).unwrap();
    assert_abs_diff_eq!(m.test_log_likelihood, -0.5 * (2.0 * PI).ln() - 2f64.ln(), epsilon = 1e-9);
    assert_abs_diff_eq!(m.test_rmse.unwrap(), 0.0, epsilon = 1e-9);
}

#[test]
fn confident_classifier_is_fully_accurate() {
    let model = point_model(Likelihood::Bernoulli, 50.0);
    let x = DenseMatrix::column_vector(&[0.0, 0.0, 0.0]);
    let y = DenseMatrix::column_vector(&[1.0, 1.0, 1.0]);
    let stats = NormStats::fit(&x, &y, false);
    let m = evaluate(&model, &x, &y, &y, &stats, 4, &mut RngStream::new(0)).unwrap();
    assert_eq!(m.test_accuracy, Some(1.0));
    assert!(m.test_log_likelihood > -1e-12);
}

#[test]
fn aggregate_uses_sample_standard_error() {
    let a = Aggregate::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_abs_diff_eq!(a.mean, 2.5, epsilon = 1e-15);
    // sample std √(5/3), divided by √4
    assert_abs_diff_eq!(a.stderr.unwrap(), (5.0f64 / 3.0).sqrt() / 2.0, epsilon = 1e-15);
    assert_eq!(Aggregate::of(&[1.0]).stderr, None);
}

#[test]
fn config_errors_name_the_field() {
    let err = ExperimentConfig::from_json(r#"{"dataset": "a.csv", "lr": -1}"#).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "lr"));
    let err = ExperimentConfig::from_json(r#"{"dataset": "a.csv", "layrs": 2}"#).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "layrs"));
    let err = ExperimentConfig::from_json(r#"{"layers": 2}"#).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "dataset"));
    let err = ExperimentConfig::from_json(r#"{"dataset": "a.csv", "folds": 0}"#).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "folds"));
    let ok = ExperimentConfig::from_json(r#"{"dataset": "a.csv", "layers": 3}"#).unwrap();
    assert_eq!((ok.layers, ok.inducing, ok.folds, ok.iterations), (3, 100, 20, 20_000));
    assert_eq!(ok.model_family(), "DGP-3");
}

#[test]
fn error_document_is_machine_readable() {
    let doc = error_document(&Error::Parse {
        line: 4,
        message: "bad".into(),
    });
    assert_eq!(doc["error"]["kind"], "ParseError");
    assert_eq!(doc["error"]["line"], 4);
}

fn synthetic_csv(dir: &Path) -> std::path::PathBuf {
    let mut rng = RngStream::new(42);
    let mut text = String::from("a,b,y\n");
    for _ in 0..40 {
        let (a, b) = (rng.normal(), rng.normal());
        text.push_str(&format!("{a},{b},{}\n", 3.0 * a.sin() + b + 0.1 * rng.normal() + 10.0));
    }
    write(dir, "synth.csv", &text)
}

fn small_config(dataset: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(dataset);
    cfg.header = true;
    cfg.layers = 2;
    cfg.inducing = 8;
    cfg.iterations = 40;
    cfg.folds = 3;
    cfg.samples_pred = 10;
    cfg.trace_every = 10;
    cfg
}

#[test]
fn experiment_outputs_validate_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_csv(dir.path());
    let mut cfg = small_config(&data);
    cfg.out = Some(dir.path().join("run"));
    let mut seen = Vec::new();
    let first = run_experiment(&cfg, &mut |f| seen.push(f.fold)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(first.folds.len(), 3);
    assert_eq!(first.folds[0].num_test, 4);
    assert_eq!(first.dataset.num_points, 40);
    assert_eq!(first.std_convention, STD_CONVENTION);
    assert!(first.aggregate.test_rmse.is_some());

    let run_dir = dir.path().join("run");
    for f in 0..3 {
        let trace = fs::read_to_string(run_dir.join(format!("fold{f}_trace.csv"))).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next(), Some("step,elbo,data_fit,kl"));
        assert_eq!(lines.count(), 5);
        assert!(run_dir.join(format!("fold{f}_checkpoint.json")).exists());
    }

    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../../../schemas/results.schema.json")).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let emitted: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("results.json")).unwrap()).unwrap();
    assert!(compiled.is_valid(&emitted));
    let mut broken = emitted.clone();
    broken["folds"][0].as_object_mut().unwrap().remove("test_log_likelihood");
    assert!(!compiled.is_valid(&broken));

    let second = run_experiment(&cfg, &mut |_| {}).unwrap();
    assert_eq!(
        serde_json::to_string(&first.without_timing()).unwrap(),
        serde_json::to_string(&second.without_timing()).unwrap()
    );

    let mut classify = small_config(&data);
    classify.layers = 1;
    classify.folds = 2;
    let labels = dir.path().join("labels.csv");
    let text = fs::read_to_string(&data).unwrap();
    let mut out = String::from("a,b,y\n");
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        out.push_str(&format!("{},{},{}\n", v[0], v[1], u8::from(v[2] > 10.0)));
    }
    fs::write(&labels, out).unwrap();
    classify.dataset = labels;
    classify.task = Task::BinaryClassification;
    let res = run_experiment(&classify, &mut |_| {}).unwrap();
    assert!(compiled.is_valid(&serde_json::to_value(&res).unwrap()));
    assert!(res.aggregate.test_accuracy.is_some() && res.aggregate.test_rmse.is_none());
}

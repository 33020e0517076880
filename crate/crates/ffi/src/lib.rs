//! C interface to `dgp-core`.
//!
//! Models live behind the opaque `DgpModel` handle. Every fallible call
//! returns a `DgpStatus`; on failure a message for the calling thread is
//! available from `dgp_last_error`. Matrices are passed as row-major
//! `double` buffers.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dgp_core::checkpoint;
use dgp_core::linalg::DenseMatrix;
use dgp_core::model::{elbo, predict_density, predict_moments, predict_proba, DGPModel, Likelihood};
use dgp_core::rng::{streams, RngStream};
use dgp_core::trainer::{initialize, train, InitProtocol, Task, TrainConfig};
use dgp_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    DegenerateData = 4,
    NumericalFailure = 5,
    NonFiniteLoss = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

/// Task passed to `dgp_model_init`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgpTask {
    Regression = 0,
    BinaryClassification = 1,
}

/// Opaque model handle.
pub struct DgpModel {
    inner: DGPModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> DgpStatus {
    match e {
        Error::DimensionMismatch { .. } => DgpStatus::DimensionMismatch,
        Error::DegenerateData(_) | Error::EmptyDataset => DgpStatus::DegenerateData,
        Error::JitterExhausted { .. } | Error::NotSymmetric { .. } => DgpStatus::NumericalFailure,
        Error::NonFiniteLoss { .. } => DgpStatus::NonFiniteLoss,
        Error::Io { .. } => DgpStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Checkpoint(_) => DgpStatus::Parse,
        Error::Config { .. } | Error::QuadratureOrderInvalid(_) | Error::UnregisteredParameter(_) => {
            DgpStatus::InvalidArgument
        }
    }
}

struct Failure(DgpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: DgpStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `body`, recording any error or panic for `dgp_last_error`.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DgpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            DgpStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {message}"));
            DgpStatus::Panic
        }
    }
}

/// # Safety
/// `data` must be null or point to `rows * cols` readable doubles.
unsafe fn read_matrix(data: *const f64, rows: usize, cols: usize, name: &str) -> Result<DenseMatrix, Failure> {
    if data.is_null() {
        return Err(fail(DgpStatus::NullPointer, format!("`{name}` is null")));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(DgpStatus::InvalidArgument, format!("`{name}` is too large")))?;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Ok(DenseMatrix::from_vec(rows, cols, values)?)
}

/// # Safety
/// `out` must be null or point to `len` writable doubles.
unsafe fn write_slice(out: *mut f64, values: &[f64], name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(DgpStatus::NullPointer, format!("`{name}` is null")));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn model_ref<'a>(model: *const DgpModel) -> Result<&'a DgpModel, Failure> {
    // SAFETY: callers pass handles obtained from this library.
    unsafe { model.as_ref() }.ok_or_else(|| fail(DgpStatus::NullPointer, "`model` is null"))
}

fn model_mut<'a>(model: *mut DgpModel) -> Result<&'a mut DgpModel, Failure> {
    // SAFETY: callers pass handles obtained from this library.
    unsafe { model.as_mut() }.ok_or_else(|| fail(DgpStatus::NullPointer, "`model` is null"))
}

/// # Safety
/// `path` must be null or a NUL-terminated string.
unsafe fn read_path<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(fail(DgpStatus::NullPointer, "`path` is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(DgpStatus::InvalidArgument, "`path` is not valid UTF-8"))
}

fn check_samples(samples: usize) -> Result<(), Failure> {
    if samples == 0 {
        return Err(fail(DgpStatus::InvalidArgument, "`samples` must be at least 1"));
    }
    Ok(())
}

/// Message describing the most recent failure on this thread, or an empty
/// string. Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn dgp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dgp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an untrained model with the default initialization for
/// `num_layers` layers and `num_inducing` inducing points.
///
/// `x` is `n × input_dim` and `y` is `n × output_dim`. Classification needs a
/// single 0/1 output column. On success `*out` receives a handle that must be
/// released with `dgp_model_free`.
///
/// # Safety
/// `x` and `y` must point to buffers of the stated sizes and `out` to a
/// writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_init(
    x: *const f64,
    y: *const f64,
    n: usize,
    input_dim: usize,
    output_dim: usize,
    task: DgpTask,
    num_layers: usize,
    num_inducing: usize,
    seed: u64,
    out: *mut *mut DgpModel,
) -> DgpStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DgpStatus::NullPointer, "`out` is null"));
        }
        *out = ptr::null_mut();
        let x = read_matrix(x, n, input_dim, "x")?;
        let y = read_matrix(y, n, output_dim, "y")?;
        let task = match task {
            DgpTask::Regression => Task::Regression,
            DgpTask::BinaryClassification => Task::BinaryClassification,
        };
        let model = initialize(&x, &y, num_layers, task, &InitProtocol::new(num_inducing, seed))?;
        *out = Box::into_raw(Box::new(DgpModel { inner: model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_free(model: *mut DgpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_input_dim(model: *const DgpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Output width of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_output_dim(model: *const DgpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_depth(model: *const DgpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.depth())
}

/// Runs `iterations` Adam steps at learning rate `lr` on `n` rows.
/// `minibatch` of 0 selects `min(10000, n)`. The bound at the last step is
/// written to `final_elbo` when it is not null. On `NonFiniteLoss` the model
/// keeps the last parameters with a finite bound.
///
/// # Safety
/// `model` must be a live handle; `x` and `y` must hold `n` rows of the
/// model's input and output widths.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_train(
    model: *mut DgpModel,
    x: *const f64,
    y: *const f64,
    n: usize,
    iterations: usize,
    lr: f64,
    minibatch: usize,
    seed: u64,
    final_elbo: *mut f64,
) -> DgpStatus {
    guard(|| {
        let handle = model_mut(model)?;
        let x = read_matrix(x, n, handle.inner.input_dim(), "x")?;
        let y = read_matrix(y, n, handle.inner.output_dim(), "y")?;
        let mut config = TrainConfig::new(iterations, seed);
        config.lr = lr;
        config.minibatch = (minibatch > 0).then_some(minibatch);
        config.trace_every = iterations.max(1);
        let trace = train(&mut handle.inner, &x, &y, &config)?;
        if let (Some(last), false) = (trace.last(), final_elbo.is_null()) {
            *final_elbo = last.elbo;
        }
        Ok(())
    })
}

/// Monte-Carlo estimate of the bound on `n` rows with `samples` draws.
///
/// # Safety
/// `model` must be a live handle, `x`/`y` must hold `n` rows and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_elbo(
    model: *const DgpModel,
    x: *const f64,
    y: *const f64,
    n: usize,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> DgpStatus {
    guard(|| {
        let handle = model_ref(model)?;
        check_samples(samples)?;
        let x = read_matrix(x, n, handle.inner.input_dim(), "x")?;
        let y = read_matrix(y, n, handle.inner.output_dim(), "y")?;
        let mut rng = RngStream::substream(seed, streams::SAMPLING);
        let e = elbo(&handle.inner, &x, &y, &mut rng, samples)?;
        write_slice(out, &[e.value], "out")
    })
}

/// Predictive mean and variance of `y*` at `n` rows, each written as an
/// `n × output_dim` row-major buffer, from a `samples`-component mixture.
///
/// # Safety
/// `model` must be a live handle, `x` must hold `n` rows, and `mean` and
/// `variance` must each have room for `n * output_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_predict(
    model: *const DgpModel,
    x: *const f64,
    n: usize,
    samples: usize,
    seed: u64,
    mean: *mut f64,
    variance: *mut f64,
) -> DgpStatus {
    guard(|| {
        let handle = model_ref(model)?;
        check_samples(samples)?;
        let x = read_matrix(x, n, handle.inner.input_dim(), "x")?;
        let mut rng = RngStream::substream(seed, streams::PREDICT);
        let m = predict_moments(&handle.inner, &x, &mut rng, samples)?;
        write_slice(mean, m.mean.data(), "mean")?;
        write_slice(variance, m.variance.data(), "variance")
    })
}

/// Log predictive density of each of `n` observations, written to `out`.
///
/// # Safety
/// `model` must be a live handle, `x`/`y` must hold `n` rows and `out` must
/// have room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_log_density(
    model: *const DgpModel,
    x: *const f64,
    y: *const f64,
    n: usize,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> DgpStatus {
    guard(|| {
        let handle = model_ref(model)?;
        check_samples(samples)?;
        let x = read_matrix(x, n, handle.inner.input_dim(), "x")?;
        let y = read_matrix(y, n, handle.inner.output_dim(), "y")?;
        let mut rng = RngStream::substream(seed, streams::PREDICT);
        let d = predict_density(&handle.inner, &x, &y, &mut rng, samples)?;
        write_slice(out, &d, "out")
    })
}

/// `P(y* = 1)` at each of `n` rows for a classification model.
///
/// # Safety
/// `model` must be a live handle, `x` must hold `n` rows and `out` must have
/// room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_predict_proba(
    model: *const DgpModel,
    x: *const f64,
    n: usize,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> DgpStatus {
    guard(|| {
        let handle = model_ref(model)?;
        check_samples(samples)?;
        if !matches!(handle.inner.likelihood(), Likelihood::Bernoulli) {
            return Err(fail(DgpStatus::InvalidArgument, "model is not a classifier"));
        }
        let x = read_matrix(x, n, handle.inner.input_dim(), "x")?;
        let mut rng = RngStream::substream(seed, streams::PREDICT);
        let p = predict_proba(&handle.inner, &x, &mut rng, samples)?;
        write_slice(out, &p, "out")
    })
}

/// Writes the model to a JSON checkpoint at `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_save(model: *const DgpModel, path: *const c_char) -> DgpStatus {
    guard(|| {
        let handle = model_ref(model)?;
        let path = read_path(path)?;
        Ok(checkpoint::save(&handle.inner, path)?)
    })
}

/// Loads a checkpoint written by `dgp_model_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn dgp_model_load(path: *const c_char, out: *mut *mut DgpModel) -> DgpStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DgpStatus::NullPointer, "`out` is null"));
        }
        *out = ptr::null_mut();
        let path = read_path(path)?;
        let model = checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(DgpModel { inner: model }));
        Ok(())
    })
}

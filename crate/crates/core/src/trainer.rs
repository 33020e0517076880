//! Initialization, Adam and the minibatch training loop.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, ParamSet};
use crate::error::{Error, Result};
use crate::kernels::{build_inner_mean, Kernel, MeanFunction, NoisyKernel, RbfArdKernel};
use crate::linalg::{cholesky_with_jitter, DenseMatrix, LowerTriangular, DEFAULT_JITTER};
use crate::model::{elbo_gradient, DGPModel, Likelihood};
use crate::rng::{streams, RngStream};
use crate::svgp::{inducing_covariance, GPLayer, INDUCING_JITTER};

pub const MAX_INNER_WIDTH: usize = 30;
pub const KMEANS_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    BinaryClassification,
}

/// Starting values for a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitProtocol {
    pub num_inducing: usize,
    /// Width of every inner layer; `None` means `min(30, D⁰)`.
    pub inner_width: Option<usize>,
    pub kernel_variance: f64,
    pub lengthscale: f64,
    pub likelihood_variance: f64,
    pub inner_noise_variance: f64,
    /// Scale applied to the prior covariance of inner-layer `q(u)`.
    pub inner_q_variance: f64,
    pub seed: u64,
}

impl InitProtocol {
    pub fn new(num_inducing: usize, seed: u64) -> Self {
        Self {
            num_inducing,
            inner_width: None,
            kernel_variance: 2.0,
            lengthscale: 2.0,
            likelihood_variance: 0.01,
            inner_noise_variance: 1e-5,
            inner_q_variance: 1e-5,
            seed,
        }
    }

    pub fn inner_width_for(&self, input_dim: usize) -> usize {
        self.inner_width.unwrap_or(input_dim.min(MAX_INNER_WIDTH))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_rows(x: &DenseMatrix, order: &[usize], k: usize) -> Option<DenseMatrix> {
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for &i in order {
        if picked.iter().all(|&j| x.row(i) != x.row(j)) {
            picked.push(i);
            if picked.len() == k {
                return Some(x.select_rows(&picked));
            }
        }
    }
    None
}

fn has_duplicate_rows(c: &DenseMatrix) -> bool {
    (0..c.rows()).any(|i| (0..i).any(|j| c.row(i) == c.row(j)))
}

/// `k` cluster centres: ++ seeding then up to [`KMEANS_ITERATIONS`] Lloyd
/// steps. Empty clusters keep their previous centre. When the result has
/// repeated centres, `k` distinct rows of `x` are returned instead.
pub fn kmeans(x: &DenseMatrix, k: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || k > n {
        return Err(Error::DegenerateData(format!(
            "cannot place {k} inducing points on {n} rows"
        )));
    }
    let mut centres = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(centres[0]))).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.uniform() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        centres.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    if centres.len() == k {
        let mut c = x.select_rows(&centres);
        let mut assign = vec![usize::MAX; n];
        for _ in 0..KMEANS_ITERATIONS {
            let mut changed = false;
            for (i, a) in assign.iter_mut().enumerate() {
                let best = (0..k)
                    .map(|j| (j, sq_dist(x.row(i), c.row(j))))
                    .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc })
                    .0;
                changed |= *a != best;
                *a = best;
            }
            if !changed {
                break;
            }
            let mut sums = DenseMatrix::zeros(k, x.cols());
            let mut counts = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                    *s += v;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    let inv = 1.0 / counts[j] as f64;
                    for (cv, s) in c.row_mut(j).iter_mut().zip(sums.row(j)) {
                        *cv = s * inv;
                    }
                }
            }
        }
        if !has_duplicate_rows(&c) {
            return Ok(c);
        }
    }
    let order = rng.permutation(n);
    distinct_rows(x, &order, k).ok_or_else(|| {
        Error::DegenerateData(format!("fewer than {k} distinct input rows"))
    })
}

/// `scale · chol(K_ZZ)`: the identity in whitened coordinates.
fn prior_factor(kernel: &Kernel, z: &DenseMatrix, scale: f64) -> Result<LowerTriangular> {
    let chol = cholesky_with_jitter(&inducing_covariance(kernel, z, INDUCING_JITTER)?, DEFAULT_JITTER)?;
    LowerTriangular::from_matrix(chol.into_matrix().scale(scale))
}

/// Builds an untrained `num_layers`-layer model for the given data.
///
/// Every `q(u)` starts at the prior: mean `m(Z)` and covariance `K_ZZ`,
/// with the covariance of inner layers scaled by `inner_q_variance`.
pub fn initialize(
    x: &DenseMatrix,
    y: &DenseMatrix,
    num_layers: usize,
    task: Task,
    protocol: &InitProtocol,
) -> Result<DGPModel> {
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.rows() != x.rows() {
        return Err(Error::shape("initialize targets", x.rows(), y.rows()));
    }
    if num_layers == 0 {
        return Err(Error::Config {
            field: "layers".into(),
            message: "must be at least 1".into(),
        });
    }
    let d_y = y.cols();
    let mut rng = RngStream::substream(protocol.seed, streams::INIT);
    let m = protocol.num_inducing;
    let width = protocol.inner_width_for(x.cols());

    let mut z = kmeans(x, m, &mut rng)?;
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let d_in = h.cols();
        let base = RbfArdKernel::new(protocol.kernel_variance, &vec![protocol.lengthscale; d_in]);
        if l + 1 < num_layers {
            let mean_fn = build_inner_mean(&h, width)?;
            let q_mu = mean_fn.apply(&z)?;
            let kernel = Kernel::Noisy(NoisyKernel::new(base, protocol.inner_noise_variance));
            let q_sqrt = vec![prior_factor(&kernel, &z, protocol.inner_q_variance.sqrt())?; width];
            let layer = GPLayer::new(z.clone(), kernel, mean_fn.clone(), q_mu, &q_sqrt)?;
            h = mean_fn.apply(&h)?;
            z = mean_fn.apply(&z)?;
            layers.push(layer);
        } else {
            let kernel = Kernel::Rbf(base);
            let q_sqrt = vec![prior_factor(&kernel, &z, 1.0)?; d_y];
            layers.push(GPLayer::new(
                z.clone(),
                kernel,
                MeanFunction::Zero { output_dim: d_y },
                DenseMatrix::zeros(m, d_y),
                &q_sqrt,
            )?);
        }
    }
    let likelihood = match task {
        Task::Regression => Likelihood::gaussian(protocol.likelihood_variance),
        Task::BinaryClassification => Likelihood::Bernoulli,
    };
    DGPModel::new(layers, likelihood, x.rows())
}

/// Adam moments, kept per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<DenseMatrix>,
    pub second_moment: Vec<DenseMatrix>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .values()
            .iter()
            .map(|v| DenseMatrix::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step that increases the objective recorded in
/// `tape`.
pub fn adam_step(state: &mut AdamState, tape: &GradientTape, params: &mut ParamSet) -> Result<()> {
    if tape.names() != params.names() {
        let missing = params
            .names()
            .iter()
            .find(|n| !tape.names().contains(n))
            .or_else(|| tape.names().iter().find(|n| !params.names().contains(n)))
            .cloned()
            .unwrap_or_else(|| "parameter order".into());
        return Err(Error::UnregisteredParameter(missing));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (p, value) in params.values_mut().iter_mut().enumerate() {
        let g = &tape.grads()[p];
        if g.shape() != value.shape() {
            return Err(Error::shape(
                "adam gradient",
                format!("{:?}", value.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        let m = state.first_moment[p].data_mut();
        let v = state.second_moment[p].data_mut();
        for (((x, gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let delta = state.lr * (*mi / c1) / ((*vi / c2).sqrt() + state.epsilon);
            if delta != 0.0 {
                *x += delta;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// `None` means `min(10000, N)`.
    pub minibatch: Option<usize>,
    pub lr: f64,
    pub mc_samples: usize,
    pub trace_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            minibatch: None,
            lr: 0.01,
            mc_samples: 1,
            trace_every: 100,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub elbo: f64,
    pub data_fit: f64,
    pub kl: f64,
}

/// Runs `config.iterations` Adam steps on reshuffled minibatches.
///
/// The trace records the minibatch estimate at every `trace_every`-th step
/// and at the last step. If the objective stops being finite the model is
/// restored to the last finite parameters and `NonFiniteLoss` is returned.
pub fn train(model: &mut DGPModel, x: &DenseMatrix, y: &DenseMatrix, config: &TrainConfig) -> Result<Vec<TracePoint>> {
    if config.iterations == 0 {
        return Err(Error::Config {
            field: "iterations".into(),
            message: "must be at least 1".into(),
        });
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::Config {
            field: "lr".into(),
            message: "must be a finite non-negative number".into(),
        });
    }
    if config.trace_every == 0 {
        return Err(Error::Config {
            field: "trace_every".into(),
            message: "must be at least 1".into(),
        });
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let batch = config.minibatch.unwrap_or(10_000).min(n);
    if batch == 0 {
        return Err(Error::Config {
            field: "minibatch".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut sampling = RngStream::substream(config.seed, streams::SAMPLING);
    let mut shuffle = RngStream::substream(config.seed, streams::SHUFFLE);
    let mut params = model.params();
    let mut adam = AdamState::new(&params, config.lr);
    let mut order = shuffle.permutation(n);
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(config.iterations / config.trace_every + 2);

    for step in 0..config.iterations {
        if cursor + batch > n {
            shuffle.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = x.select_rows(idx);
        let yb = y.select_rows(idx);
        let eps = model.draw_inner_noise(batch, config.mc_samples, &mut sampling);
        let outcome = elbo_gradient(model, &xb, &yb, &eps, config.mc_samples);
        let (est, tape) = match outcome {
            Ok(v) => v,
            Err(Error::JitterExhausted { .. }) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        let finite = est.value.is_finite() && tape.grads().iter().all(DenseMatrix::is_finite);
        if !finite {
            return Err(Error::NonFiniteLoss { step });
        }
        if step % config.trace_every == 0 || step + 1 == config.iterations {
            trace.push(TracePoint {
                step,
                elbo: est.value,
                data_fit: est.data_fit,
                kl: est.kl_sum,
            });
        }
        adam_step(&mut adam, &tape, &mut params)?;
        if !params.values().iter().all(DenseMatrix::is_finite) {
            return Err(Error::NonFiniteLoss { step });
        }
        model.set_params(&params)?;
    }
    Ok(trace)
}

/// Writes the trace as CSV with columns `step,elbo,data_fit,kl`.
pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,elbo,data_fit,kl").expect("write to memory");
    for p in trace {
        writeln!(out, "{},{},{},{}", p.step, p.elbo, p.data_fit, p.kl).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

//! Covariance and mean functions.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg::{gemm, symmetric_eigen, DenseMatrix};

/// Squared-exponential kernel with one lengthscale per input dimension.
///
/// Hyperparameters are held as logarithms, which is also the form in which
/// they are optimized and checkpointed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfArdKernel {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl RbfArdKernel {
    pub fn new(variance: f64, lengthscales: &[f64]) -> Self {
        Self {
            log_variance: variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }
}

/// RBF kernel plus i.i.d. noise on same-point pairs: `k(xᵢ, xⱼ) + σ²δᵢⱼ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyKernel {
    pub base: RbfArdKernel,
    pub log_noise_variance: f64,
}

impl NoisyKernel {
    pub fn new(base: RbfArdKernel, noise_variance: f64) -> Self {
        Self {
            base,
            log_noise_variance: noise_variance.ln(),
        }
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    Rbf(RbfArdKernel),
    Noisy(NoisyKernel),
}

impl Kernel {
    pub fn rbf(&self) -> &RbfArdKernel {
        match self {
            Kernel::Rbf(k) => k,
            Kernel::Noisy(k) => &k.base,
        }
    }

    pub fn rbf_mut(&mut self) -> &mut RbfArdKernel {
        match self {
            Kernel::Rbf(k) => k,
            Kernel::Noisy(k) => &mut k.base,
        }
    }

    pub fn noise_variance(&self) -> Option<f64> {
        match self {
            Kernel::Rbf(_) => None,
            Kernel::Noisy(k) => Some(k.noise_variance()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.rbf().input_dim()
    }
}

/// `variance · exp(−½ Σ_d ((aᵢ_d − bⱼ_d)/ℓ_d)²)` using the expanded squared
/// distance, clamped at zero. With `same` set, `a` and `b` are the same point
/// set and the diagonal distance is exactly zero.
pub fn rbf_cross_matrix(
    a: &DenseMatrix,
    b: &DenseMatrix,
    variance: f64,
    lengthscales: &[f64],
    same: bool,
) -> DenseMatrix {
    let inv: Vec<f64> = lengthscales.iter().map(|l| 1.0 / l).collect();
    let scale = |m: &DenseMatrix| {
        DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] * inv[j])
    };
    let sa = scale(a);
    let sb = if same { sa.clone() } else { scale(b) };
    let na: Vec<f64> = (0..sa.rows())
        .map(|i| sa.row(i).iter().map(|v| v * v).sum())
        .collect();
    let nb: Vec<f64> = (0..sb.rows())
        .map(|i| sb.row(i).iter().map(|v| v * v).sum())
        .collect();
    let mut k = gemm(&sa, false, &sb, true);
    for i in 0..k.rows() {
        for (j, v) in k.row_mut(i).iter_mut().enumerate() {
            let r2 = if same && i == j {
                0.0
            } else {
                (na[i] + nb[j] - 2.0 * *v).max(0.0)
            };
            *v = variance * (-0.5 * r2).exp();
        }
    }
    k
}

fn check_dims(kernel: &Kernel, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    let d = kernel.input_dim();
    if a.cols() != d || b.cols() != d {
        return Err(Error::shape(
            "gram",
            format!("{d} input columns"),
            format!("{} and {}", a.cols(), b.cols()),
        ));
    }
    Ok(())
}

/// Gram matrix between the rows of `a` and `b`. The noise term of a
/// [`NoisyKernel`] is added on the diagonal only when `same_set` is set,
/// i.e. when `a` and `b` are one and the same point set.
pub fn gram(kernel: &Kernel, a: &DenseMatrix, b: &DenseMatrix, same_set: bool) -> Result<DenseMatrix> {
    check_dims(kernel, a, b)?;
    if same_set && a.rows() != b.rows() {
        return Err(Error::shape("gram", "same_set with equal row counts", format!("{} vs {}", a.rows(), b.rows())));
    }
    let rbf = kernel.rbf();
    let mut k = rbf_cross_matrix(a, b, rbf.variance(), &rbf.lengthscales(), same_set);
    if same_set {
        if let Some(noise) = kernel.noise_variance() {
            k.add_diag(noise);
        }
    }
    Ok(k)
}

/// Diagonal of `gram(kernel, a, a, same_set)` in O(N).
pub fn gram_diag(kernel: &Kernel, a: &DenseMatrix, same_set: bool) -> Result<Vec<f64>> {
    check_dims(kernel, a, a)?;
    let mut v = kernel.rbf().variance();
    if same_set {
        v += kernel.noise_variance().unwrap_or(0.0);
    }
    Ok(vec![v; a.rows()])
}

/// Graph handles for a kernel's log-hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars<'g> {
    pub log_variance: Var<'g>,
    pub log_lengthscales: Var<'g>,
    pub log_noise: Option<Var<'g>>,
}

impl<'g> KernelVars<'g> {
    /// Gram matrix between `a` and `b` on the graph. Passing the same node
    /// for both with `same_set` adds the noise diagonal.
    pub fn gram(&self, a: Var<'g>, b: Var<'g>, same_set: bool) -> Result<Var<'g>> {
        let k = a.rbf(b, self.log_variance, self.log_lengthscales)?;
        match (same_set, self.log_noise) {
            (true, Some(noise)) => k.add_diag(noise.exp()),
            _ => Ok(k),
        }
    }

    /// N×1 diagonal of the Gram matrix of `n` points with themselves.
    pub fn gram_diag(&self, n: usize, same_set: bool) -> Result<Var<'g>> {
        let mut v = self.log_variance.exp();
        if let (true, Some(noise)) = (same_set, self.log_noise) {
            v = v + noise.exp();
        }
        v.broadcast(n, 1)
    }
}

/// Mean function of a layer. `W` is fixed after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero { output_dim: usize },
    Linear { w: DenseMatrix },
}

impl MeanFunction {
    pub fn output_dim(&self) -> usize {
        match self {
            MeanFunction::Zero { output_dim } => *output_dim,
            MeanFunction::Linear { w } => w.cols(),
        }
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            MeanFunction::Zero { output_dim } => Ok(DenseMatrix::zeros(x.rows(), *output_dim)),
            MeanFunction::Linear { w } => x.matmul(w),
        }
    }

    /// `m(x)` on the graph; `None` for the zero mean.
    pub fn apply_var<'g>(&self, x: Var<'g>) -> Result<Option<Var<'g>>> {
        match self {
            MeanFunction::Zero { .. } => Ok(None),
            MeanFunction::Linear { w } => {
                let w = x.graph().constant(w.clone());
                x.matmul(w).map(Some)
            }
        }
    }
}

/// Linear mean for an inner layer mapping `x_train.cols()` inputs to `d_out`.
///
/// The identity when the widths agree; otherwise the top `d_out` principal
/// directions of the (already centered) inputs, i.e. the leading right
/// singular vectors of `x_train`.
pub fn build_inner_mean(x_train: &DenseMatrix, d_out: usize) -> Result<MeanFunction> {
    let d_in = x_train.cols();
    if d_out == d_in {
        return Ok(MeanFunction::Linear {
            w: DenseMatrix::identity(d_in),
        });
    }
    if d_out > d_in || d_out == 0 {
        return Err(Error::DegenerateData(format!(
            "cannot project {d_in} input dimensions onto {d_out}"
        )));
    }
    let gram = gemm(x_train, true, x_train, false);
    let (values, vectors) = symmetric_eigen(&gram)?;
    let tol = values.first().copied().unwrap_or(0.0).abs() * 1e-12 * d_in as f64;
    let rank = values.iter().filter(|&&v| v > tol && v > 0.0).count();
    if rank < d_out {
        return Err(Error::DegenerateData(format!(
            "inputs have {rank} nonzero singular values, need {d_out}"
        )));
    }
    let w = DenseMatrix::from_fn(d_in, d_out, |i, j| vectors[(i, j)]);
    Ok(MeanFunction::Linear { w })
}

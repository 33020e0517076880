//! One sparse variational GP layer.
//!
//! For each output dimension `d` the layer keeps `q(u_d) = N(m_d, S_d)` over
//! the function values at the shared inducing inputs `Z`, with
//! `S_d = L_d L_dᵀ`. Per-point marginals are
//!
//! ```text
//! mean_d(x) = m(x) + α(x)ᵀ (m_d − m(Z))
//! var_d(x)  = k(x, x) − α(x)ᵀ (K_ZZ − S_d) α(x),   α(x) = K_ZZ⁻¹ k(Z, x)
//! ```
//!
//! The trainable state stores `m_d − m(Z)` (the offset from the mean
//! function) and the packed factors `L_d` with log diagonals.

use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::kernels::{gram, Kernel, KernelVars, MeanFunction};
use crate::linalg::{packed_len, DenseMatrix, LowerTriangular, DEFAULT_JITTER};

/// Marginal variances are floored here before any square root.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Relative diagonal added to `K_ZZ`, as a fraction of its mean diagonal.
pub const INDUCING_JITTER: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GPLayer {
    z: DenseMatrix,
    kernel: Kernel,
    mean_fn: MeanFunction,
    q_mu_offset: DenseMatrix,
    q_sqrt_packed: DenseMatrix,
    inducing_jitter: f64,
}

/// Per-point Gaussian marginals, N×D_out.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalGaussians {
    pub mean: DenseMatrix,
    pub variance: DenseMatrix,
}

impl GPLayer {
    /// Builds a layer from the absolute inducing means `q_mu` (M×D_out) and
    /// one Cholesky factor per output dimension.
    pub fn new(
        z: DenseMatrix,
        kernel: Kernel,
        mean_fn: MeanFunction,
        q_mu: DenseMatrix,
        q_sqrt: &[LowerTriangular],
    ) -> Result<Self> {
        let offset = q_mu.sub(&mean_fn_at(&mean_fn, &z)?)?;
        let m = z.rows();
        let mut packed = DenseMatrix::zeros(q_sqrt.len(), packed_len(m));
        for (d, l) in q_sqrt.iter().enumerate() {
            if l.dim() != m {
                return Err(Error::shape("GPLayer::new q_sqrt", m, l.dim()));
            }
            packed.row_mut(d).copy_from_slice(&l.to_packed_log_diag());
        }
        Self::from_raw(z, kernel, mean_fn, offset, packed)
    }

    /// Builds a layer directly from its unconstrained state.
    pub fn from_raw(
        z: DenseMatrix,
        kernel: Kernel,
        mean_fn: MeanFunction,
        q_mu_offset: DenseMatrix,
        q_sqrt_packed: DenseMatrix,
    ) -> Result<Self> {
        let (m, d_in) = z.shape();
        let d_out = mean_fn.output_dim();
        if kernel.input_dim() != d_in {
            return Err(Error::shape("GPLayer kernel input dim", d_in, kernel.input_dim()));
        }
        if let MeanFunction::Linear { w } = &mean_fn {
            if w.rows() != d_in {
                return Err(Error::shape("GPLayer mean input dim", d_in, w.rows()));
            }
        }
        if q_mu_offset.shape() != (m, d_out) {
            return Err(Error::shape(
                "GPLayer q_mu",
                format!("({m}, {d_out})"),
                format!("{:?}", q_mu_offset.shape()),
            ));
        }
        if q_sqrt_packed.shape() != (d_out, packed_len(m)) {
            return Err(Error::shape(
                "GPLayer q_sqrt",
                format!("({d_out}, {})", packed_len(m)),
                format!("{:?}", q_sqrt_packed.shape()),
            ));
        }
        Ok(Self {
            z,
            kernel,
            mean_fn,
            q_mu_offset,
            q_sqrt_packed,
            inducing_jitter: INDUCING_JITTER,
        })
    }

    /// Relative diagonal added to `K_ZZ`, as a fraction of its mean diagonal.
    pub fn inducing_jitter(&self) -> f64 {
        self.inducing_jitter
    }

    pub fn set_inducing_jitter(&mut self, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Config {
                field: "inducing_jitter".into(),
                message: format!("must be finite and non-negative, got {value}"),
            });
        }
        self.inducing_jitter = value;
        Ok(())
    }

    /// `K_ZZ` as used by this layer.
    pub fn inducing_covariance(&self) -> Result<DenseMatrix> {
        inducing_covariance(&self.kernel, &self.z, self.inducing_jitter)
    }

    pub fn d_in(&self) -> usize {
        self.z.cols()
    }

    pub fn d_out(&self) -> usize {
        self.mean_fn.output_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn z(&self) -> &DenseMatrix {
        &self.z
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn mean_fn(&self) -> &MeanFunction {
        &self.mean_fn
    }

    pub fn q_mu_offset(&self) -> &DenseMatrix {
        &self.q_mu_offset
    }

    pub fn q_sqrt_packed(&self) -> &DenseMatrix {
        &self.q_sqrt_packed
    }

    /// Absolute inducing means `m_d`, as an M×D_out matrix.
    pub fn q_mu(&self) -> DenseMatrix {
        mean_fn_at(&self.mean_fn, &self.z)
            .and_then(|mz| mz.add(&self.q_mu_offset))
            .expect("layer shapes are validated on construction")
    }

    pub fn set_q_mu(&mut self, q_mu: &DenseMatrix) -> Result<()> {
        self.q_mu_offset = q_mu.sub(&mean_fn_at(&self.mean_fn, &self.z)?)?;
        Ok(())
    }

    pub fn q_sqrt(&self, d: usize) -> LowerTriangular {
        LowerTriangular::from_packed_log_diag(self.num_inducing(), self.q_sqrt_packed.row(d))
            .expect("packed length is validated on construction")
    }

    pub fn set_q_sqrt(&mut self, d: usize, l: &LowerTriangular) -> Result<()> {
        if l.dim() != self.num_inducing() {
            return Err(Error::shape("set_q_sqrt", self.num_inducing(), l.dim()));
        }
        self.q_sqrt_packed
            .row_mut(d)
            .copy_from_slice(&l.to_packed_log_diag());
        Ok(())
    }

    pub fn set_z(&mut self, z: DenseMatrix) -> Result<()> {
        if z.shape() != self.z.shape() {
            return Err(Error::shape(
                "set_z",
                format!("{:?}", self.z.shape()),
                format!("{:?}", z.shape()),
            ));
        }
        self.z = z;
        Ok(())
    }

    /// Appends this layer's unconstrained parameters, in binding order.
    pub fn push_params(&self, prefix: &str, set: &mut ParamSet) {
        set.push(format!("{prefix}.z"), self.z.clone());
        let rbf = self.kernel.rbf();
        set.push(
            format!("{prefix}.kernel.log_variance"),
            DenseMatrix::scalar(rbf.log_variance),
        );
        set.push(
            format!("{prefix}.kernel.log_lengthscales"),
            DenseMatrix::from_vec(1, rbf.input_dim(), rbf.log_lengthscales.clone())
                .expect("row vector"),
        );
        if let Kernel::Noisy(k) = &self.kernel {
            set.push(
                format!("{prefix}.kernel.log_noise_variance"),
                DenseMatrix::scalar(k.log_noise_variance),
            );
        }
        set.push(format!("{prefix}.q_mu"), self.q_mu_offset.clone());
        for d in 0..self.d_out() {
            set.push(
                format!("{prefix}.q_sqrt.{d}"),
                DenseMatrix::from_vec(1, self.q_sqrt_packed.cols(), self.q_sqrt_packed.row(d).to_vec())
                    .expect("row vector"),
            );
        }
    }

    pub fn num_params(&self) -> usize {
        4 + usize::from(matches!(self.kernel, Kernel::Noisy(_))) + self.d_out()
    }

    /// Overwrites the parameters from `values`, which must follow the order
    /// of [`Self::push_params`].
    pub fn load_params(&mut self, values: &[DenseMatrix]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape("GPLayer::load_params", self.num_params(), values.len()));
        }
        let check = |v: &DenseMatrix, shape: (usize, usize), what: &'static str| {
            if v.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape(what, format!("{shape:?}"), format!("{:?}", v.shape())))
            }
        };
        let mut it = values.iter();
        let z = it.next().unwrap();
        check(z, self.z.shape(), "load_params z")?;
        let lv = it.next().unwrap();
        check(lv, (1, 1), "load_params log_variance")?;
        let ll = it.next().unwrap();
        check(ll, (1, self.d_in()), "load_params log_lengthscales")?;
        let noise = if matches!(self.kernel, Kernel::Noisy(_)) {
            let n = it.next().unwrap();
            check(n, (1, 1), "load_params log_noise_variance")?;
            Some(n[(0, 0)])
        } else {
            None
        };
        let mu = it.next().unwrap();
        check(mu, self.q_mu_offset.shape(), "load_params q_mu")?;
        let k = self.q_sqrt_packed.cols();
        for (d, row) in it.enumerate() {
            check(row, (1, k), "load_params q_sqrt")?;
            self.q_sqrt_packed.row_mut(d).copy_from_slice(row.row(0));
        }
        self.z = z.clone();
        let rbf = self.kernel.rbf_mut();
        rbf.log_variance = lv[(0, 0)];
        rbf.log_lengthscales = ll.row(0).to_vec();
        if let (Kernel::Noisy(kn), Some(n)) = (&mut self.kernel, noise) {
            kn.log_noise_variance = n;
        }
        self.q_mu_offset = mu.clone();
        Ok(())
    }

    /// Records the layer on `graph` with every parameter held constant.
    pub fn bind_constants<'g>(&self, graph: &'g Graph) -> Result<LayerVars<'g>> {
        let mut set = ParamSet::new();
        self.push_params("", &mut set);
        let vars: Vec<Var<'g>> = set.values().iter().map(|v| graph.constant(v.clone())).collect();
        self.bind(&vars)
    }

    /// Wires the layer to parameter handles given in [`Self::push_params`] order.
    pub fn bind<'g>(&self, vars: &[Var<'g>]) -> Result<LayerVars<'g>> {
        if vars.len() != self.num_params() {
            return Err(Error::shape("GPLayer::bind", self.num_params(), vars.len()));
        }
        let noisy = matches!(self.kernel, Kernel::Noisy(_));
        let kernel = KernelVars {
            log_variance: vars[1],
            log_lengthscales: vars[2],
            log_noise: noisy.then(|| vars[3]),
        };
        let base = 3 + usize::from(noisy);
        let z = vars[0];
        let m = self.num_inducing();
        let kzz = kernel.gram(z, z, true)?;
        let kzz = if self.inducing_jitter > 0.0 {
            kzz.add_diag(kzz.diag().sum().scale(self.inducing_jitter / m as f64))?
        } else {
            kzz
        };
        let chol = kzz.cholesky(DEFAULT_JITTER)?;
        let q_sqrt = vars[base + 1..]
            .iter()
            .map(|v| v.unpack_lower_log_diag(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerVars {
            z,
            kernel,
            mean_fn: self.mean_fn.clone(),
            chol,
            q_mu_offset: vars[base],
            q_sqrt,
        })
    }
}

/// The kernel Gram matrix at `z` plus `relative_jitter · mean(diag)` on the
/// diagonal.
pub fn inducing_covariance(kernel: &Kernel, z: &DenseMatrix, relative_jitter: f64) -> Result<DenseMatrix> {
    let mut kzz = gram(kernel, z, z, true)?;
    if relative_jitter > 0.0 {
        let delta = kzz.diag().iter().sum::<f64>() * (relative_jitter / z.rows() as f64);
        kzz.add_diag(delta);
    }
    Ok(kzz)
}

fn mean_fn_at(mean_fn: &MeanFunction, z: &DenseMatrix) -> Result<DenseMatrix> {
    mean_fn.apply(z)
}

/// A layer recorded on a graph, with `chol(K_ZZ)` already computed.
pub struct LayerVars<'g> {
    pub z: Var<'g>,
    pub kernel: KernelVars<'g>,
    pub mean_fn: MeanFunction,
    pub chol: Var<'g>,
    pub q_mu_offset: Var<'g>,
    pub q_sqrt: Vec<Var<'g>>,
}

impl<'g> LayerVars<'g> {
    /// Marginal means and variances at the rows of `x`, each N×D_out.
    pub fn marginals(&self, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let n = x.shape().0;
        let kzx = self.kernel.gram(self.z, x, false)?;
        let a = self.chol.tri_solve(kzx, false)?;
        let alpha = self.chol.tri_solve(a, true)?;
        let mut mean = alpha.matmul_tn(self.q_mu_offset)?;
        if let Some(mx) = self.mean_fn.apply_var(x)? {
            mean = mean.try_add(mx)?;
        }
        let kdiag = self.kernel.gram_diag(n, true)?;
        let base = kdiag.try_sub(a.square().sum_rows().transpose())?;
        let cols = self
            .q_sqrt
            .iter()
            .map(|l| {
                let la = l.matmul_tn(alpha)?;
                base.try_add(la.square().sum_rows().transpose())
            })
            .collect::<Result<Vec<_>>>()?;
        let var = Var::hstack(&cols)?.clamp_min(VARIANCE_FLOOR);
        Ok((mean, var))
    }

    /// `mean + eps ⊙ √var`, with `eps` shaped like the output.
    pub fn sample(&self, x: Var<'g>, eps: Var<'g>) -> Result<Var<'g>> {
        let (mean, var) = self.marginals(x)?;
        mean.try_add(eps.try_mul(var.sqrt())?)
    }

    /// `Σ_d KL[N(m_d, S_d) ‖ N(m(Z), K_ZZ)]` as a 1×1 value.
    pub fn kl(&self) -> Result<Var<'g>> {
        let m = self.chol.shape().0 as f64;
        let d_out = self.q_sqrt.len() as f64;
        let logdet_k = self.chol.diag().ln().sum().scale(2.0);
        let mahalanobis = self
            .chol
            .tri_solve(self.q_mu_offset, false)?
            .square()
            .sum();
        let mut total = mahalanobis.try_add(logdet_k.scale(d_out))?;
        for l in &self.q_sqrt {
            let trace = self.chol.tri_solve(*l, false)?.square().sum();
            let logdet_s = l.diag().ln().sum().scale(2.0);
            total = total.try_add(trace)?.try_sub(logdet_s)?;
        }
        Ok(total.add_const(-m * d_out).scale(0.5))
    }
}

/// Marginal posterior of the layer at the rows of `x`.
pub fn marginal_posterior(layer: &GPLayer, x: &DenseMatrix) -> Result<MarginalGaussians> {
    if x.cols() != layer.d_in() {
        return Err(Error::shape("marginal_posterior", layer.d_in(), x.cols()));
    }
    let g = Graph::new();
    let lv = layer.bind_constants(&g)?;
    let (mean, var) = lv.marginals(g.constant(x.clone()))?;
    Ok(MarginalGaussians {
        mean: (*mean.value()).clone(),
        variance: (*var.value()).clone(),
    })
}

/// Reparameterized draw `mean + eps ⊙ √var` at the rows of `x_hat`.
pub fn sample_through(layer: &GPLayer, x_hat: &DenseMatrix, eps: &DenseMatrix) -> Result<DenseMatrix> {
    if eps.shape() != (x_hat.rows(), layer.d_out()) {
        return Err(Error::shape(
            "sample_through eps",
            format!("({}, {})", x_hat.rows(), layer.d_out()),
            format!("{:?}", eps.shape()),
        ));
    }
    let m = marginal_posterior(layer, x_hat)?;
    Ok(DenseMatrix::from_fn(x_hat.rows(), layer.d_out(), |i, d| {
        m.mean[(i, d)] + eps[(i, d)] * m.variance[(i, d)].sqrt()
    }))
}

/// KL divergence from the layer's `q(U)` to its prior `p(U; Z)`.
pub fn kl_to_prior(layer: &GPLayer) -> Result<f64> {
    let g = Graph::new();
    Ok(layer.bind_constants(&g)?.kl()?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, NoisyKernel, RbfArdKernel};
    use crate::linalg::cholesky_with_jitter;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, RngStream::new(seed).standard_normal(rows * cols))
            .unwrap()
    }

    fn random_lower(m: usize, seed: u64) -> LowerTriangular {
        let r = random(m, m, seed);
        let l = DenseMatrix::from_fn(m, m, |i, j| {
            if j < i {
                0.3 * r[(i, j)]
            } else if i == j {
                0.5 + r[(i, j)].abs()
            } else {
                0.0
            }
        });
        LowerTriangular::from_matrix(l).unwrap()
    }

    fn layer(m: usize, d_in: usize, d_out: usize, noisy: bool, linear: bool, seed: u64) -> GPLayer {
        let base = RbfArdKernel::new(1.3, &vec![0.9; d_in]);
        let kernel = if noisy {
            Kernel::Noisy(NoisyKernel::new(base, 0.05))
        } else {
            Kernel::Rbf(base)
        };
        let mean_fn = if linear {
            MeanFunction::Linear { w: random(d_in, d_out, seed + 7) }
        } else {
            MeanFunction::Zero { output_dim: d_out }
        };
        let q_sqrt: Vec<_> = (0..d_out).map(|d| random_lower(m, seed + 10 + d as u64)).collect();
        GPLayer::new(random(m, d_in, seed), kernel, mean_fn, random(m, d_out, seed + 1), &q_sqrt)
            .unwrap()
    }

    /// Gauss-Jordan inverse, test-only.
    fn inverse(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut aug = DenseMatrix::from_fn(n, 2 * n, |i, j| {
            if j < n { a[(i, j)] } else if j - n == i { 1.0 } else { 0.0 }
        });
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| aug[(i, c)].abs().total_cmp(&aug[(j, c)].abs())).unwrap();
            for j in 0..2 * n {
                let t = aug[(c, j)];
                aug[(c, j)] = aug[(p, j)];
                aug[(p, j)] = t;
            }
            let piv = aug[(c, c)];
            for j in 0..2 * n {
                aug[(c, j)] /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = aug[(r, c)];
                    for j in 0..2 * n {
                        aug[(r, j)] -= f * aug[(c, j)];
                    }
                }
            }
        }
        DenseMatrix::from_fn(n, n, |i, j| aug[(i, n + j)])
    }

    /// Full mean vector and covariance matrix per output dimension, built from
    /// explicit inverses.
    fn brute_force(layer: &GPLayer, x: &DenseMatrix) -> Vec<(Vec<f64>, DenseMatrix)> {
        let z = layer.z();
        let mut kzz = layer.inducing_covariance().unwrap();
        let jitter = cholesky_with_jitter(&kzz, DEFAULT_JITTER).unwrap().jitter();
        kzz.add_diag(jitter);
        let kinv = inverse(&kzz);
        let kzx = gram(layer.kernel(), z, x, false).unwrap();
        let kxx = gram(layer.kernel(), x, x, true).unwrap();
        let alpha = kinv.matmul(&kzx).unwrap();
        let mx = layer.mean_fn().apply(x).unwrap();
        let mz = layer.mean_fn().apply(z).unwrap();
        let q_mu = layer.q_mu();
        (0..layer.d_out())
            .map(|d| {
                let s = layer.q_sqrt(d).reconstruct();
                let diff = DenseMatrix::from_fn(z.rows(), 1, |i, _| q_mu[(i, d)] - mz[(i, d)]);
                let mean_corr = alpha.transpose().matmul(&diff).unwrap();
                let mean = (0..x.rows()).map(|i| mx[(i, d)] + mean_corr[(i, 0)]).collect();
                let middle = kzz.sub(&s).unwrap();
                let cov = kxx
                    .sub(&alpha.transpose().matmul(&middle).unwrap().matmul(&alpha).unwrap())
                    .unwrap();
                (mean, cov)
            })
            .collect()
    }

    #[test]
    fn prior_is_recovered_when_q_equals_prior() {
        for noisy in [false, true] {
            let mut l = layer(4, 2, 2, noisy, true, 3);
            let z = l.z().clone();
            let kzz = l.inducing_covariance().unwrap();
            let chol = cholesky_with_jitter(&kzz, DEFAULT_JITTER).unwrap();
            let mz = l.mean_fn().apply(&z).unwrap();
            l.set_q_mu(&mz).unwrap();
            for d in 0..2 {
                l.set_q_sqrt(d, &chol).unwrap();
            }
            let x = random(6, 2, 99);
            let post = marginal_posterior(&l, &x).unwrap();
            let mx = l.mean_fn().apply(&x).unwrap();
            let kd = crate::kernels::gram_diag(l.kernel(), &x, true).unwrap();
            assert!(post.mean.max_abs_diff(&mx) < 1e-10);
            for i in 0..6 {
                for d in 0..2 {
                    assert_abs_diff_eq!(post.variance[(i, d)], kd[i], epsilon = 1e-9);
                }
            }
            assert!(kl_to_prior(&l).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn interpolates_inducing_values_when_s_vanishes() {
        let mut l = layer(3, 1, 1, false, false, 4);
        l.set_q_sqrt(0, &LowerTriangular::scaled_identity(3, 1e-6)).unwrap();
        let x = DenseMatrix::from_vec(1, 1, vec![l.z()[(1, 0)]]).unwrap();
        let post = marginal_posterior(&l, &x).unwrap();
        assert_abs_diff_eq!(post.mean[(0, 0)], l.q_mu()[(1, 0)], epsilon = 1e-6);
        assert!(post.variance[(0, 0)] < 10.0 * INDUCING_JITTER * l.kernel().rbf().variance());
    }

    #[test]
    fn matches_explicit_inverse_oracle() {
        for (noisy, linear) in [(false, false), (true, true)] {
            let l = layer(3, 2, 2, noisy, linear, 21);
            let x = random(5, 2, 22);
            let post = marginal_posterior(&l, &x).unwrap();
            for (d, (mean, cov)) in brute_force(&l, &x).into_iter().enumerate() {
                for i in 0..5 {
                    assert_abs_diff_eq!(post.mean[(i, d)], mean[i], epsilon = 1e-10);
                    assert_abs_diff_eq!(post.variance[(i, d)], cov[(i, i)], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn diagonal_of_full_covariance_on_eight_points() {
        let l = layer(5, 3, 1, true, false, 31);
        let x = random(8, 3, 32);
        let post = marginal_posterior(&l, &x).unwrap();
        let (_, cov) = &brute_force(&l, &x)[0];
        for i in 0..8 {
            assert!((post.variance[(i, 0)] - cov[(i, i)]).abs() <= 1e-10);
        }
    }

    #[test]
    fn rows_are_local() {
        let l = layer(4, 2, 3, true, true, 41);
        let x = random(6, 2, 42);
        let base = marginal_posterior(&l, &x).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = marginal_posterior(&l, &x.select_rows(&perm)).unwrap();
        assert!(permuted.mean.max_abs_diff(&base.mean.select_rows(&perm)) <= 1e-12);
        assert!(permuted.variance.max_abs_diff(&base.variance.select_rows(&perm)) <= 1e-12);

        let extra = random(3, 2, 43);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| x.row(i).to_vec()).collect();
        rows.extend((0..3).map(|i| extra.row(i).to_vec()));
        let longer = marginal_posterior(&l, &DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        let head: Vec<usize> = (0..6).collect();
        assert!(longer.mean.select_rows(&head).max_abs_diff(&base.mean) <= 1e-12);
        assert!(longer.variance.select_rows(&head).max_abs_diff(&base.variance) <= 1e-12);
    }

    #[test]
    fn sampler_at_zero_and_unit_noise() {
        let l = layer(3, 1, 1, false, false, 51);
        let x = random(4, 1, 52);
        let post = marginal_posterior(&l, &x).unwrap();
        let zero = sample_through(&l, &x, &DenseMatrix::zeros(4, 1)).unwrap();
        assert_eq!(zero, post.mean);
        let one = sample_through(&l, &x, &DenseMatrix::filled(4, 1, 1.0)).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(
                one[(i, 0)],
                post.mean[(i, 0)] + post.variance[(i, 0)].sqrt(),
                epsilon = 1e-15
            );
        }
        assert!(sample_through(&l, &x, &DenseMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn sampler_monte_carlo_moments() {
        let l = layer(3, 2, 2, true, true, 61);
        let x = random(2, 2, 62);
        let post = marginal_posterior(&l, &x).unwrap();
        let n = 100_000;
        let mut rng = RngStream::new(63);
        let mut sum = DenseMatrix::zeros(2, 2);
        let mut sumsq = DenseMatrix::zeros(2, 2);
        // Replicate x so a single call draws every sample.
        let reps: Vec<usize> = (0..n).flat_map(|_| [0, 1]).collect();
        let xs = x.select_rows(&reps);
        let eps = DenseMatrix::from_vec(2 * n, 2, rng.standard_normal(4 * n)).unwrap();
        let draws = sample_through(&l, &xs, &eps).unwrap();
        for (r, &i) in reps.iter().enumerate() {
            for d in 0..2 {
                let v = draws[(r, d)];
                sum[(i, d)] += v;
                sumsq[(i, d)] += v * v;
            }
        }
        for i in 0..2 {
            for d in 0..2 {
                let mean = sum[(i, d)] / n as f64;
                let var = sumsq[(i, d)] / n as f64 - mean * mean;
                let sd = post.variance[(i, d)].sqrt();
                let se_mean = sd / (n as f64).sqrt();
                let se_var = post.variance[(i, d)] * (2.0 / (n as f64 - 1.0)).sqrt();
                assert!((mean - post.mean[(i, d)]).abs() < 3.0 * se_mean);
                assert!((var - post.variance[(i, d)]).abs() < 3.0 * se_var);
            }
        }
    }

    #[test]
    fn scalar_kl_by_hand() {
        let kernel = Kernel::Rbf(RbfArdKernel::new(1.0, &[1.0]));
        let l = GPLayer::new(
            DenseMatrix::scalar(0.0),
            kernel,
            MeanFunction::Zero { output_dim: 1 },
            DenseMatrix::scalar(1.0),
            &[LowerTriangular::identity(1)],
        )
        .unwrap();
        let k = 1.0 + INDUCING_JITTER;
        let expected = 0.5 * (2.0 / k - 1.0 + k.ln());
        assert_abs_diff_eq!(kl_to_prior(&l).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn kl_is_nonnegative_and_permutation_invariant() {
        for seed in 0..50 {
            let l = layer(4, 2, 2, seed % 2 == 0, seed % 3 == 0, 100 + seed);
            let kl = kl_to_prior(&l).unwrap();
            assert!(kl >= -1e-10, "seed {seed}: {kl}");

            // Reorder inducing points together with q_mu and S.
            let perm = [2, 0, 3, 1];
            let q_sqrt: Vec<LowerTriangular> = (0..2)
                .map(|d| {
                    let s = l.q_sqrt(d).reconstruct();
                    let sp = DenseMatrix::from_fn(4, 4, |i, j| s[(perm[i], perm[j])]);
                    cholesky_with_jitter(&sp, DEFAULT_JITTER).unwrap()
                })
                .collect();
            let permuted = GPLayer::new(
                l.z().select_rows(&perm),
                l.kernel().clone(),
                l.mean_fn().clone(),
                l.q_mu().select_rows(&perm),
                &q_sqrt,
            )
            .unwrap();
            let kl2 = kl_to_prior(&permuted).unwrap();
            assert!((kl - kl2).abs() <= 1e-9 * kl.abs().max(1.0), "{kl} vs {kl2}");
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        for (noisy, linear, seed) in [(false, false, 71), (true, true, 72)] {
            let l = layer(4, 2, 2, noisy, linear, seed);
            let x = random(5, 2, seed + 100);
            let eps = random(5, 2, seed + 101);
            let (w_mean, w_var, w_draw) = (random(5, 2, seed + 102), random(5, 2, seed + 103), random(5, 2, seed + 104));
            let objective = |lv: &LayerVars<'_>| -> Result<f64> {
                let g = lv.z.graph();
                let (mean, var) = lv.marginals(g.constant(x.clone()))?;
                let draw = lv.sample(g.constant(x.clone()), g.constant(eps.clone()))?;
                Ok(weighted(&mean.value(), &w_mean) + weighted(&var.value(), &w_var) + weighted(&draw.value(), &w_draw) + lv.kl()?.item())
            };
            let mut set = ParamSet::new();
            l.push_params("l", &mut set);
            let tape = crate::autodiff::gradient_of(&set, |g, vars| {
                let lv = l.bind(vars)?;
                let (mean, var) = lv.marginals(g.constant(x.clone()))?;
                let draw = lv.sample(g.constant(x.clone()), g.constant(eps.clone()))?;
                Ok((mean * g.constant(w_mean.clone())).sum()
                    + (var * g.constant(w_var.clone())).sum()
                    + (draw * g.constant(w_draw.clone())).sum()
                    + lv.kl()?)
            })
            .unwrap();
            let numeric = crate::autodiff::finite_difference(&set, 1e-6, |p| {
                let mut moved = l.clone();
                moved.load_params(p.values())?;
                let g = Graph::new();
                let lv = moved.bind_constants(&g)?;
                objective(&lv)
            })
            .unwrap();
            let err = crate::autodiff::max_relative_error(tape.grads(), &numeric);
            assert!(err < 1e-4, "noisy={noisy} linear={linear}: {err}");
        }
    }

    fn weighted(a: &DenseMatrix, w: &DenseMatrix) -> f64 {
        a.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn params_round_trip() {
        let mut l = layer(3, 2, 2, true, true, 7);
        let mut set = ParamSet::new();
        l.push_params("layer0", &mut set);
        assert_eq!(set.len(), l.num_params());
        assert_eq!(set.names()[3], "layer0.kernel.log_noise_variance");
        let before = l.clone();
        l.load_params(set.values()).unwrap();
        assert_eq!(l, before);
        assert!(l.load_params(&set.values()[1..]).is_err());
    }
}

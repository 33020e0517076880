//! The layered model: ELBO estimation and mixture predictions.
//!
//! Noise layout: for `S` samples over a batch of `B` rows, the batch is
//! replicated `S` times (sample-major) and each sampled layer `l` receives
//! one `(S·B) × D_l` matrix of standard normals, drawn layer by layer from
//! the stream in row-major order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_of, Graph, GradientTape, ParamSet, Var};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, MeanFunction};
use crate::linalg::DenseMatrix;
use crate::quadrature::{log_mean_exp, log_normal_cdf, log_normal_pdf, normal_cdf, GaussHermite, DEFAULT_ORDER};
use crate::rng::RngStream;
use crate::svgp::{GPLayer, LayerVars, MarginalGaussians};

/// Observation model for the final layer's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian { log_variance: f64 },
    /// Binary labels in {0, 1} with a probit link.
    Bernoulli,
}

impl Likelihood {
    pub fn gaussian(variance: f64) -> Self {
        Likelihood::Gaussian {
            log_variance: variance.ln(),
        }
    }

    pub fn noise_variance(&self) -> Option<f64> {
        match self {
            Likelihood::Gaussian { log_variance } => Some(log_variance.exp()),
            Likelihood::Bernoulli => None,
        }
    }
}

/// One stochastic evaluation of the bound; `value = data_fit − kl_sum`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub data_fit: f64,
    pub kl_sum: f64,
    pub samples_used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DGPModel {
    layers: Vec<GPLayer>,
    likelihood: Likelihood,
    num_data: usize,
}

/// The model recorded on a graph.
pub struct ModelVars<'g> {
    pub layers: Vec<LayerVars<'g>>,
    pub log_noise: Option<Var<'g>>,
}

impl DGPModel {
    /// Validates the layer chain: widths must connect, inner layers use a
    /// noisy kernel with a linear mean, and the last layer a plain kernel
    /// with a zero mean.
    pub fn new(layers: Vec<GPLayer>, likelihood: Likelihood, num_data: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config {
                field: "layers".into(),
                message: "at least one layer is required".into(),
            });
        }
        for w in layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::shape("DGPModel layer chain", w[0].d_out(), w[1].d_in()));
            }
        }
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let inner = l < last;
            let ok = if inner {
                matches!(layer.kernel(), Kernel::Noisy(_))
                    && matches!(layer.mean_fn(), MeanFunction::Linear { .. })
            } else {
                matches!(layer.kernel(), Kernel::Rbf(_))
                    && matches!(layer.mean_fn(), MeanFunction::Zero { .. })
            };
            if !ok {
                return Err(Error::Config {
                    field: format!("layers[{l}]"),
                    message: if inner {
                        "inner layers need a noisy kernel and a linear mean".into()
                    } else {
                        "the final layer needs a plain kernel and a zero mean".into()
                    },
                });
            }
        }
        if matches!(likelihood, Likelihood::Bernoulli) && layers[last].d_out() != 1 {
            return Err(Error::shape("Bernoulli likelihood output dim", 1, layers[last].d_out()));
        }
        if num_data == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            layers,
            likelihood,
            num_data,
        })
    }

    pub fn layers(&self) -> &[GPLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GPLayer] {
        &mut self.layers
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn likelihood_mut(&mut self) -> &mut Likelihood {
        &mut self.likelihood
    }

    pub fn num_data(&self) -> usize {
        self.num_data
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Every trainable value in unconstrained form, layer by layer, then the
    /// likelihood.
    pub fn params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.push_params(&format!("layer{l}"), &mut set);
        }
        if let Likelihood::Gaussian { log_variance } = self.likelihood {
            set.push("likelihood.log_variance", DenseMatrix::scalar(log_variance));
        }
        set
    }

    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        let expected = self.params();
        if params.names() != expected.names() {
            return Err(Error::UnregisteredParameter(format!(
                "parameter layout differs ({} vs {} entries)",
                params.len(),
                expected.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.num_params();
            layer.load_params(&params.values()[offset..offset + n])?;
            offset += n;
        }
        if let Likelihood::Gaussian { log_variance } = &mut self.likelihood {
            let v = &params.values()[offset];
            if v.shape() != (1, 1) {
                return Err(Error::shape("likelihood.log_variance", "(1, 1)", format!("{:?}", v.shape())));
            }
            *log_variance = v[(0, 0)];
        }
        Ok(())
    }

    /// Records the model on a graph from handles in [`Self::params`] order.
    pub fn bind<'g>(&self, vars: &[Var<'g>]) -> Result<ModelVars<'g>> {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = layer.num_params();
            if vars.len() < offset + n {
                return Err(Error::shape("DGPModel::bind", self.params().len(), vars.len()));
            }
            layers.push(layer.bind(&vars[offset..offset + n])?);
            offset += n;
        }
        let log_noise = match self.likelihood {
            Likelihood::Gaussian { .. } => Some(
                *vars
                    .get(offset)
                    .ok_or_else(|| Error::shape("DGPModel::bind", offset + 1, vars.len()))?,
            ),
            Likelihood::Bernoulli => None,
        };
        Ok(ModelVars { layers, log_noise })
    }

    pub fn bind_constants<'g>(&self, graph: &'g Graph) -> Result<ModelVars<'g>> {
        let vars: Vec<Var<'g>> = self
            .params()
            .values()
            .iter()
            .map(|v| graph.constant(v.clone()))
            .collect();
        self.bind(&vars)
    }

    /// Widths of the layers whose outputs are sampled before the final
    /// marginal (all but the last).
    pub fn inner_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(GPLayer::d_out)
            .collect()
    }

    /// Draws the noise for `samples` replicas of a `rows`-row batch.
    pub fn draw_inner_noise(&self, rows: usize, samples: usize, rng: &mut RngStream) -> Vec<DenseMatrix> {
        self.inner_widths()
            .into_iter()
            .map(|w| {
                DenseMatrix::from_vec(rows * samples, w, rng.standard_normal(rows * samples * w))
                    .expect("noise shape")
            })
            .collect()
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("model input", self.input_dim(), x.cols()));
        }
        Ok(())
    }
}

fn replicate(x: &DenseMatrix, samples: usize) -> DenseMatrix {
    let idx: Vec<usize> = (0..samples).flat_map(|_| 0..x.rows()).collect();
    x.select_rows(&idx)
}

impl<'g> ModelVars<'g> {
    /// Samples every layer but the last, then returns the final layer's
    /// marginals at the last sample. `eps` holds one matrix per inner layer.
    pub fn final_marginals(&self, x: Var<'g>, eps: &[DenseMatrix]) -> Result<(Var<'g>, Var<'g>)> {
        let inner = self.layers.len() - 1;
        if eps.len() != inner {
            return Err(Error::shape("inner noise layers", inner, eps.len()));
        }
        let mut h = x;
        for (layer, e) in self.layers[..inner].iter().zip(eps) {
            h = layer.sample(h, x.graph().constant(e.clone()))?;
        }
        self.layers[inner].marginals(h)
    }

    /// `Σ_d Σ_i E[log p(y_id | f_id)]` under the given marginals, as 1×1.
    pub fn expected_log_lik(
        &self,
        mean: Var<'g>,
        var: Var<'g>,
        y: &DenseMatrix,
        quad: &GaussHermite,
    ) -> Result<Var<'g>> {
        if mean.shape() != y.shape() {
            return Err(Error::shape(
                "expected_log_lik targets",
                format!("{:?}", mean.shape()),
                format!("{:?}", y.shape()),
            ));
        }
        let g = mean.graph();
        match self.log_noise {
            Some(log_noise) => {
                let n = (y.rows() * y.cols()) as f64;
                let resid = g.constant(y.clone()).try_sub(mean)?.square().sum();
                let spread = resid.try_add(var.sum())?;
                let scaled = spread.mul_scalar((-log_noise).exp())?.scale(-0.5);
                Ok(scaled
                    .try_sub(log_noise.scale(0.5 * n))?
                    .add_const(-0.5 * n * (2.0 * std::f64::consts::PI).ln()))
            }
            None => {
                let mut total: Option<Var<'g>> = None;
                for d in 0..y.cols() {
                    let e = mean
                        .column(d)
                        .probit_expectation(var.column(d), &y.column(d), quad)?
                        .sum();
                    total = Some(match total {
                        Some(t) => t.try_add(e)?,
                        None => e,
                    });
                }
                Ok(total.expect("at least one output column"))
            }
        }
    }

    pub fn kl_sum(&self) -> Result<Var<'g>> {
        let mut total = self.layers[0].kl()?;
        for layer in &self.layers[1..] {
            total = total.try_add(layer.kl()?)?;
        }
        Ok(total)
    }
}

/// Graph handles for one bound evaluation.
pub struct ElboVars<'g> {
    pub value: Var<'g>,
    pub data_fit: Var<'g>,
    pub kl_sum: Var<'g>,
}

/// Records the bound on a graph for the batch `(x, y)` with fixed noise.
/// `eps` follows the module-level layout for `samples` replicas.
pub fn elbo_graph<'g>(
    model: &DGPModel,
    vars: &ModelVars<'g>,
    x: &DenseMatrix,
    y: &DenseMatrix,
    eps: &[DenseMatrix],
    samples: usize,
) -> Result<ElboVars<'g>> {
    model.check_input(x)?;
    if samples == 0 {
        return Err(Error::Config {
            field: "mc_samples".into(),
            message: "must be at least 1".into(),
        });
    }
    if y.rows() != x.rows() || y.cols() != model.output_dim() {
        return Err(Error::shape(
            "elbo targets",
            format!("({}, {})", x.rows(), model.output_dim()),
            format!("{:?}", y.shape()),
        ));
    }
    let graph = vars.layers[0].z.graph();
    let quad = GaussHermite::new(DEFAULT_ORDER)?;
    let xs = graph.constant(replicate(x, samples));
    let ys = replicate(y, samples);
    let (mean, var) = vars.final_marginals(xs, eps)?;
    let ell = vars.expected_log_lik(mean, var, &ys, &quad)?;
    let scale = model.num_data as f64 / (x.rows() as f64 * samples as f64);
    let data_fit = ell.scale(scale);
    let kl_sum = vars.kl_sum()?;
    let value = data_fit.try_sub(kl_sum)?;
    Ok(ElboVars {
        value,
        data_fit,
        kl_sum,
    })
}

/// Bound estimate with caller-supplied noise.
pub fn elbo_with_noise(
    model: &DGPModel,
    x: &DenseMatrix,
    y: &DenseMatrix,
    eps: &[DenseMatrix],
    samples: usize,
) -> Result<ElboEstimate> {
    let g = Graph::new();
    let vars = model.bind_constants(&g)?;
    let e = elbo_graph(model, &vars, x, y, eps, samples)?;
    Ok(ElboEstimate {
        value: e.value.item(),
        data_fit: e.data_fit.item(),
        kl_sum: e.kl_sum.item(),
        samples_used: samples,
    })
}

/// Unbiased estimate of the bound from `mc_samples` draws on one batch.
pub fn elbo(
    model: &DGPModel,
    x_batch: &DenseMatrix,
    y_batch: &DenseMatrix,
    rng: &mut RngStream,
    mc_samples: usize,
) -> Result<ElboEstimate> {
    let eps = model.draw_inner_noise(x_batch.rows(), mc_samples, rng);
    elbo_with_noise(model, x_batch, y_batch, &eps, mc_samples)
}

/// Bound estimate together with its gradient with respect to
/// [`DGPModel::params`], for fixed noise and batch.
pub fn elbo_gradient(
    model: &DGPModel,
    x: &DenseMatrix,
    y: &DenseMatrix,
    eps: &[DenseMatrix],
    samples: usize,
) -> Result<(ElboEstimate, GradientTape)> {
    let params = model.params();
    let mut parts = (0.0, 0.0);
    let tape = gradient_of(&params, |_, vars| {
        let mv = model.bind(vars)?;
        let e = elbo_graph(model, &mv, x, y, eps, samples)?;
        parts = (e.data_fit.item(), e.kl_sum.item());
        Ok(e.value)
    })?;
    Ok((
        ElboEstimate {
            value: tape.objective(),
            data_fit: parts.0,
            kl_sum: parts.1,
            samples_used: samples,
        },
        tape,
    ))
}

/// Per-layer samples with caller-supplied noise, one matrix per layer.
pub fn propagate_with_noise(model: &DGPModel, x: &DenseMatrix, eps: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
    model.check_input(x)?;
    if eps.len() != model.depth() {
        return Err(Error::shape("propagate noise layers", model.depth(), eps.len()));
    }
    let g = Graph::new();
    let vars = model.bind_constants(&g)?;
    let mut h = g.constant(x.clone());
    let mut out = Vec::with_capacity(model.depth());
    for (layer, e) in vars.layers.iter().zip(eps) {
        h = layer.sample(h, g.constant(e.clone()))?;
        out.push((*h.value()).clone());
    }
    Ok(out)
}

/// Draws `f̂¹, …, f̂ᴸ` at the rows of `x`, with fresh noise for every layer.
pub fn propagate(model: &DGPModel, x: &DenseMatrix, rng: &mut RngStream) -> Result<Vec<DenseMatrix>> {
    let eps: Vec<DenseMatrix> = model
        .layers
        .iter()
        .map(|l| {
            DenseMatrix::from_vec(x.rows(), l.d_out(), rng.standard_normal(x.rows() * l.d_out()))
                .expect("noise shape")
        })
        .collect();
    propagate_with_noise(model, x, &eps)
}

/// Expected log-likelihood of one observation under a Gaussian marginal for
/// each output dimension. Gaussian likelihoods are integrated in closed form,
/// Bernoulli ones with `order`-point Gauss–Hermite quadrature.
pub fn expected_log_lik(
    likelihood: &Likelihood,
    mean: &[f64],
    variance: &[f64],
    y: &[f64],
    order: usize,
) -> Result<f64> {
    let quad = GaussHermite::new(order)?;
    if mean.len() != y.len() || variance.len() != y.len() {
        return Err(Error::shape("expected_log_lik", y.len(), mean.len()));
    }
    Ok(match likelihood {
        Likelihood::Gaussian { log_variance } => {
            let s2 = log_variance.exp();
            mean.iter()
                .zip(variance)
                .zip(y)
                .map(|((m, v), y)| log_normal_pdf(*y, *m, s2) - v / (2.0 * s2))
                .sum()
        }
        Likelihood::Bernoulli => mean
            .iter()
            .zip(variance)
            .zip(y)
            .map(|((m, v), y)| {
                let sign = if *y > 0.5 { 1.0 } else { -1.0 };
                quad.expect(*m, *v, |f| log_normal_cdf(sign * f))
            })
            .sum(),
    })
}

/// Final-layer marginals for `samples` propagated draws at each row of `x`.
/// Component `s` of row `i` lives at row `s·T + i` of the returned matrices.
pub fn predict_components(
    model: &DGPModel,
    x_star: &DenseMatrix,
    rng: &mut RngStream,
    samples: usize,
) -> Result<MarginalGaussians> {
    check_samples(samples)?;
    let eps = model.draw_inner_noise(x_star.rows(), samples, rng);
    predict_components_with_noise(model, x_star, &eps, samples)
}

/// [`predict_components`] with caller-supplied inner-layer noise, laid out as
/// by [`DGPModel::draw_inner_noise`].
pub fn predict_components_with_noise(
    model: &DGPModel,
    x_star: &DenseMatrix,
    eps: &[DenseMatrix],
    samples: usize,
) -> Result<MarginalGaussians> {
    model.check_input(x_star)?;
    check_samples(samples)?;
    let g = Graph::new();
    let vars = model.bind_constants(&g)?;
    let (mean, var) = vars.final_marginals(g.constant(replicate(x_star, samples)), eps)?;
    Ok(MarginalGaussians {
        mean: (*mean.value()).clone(),
        variance: (*var.value()).clone(),
    })
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::Config {
            field: "samples_pred".into(),
            message: "must be at least 1".into(),
        });
    }
    Ok(())
}

/// Log density of one observation under a single mixture component.
fn component_log_density(likelihood: &Likelihood, mean: &[f64], var: &[f64], y: &[f64]) -> f64 {
    match likelihood {
        Likelihood::Gaussian { log_variance } => {
            let s2 = log_variance.exp();
            mean.iter()
                .zip(var)
                .zip(y)
                .map(|((m, v), y)| log_normal_pdf(*y, *m, v + s2))
                .sum()
        }
        Likelihood::Bernoulli => mean
            .iter()
            .zip(var)
            .zip(y)
            .map(|((m, v), y)| {
                let sign = if *y > 0.5 { 1.0 } else { -1.0 };
                log_normal_cdf(sign * m / (1.0 + v).sqrt())
            })
            .sum(),
    }
}

/// Log predictive density of each `(x*, y*)` under the `samples`-component
/// Gaussian mixture, via log-mean-exp over components.
pub fn predict_density(
    model: &DGPModel,
    x_star: &DenseMatrix,
    y_star: &DenseMatrix,
    rng: &mut RngStream,
    samples: usize,
) -> Result<Vec<f64>> {
    check_targets(model, x_star, y_star)?;
    let comps = predict_components(model, x_star, rng, samples)?;
    Ok(mixture_log_density(model, &comps, y_star, samples))
}

/// [`predict_density`] with caller-supplied inner-layer noise.
pub fn predict_density_with_noise(
    model: &DGPModel,
    x_star: &DenseMatrix,
    y_star: &DenseMatrix,
    eps: &[DenseMatrix],
    samples: usize,
) -> Result<Vec<f64>> {
    check_targets(model, x_star, y_star)?;
    let comps = predict_components_with_noise(model, x_star, eps, samples)?;
    Ok(mixture_log_density(model, &comps, y_star, samples))
}

fn check_targets(model: &DGPModel, x_star: &DenseMatrix, y_star: &DenseMatrix) -> Result<()> {
    if y_star.shape() != (x_star.rows(), model.output_dim()) {
        return Err(Error::shape(
            "predict_density targets",
            format!("({}, {})", x_star.rows(), model.output_dim()),
            format!("{:?}", y_star.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn mixture_log_density(
    model: &DGPModel,
    comps: &MarginalGaussians,
    y_star: &DenseMatrix,
    samples: usize,
) -> Vec<f64> {
    let t = y_star.rows();
    (0..t)
        .map(|i| {
            let logs: Vec<f64> = (0..samples)
                .map(|s| {
                    let r = s * t + i;
                    component_log_density(
                        &model.likelihood,
                        comps.mean.row(r),
                        comps.variance.row(r),
                        y_star.row(i),
                    )
                })
                .collect();
            log_mean_exp(&logs)
        })
        .collect()
}

/// Mixture mean and variance of the predictive distribution at each row of
/// `x*`. For a Gaussian likelihood the observation noise is included in the
/// variance; for Bernoulli these are moments of the latent function.
pub fn predict_moments(
    model: &DGPModel,
    x_star: &DenseMatrix,
    rng: &mut RngStream,
    samples: usize,
) -> Result<MarginalGaussians> {
    let comps = predict_components(model, x_star, rng, samples)?;
    Ok(mixture_moments(model, &comps, x_star.rows(), samples))
}

pub(crate) fn mixture_moments(
    model: &DGPModel,
    comps: &MarginalGaussians,
    t: usize,
    samples: usize,
) -> MarginalGaussians {
    let d = comps.mean.cols();
    let noise = model.likelihood.noise_variance().unwrap_or(0.0);
    let mut mean = DenseMatrix::zeros(t, d);
    let mut second = DenseMatrix::zeros(t, d);
    for s in 0..samples {
        for i in 0..t {
            for j in 0..d {
                let m = comps.mean[(s * t + i, j)];
                mean[(i, j)] += m;
                second[(i, j)] += comps.variance[(s * t + i, j)] + m * m;
            }
        }
    }
    let inv = 1.0 / samples as f64;
    let mean = mean.scale(inv);
    let variance = DenseMatrix::from_fn(t, d, |i, j| {
        second[(i, j)] * inv - mean[(i, j)] * mean[(i, j)] + noise
    });
    MarginalGaussians { mean, variance }
}

/// Predicted probability of label 1 for a Bernoulli model, averaged over
/// mixture components.
pub fn predict_proba(
    model: &DGPModel,
    x_star: &DenseMatrix,
    rng: &mut RngStream,
    samples: usize,
) -> Result<Vec<f64>> {
    let comps = predict_components(model, x_star, rng, samples)?;
    Ok(mixture_proba(&comps, x_star.rows(), samples))
}

pub(crate) fn mixture_proba(comps: &MarginalGaussians, t: usize, samples: usize) -> Vec<f64> {
    (0..t)
        .map(|i| {
            (0..samples)
                .map(|s| {
                    let r = s * t + i;
                    normal_cdf(comps.mean[(r, 0)] / (1.0 + comps.variance[(r, 0)]).sqrt())
                })
                .sum::<f64>()
                / samples as f64
        })
        .collect()
}

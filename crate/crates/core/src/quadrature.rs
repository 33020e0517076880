//! Gauss–Hermite rules and numerically safe normal-CDF helpers.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 20;

/// Nodes and weights for `∫ e^{-t²} f(t) dt`, with the weights already
/// divided by `√π` so that `Σ w_k f(μ + √2 σ t_k)` approximates `E[f(X)]`
/// for `X ~ N(μ, σ²)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `order`-point rule by Newton iteration on the orthonormal
    /// Hermite recurrence.
    pub fn new(order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::QuadratureOrderInvalid(order));
        }
        let n = order;
        let pim4 = PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        let norm = PI.sqrt();
        weights.iter_mut().for_each(|w| *w /= norm);
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights normalized to sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(X)]` for `X ~ N(mean, variance)`.
    pub fn expect(&self, mean: f64, variance: f64, f: impl Fn(f64) -> f64) -> f64 {
        let sd = variance.max(0.0).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * f(mean + SQRT_2 * sd * t))
            .sum()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// `ln Φ(z)`, accurate in the far left tail.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        normal_cdf(z).ln()
    } else {
        // Asymptotic Mills-ratio series.
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln()
            + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)).ln()
    }
}

/// `ln N(y | mean, variance)`
pub fn log_normal_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * (2.0 * PI * variance).ln() - 0.5 * r * r / variance
}

/// `ln((1/n) Σ exp(xᵢ))` with max subtraction.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

//! JSON model checkpoints.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so a save/load cycle reproduces the model exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, MeanFunction};
use crate::linalg::DenseMatrix;
use crate::model::{DGPModel, Likelihood};
use crate::svgp::GPLayer;

pub const FORMAT: &str = "dgp-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_inducing: usize,
    pub z: DenseMatrix,
    /// Log-scale kernel parameters, plus the log inter-layer noise for
    /// inner layers.
    pub kernel: Kernel,
    pub mean_function: MeanFunction,
    /// `q_mu − m(Z)`, M×D_out.
    pub q_mu_offset: DenseMatrix,
    /// One packed lower-triangular factor per row (row-major, log diagonal).
    pub q_sqrt_packed: DenseMatrix,
    /// Relative diagonal added to `K_ZZ`.
    pub inducing_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub num_data: usize,
    pub likelihood: Likelihood,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &DGPModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| LayerRecord {
                input_dim: l.d_in(),
                output_dim: l.d_out(),
                num_inducing: l.num_inducing(),
                z: l.z().clone(),
                kernel: l.kernel().clone(),
                mean_function: l.mean_fn().clone(),
                q_mu_offset: l.q_mu_offset().clone(),
                q_sqrt_packed: l.q_sqrt_packed().clone(),
                inducing_jitter: l.inducing_jitter(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            num_data: model.num_data(),
            likelihood: model.likelihood().clone(),
            layers,
        }
    }

    pub fn into_model(self) -> Result<DGPModel> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                for (name, m) in [
                    ("z", &r.z),
                    ("q_mu_offset", &r.q_mu_offset),
                    ("q_sqrt_packed", &r.q_sqrt_packed),
                ] {
                    if m.data().len() != m.rows() * m.cols() {
                        return Err(Error::Checkpoint(format!("layer {i}: {name} has inconsistent size")));
                    }
                }
                if r.z.shape() != (r.num_inducing, r.input_dim) || r.mean_function.output_dim() != r.output_dim {
                    return Err(Error::Checkpoint(format!("layer {i}: recorded dimensions disagree")));
                }
                let mut layer = GPLayer::from_raw(r.z, r.kernel, r.mean_function, r.q_mu_offset, r.q_sqrt_packed)?;
                layer
                    .set_inducing_jitter(r.inducing_jitter)
                    .map_err(|e| Error::Checkpoint(format!("layer {i}: {e}")))?;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        DGPModel::new(layers, self.likelihood, self.num_data)
    }
}

pub fn to_json(model: &DGPModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Checkpoint::from_model(model))?)
}

pub fn from_json(text: &str) -> Result<DGPModel> {
    serde_json::from_str::<Checkpoint>(text)?.into_model()
}

pub fn save(model: &DGPModel, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DGPModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

//! Doubly stochastic variational inference for deep Gaussian processes.
//!
//! Each layer is a sparse variational GP with its own inducing inputs; layers
//! are composed by drawing per-point reparameterized samples, and the
//! evidence lower bound is estimated with Monte-Carlo samples and minibatches.
//! A single layer gives the ordinary sparse variational GP.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod svgp;
pub mod trainer;

pub use error::{Error, Result};

//! Unsupervised pixel-wise anomaly localization with VAE / β-VAE models.
//!
//! A model is trained on normal images only. Anomalous pixels are then scored
//! with reconstruction-error maps, input-gradient maps of the loss terms, an
//! energy-descent projection onto the learned normal manifold, or a logistic
//! stack of several of these. Scores are evaluated by pixel-pooled AUROC.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod fingerprint;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod predictors;
pub mod projection;
pub mod real;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{GaussianLatent, ImageBatch, LatentMode, ModelConfig, NormStats, Vae, VaeOutput};
pub use real::Real;

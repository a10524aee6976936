//! ELBO decomposition: Gaussian reconstruction NLL, closed-form KL to the
//! standard-normal prior, and the β-weighted total.
//!
//! Gaussian normalization constants are dropped from the reconstruction term,
//! so loss magnitudes are only comparable within this crate.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array1, Array2, Array4, ArrayView, ArrayView1, ArrayView4, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianLatent, VaeOutput};
use crate::real::Real;

/// Scalar loss whose input gradient can be requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    /// `L_r + L_KL` (unweighted).
    Elbo,
    Kl,
    Rec,
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTerm::Elbo => "elbo",
            LossTerm::Kl => "kl",
            LossTerm::Rec => "rec",
        })
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(LossTerm::Elbo),
            "kl" => Ok(LossTerm::Kl),
            "rec" => Ok(LossTerm::Rec),
            other => Err(Error::Config(format!("unknown loss term `{other}` (expected elbo, kl, rec)"))),
        }
    }
}

/// Squared-error map `(x − r)²` and `½·Σ` of it.
pub fn reconstruction_nll<T: Real, D: Dimension>(
    x: ArrayView<'_, T, D>,
    recon: ArrayView<'_, T, D>,
) -> Result<(T, Array<T, D>)> {
    if x.shape() != recon.shape() {
        return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", recon.shape())));
    }
    let mut map = &x - &recon;
    map.mapv_inplace(|d| d * d);
    let total = map.sum() * T::from_f64_lossy(0.5);
    Ok((total, map))
}

/// Closed-form `D_KL(N(mu, σ²) ‖ N(0, I))` for one sample.
///
/// Per dimension: `½(mu² + σ² − 2·log σ − 1)`.
pub fn kl_divergence<T: Real>(mu: ArrayView1<'_, T>, log_sigma: ArrayView1<'_, T>) -> Result<(T, Array1<T>)> {
    if mu.len() != log_sigma.len() {
        return Err(Error::shape(mu.len(), log_sigma.len()));
    }
    if mu.iter().chain(log_sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent parameters in KL divergence".into()));
    }
    let half = T::from_f64_lossy(0.5);
    let two = T::from_f64_lossy(2.0);
    let per_dim: Array1<T> = mu
        .iter()
        .zip(log_sigma.iter())
        .map(|(&m, &s)| half * (m * m + (two * s).exp() - two * s - T::one()))
        .collect();
    // Each term is ≥ 0 mathematically; rounding can leave −ε.
    let per_dim = per_dim.mapv(|v| v.max(T::zero()));
    Ok((per_dim.sum(), per_dim))
}

/// KL for every row of a latent batch.
pub fn kl_per_sample<T: Real>(latent: &GaussianLatent<T>) -> Result<Array1<T>> {
    (0..latent.batch_len())
        .map(|i| {
            let (mu, ls) = latent.row(i);
            kl_divergence(mu, ls).map(|(k, _)| k)
        })
        .collect()
}

/// `(∂KL/∂mu, ∂KL/∂log_sigma) = (mu, σ² − 1)`.
pub(crate) fn kl_gradient<T: Real>(latent: &GaussianLatent<T>) -> (Array2<T>, Array2<T>) {
    let two = T::from_f64_lossy(2.0);
    (latent.mu.clone(), latent.log_sigma.mapv(|s| (two * s).exp() - T::one()))
}

/// Loss terms for a batch, averaged over samples.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub rec_nll: f64,
    pub kl: f64,
    pub total: f64,
    /// Per-pixel squared error, shape of the input; never batch-averaged.
    pub rec_pixel_map: Array4<T>,
    pub beta: f64,
}

fn breakdown_parts<T: Real>(x: ArrayView4<'_, T>, output: &VaeOutput<T>) -> Result<(f64, f64, Array4<T>)> {
    let (_, map) = reconstruction_nll(x, output.reconstruction.view())?;
    let b = map.dim().0;
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let rec: f64 = map
        .axis_iter(Axis(0))
        .map(|m| 0.5 * m.iter().map(|v| v.as_f64()).sum::<f64>())
        .sum::<f64>()
        / b as f64;
    let kl = kl_per_sample(&output.latent)?.iter().map(|v| v.as_f64()).sum::<f64>() / b as f64;
    Ok((rec, kl, map))
}

/// `rec_nll + beta·kl`.
pub fn beta_elbo_loss<T: Real>(x: ArrayView4<'_, T>, output: &VaeOutput<T>, beta: f64) -> Result<LossBreakdown<T>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive and finite, got {beta}")));
    }
    let (rec_nll, kl, rec_pixel_map) = breakdown_parts(x, output)?;
    Ok(LossBreakdown {
        rec_nll,
        kl,
        total: rec_nll + beta * kl,
        rec_pixel_map,
        beta,
    })
}

/// Plain VAE loss `L = L_r + L_KL`.
pub fn vae_loss<T: Real>(x: ArrayView4<'_, T>, output: &VaeOutput<T>) -> Result<f64> {
    let (rec, kl, _) = breakdown_parts(x, output)?;
    Ok(rec + kl)
}

//! Pixel-wise anomaly maps from a trained model.
//!
//! | kind        | score per pixel                          |
//! |-------------|------------------------------------------|
//! | `rec_error` | `(x − decode(encode(x).mu))²`            |
//! | `elbo_grad` | `|∂(L_r + L_KL)/∂x|`                     |
//! | `kl_grad`   | `|∂L_KL/∂x|`                             |
//! | `rec_grad`  | `|∂L_r/∂x|` (signed with `abs_rec_grad = false`) |
//! | `combi`     | `kl_grad ⊙ rec_error`                    |
//!
//! All predictors use `z = mu` unless `sample_gradients` is set.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint_bytes;
use crate::losses::LossTerm;
use crate::model::{LatentMode, Vae};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    RecError,
    ElboGrad,
    KlGrad,
    RecGrad,
    Combi,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 5] = [
        PredictorKind::RecError,
        PredictorKind::ElboGrad,
        PredictorKind::KlGrad,
        PredictorKind::RecGrad,
        PredictorKind::Combi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::RecError => "rec_error",
            PredictorKind::ElboGrad => "elbo_grad",
            PredictorKind::KlGrad => "kl_grad",
            PredictorKind::RecGrad => "rec_grad",
            PredictorKind::Combi => "combi",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = PredictorKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown predictor `{s}` (valid: {})", valid.join(", ")))
            })
    }
}

/// What produced a map: a single predictor, the projection, or the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Predictor(PredictorKind),
    ProjRecError,
    Ensemble,
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapKind::Predictor(k) => k.fmt(f),
            MapKind::ProjRecError => f.write_str("proj_rec_error"),
            MapKind::Ensemble => f.write_str("ensemble"),
        }
    }
}

/// Per-pixel scores for one image; higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub scores: Array2<f64>,
    pub kind: MapKind,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Take `|·|` of the rec gradient; a signed map cannot be thresholded one-sidedly.
    pub abs_rec_grad: bool,
    /// Use one reparameterized draw instead of `z = mu` for gradient maps.
    pub sample_gradients: bool,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            abs_rec_grad: true,
            sample_gradients: false,
            seed: 0,
        }
    }
}

/// Anything that maps images `(B, 1, H, W)` to reconstructions of equal shape.
pub trait Reconstruct<T> {
    fn reconstruct(&self, x: ArrayView4<'_, T>) -> Result<Array4<T>>;
}

impl<T: Real> Reconstruct<T> for Vae<T> {
    fn reconstruct(&self, x: ArrayView4<'_, T>) -> Result<Array4<T>> {
        Ok(self.forward(x, LatentMode::Mean)?.reconstruction)
    }
}

/// Squared reconstruction error per pixel, shape `(B, H, W)`.
pub fn rec_error_arrays<T: Real>(model: &impl Reconstruct<T>, x: ArrayView4<'_, T>) -> Result<Array3<f64>> {
    let recon = model.reconstruct(x)?;
    if recon.dim() != x.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", recon.dim())));
    }
    let mut diff = (&x - &recon).mapv(|v| v.as_f64());
    diff.mapv_inplace(|d| d * d);
    Ok(diff.index_axis_move(Axis(1), 0))
}

pub fn model_fingerprint<T: Real>(model: &Vae<T>) -> String {
    let mut bytes = Vec::with_capacity(8 * model.parameter_count());
    for (_, _, values) in model.named_parameters() {
        for v in values {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    fingerprint_bytes(&bytes)
}

/// Computes anomaly maps for a frozen model. Holds the model fingerprint so
/// it is computed once.
pub struct Scorer<'a, T> {
    model: &'a Vae<T>,
    fingerprint: String,
    cfg: PredictorConfig,
}

impl<'a, T: Real> Scorer<'a, T> {
    pub fn new(model: &'a Vae<T>, cfg: PredictorConfig) -> Self {
        Self {
            model,
            fingerprint: model_fingerprint(model),
            cfg,
        }
    }

    pub fn model(&self) -> &Vae<T> {
        self.model
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    fn wrap(&self, arrays: Array3<f64>, kind: MapKind) -> Vec<AnomalyMap> {
        arrays
            .axis_iter(Axis(0))
            .map(|s| AnomalyMap {
                scores: s.to_owned(),
                kind,
                model_fingerprint: self.fingerprint.clone(),
            })
            .collect()
    }

    /// Raw input gradient `(B, H, W)` in `f64`.
    fn gradient(&self, term: LossTerm, x: ArrayView4<'_, T>) -> Result<Array3<f64>> {
        let grad = if self.cfg.sample_gradients {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            self.model.input_gradient(term, x, LatentMode::Sample(&mut rng))?
        } else {
            self.model.input_gradient(term, x, LatentMode::Mean)?
        };
        Ok(grad.mapv(|v| v.as_f64()).index_axis_move(Axis(1), 0))
    }

    fn grad_arrays(&self, term: LossTerm, x: ArrayView4<'_, T>) -> Result<Array3<f64>> {
        let g = self.gradient(term, x)?;
        Ok(match term {
            LossTerm::Rec if !self.cfg.abs_rec_grad => g,
            _ => g.mapv(f64::abs),
        })
    }

    pub fn rec_error_map(&self, x: ArrayView4<'_, T>) -> Result<Vec<AnomalyMap>> {
        Ok(self.wrap(
            rec_error_arrays(self.model, x)?,
            MapKind::Predictor(PredictorKind::RecError),
        ))
    }

    pub fn grad_map(&self, x: ArrayView4<'_, T>, which: LossTerm) -> Result<Vec<AnomalyMap>> {
        let kind = match which {
            LossTerm::Elbo => PredictorKind::ElboGrad,
            LossTerm::Kl => PredictorKind::KlGrad,
            LossTerm::Rec => PredictorKind::RecGrad,
        };
        Ok(self.wrap(self.grad_arrays(which, x)?, MapKind::Predictor(kind)))
    }

    pub fn combi_map(&self, x: ArrayView4<'_, T>) -> Result<Vec<AnomalyMap>> {
        let kl = self.grad_arrays(LossTerm::Kl, x)?;
        let rec = rec_error_arrays(self.model, x)?;
        Ok(self.wrap(kl * rec, MapKind::Predictor(PredictorKind::Combi)))
    }

    /// One map per image in `x`.
    pub fn score(&self, x: ArrayView4<'_, T>, kind: PredictorKind) -> Result<Vec<AnomalyMap>> {
        match kind {
            PredictorKind::RecError => self.rec_error_map(x),
            PredictorKind::ElboGrad => self.grad_map(x, LossTerm::Elbo),
            PredictorKind::KlGrad => self.grad_map(x, LossTerm::Kl),
            PredictorKind::RecGrad => self.grad_map(x, LossTerm::Rec),
            PredictorKind::Combi => self.combi_map(x),
        }
    }

    /// Several predictors at once, sharing the rec-error and KL-gradient
    /// arrays between `combi` and its factors. Result is indexed `[kind][image]`.
    pub fn score_many(&self, x: ArrayView4<'_, T>, kinds: &[PredictorKind]) -> Result<Vec<Vec<AnomalyMap>>> {
        let needs = |k: PredictorKind| kinds.contains(&k);
        let rec = if needs(PredictorKind::RecError) || needs(PredictorKind::Combi) {
            Some(rec_error_arrays(self.model, x)?)
        } else {
            None
        };
        let kl = if needs(PredictorKind::KlGrad) || needs(PredictorKind::Combi) {
            Some(self.grad_arrays(LossTerm::Kl, x)?)
        } else {
            None
        };
        kinds
            .iter()
            .map(|&kind| {
                let arrays = match kind {
                    PredictorKind::RecError => rec.clone().expect("computed above"),
                    PredictorKind::KlGrad => kl.clone().expect("computed above"),
                    PredictorKind::Combi => kl.as_ref().expect("computed above") * rec.as_ref().expect("computed above"),
                    PredictorKind::ElboGrad => self.grad_arrays(LossTerm::Elbo, x)?,
                    PredictorKind::RecGrad => self.grad_arrays(LossTerm::Rec, x)?,
                };
                Ok(self.wrap(arrays, MapKind::Predictor(kind)))
            })
            .collect()
    }
}

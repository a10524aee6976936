//! Flat run configuration shared by all subcommands.
//!
//! Values come from the built-in defaults, then an optional TOML file
//! (`--config`), then command-line flags. The merged result is written next
//! to every output as `resolved_config.toml`.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vaeloc::data::{AnomalyShape, Polarity, Texture};
use vaeloc::predictors::PredictorKind;
use vaeloc::projection::ProjectionMap;

use crate::UsageError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Base seed; stages derive their own seeds from it.
    pub seed: u64,
    pub workers: usize,

    pub image_size: usize,
    pub latent_dim: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub checkpoint_every: usize,
    pub noise_std: f64,
    pub rotation_degrees_max: f64,
    pub intensity_jitter: f64,

    pub n_images: usize,
    pub texture: Texture,
    pub anomalies: bool,
    pub anomaly_shape: AnomalyShape,
    pub anomaly_radius: [f64; 2],
    /// In units of the generated dataset's standard deviation.
    pub anomaly_shift: [f64; 2],
    pub anomaly_count: [usize; 2],
    pub anomaly_polarity: Polarity,

    pub predictors: Vec<String>,
    pub abs_rec_grad: bool,
    pub sample_gradients: bool,
    pub eval_batch_size: usize,

    pub alpha: f64,
    pub lambda: Vec<f64>,
    pub iters: usize,
    pub early_stop_patience: usize,
    pub projection_map: ProjectionMap,

    pub labeled_fraction: f64,
    pub l2: f64,
    pub standardize: bool,
    pub fit_max_iters: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            image_size: 64,
            latent_dim: 64,
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-4,
            beta: 1.0,
            checkpoint_every: 50,
            noise_std: 0.0,
            rotation_degrees_max: 0.0,
            intensity_jitter: 0.0,
            n_images: 2000,
            texture: Texture::GaussianBlobs,
            anomalies: false,
            anomaly_shape: AnomalyShape::Disk,
            anomaly_radius: [3.0, 8.0],
            anomaly_shift: [2.0, 3.0],
            anomaly_count: [1, 1],
            anomaly_polarity: Polarity::Bright,
            predictors: PredictorKind::ALL.iter().map(|k| k.to_string()).collect(),
            abs_rec_grad: true,
            sample_gradients: false,
            eval_batch_size: 32,
            alpha: 0.03,
            lambda: vec![0.1, 1.0, 10.0],
            iters: 100,
            early_stop_patience: 20,
            projection_map: ProjectionMap::Displacement,
            labeled_fraction: 0.1,
            l2: 1e-4,
            standardize: false,
            fit_max_iters: 10_000,
        }
    }
}

/// What `--predictors` may name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Predictor(PredictorKind),
    ProjRecError,
}

pub const PROJ_REC_ERROR: &str = "proj_rec_error";

impl Settings {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {}", path.display(), e.message())).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }

    pub fn write_resolved(&self, dir: &Path, command: &str) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = format!("# vaeloc {command}\n{}", self.to_toml());
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Parses `predictors`; `allow_projection` admits `proj_rec_error`.
    pub fn selections(&self, allow_projection: bool) -> anyhow::Result<Vec<Selection>> {
        let mut valid: Vec<String> = PredictorKind::ALL.iter().map(|k| k.to_string()).collect();
        if allow_projection {
            valid.push(PROJ_REC_ERROR.to_string());
        }
        if self.predictors.is_empty() {
            return Err(UsageError(format!("no predictors given (valid: {})", valid.join(", "))).into());
        }
        let mut out = Vec::new();
        for name in &self.predictors {
            let sel = match name.parse::<PredictorKind>() {
                Ok(k) => Selection::Predictor(k),
                Err(_) if allow_projection && name == PROJ_REC_ERROR => Selection::ProjRecError,
                Err(_) => {
                    return Err(UsageError(format!("unknown predictor `{name}` (valid: {})", valid.join(", "))).into())
                }
            };
            if !out.contains(&sel) {
                out.push(sel);
            }
        }
        Ok(out)
    }

    pub fn predictor_kinds(&self, allow_projection: bool) -> anyhow::Result<Vec<PredictorKind>> {
        Ok(self
            .selections(allow_projection)?
            .into_iter()
            .filter_map(|s| match s {
                Selection::Predictor(k) => Some(k),
                Selection::ProjRecError => None,
            })
            .collect())
    }
}

//! β-VAE training on normal images, loss-history logging and checkpoints.

mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::losses::{kl_gradient, kl_per_sample};
use crate::model::{ImageBatch, LatentMode, ModelConfig, Seeds, Vae};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "loss_history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Weight of the KL term; 1 is the plain VAE.
    pub beta: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            adam: AdamConfig::default(),
            batch_size: 64,
            beta: 1.0,
            seed: 0,
            checkpoint_every: 50,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        self.augment.validate()
    }
}

/// Per-epoch means over training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub rec_nll: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Vae<T>,
    pub history: Vec<EpochLoss>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
    pub train_fingerprint: String,
}

pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,rec_nll,kl,total,beta\n");
    for h in history {
        out.push_str(&format!("{},{},{},{},{}\n", h.epoch, h.rec_nll, h.kl, h.total, h.beta));
    }
    out
}

fn write_history(dir: &Path, history: &[EpochLoss]) -> Result<()> {
    let path = dir.join(HISTORY_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(history_csv(history).as_bytes())
        .map_err(|e| Error::io(&path, e))
}

fn train_fingerprint(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &ImageBatch<impl Real>) -> String {
    fingerprint(&(model_cfg, cfg, dataset.len(), dataset.stats))
}

/// Trains a fresh model on normal images only.
///
/// With `out_dir`, the loss history CSV is rewritten after every epoch and
/// `model.ckpt` every `checkpoint_every` epochs and at the end. A non-finite
/// loss aborts training; the last checkpoint on disk is left untouched.
pub fn train<T: Real>(
    model_cfg: &ModelConfig,
    dataset: &ImageBatch<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dataset.image_size() != model_cfg.image_size {
        return Err(Error::shape(
            format!("images of size {}", model_cfg.image_size),
            format!("size {}", dataset.image_size()),
        ));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let fp = train_fingerprint(model_cfg, cfg, dataset);
    let train_config = serde_json::to_value(cfg)?;
    let mut model = Vae::<T>::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::<T>::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.augment.seed);
    let beta = T::from_f64_lossy(cfg.beta);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let save = |model: &Vae<T>| -> Result<()> {
        if let Some(path) = &ckpt_path {
            Checkpoint {
                model: model.clone(),
                normalization_stats: dataset.stats,
                train_fingerprint: fp.clone(),
                train_config: train_config.clone(),
            }
            .save(path)?;
        }
        Ok(())
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut rec_sum, mut kl_sum) = (0.0f64, 0.0f64);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut xb: Array4<T> = dataset.data.select(Axis(0), chunk);
            if !cfg.augment.is_identity() {
                for mut img in xb.axis_iter_mut(Axis(0)) {
                    let plane = img.index_axis(Axis(0), 0).mapv(|v| v.as_f64() as f32);
                    let out = augment(plane.view(), &cfg.augment, &mut aug_rng)?;
                    img.index_axis_mut(Axis(0), 0)
                        .assign(&out.mapv(|v| T::from_f64_lossy(v as f64)));
                }
            }
            let bsz = T::from_usize(chunk.len()).expect("batch size fits");
            let trace = model.forward_traced(xb.view(), LatentMode::Sample(&mut rng))?;
            let out = &trace.output;
            let d_recon = &out.reconstruction - &xb;
            let rec_batch: f64 = 0.5 * d_recon.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            let kl_batch: f64 = kl_per_sample(&out.latent)
                .map(|k| k.iter().map(|v| v.as_f64()).sum())
                .unwrap_or(f64::NAN);
            if !(rec_batch.is_finite() && kl_batch.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {step}; last good checkpoint: {}",
                    ckpt_path
                        .as_ref()
                        .filter(|p| p.exists())
                        .map_or("none".to_string(), |p| p.display().to_string())
                )));
            }
            rec_sum += rec_batch;
            kl_sum += kl_batch;

            let (d_mu, d_log_sigma) = kl_gradient(&out.latent);
            let seeds = Seeds {
                d_recon: Some(d_recon / bsz),
                d_mu: Some(d_mu * (beta / bsz)),
                d_log_sigma: Some(d_log_sigma * (beta / bsz)),
            };
            let (grads, _) = model.backward(&trace, seeds, true, false);
            let grads = grads.expect("requested parameter gradients");
            if !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameter gradient at epoch {epoch}, batch {step}"
                )));
            }
            adam.step(model.parameter_slices_mut(), &grads.slices());
        }
        let rec_nll = rec_sum / n as f64;
        let kl = kl_sum / n as f64;
        let entry = EpochLoss {
            epoch,
            rec_nll,
            kl,
            total: rec_nll + cfg.beta * kl,
            beta: cfg.beta,
        };
        log::info!(
            "epoch {epoch}/{}: rec {:.4} kl {:.4} total {:.4}",
            cfg.epochs,
            entry.rec_nll,
            entry.kl,
            entry.total
        );
        history.push(entry);
        if let Some(dir) = out_dir {
            write_history(dir, &history)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                save(&model)?;
            }
        }
    }
    save(&model)?;

    Ok(TrainOutcome {
        model,
        history,
        checkpoint: ckpt_path,
        train_fingerprint: fp,
    })
}

//! Convolutional VAE: configuration, latent types, forward pass and
//! reverse-mode gradients with respect to parameters and input pixels.

mod layers;
mod vae;

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use vae::{Vae, VaeGrads};
pub(crate) use vae::Seeds;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// Channel width of each stride-2 encoder stage; the decoder mirrors them.
    pub encoder_channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Bounds applied to the encoder's `log_sigma` output.
    pub sigma_log_clamp: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_dim: 64,
            encoder_channels: vec![16, 32, 64, 256],
            leaky_slope: 0.01,
            sigma_log_clamp: [-6.0, 4.0],
        }
    }
}

impl ModelConfig {
    pub fn with_latent_dim(mut self, latent_dim: usize) -> Self {
        self.latent_dim = latent_dim;
        self
    }

    /// Spatial size left after the strided stages.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.encoder_channels.len();
        if stages == 0 {
            return Err(Error::Config("encoder_channels must not be empty".into()));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("encoder channel widths must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        let factor = 1usize << stages;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{stages} = {factor}",
                self.image_size
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope {} must lie in (0, 1)",
                self.leaky_slope
            )));
        }
        let [lo, hi] = self.sigma_log_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "sigma_log_clamp [{lo}, {hi}] must be finite and increasing"
            )));
        }
        Ok(())
    }
}

/// Dataset-level normalization statistics (population mean and std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };
}

/// Normalized grayscale images, shape `(batch, 1, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub data: Array4<T>,
    pub stats: NormStats,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(data: Array4<T>, stats: NormStats) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 1 || h != w {
            return Err(Error::shape("(B, 1, S, S)", format!("{:?}", data.dim())));
        }
        if !(stats.std > 0.0) {
            return Err(Error::Config(format!(
                "normalization std must be positive, got {}",
                stats.std
            )));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView4<'_, T> {
        self.data.view()
    }

    pub fn image(&self, i: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), i).index_axis_move(Axis(0), 0)
    }

    /// Single-image batch `(1, 1, H, W)` for image `i`.
    pub fn single(&self, i: usize) -> ArrayView4<'_, T> {
        self.data.slice(ndarray::s![i..i + 1, .., .., ..])
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            stats: self.stats,
        }
    }
}

/// Diagonal-Gaussian posterior parameters, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent<T> {
    pub mu: Array2<T>,
    /// Already clamped to the model's `sigma_log_clamp`.
    pub log_sigma: Array2<T>,
}

impl<T: Real> GaussianLatent<T> {
    pub fn new(mu: Array2<T>, log_sigma: Array2<T>) -> Result<Self> {
        if mu.dim() != log_sigma.dim() {
            return Err(Error::shape(
                format!("{:?}", mu.dim()),
                format!("{:?}", log_sigma.dim()),
            ));
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn batch_len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn row(&self, i: usize) -> (ArrayView1<'_, T>, ArrayView1<'_, T>) {
        (self.mu.row(i), self.log_sigma.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(self.log_sigma.iter()).all(|v| v.is_finite())
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct VaeOutput<T> {
    pub latent: GaussianLatent<T>,
    pub z: Array2<T>,
    /// Decoder mean, same shape as the input batch.
    pub reconstruction: Array4<T>,
}

/// How the latent code fed to the decoder is chosen.
pub enum LatentMode<'a> {
    /// `z = mu`.
    Mean,
    /// One reparameterized draw per sample.
    Sample(&'a mut dyn RngCore),
}

/// `z = mu + exp(log_sigma) ⊙ noise`.
pub fn reparameterize<T: Real>(latent: &GaussianLatent<T>, noise: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if noise.dim() != latent.mu.dim() {
        return Err(Error::shape(
            format!("noise {:?}", latent.mu.dim()),
            format!("{:?}", noise.dim()),
        ));
    }
    let mut z = latent.log_sigma.mapv(|s| s.exp());
    z *= &noise;
    z += &latent.mu;
    Ok(z)
}

/// Standard-normal noise of the given shape, drawn row-major.
pub fn standard_normal<T: Real>(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(v)
    })
}

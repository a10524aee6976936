use std::f64::consts::PI;

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Sum of isotropic Gaussian bumps (4 factors per blob).
    GaussianBlobs,
    /// One oriented grating: frequency, orientation, phase, amplitude.
    Sinusoidal,
    /// Random weights on the 8 lowest non-constant cosine modes.
    SmoothNoise,
}

/// Ranges are given for a 64-pixel image and scale with `image_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureParams {
    pub blob_count: usize,
    pub blob_sigma: [f64; 2],
    pub amplitude: [f64; 2],
    /// Grating frequency in cycles per image.
    pub frequency: [f64; 2],
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            blob_count: 2,
            blob_sigma: [5.0, 10.0],
            amplitude: [0.5, 1.5],
            frequency: [1.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub texture: Texture,
    pub texture_params: TextureParams,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 2000,
            image_size: 64,
            texture: Texture::GaussianBlobs,
            texture_params: TextureParams::default(),
            seed: 0,
        }
    }
}

const SMOOTH_MODES: [(usize, usize); 8] = [(0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (1, 2), (2, 1), (2, 2)];

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn render(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let s = cfg.image_size;
    let sf = s as f64;
    let scale = sf / 64.0;
    let p = &cfg.texture_params;
    match cfg.texture {
        Texture::GaussianBlobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..p.blob_count)
                .map(|_| {
                    let cy = rng.random_range(0.2 * sf..0.8 * sf);
                    let cx = rng.random_range(0.2 * sf..0.8 * sf);
                    let sigma = uniform(rng, p.blob_sigma) * scale;
                    let amp = uniform(rng, p.amplitude);
                    (cy, cx, sigma, amp)
                })
                .collect();
            Array2::from_shape_fn((s, s), |(y, x)| {
                blobs
                    .iter()
                    .map(|&(cy, cx, sigma, amp)| {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        amp * (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .sum::<f64>() as f32
            })
        }
        Texture::Sinusoidal => {
            let freq = uniform(rng, p.frequency);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = uniform(rng, p.amplitude);
            let (c, sn) = (theta.cos(), theta.sin());
            Array2::from_shape_fn((s, s), |(y, x)| {
                let u = (x as f64 * c + y as f64 * sn) / sf;
                (amp * (2.0 * PI * freq * u + phase).sin()) as f32
            })
        }
        Texture::SmoothNoise => {
            let weights: Vec<f64> = SMOOTH_MODES
                .iter()
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Array2::from_shape_fn((s, s), |(y, x)| {
                SMOOTH_MODES
                    .iter()
                    .zip(&weights)
                    .map(|(&(ky, kx), w)| {
                        w * (PI * ky as f64 * (y as f64 + 0.5) / sf).cos()
                            * (PI * kx as f64 * (x as f64 + 0.5) / sf).cos()
                    })
                    .sum::<f64>() as f32
            })
        }
    }
}

/// Raw (unnormalized) normal images, shape `(n, 1, S, S)`.
pub fn generate_synthetic_normal(cfg: &SyntheticConfig) -> Result<Array4<f32>> {
    if cfg.n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    if cfg.image_size < 2 {
        return Err(Error::Config("image_size must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let mut out = Array4::<f32>::zeros((cfg.n_images, 1, s, s));
    for mut img in out.axis_iter_mut(Axis(0)) {
        img.index_axis_mut(Axis(0), 0).assign(&render(cfg, &mut rng));
    }
    Ok(out)
}

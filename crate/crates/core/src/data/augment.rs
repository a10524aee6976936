use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training-time augmentation. "Color" augmentation on grayscale is an
/// intensity jitter: gain in `[1 − j, 1 + j]`, bias in `[−j, j]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub rotation_degrees_max: f64,
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("rotation_degrees_max", self.rotation_degrees_max),
            ("intensity_jitter", self.intensity_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.rotation_degrees_max == 0.0 && self.intensity_jitter == 0.0
    }
}

/// Rotates about the image center with bilinear sampling; samples outside the
/// image clamp to the nearest edge pixel.
pub fn rotate_bilinear(image: ArrayView2<'_, f32>, degrees: f64) -> Array2<f32> {
    let (h, w) = image.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        image[[y, x]] as f64
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // Inverse rotation maps the output pixel back into the source.
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Rotation, then intensity jitter, then additive Gaussian noise.
pub fn augment(image: ArrayView2<'_, f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Array2<f32>> {
    cfg.validate()?;
    let mut out = if cfg.rotation_degrees_max > 0.0 {
        let angle = rng.random_range(-cfg.rotation_degrees_max..=cfg.rotation_degrees_max);
        rotate_bilinear(image, angle)
    } else {
        image.to_owned()
    };
    if cfg.intensity_jitter > 0.0 {
        let j = cfg.intensity_jitter;
        let gain = rng.random_range(1.0 - j..=1.0 + j) as f32;
        let bias = rng.random_range(-j..=j) as f32;
        out.mapv_inplace(|v| v * gain + bias);
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
        out.mapv_inplace(|v| v + noise.sample(rng) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Array2::from_shape_simple_fn((16, 16), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_config_is_identity() {
        let x = img();
        let y = augment(x.view(), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x = img();
        let y = rotate_bilinear(x.view(), 0.0);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let x = img();
        let y = rotate_bilinear(x.view(), 90.0);
        let mut a: Vec<f32> = x.iter().copied().collect();
        let mut b: Vec<f32> = y.iter().copied().collect();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn seeded() {
        let cfg = AugmentConfig {
            noise_std: 0.1,
            rotation_degrees_max: 15.0,
            intensity_jitter: 0.1,
            seed: 0,
        };
        let x = img();
        let a = augment(x.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(x.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn negative_parameters_rejected() {
        let cfg = AugmentConfig {
            noise_std: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

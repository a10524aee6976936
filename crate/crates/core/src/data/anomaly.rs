use std::f64::consts::PI;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyShape {
    Disk,
    Square,
    /// Disk with a smooth random radial modulation.
    IrregularBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Bright,
    Dark,
    Random,
}

/// Shifts are absolute intensity offsets in the units of the image they are
/// applied to (normalized images: dataset stds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalySpec {
    pub shape: AnomalyShape,
    pub radius_range: [f64; 2],
    pub intensity_shift_range: [f64; 2],
    pub polarity: Polarity,
    /// Inclusive range of anomalies per image.
    pub per_image_count: [usize; 2],
    pub seed: u64,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            shape: AnomalyShape::Disk,
            radius_range: [3.0, 8.0],
            intensity_shift_range: [2.0, 3.0],
            polarity: Polarity::Bright,
            per_image_count: [1, 1],
            seed: 0,
        }
    }
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.radius_range;
        if !(r0 >= 1.0 && r1 >= r0) {
            return Err(Error::Config(format!("radius_range [{r0}, {r1}] must satisfy 1 <= min <= max")));
        }
        let [s0, s1] = self.intensity_shift_range;
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::Config(format!(
                "intensity_shift_range [{s0}, {s1}] must satisfy 0 < min <= max"
            )));
        }
        if self.per_image_count[0] > self.per_image_count[1] {
            return Err(Error::Config("per_image_count min exceeds max".into()));
        }
        Ok(())
    }
}

/// Lattice points within Euclidean distance `radius` of `(cy, cx)`.
pub fn disk_mask(size: usize, cy: f64, cx: f64, radius: f64) -> Array2<bool> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= radius * radius
    })
}

fn shape_mask(size: usize, shape: AnomalyShape, cy: f64, cx: f64, r: f64, rng: &mut impl Rng) -> Array2<bool> {
    match shape {
        AnomalyShape::Disk => disk_mask(size, cy, cx, r),
        AnomalyShape::Square => Array2::from_shape_fn((size, size), |(y, x)| {
            (y as f64 - cy).abs() <= r && (x as f64 - cx).abs() <= r
        }),
        AnomalyShape::IrregularBlob => {
            let lobes = rng.random_range(2..=5) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let depth = rng.random_range(0.15..0.35);
            let mut m = Array2::from_shape_fn((size, size), |(y, x)| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let rho = (dy * dy + dx * dx).sqrt();
                rho <= r * (1.0 + depth * (lobes * dx.atan2(dy) + phase).sin())
            });
            let (iy, ix) = (cy.round() as usize, cx.round() as usize);
            m[[iy.min(size - 1), ix.min(size - 1)]] = true;
            m
        }
    }
}

/// Adds `per_image_count` anomalies to one image. Returns the modified image
/// and a 0/1 mask; each masked pixel is shifted by exactly one anomaly's offset.
pub fn inject_anomaly(
    image: ArrayView2<'_, f32>,
    spec: &AnomalySpec,
    rng: &mut impl Rng,
) -> Result<(Array2<f32>, Array2<u8>)> {
    spec.validate()?;
    let (h, w) = image.dim();
    if h != w {
        return Err(Error::shape("square image", format!("{h}x{w}")));
    }
    let size = h;
    let mut out = image.to_owned();
    let mut mask = Array2::<u8>::zeros((h, w));
    let count = rng.random_range(spec.per_image_count[0]..=spec.per_image_count[1]);
    for _ in 0..count {
        let [r0, r1] = spec.radius_range;
        let r = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
        let margin = r.min((size as f64 - 1.0) / 2.0);
        let lo = margin;
        let hi = size as f64 - 1.0 - margin;
        let cy = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let cx = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let [s0, s1] = spec.intensity_shift_range;
        let magnitude = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 };
        let sign = match spec.polarity {
            Polarity::Bright => 1.0,
            Polarity::Dark => -1.0,
            Polarity::Random => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        let shift = (sign * magnitude) as f32;
        let region = shape_mask(size, spec.shape, cy.round(), cx.round(), r, rng);
        for ((o, m), &inside) in out.iter_mut().zip(mask.iter_mut()).zip(region.iter()) {
            if inside && *m == 0 {
                *o += shift;
                *m = 1;
            }
        }
    }
    Ok((out, mask))
}

/// Injects anomalies into every image of `(B, 1, S, S)` with one generator
/// seeded from `spec.seed`; masks have the same shape.
pub fn inject_dataset(images: ArrayView4<'_, f32>, spec: &AnomalySpec) -> Result<(Array4<f32>, Array4<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = images.to_owned();
    let mut masks = Array4::<u8>::zeros(images.dim());
    for (mut img, mut m) in out.axis_iter_mut(Axis(0)).zip(masks.axis_iter_mut(Axis(0))) {
        let (new, mask) = inject_anomaly(img.index_axis(Axis(0), 0), spec, &mut rng)?;
        img.index_axis_mut(Axis(0), 0).assign(&new);
        m.index_axis_mut(Axis(0), 0).assign(&mask);
    }
    Ok((out, masks))
}

use ndarray::{Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::model::{ImageBatch, NormStats};

/// Population mean and std over every pixel of every image.
pub fn fit_stats(images: ArrayView4<'_, f32>) -> Result<NormStats> {
    let n = images.len();
    if n == 0 {
        return Err(Error::Data("cannot normalize an empty dataset".into()));
    }
    let mean = images.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Data(format!("dataset has zero or non-finite variance (std = {std})")));
    }
    Ok(NormStats { mean, std })
}

/// Normalizes with previously fitted statistics (e.g. training stats on test data).
pub fn apply_stats(images: ArrayView4<'_, f32>, stats: NormStats) -> Result<ImageBatch<f32>> {
    let data = images.mapv(|v| ((v as f64 - stats.mean) / stats.std) as f32);
    ImageBatch::new(data, stats)
}

/// Fits statistics on `images` and returns the normalized batch.
pub fn normalize_dataset(images: ArrayView4<'_, f32>) -> Result<ImageBatch<f32>> {
    let stats = fit_stats(images)?;
    apply_stats(images, stats)
}

pub fn denormalize(batch: &ImageBatch<f32>) -> Array4<f32> {
    let s = batch.stats;
    batch.data.mapv(|v| (v as f64 * s.std + s.mean) as f32)
}

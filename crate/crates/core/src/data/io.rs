//! Directory layout: images as PNG (8/16-bit grayscale) or `.amap` grids at
//! the top level, optional masks with matching file stems in `masks/`
//! (nonzero = anomalous). Files are processed in lexicographic order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use super::anomaly::AnomalySpec;
use super::normalize::{apply_stats, fit_stats};
use super::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::grid::{read_grid, write_grid};
use crate::model::{ImageBatch, NormStats};

pub const MASK_SUBDIR: &str = "masks";
pub const MANIFEST_FILE: &str = "manifest.json";
const GRID_EXT: &str = "amap";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Fit mean/std on the loaded images.
    Fit,
    /// Apply existing statistics (e.g. from a training checkpoint).
    Reuse(NormStats),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub batch: ImageBatch<f32>,
    /// File stems, aligned with the batch index.
    pub names: Vec<String>,
    /// `(B, 1, S, S)` 0/1 masks when a `masks/` subdirectory exists.
    pub masks: Option<Array4<u8>>,
    pub skipped: Vec<SkippedFile>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<String>,
    #[serde(default)]
    pub mask_files: Vec<String>,
    #[serde(default)]
    pub skipped: Vec<SkippedFile>,
    pub image_size: usize,
    #[serde(default)]
    pub stats: Option<NormStats>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub anomalies: Option<AnomalySpec>,
}

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn resize(grid: Array2<f32>, target: usize) -> Array2<f32> {
    let (h, w) = grid.dim();
    if h == target && w == target {
        return grid;
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, grid.into_raw_vec_and_offset().0).expect("length matches");
    let out = imageops::resize(&buf, target as u32, target as u32, FilterType::Triangle);
    Array2::from_shape_vec((target, target), out.into_raw()).expect("length matches")
}

/// Reads one image as `f32` grayscale (PNG intensities scaled to [0, 1]).
fn read_image(path: &Path) -> Result<Array2<f32>> {
    match extension(path).as_deref() {
        Some(GRID_EXT) => read_grid(path),
        Some("png") => {
            let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma32f();
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("length matches"))
        }
        _ => Err(Error::format(path, "unsupported image extension")),
    }
}

fn read_mask(path: &Path, target: usize) -> Result<Array2<u8>> {
    let raw = read_image(path)?.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
    Ok(resize(raw, target).mapv(|v| u8::from(v >= 0.5)))
}

fn find_mask(mask_dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", GRID_EXT]
        .iter()
        .map(|ext| mask_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads every image in `dir`, resized (bilinear) to `target_size`.
/// Unreadable or non-image files are skipped with a warning and listed in
/// [`LoadedDataset::skipped`].
pub fn load_image_dir(dir: &Path, target_size: usize, normalization: Normalization) -> Result<LoadedDataset> {
    if target_size == 0 {
        return Err(Error::Config("target_size must be positive".into()));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    entries.sort();

    let mut images = Vec::new();
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    for path in entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match read_image(&path) {
            Ok(img) => {
                images.push(resize(img, target_size));
                names.push(stem(&path));
            }
            Err(err) => {
                log::warn!("skipping {}: {err}", path.display());
                skipped.push(SkippedFile {
                    file: name,
                    reason: err.to_string(),
                });
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }

    let mut raw = Array4::<f32>::zeros((images.len(), 1, target_size, target_size));
    for (mut slot, img) in raw.axis_iter_mut(Axis(0)).zip(&images) {
        slot.index_axis_mut(Axis(0), 0).assign(img);
    }
    let stats = match normalization {
        Normalization::Fit => fit_stats(raw.view())?,
        Normalization::Reuse(stats) => stats,
    };
    let batch = apply_stats(raw.view(), stats)?;

    let mask_dir = dir.join(MASK_SUBDIR);
    let masks = if mask_dir.is_dir() {
        let mut masks = Array4::<u8>::zeros(raw.dim());
        for (i, name) in names.iter().enumerate() {
            let path = find_mask(&mask_dir, name)
                .ok_or_else(|| Error::Data(format!("image `{name}` has no mask in {}", mask_dir.display())))?;
            masks
                .index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&read_mask(&path, target_size)?);
        }
        Some(masks)
    } else {
        None
    };

    Ok(LoadedDataset {
        batch,
        names,
        masks,
        skipped,
    })
}

fn write_mask_png(path: &Path, mask: ArrayView2<'_, u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let pixels = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("length matches");
    img.save(path).map_err(|e| Error::format(path, e))
}

/// Writes images as `.amap` grids (and masks as PNG) with zero-padded index
/// names, plus `manifest.json`. Returns the manifest written.
pub fn write_dataset_dir(
    dir: &Path,
    images: ArrayView4<'_, f32>,
    masks: Option<ArrayView4<'_, u8>>,
    mut manifest: DatasetManifest,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if masks.is_some() {
        let mdir = dir.join(MASK_SUBDIR);
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    }
    let (n, _, s, _) = images.dim();
    let width = n.to_string().len().max(4);
    manifest.files.clear();
    manifest.mask_files.clear();
    manifest.image_size = s;
    for i in 0..n {
        let name = format!("img_{i:0width$}");
        let file = format!("{name}.{GRID_EXT}");
        write_grid(&dir.join(&file), images.index_axis(Axis(0), i).index_axis(Axis(0), 0))?;
        manifest.files.push(file);
        if let Some(m) = &masks {
            let mfile = format!("{MASK_SUBDIR}/{name}.png");
            write_mask_png(&dir.join(&mfile), m.index_axis(Axis(0), i).index_axis(Axis(0), 0))?;
            manifest.mask_files.push(mfile);
        }
    }
    manifest.write(dir)?;
    Ok(manifest)
}

//! Binary float grids and PNG heatmaps.
//!
//! Grid layout: 4-byte magic `AMAP`, height and width as little-endian `u16`,
//! then `H·W` little-endian `f32` values in row-major order.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::real::Real;

pub const GRID_MAGIC: [u8; 4] = *b"AMAP";
pub const GRID_HEADER_LEN: usize = 8;

pub fn encode_grid<T: Real>(grid: ArrayView2<'_, T>) -> Result<Vec<u8>> {
    let (h, w) = grid.dim();
    let (h16, w16) = match (u16::try_from(h), u16::try_from(w)) {
        (Ok(h), Ok(w)) => (h, w),
        _ => return Err(Error::Config(format!("grid {h}x{w} exceeds u16 dimensions"))),
    };
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + 4 * h * w);
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&h16.to_le_bytes());
    out.extend_from_slice(&w16.to_le_bytes());
    for v in grid.iter() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    if bytes.len() < GRID_HEADER_LEN || bytes[..4] != GRID_MAGIC {
        return Err(Error::format(path, "missing AMAP grid header"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[GRID_HEADER_LEN..];
    if body.len() != 4 * h * w {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes for {h}x{w}, found {}", 4 * h * w, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((h, w), values).expect("length checked"))
}

pub fn write_grid<T: Real>(path: &Path, grid: ArrayView2<'_, T>) -> Result<()> {
    fs::write(path, encode_grid(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

/// Five-stop approximation of the "inferno" colormap, low to high.
const COLORMAP: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [87.0, 16.0, 110.0],
    [188.0, 55.0, 84.0],
    [249.0, 142.0, 9.0],
    [252.0, 255.0, 164.0],
];

pub const HEATMAP_SCALING_NOTE: &str = "per-image min-max scaling to [0,1]; colormap inferno-5stop";

fn colorize(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (COLORMAP[i][c] * (1.0 - f) + COLORMAP[i + 1][c] * f).round() as u8;
    }
    rgb
}

/// RGB heatmap with per-image min-max scaling; the scaling is recorded in a
/// PNG `tEXt` chunk under the key `scaling`.
pub fn write_heatmap<T: Real>(path: &Path, grid: ArrayView2<'_, T>) -> Result<()> {
    let (h, w) = grid.dim();
    let lo = grid.iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
    let hi = grid.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(3 * h * w);
    for v in grid.iter() {
        pixels.extend_from_slice(&colorize((v.as_f64() - lo) / span));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let note = format!("{HEATMAP_SCALING_NOTE}; min={lo:e}; max={hi:e}");
    encoder
        .add_text_chunk("scaling".to_string(), note)
        .map_err(|e| Error::format(path, e))?;
    let mut writer = encoder.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(&pixels).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

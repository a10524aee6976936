//! Checkpoint archive.
//!
//! ```text
//! magic "VAELOCK\0" | u32 LE format version | u32 LE header length
//! | JSON header | parameter payload (f64 LE, tensors in header order)
//! ```
//!
//! Parameters are stored as `f64`, which round-trips `f32` and `f64` models
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint_bytes;
use crate::model::{ModelConfig, NormStats, Vae};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VAELOCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    normalization_stats: NormStats,
    train_fingerprint: String,
    /// Free-form training configuration snapshot.
    train_config: serde_json::Value,
    parameter_fingerprint: String,
    tensors: Vec<TensorEntry>,
}

/// A model with the metadata needed to reuse it on new data.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Vae<T>,
    pub normalization_stats: NormStats,
    pub train_fingerprint: String,
    pub train_config: serde_json::Value,
}

fn payload<T: Real>(model: &Vae<T>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut bytes = Vec::with_capacity(8 * model.parameter_count());
    for (name, shape, values) in model.named_parameters() {
        entries.push(TensorEntry { name, shape });
        for v in values {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    (entries, bytes)
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (tensors, params) = payload(&self.model);
        let header = Header {
            model_config: self.model.config().clone(),
            normalization_stats: self.normalization_stats,
            train_fingerprint: self.train_fingerprint.clone(),
            train_config: self.train_config.clone(),
            parameter_fingerprint: fingerprint_bytes(&params),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&params);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::format(path, format!("header: {e}")))?;
        let params = &bytes[16 + header_len..];
        if fingerprint_bytes(params) != header.parameter_fingerprint {
            return Err(Error::format(path, "parameter payload does not match its fingerprint"));
        }

        let mut model = Vae::<T>::new(header.model_config.clone(), 0)
            .map_err(|e| Error::format(path, format!("model_config: {e}")))?;
        let expected: Vec<TensorEntry> = model
            .named_parameters()
            .into_iter()
            .map(|(name, shape, _)| TensorEntry { name, shape })
            .collect();
        if expected != header.tensors {
            return Err(Error::format(path, "tensor table does not match model_config"));
        }
        let total: usize = model.parameter_count();
        if params.len() != 8 * total {
            return Err(Error::format(
                path,
                format!("expected {} parameter bytes, found {}", 8 * total, params.len()),
            ));
        }
        let mut values = params
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for slice in model.parameter_slices_mut() {
            for slot in slice.iter_mut() {
                *slot = T::from_f64_lossy(values.next().expect("length checked"));
            }
        }
        Ok(Self {
            model,
            normalization_stats: header.normalization_stats,
            train_fingerprint: header.train_fingerprint,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never clobbers the last good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatentMode;
    use ndarray::Array4;

    fn sample() -> Checkpoint<f32> {
        let cfg = ModelConfig {
            image_size: 16,
            latent_dim: 4,
            encoder_channels: vec![4, 8],
            ..ModelConfig::default()
        };
        Checkpoint {
            model: Vae::new(cfg, 3).unwrap(),
            normalization_stats: NormStats { mean: 0.25, std: 1.5 },
            train_fingerprint: "abc".into(),
            train_config: serde_json::json!({"beta": 1.0}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        for ((_, _, a), (_, _, b)) in ckpt.model.named_parameters().iter().zip(back.model.named_parameters().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.normalization_stats, ckpt.normalization_stats);
        let x = Array4::from_shape_fn((2, 1, 16, 16), |(b, _, i, j)| (b + i * j) as f32 * 0.01);
        let ya = ckpt.model.forward(x.view(), LatentMode::Mean).unwrap().reconstruction;
        let yb = back.model.forward(x.view(), LatentMode::Mean).unwrap().reconstruction;
        assert_eq!(ya, yb);
    }

    #[test]
    fn corrupted_file_is_a_parse_error() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..20], Path::new("x")).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"garbage", Path::new("x")).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Path::new("x")),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn missing_stats_names_the_field() {
        let bytes = sample().to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header.as_object_mut().unwrap().remove("normalization_stats");
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + header_len..]);
        let err = Checkpoint::<f32>::from_bytes(&out, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("normalization_stats"), "{err}");
    }
}

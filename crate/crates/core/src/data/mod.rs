//! Image sources: a synthetic normal-manifold benchmark with anomaly
//! injection, image-directory ingestion, normalization and augmentation.

mod anomaly;
mod augment;
mod io;
mod normalize;
mod synthetic;

pub use anomaly::{disk_mask, inject_anomaly, inject_dataset, AnomalyShape, AnomalySpec, Polarity};
pub use augment::{augment, rotate_bilinear, AugmentConfig};
pub use io::{
    load_image_dir, write_dataset_dir, DatasetManifest, LoadedDataset, Normalization, SkippedFile,
    MASK_SUBDIR,
};
pub use normalize::{apply_stats, denormalize, fit_stats, normalize_dataset};
pub use synthetic::{generate_synthetic_normal, SyntheticConfig, Texture, TextureParams};

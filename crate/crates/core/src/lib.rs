//! Query-based segmentation of solar PV installations in aerial image
//! patches.
//!
//! The network chains a convolutional feature pyramid, a multi-scale
//! transformer encoder, a full-resolution pixel embedding and a
//! masked-attention decoder whose learned queries each predict one mask.
//! Everything runs on a small reverse-mode autodiff engine in `f64`, so
//! the whole pipeline can be gradient-checked on a laptop.

pub mod attention;
pub mod backbone;
pub mod datamodel;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image_ops;
pub mod mask_decoder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pixel_decoder;
pub mod synthgen;
pub mod tensor;
pub mod training;

use std::io::Write;
use std::path::Path;

pub use backbone::{BackboneConfig, FeaturePyramid};
pub use datamodel::{DatasetManifest, ImagePatch, ManifestEntry, MaskPatch, Split, SplitSpec};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use mask_decoder::{ClassLogits, DecoderConfig, MaskSet};
pub use model::{Model, ModelConfig, Prediction};
pub use nn::{Activation, ParamStore};
pub use pixel_decoder::{EncodedPyramid, EncoderConfig, TokenSequence};
pub use tensor::Tensor;
pub use training::{TrainConfig, Trainer};

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

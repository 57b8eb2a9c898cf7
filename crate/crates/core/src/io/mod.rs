//! Model container format and dataset files.

mod dataset;
mod manifest;

pub use dataset::{BlobConfig, BlobGenerator, Dataset};
pub use manifest::{
    blob_path_for, decode_manifest, decode_model, encode_model, load_model, paths_for_stem, save_model,
    GroupingRecord, LayerRecord, MaskRecord, ModelManifest, FORMAT_VERSION,
};

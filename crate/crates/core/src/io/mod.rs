//! Manifests, image decoding, and the feature cache.

mod features;
mod image;
mod manifest;

pub use features::{extract_features, FeatureCache, FeatureRecord, FEATURE_MAGIC, FEATURE_VERSION};
pub use image::{load_image, load_label_map, load_raw, save_pgm_u8, save_png, RawImage};
pub use manifest::{
    load_manifest, read_manifest, DatasetManifest, ManifestFormat, ManifestRow, RowBox, Split, CSV_COLUMNS,
};

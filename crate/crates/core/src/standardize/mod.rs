//! Physical-scale standardization: rescale, wrap, tile, filter.

pub mod contrast;
pub mod image;
pub mod manifest;
pub mod pipeline;
pub mod rescale;
pub mod tiling;

pub use contrast::{is_low_contrast, luma_span};
pub use image::ImageRgb;
pub use manifest::{DatasetManifest, ImageEntry, LabelMode, PatchRecord, Split, SplitCounts, StandardizeSummary};
pub use pipeline::{standardize_dataset, standardize_image, PatchManifest, StandardizeParams};
pub use rescale::rescale_image;
pub use tiling::{extract_patches, reflection_wrap};

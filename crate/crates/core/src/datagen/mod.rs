//! Procedural multi-factor images and correlated source/target datasets.

mod catalog;
mod dataset;
mod render;

pub use catalog::{Factor, FactorCatalog, FactorKind, ShapeFamily, BACKGROUND_COLORS, TEXTURE_NAMES};
pub use dataset::{
    dataset_digest, export_dataset, generate_dataset, load_dataset, samples_digest, write_ppm, CorrelationMode,
    CorrelationSpec, Dataset, Manifest, Nuisance, Role, Split, SplitCounts, SplitSize, SplitSizes, EMPTY_DIGEST,
};
pub use render::{base_polygon, hsv_to_rgb, hue_center, lightness_level, render_sample, rgb_to_hue, LabeledImage};

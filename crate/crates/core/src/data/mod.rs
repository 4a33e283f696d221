//! Rasters, patch extraction, bag file formats and synthetic cohorts.

pub(crate) mod binio;
mod extract;
mod formats;
mod raster;
mod synth;

pub use extract::{
    extract_labeled_patches, extract_tissue_patches, is_tissue, tissue_fraction,
    tissue_fraction_in, PatchSample, CRIBRIFORM, DEFAULT_PATCH_SIZE, DEFAULT_TISSUE_MIN,
};
pub use formats::{
    coords_from_bytes, coords_to_bytes, patch_labels_from_bytes, patch_labels_to_bytes, read_bag,
    read_cohort, read_manifest, read_patch_labels, write_bag, write_cohort, write_manifest,
    write_patch_labels, EmbeddingBlock, SlideRecord, MANIFEST_FILE, UNANNOTATED,
};
pub use raster::{GrayImage, RgbImage};
pub use synth::{synth_generate, Remainder, SyntheticCohort, SyntheticSpec};

use serde::{Deserialize, Serialize};

/// Level-0 top-left pixel offset of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: i32,
    pub y: i32,
}

impl Coord {
    pub const fn new(x: i32, y: i32) -> Self {
        Coord { x, y }
    }
}

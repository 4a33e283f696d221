//! Slide-level predominant growth pattern classification from bags of patch
//! embeddings.
//!
//! The crate contains a class-specific gated-attention MIL head with
//! hand-derived gradients ([`mil`]), a patch-level linear probe aggregated by
//! majority vote ([`baseline`]), the raster tiling rules and on-disk bag
//! formats ([`data`]), early-stopped training with patient-level stratified
//! cross-validation ([`training`]), agreement metrics ([`metrics`]) and
//! attention map rendering ([`heatmap`]).

pub mod baseline;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod mil;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// Slide-level classes, in model output order.
pub const SLIDE_CLASSES: [&str; 5] = ["lepidic", "acinar", "papillary", "micropapillary", "solid"];

/// Patch-level classes, in probe output order. Index `i + 1` is slide class `i`.
pub const PATCH_CLASSES: [&str; 6] = [
    "background",
    "lepidic",
    "acinar",
    "papillary",
    "micropapillary",
    "solid",
];

/// Looks up a slide class index by (case-insensitive) name.
pub fn slide_class_index(name: &str) -> Option<usize> {
    SLIDE_CLASSES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name.trim()))
}

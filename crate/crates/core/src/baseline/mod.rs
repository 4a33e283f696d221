//! Patch-level linear probe over frozen embeddings, aggregated into a slide
//! label by majority vote.

mod probe;
mod vote;

pub use probe::{
    load_probe, probe_forward, read_probe, save_probe, train_probe, write_probe, PatchDataset,
    PatchPrediction, ProbeParams,
};
pub use vote::{majority_vote, predict_slide};

//! Weighted sampling, early-stopped training and patient-level
//! cross-validation.

mod cv;
mod folds;
mod sampling;
mod train;

pub use cv::{cross_validate_mil, cross_validate_vote, CvOptions, CvReport, FoldResult};
pub use folds::{patient_holdout, stratified_patient_folds, FoldPlan, FoldSplit};
pub use sampling::weighted_sample_indices;
pub use train::{mean_loss, train_mil, EarlyStopper, EpochLog, TrainConfig};

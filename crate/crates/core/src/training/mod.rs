//! Supervision math for the dual-level descriptors and detectors:
//! positive/negative sampling geometry, hierarchical circle losses,
//! matchability labels, keypoint rankings and the detector losses.

mod circle;
mod labels;
mod losses;
mod sampling;

pub use circle::{circle_loss, CircleLoss, CircleLossParams, Negatives};
pub use labels::{keypoint_rankings, matchability_labels, LabelSet, PositiveReduction};
pub use losses::{
    overlap_labels, overlap_loss, rating_loss, total_loss, LossComponents, LossWeights, ScalarLoss,
    TargetScores,
};
pub use sampling::{build_sample_batch, SampleBatch, SamplingRadii, SkipReason};

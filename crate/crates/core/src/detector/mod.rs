//! Detection-model contract and the reference two-stage detector.

mod anchors;
pub mod checkpoint;
pub mod layers;
mod model;
pub mod optim;
pub mod params;

pub use anchors::{anchor_grid, BoxCoder};
pub use checkpoint::Checkpoint;
pub use model::{
    DetectionLosses, Detector, DetectorConfig, FeatureEmbedding, FeatureMaps, InferenceResult,
    StudentPass, TargetBox, TrainStepOutput, Upstream,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ModelParameters, Tensor};

/// Deep, independent copy.
pub fn clone_params(params: &ModelParameters) -> ModelParameters {
    params.clone()
}

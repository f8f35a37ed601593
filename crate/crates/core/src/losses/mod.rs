//! Training objectives: nearest-neighbor and cycle-consistency losses for
//! self-supervised flow, focal and Huber losses for detection.

mod detect;
mod flow;

pub use detect::{
    detection_total_loss, encode_box, focal_loss, huber_loss, locate_cell,
    make_detection_targets, splat_sigma, DetectionLossGrads, DetectionLossReport,
    DetectionLossWeights, DetectionTargets, FOCAL_ALPHA, FOCAL_BETA, FOCAL_CLAMP, HUBER_DELTA,
};
pub use flow::{
    cycle_consistency_loss, flow_total_loss, flow_total_loss_indexed, nearest_neighbor_loss,
    nearest_neighbor_loss_indexed, nn_index_cell, DistanceMode, FlowLossGrads, FlowLossReport,
    LossGrad,
};

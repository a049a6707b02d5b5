//! Alignment and consistency scores, optical flow, and the Flow-IMU
//! ridge evaluator.

mod features;
mod flow;
mod flow_imu;
mod report;
mod ridge;
mod scores;

use thiserror::Error;

pub use features::{feature_len, flow_features};
pub use flow::{dense_flow, FlowConfig, FlowField};
pub use flow_imu::{clip_features, clip_targets, flow_imu_correlation, FlowImuConfig};
pub use report::{AxisScores, MetricsReport};
pub use ridge::{fit_ridge, select_lambda, RidgeModel, LAMBDA_GRID};
pub use scores::{
    aas, aas_from_bins, agreement, command_bins, jump_sums, pcr, pcr_from_bins, pearson, Pearson,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("ridge: {0}")]
    Ridge(String),
}

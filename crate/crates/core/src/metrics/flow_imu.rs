use serde::{Deserialize, Serialize};

use crate::dataio::{ActionSequence, VideoClip};
use crate::NUM_AXES;

use super::features::{feature_len, flow_features};
use super::flow::{dense_flow, FlowConfig};
use super::ridge::RidgeModel;
use super::scores::pearson;
use super::{AxisScores, MetricsError};

/// How frame pairs become regression rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowImuConfig {
    pub flow: FlowConfig,
    /// Append the change in features from the previous pair.
    pub temporal_context: bool,
}

impl Default for FlowImuConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            temporal_context: true,
        }
    }
}

impl FlowImuConfig {
    pub fn row_len(&self) -> usize {
        let d = feature_len(self.flow.grid);
        if self.temporal_context {
            2 * d
        } else {
            d
        }
    }
}

/// One row per consecutive frame pair `(t, t+1)`.
pub fn clip_features(clip: &VideoClip, cfg: &FlowImuConfig) -> Result<Vec<Vec<f64>>, MetricsError> {
    let t = clip.num_frames();
    if t < 2 {
        return Err(MetricsError::Shape("flow needs at least 2 frames".into()));
    }
    let gray: Vec<Vec<f32>> = (0..t).map(|i| clip.gray_frame(i)).collect();
    let (w, h) = (clip.width(), clip.height());
    let base = crate::par::map_range(t - 1, |i| {
        dense_flow(&gray[i], &gray[i + 1], w, h, &cfg.flow).map(|f| flow_features(&f))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    if !cfg.temporal_context {
        return Ok(base);
    }
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let prev = &base[i.saturating_sub(1)];
            let mut row = f.clone();
            row.extend(f.iter().zip(prev).map(|(a, b)| a - b));
            row
        })
        .collect())
}

/// Targets aligned with [`clip_features`]: pair `(t, t+1)` maps to the
/// command driving the transition into frame `t+1`.
pub fn clip_targets(commanded: &ActionSequence) -> Vec<[f64; NUM_AXES]> {
    commanded.rows()[1..].to_vec()
}

/// Pearson r per axis between predictions and targets, pooled over rows.
pub fn flow_imu_correlation(
    model: &RidgeModel,
    features: &[Vec<f64>],
    targets: &[[f64; NUM_AXES]],
) -> Result<AxisScores, MetricsError> {
    if features.is_empty() {
        return Err(MetricsError::Empty("flow-imu evaluation"));
    }
    if features.len() != targets.len() {
        return Err(MetricsError::Shape(format!(
            "{} feature rows vs {} targets",
            features.len(),
            targets.len()
        )));
    }
    let preds = features.iter().map(|f| model.predict(f)).collect::<Result<Vec<_>, _>>()?;
    let mut r = [0.0; NUM_AXES];
    for (j, out) in r.iter_mut().enumerate() {
        let p: Vec<f64> = preds.iter().map(|row| row[j]).collect();
        let y: Vec<f64> = targets.iter().map(|row| row[j]).collect();
        *out = pearson(&p, &y)?.r;
    }
    Ok(AxisScores::from_axes(r))
}

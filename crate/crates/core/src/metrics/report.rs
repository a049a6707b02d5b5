use serde::{Deserialize, Serialize};

use crate::NUM_AXES;

/// Six per-axis values plus their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisScores {
    pub per_axis: [f64; NUM_AXES],
    pub mean: f64,
}

impl AxisScores {
    pub fn from_axes(per_axis: [f64; NUM_AXES]) -> Self {
        let mean = per_axis.iter().sum::<f64>() / NUM_AXES as f64;
        Self { per_axis, mean }
    }

    fn check(&self, key: &str, lo: f64, hi: f64) -> Result<(), String> {
        for (j, v) in self.per_axis.iter().chain([&self.mean]).enumerate() {
            if !v.is_finite() {
                return Err(format!("`{key}` entry {j} is not finite"));
            }
            if *v < lo - 1e-12 || *v > hi + 1e-12 {
                return Err(format!("`{key}` entry {j} = {v} outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

/// Per-axis AAS, PCR and Flow-IMU correlation with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Free-form method name shown as a column header by `report`.
    pub method: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub clip_ids: Vec<String>,
    pub aas: AxisScores,
    pub pcr: AxisScores,
    /// Absent when no Flow-IMU model was supplied.
    pub flow_imu_r: Option<AxisScores>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<(), String> {
        self.aas.check("aas", 0.0, 1.0)?;
        self.pcr.check("pcr", 0.0, f64::INFINITY)?;
        if let Some(r) = &self.flow_imu_r {
            r.check("flow_imu_r", -1.0, 1.0)?;
        }
        Ok(())
    }
}

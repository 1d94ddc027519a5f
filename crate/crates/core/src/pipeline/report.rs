use serde::{Deserialize, Serialize};

use super::{CoeffRow, Metrics, StageReport, TrainConfig};

/// Metrics after one stage of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    /// Scaled MSE of the stage's own trajectory. For stage 1 this is the
    /// fitted MLP trajectory; for CRNN stages the integrated CRNN.
    pub traj_mse: f64,
    pub coeff_mae: Option<f64>,
    pub coeff_mae_ln_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scheme: String,
    pub config: TrainConfig,
    pub stages: Vec<StageReport>,
    pub stage_metrics: Vec<StageMetrics>,
    /// Metrics of the final CRNN, when a CRNN stage ran.
    pub metrics: Option<Metrics>,
    pub coefficients: Vec<CoeffRow>,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn new(scheme: &str, config: TrainConfig) -> Self {
        Self {
            scheme: scheme.to_string(),
            config,
            stages: Vec::new(),
            stage_metrics: Vec::new(),
            metrics: None,
            coefficients: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    /// JSON with every wall-time field zeroed, for reproducibility checks.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.wall_time_s = 0.0;
        r.stages.iter_mut().for_each(|s| s.wall_time_s = 0.0);
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

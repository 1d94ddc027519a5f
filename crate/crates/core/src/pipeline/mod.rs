//! Losses, resampling, optimization and the three training stages.

mod ablation;
mod init;
mod losses;
mod metrics;
mod optim;
mod report;
mod resample;
mod stages;
mod windows;

pub use ablation::{ablation_run, AblationVariant};
pub use init::{init_crnn, parse_estimates_csv, InitSpec};
pub use losses::{derivative_losses, fd_operators, scaled_mse, FdOperators};
pub use metrics::{coeff_mae, coeff_table, evaluate, CoeffRow, Metrics};
pub use optim::{Adam, Annealer};
pub use report::{StageMetrics, TrainReport};
pub use resample::{fd_derivatives, pchip, resample, TimeAxis};
pub use stages::{
    crnn_init_rng, fit_trajectory, mlp_frame, optimize, stage1_fit, stage1_from, stage2_from_pairs,
    stage2_pretrain, stage3_finetune, StageReport, WindowResult,
};
pub use windows::{window_ranges, WindowSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdError;
use crate::models::{Activation, ModelError};
use crate::scheme::{GridKind, ReactionScheme};
use crate::solver::{SolverConfig, SolverError, TrajectoryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("time grids differ")]
    GridMismatch,
    #[error("grid too short: {0}")]
    TooShort(String),
    #[error("{stage}: solver failure: {source}")]
    Solver { stage: String, source: SolverError },
    #[error("{stage}: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { stage: String, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEpochs {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: StageEpochs,
    pub anneal_patience_fraction: f64,
    pub anneal_factor: f64,
    pub interpolation_factor: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// `None` trains on the full span as a single window.
    pub window: Option<WindowSpec>,
    /// Axis used for interpolation and derivative losses.
    pub time_axis: TimeAxis,
    pub activation: Activation,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: StageEpochs {
                stage1: 1000,
                stage2: 30000,
                stage3: 10000,
            },
            anneal_patience_fraction: 0.10,
            anneal_factor: 0.5,
            interpolation_factor: 10,
            seed: 0,
            weights: LossWeights::default(),
            window: Some(WindowSpec::default()),
            time_axis: TimeAxis::Linear,
            activation: Activation::Tanh,
            solver: SolverConfig::training(),
        }
    }
}

impl TrainConfig {
    /// Defaults adapted to the scheme's sampling grid: logarithmic grids
    /// train on the full span and work in log10-time.
    pub fn for_scheme(scheme: &ReactionScheme) -> Self {
        let mut c = Self::default();
        if let Some(g) = scheme.time_grid {
            if g.kind == GridKind::Log {
                c.window = None;
                c.time_axis = TimeAxis::Log10;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return bad("anneal_factor must lie in (0, 1)");
        }
        if !(self.anneal_patience_fraction > 0.0 && self.anneal_patience_fraction <= 1.0) {
            return bad("anneal_patience_fraction must lie in (0, 1]");
        }
        if self.interpolation_factor < 1 {
            return bad("interpolation_factor must be at least 1");
        }
        let w = self.weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.alpha.is_finite() && w.beta.is_finite()) {
            return bad("loss weights must be finite and non-negative");
        }
        if let Some(ws) = self.window {
            if ws.size < 2 || ws.stride < 1 {
                return bad("window size must be at least 2 and stride at least 1");
            }
        }
        self.solver
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    fd_derivatives, fit_trajectory, mlp_frame, stage2_from_pairs, PipelineError, StageReport,
    TrainConfig,
};
use crate::kinetics::CrnnParams;
use crate::models::{fit_norm_stats, MlpField, MlpParams, NormStats};
use crate::scheme::ReactionScheme;
use crate::solver::{Trajectory, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Finite differences of the raw observations.
    DirectFd,
    /// MLP field values at the observed states.
    MlpProxy,
    /// Finite differences of the fitted trajectory without densification.
    NoInterpolation,
}

impl AblationVariant {
    pub fn needs_stage1(self) -> bool {
        !matches!(self, AblationVariant::DirectFd)
    }
}

impl FromStr for AblationVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct_fd" => Ok(AblationVariant::DirectFd),
            "mlp_proxy" => Ok(AblationVariant::MlpProxy),
            "no_interpolation" => Ok(AblationVariant::NoInterpolation),
            _ => Err(format!(
                "unknown ablation `{s}` (direct_fd, mlp_proxy, no_interpolation)"
            )),
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationVariant::DirectFd => "direct_fd",
            AblationVariant::MlpProxy => "mlp_proxy",
            AblationVariant::NoInterpolation => "no_interpolation",
        })
    }
}

/// Stage-2 epochs scaled by the ratio of interpolated to raw collocation
/// points, so every variant sees the same number of point visits.
fn proportional_epochs(epochs: usize, n_obs: usize, factor: usize) -> usize {
    let dense = (n_obs - 1) * factor + 1;
    (epochs * dense).div_ceil(n_obs)
}

/// Runs one stage-2 ablation. `stage1` supplies the fitted MLP for the
/// variants that need it.
pub fn ablation_run(
    variant: AblationVariant,
    scheme: &ReactionScheme,
    obs: &Trajectory,
    stage1: Option<(&MlpParams, &NormStats)>,
    init: CrnnParams,
    cfg: &TrainConfig,
) -> Result<(CrnnParams, StageReport), PipelineError> {
    cfg.validate()?;
    let stats = match stage1 {
        Some((_, s)) => s.clone(),
        None => fit_norm_stats(obs),
    };
    let epochs = proportional_epochs(cfg.epochs.stage2, obs.n_times(), cfg.interpolation_factor);
    let label = format!("ablation:{variant}");
    let need = || {
        stage1.ok_or_else(|| {
            PipelineError::Config(format!("ablation {variant} needs stage-1 parameters"))
        })
    };
    let (states, targets) = match variant {
        AblationVariant::DirectFd => (obs.states.clone(), fd_derivatives(&obs.times, &obs.states)),
        AblationVariant::NoInterpolation => {
            let (mlp, st) = need()?;
            let fitted = fit_trajectory(mlp, st, obs, cfg.window, cfg.time_axis, &cfg.solver)?;
            let d = fd_derivatives(&fitted.times, &fitted.states);
            (fitted.states, d)
        }
        AblationVariant::MlpProxy => {
            let (mlp, st) = need()?;
            let (fstats, _) = mlp_frame(st, &obs.times, cfg.time_axis);
            let field = MlpField::new(mlp.clone(), fstats);
            let targets = obs
                .states
                .iter()
                .zip(&obs.times)
                .map(|(y, &t)| {
                    let mut out = vec![0.0; y.len()];
                    field.eval(y, &mut out);
                    let ds = cfg.time_axis.rate(t);
                    out.iter_mut().for_each(|v| *v *= ds);
                    out
                })
                .collect();
            (obs.states.clone(), targets)
        }
    };
    stage2_from_pairs(scheme, &states, &targets, &stats, init, epochs, cfg, &label)
}

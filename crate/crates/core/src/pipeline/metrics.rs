use serde::{Deserialize, Serialize};

use super::scaled_mse;
use crate::kinetics::CrnnParams;
use crate::models::fit_norm_stats;
use crate::scheme::ReactionScheme;
use crate::solver::{integrate, CrnnField, SolverConfig, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffRow {
    pub id: usize,
    pub truth: f64,
    pub estimate: f64,
}

impl CoeffRow {
    pub fn abs_log10_error(&self) -> f64 {
        (self.estimate.log10() - self.truth.log10()).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Scaled MSE of the integrated CRNN trajectory against the observations.
    pub traj_mse: f64,
    /// Mean |log10 k̂ − log10 k| over reactions that are not frozen.
    pub coeff_mae: f64,
    /// Mean |ln k̂ − ln k| over all reactions, frozen ones included.
    pub coeff_mae_ln_all: f64,
    pub diagnostic: Option<String>,
}

/// Truth and estimate for every non-frozen reaction.
pub fn coeff_table(scheme: &ReactionScheme, params: &CrnnParams) -> Vec<CoeffRow> {
    scheme
        .reactions
        .iter()
        .zip(&params.log_k)
        .filter(|(r, _)| !r.frozen)
        .map(|(r, lk)| CoeffRow {
            id: r.id,
            truth: r.rate_coefficient,
            estimate: lk.exp(),
        })
        .collect()
}

pub fn coeff_mae(scheme: &ReactionScheme, params: &CrnnParams) -> f64 {
    let rows: Vec<f64> = scheme
        .reactions
        .iter()
        .zip(&params.log_k)
        .filter(|(r, _)| !r.frozen)
        .map(|(r, lk)| (lk - r.rate_coefficient.ln()).abs() / std::f64::consts::LN_10)
        .collect();
    if rows.is_empty() {
        0.0
    } else {
        rows.iter().sum::<f64>() / rows.len() as f64
    }
}

fn coeff_mae_ln_all(scheme: &ReactionScheme, params: &CrnnParams) -> f64 {
    let n = scheme.n_reactions().max(1) as f64;
    scheme
        .reactions
        .iter()
        .zip(&params.log_k)
        .map(|(r, lk)| (lk - r.rate_coefficient.ln()).abs())
        .sum::<f64>()
        / n
}

/// Integrates the CRNN from the first observation over the observation grid
/// and compares trajectories and coefficients with the truth.
pub fn evaluate(
    scheme: &ReactionScheme,
    params: &CrnnParams,
    obs: &Trajectory,
    cfg: &SolverConfig,
) -> Metrics {
    let stats = fit_norm_stats(obs);
    let field = CrnnField::new(scheme, params);
    let (traj_mse, diagnostic) = match integrate(&field, &obs.states[0], &obs.times, cfg) {
        Ok(pred) => match scaled_mse(&pred, obs, &stats) {
            Ok(v) => (v, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        },
        Err(e) => (f64::INFINITY, Some(format!("integration failed: {e}"))),
    };
    Metrics {
        traj_mse,
        coeff_mae: coeff_mae(scheme, params),
        coeff_mae_ln_all: coeff_mae_ln_all(scheme, params),
        diagnostic,
    }
}

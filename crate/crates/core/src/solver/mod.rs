//! Adaptive stiff integration.
//!
//! The integrator is a four-stage, stiffly accurate ESDIRK method of order
//! three with an embedded second-order solution (Kværnø's 3(2) pair). Each
//! implicit stage is solved by a simplified Newton iteration that reuses one
//! LU factorization of `I - hγJ` per step. Dense output uses cubic Hermite
//! interpolation between accepted step endpoints.
//!
//! [`integrate_recorded`] additionally keeps the accepted-step history so that
//! [`adjoint`] can run the discrete adjoint of exactly that computation.

mod adjoint;
mod esdirk;
mod trajectory;

pub use adjoint::{adjoint, ode_solve_node, AdjointResult};
pub use esdirk::{
    integrate, integrate_recorded, Recording, Solution, SolveStats, Tableau, KVAERNO3,
};
pub use trajectory::{downsample, Provenance, Trajectory, TrajectoryError};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{CrnnParams, Network};
use crate::scheme::ReactionScheme;

/// An autonomous right-hand side `dy/dt = f(y)` with an analytic Jacobian.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, y: &[f64], out: &mut [f64]);
    fn jacobian(&self, y: &[f64]) -> DMatrix<f64>;

    /// Negative components of accepted states are reset to zero when true.
    fn nonnegative(&self) -> bool {
        false
    }
}

/// A vector field with trainable parameters.
pub trait ParametricField: VectorField {
    fn n_params(&self) -> usize;
    /// Accumulates `(∂f/∂θ)ᵀ w` evaluated at `y` into `grad`.
    fn vjp_params(&self, y: &[f64], w: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("step limit of {max_steps} exceeded at t = {t}")]
    StepLimitExceeded { max_steps: usize, t: f64 },
    #[error("Newton iteration failed to converge at t = {t} (step size {h})")]
    NewtonDivergence { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("singular stage matrix in the adjoint sweep at t = {t}")]
    SingularAdjoint { t: f64 },
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialStep {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Stage Newton iterations stop once the increment, in units of the
    /// error tolerance, drops below this.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub initial_step: InitialStep,
}

impl SolverConfig {
    /// Tolerances used inside training loops.
    pub fn training() -> Self {
        Self::with_rtol(1e-6)
    }

    /// Tolerances used to synthesize observation data.
    pub fn data_generation() -> Self {
        Self::with_rtol(1e-10)
    }

    pub fn with_rtol(rtol: f64) -> Self {
        Self {
            rtol,
            atol: rtol * 1e-3,
            max_steps: 100_000,
            newton_tol: 1e-4,
            newton_max_iters: 10,
            initial_step: InitialStep::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.rtol > 0.0
            && self.atol > 0.0
            && self.newton_tol > 0.0
            && self.max_steps >= 1
            && self.newton_max_iters >= 1
            && match self.initial_step {
                InitialStep::Auto => true,
                InitialStep::Fixed(h) => h > 0.0 && h.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(SolverError::InvalidInput(format!(
                "bad solver configuration {self:?}"
            )))
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::training()
    }
}

/// Mass-action kinetics with fixed coefficients. Stage values inside a step
/// may dip below zero, so the unclamped polynomial law is used here.
pub struct MassActionField {
    net: Network,
    k: Vec<f64>,
}

impl MassActionField {
    pub fn new(scheme: &ReactionScheme, k: Vec<f64>) -> Self {
        assert_eq!(k.len(), scheme.n_reactions());
        Self {
            net: Network::new(scheme),
            k,
        }
    }
}

impl VectorField for MassActionField {
    fn dim(&self) -> usize {
        self.net.n_species()
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        self.net.polynomial_rhs_into(y, &self.k, out)
    }
    fn jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        self.net.polynomial_jacobian(y, &self.k)
    }
    fn nonnegative(&self) -> bool {
        true
    }
}

/// The CRNN right-hand side, parameterized by log rate coefficients.
///
/// Integrated in product form, `exp(log_k) * prod y^s`, which agrees with
/// the clamped log form above the clamp floor and stays smooth through
/// zero so the stage iterations see a consistent Jacobian.
pub struct CrnnField {
    net: Network,
    log_k: Vec<f64>,
    k: Vec<f64>,
}

impl CrnnField {
    pub fn new(scheme: &ReactionScheme, params: &CrnnParams) -> Self {
        Self::from_network(Network::new(scheme), params.log_k.clone())
    }

    pub fn from_network(net: Network, log_k: Vec<f64>) -> Self {
        assert_eq!(log_k.len(), net.n_reactions());
        let k = log_k.iter().map(|v| v.exp()).collect();
        Self { net, log_k, k }
    }

    pub fn log_k(&self) -> &[f64] {
        &self.log_k
    }
}

impl VectorField for CrnnField {
    fn dim(&self) -> usize {
        self.net.n_species()
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        self.net.polynomial_rhs_into(y, &self.k, out)
    }
    fn jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        self.net.polynomial_jacobian(y, &self.k)
    }
    fn nonnegative(&self) -> bool {
        true
    }
}

impl ParametricField for CrnnField {
    fn n_params(&self) -> usize {
        self.log_k.len()
    }
    fn vjp_params(&self, y: &[f64], w: &[f64], grad: &mut [f64]) {
        let mut r = vec![0.0; self.net.n_reactions()];
        self.net.polynomial_rates_into(y, &self.k, &mut r);
        self.net.accumulate_vjp_log_k(&r, w, grad)
    }
}

/// Integrates the scheme with its own coefficients over its time grid,
/// starting from the initial concentrations at the first grid time.
pub fn generate_dataset(
    scheme: &ReactionScheme,
    cfg: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    let grid = scheme
        .time_grid
        .ok_or_else(|| SolverError::InvalidInput("scheme has no @tspan grid".into()))?;
    let field = MassActionField::new(scheme, scheme.rate_coefficients());
    let mut traj = integrate(&field, &scheme.initial, &grid.times(), cfg)?;
    traj.provenance = Provenance::Observed;
    Ok(traj)
}

//! Mass-action kinetics and its log-domain (CRNN) parameterization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::scheme::ReactionScheme;

/// Concentrations are clamped here before logarithms are taken.
pub const CLAMP_FLOOR: f64 = 1e-30;

/// Trainable log rate coefficients, one per reaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrnnParams {
    /// Natural logarithm of each rate coefficient.
    pub log_k: Vec<f64>,
    /// Frozen entries are held at their initial value by every optimizer.
    pub frozen: Vec<bool>,
}

impl CrnnParams {
    pub fn new(log_k: Vec<f64>, frozen: Vec<bool>) -> Self {
        assert_eq!(log_k.len(), frozen.len());
        Self { log_k, frozen }
    }

    /// Parameters at the scheme's own coefficients.
    pub fn truth(scheme: &ReactionScheme) -> Self {
        Self {
            log_k: scheme.rate_coefficients().iter().map(|k| k.ln()).collect(),
            frozen: scheme.frozen_mask(),
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.log_k.iter().map(|v| v.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_k.is_empty()
    }
}

/// Precomputed sparse view of a scheme used by every rate evaluation.
#[derive(Debug, Clone)]
pub struct Network {
    n_species: usize,
    reactants: Vec<Vec<(usize, u32)>>,
    net: Vec<Vec<(usize, f64)>>,
    ro2: Vec<bool>,
    pool: Vec<usize>,
}

impl Network {
    pub fn new(scheme: &ReactionScheme) -> Self {
        let s = scheme.net_stoichiometry();
        let reactants = scheme
            .reactions
            .iter()
            .map(|r| r.forward.iter().map(|(&j, &c)| (j, c)).collect())
            .collect();
        let net = (0..scheme.n_reactions())
            .map(|i| {
                (0..scheme.n_species())
                    .filter(|&j| s[(j, i)] != 0)
                    .map(|j| (j, s[(j, i)] as f64))
                    .collect()
            })
            .collect();
        Self {
            n_species: scheme.n_species(),
            reactants,
            net,
            ro2: scheme.reactions.iter().map(|r| r.ro2_scaled).collect(),
            pool: scheme.ro2_pool.clone(),
        }
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn n_reactions(&self) -> usize {
        self.reactants.len()
    }

    fn pool_sum(&self, y: &[f64], clamp: bool) -> f64 {
        self.pool
            .iter()
            .map(|&p| if clamp { y[p].max(0.0) } else { y[p] })
            .sum()
    }

    /// r_i = k_i * prod_j y_j^{s_f(i,j)} [* sum(RO2)], negative entries read as 0.
    pub fn rates_into(&self, y: &[f64], k: &[f64], out: &mut [f64]) {
        self.power_law(y, k, true, out)
    }

    /// The same power law without clamping: a polynomial in `y`, smooth
    /// through zero. Used inside the implicit solver.
    pub fn polynomial_rates_into(&self, y: &[f64], k: &[f64], out: &mut [f64]) {
        self.power_law(y, k, false, out)
    }

    fn power_law(&self, y: &[f64], k: &[f64], clamp: bool, out: &mut [f64]) {
        let pool = self.pool_sum(y, clamp);
        for (i, reactants) in self.reactants.iter().enumerate() {
            let mut r = k[i];
            for &(j, c) in reactants {
                let v = if clamp { y[j].max(0.0) } else { y[j] };
                r *= v.powi(c as i32);
            }
            if self.ro2[i] {
                r *= pool;
            }
            out[i] = r;
        }
    }

    /// dY/dt = S r.
    pub fn apply_stoichiometry(&self, rates: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, col) in self.net.iter().enumerate() {
            for &(j, s) in col {
                out[j] += s * rates[i];
            }
        }
    }

    /// Sᵀ w, the pullback of a species-space cotangent to reaction space.
    pub fn stoichiometry_transpose(&self, w: &[f64], out: &mut [f64]) {
        for (i, col) in self.net.iter().enumerate() {
            out[i] = col.iter().map(|&(j, s)| s * w[j]).sum();
        }
    }

    pub fn rhs_into(&self, y: &[f64], k: &[f64], out: &mut [f64]) {
        let mut r = vec![0.0; self.n_reactions()];
        self.rates_into(y, k, &mut r);
        self.apply_stoichiometry(&r, out);
    }

    pub fn polynomial_rhs_into(&self, y: &[f64], k: &[f64], out: &mut [f64]) {
        let mut r = vec![0.0; self.n_reactions()];
        self.polynomial_rates_into(y, k, &mut r);
        self.apply_stoichiometry(&r, out);
    }

    /// Analytic Jacobian of the mass-action right-hand side. Clamped
    /// components contribute zero slope below zero.
    pub fn jacobian(&self, y: &[f64], k: &[f64]) -> DMatrix<f64> {
        self.power_law_jacobian(y, k, true)
    }

    /// Exact Jacobian of [`Network::polynomial_rhs_into`].
    pub fn polynomial_jacobian(&self, y: &[f64], k: &[f64]) -> DMatrix<f64> {
        self.power_law_jacobian(y, k, false)
    }

    fn power_law_jacobian(&self, y: &[f64], k: &[f64], clamp: bool) -> DMatrix<f64> {
        let n = self.n_species;
        let mut jac = DMatrix::zeros(n, n);
        let pool = self.pool_sum(y, clamp);
        let read = |v: f64| if clamp { v.max(0.0) } else { v };
        let mut dr = vec![0.0; n];
        for (i, reactants) in self.reactants.iter().enumerate() {
            dr.iter_mut().for_each(|v| *v = 0.0);
            let scale = if self.ro2[i] { pool } else { 1.0 };
            for (a, &(j, c)) in reactants.iter().enumerate() {
                if clamp && y[j] < 0.0 {
                    continue;
                }
                let mut d = k[i] * scale * c as f64 * y[j].powi(c as i32 - 1);
                for (b, &(l, cl)) in reactants.iter().enumerate() {
                    if a != b {
                        d *= read(y[l]).powi(cl as i32);
                    }
                }
                dr[j] += d;
            }
            if self.ro2[i] {
                let mut base = k[i];
                for &(l, cl) in reactants {
                    base *= read(y[l]).powi(cl as i32);
                }
                for &p in &self.pool {
                    if !clamp || y[p] >= 0.0 {
                        dr[p] += base;
                    }
                }
            }
            for &(row, s) in &self.net[i] {
                for (col, d) in dr.iter().enumerate() {
                    if *d != 0.0 {
                        jac[(row, col)] += s * d;
                    }
                }
            }
        }
        jac
    }

    /// CRNN rate law: exp(log_k + sum_j s_f ln y_j [+ ln sum(RO2)]) with
    /// concentrations clamped at [`CLAMP_FLOOR`].
    pub fn crnn_rates_into(&self, y: &[f64], log_k: &[f64], out: &mut [f64]) {
        let ln_pool = if self.pool.is_empty() {
            0.0
        } else {
            self.pool
                .iter()
                .map(|&p| y[p])
                .sum::<f64>()
                .max(CLAMP_FLOOR)
                .ln()
        };
        for (i, reactants) in self.reactants.iter().enumerate() {
            let mut z = log_k[i];
            for &(j, c) in reactants {
                z += c as f64 * y[j].max(CLAMP_FLOOR).ln();
            }
            if self.ro2[i] {
                z += ln_pool;
            }
            out[i] = z.exp();
        }
    }

    pub fn crnn_rhs_into(&self, y: &[f64], log_k: &[f64], out: &mut [f64]) {
        let mut r = vec![0.0; self.n_reactions()];
        self.crnn_rates_into(y, log_k, &mut r);
        self.apply_stoichiometry(&r, out);
    }

    /// Exact Jacobian of [`Network::crnn_rhs_into`], including the zero
    /// slope of the clamp below the floor.
    pub fn crnn_jacobian(&self, y: &[f64], log_k: &[f64]) -> DMatrix<f64> {
        let n = self.n_species;
        let mut r = vec![0.0; self.n_reactions()];
        self.crnn_rates_into(y, log_k, &mut r);
        let pool: f64 = self.pool.iter().map(|&p| y[p]).sum();
        let mut jac = DMatrix::zeros(n, n);
        let mut dr = vec![0.0; n];
        for (i, reactants) in self.reactants.iter().enumerate() {
            dr.iter_mut().for_each(|v| *v = 0.0);
            for &(j, c) in reactants {
                if y[j] > CLAMP_FLOOR {
                    dr[j] += r[i] * c as f64 / y[j];
                }
            }
            if self.ro2[i] && pool > CLAMP_FLOOR {
                for &p in &self.pool {
                    dr[p] += r[i] / pool;
                }
            }
            for &(row, s) in &self.net[i] {
                for (col, d) in dr.iter().enumerate() {
                    if *d != 0.0 {
                        jac[(row, col)] += s * d;
                    }
                }
            }
        }
        jac
    }

    /// Accumulates `(∂ crnn_rhs / ∂ log_k)ᵀ w` into `grad`.
    pub fn crnn_vjp_log_k(&self, y: &[f64], log_k: &[f64], w: &[f64], grad: &mut [f64]) {
        let mut r = vec![0.0; self.n_reactions()];
        self.crnn_rates_into(y, log_k, &mut r);
        self.accumulate_vjp_log_k(&r, w, grad);
    }

    /// `grad_i += r_i (Sᵀ w)_i`, valid for any rate law with `∂r_i/∂log_k_i = r_i`.
    pub fn accumulate_vjp_log_k(&self, r: &[f64], w: &[f64], grad: &mut [f64]) {
        for (i, col) in self.net.iter().enumerate() {
            let proj: f64 = col.iter().map(|&(j, s)| s * w[j]).sum();
            grad[i] += proj * r[i];
        }
    }
}

pub fn reaction_rates(scheme: &ReactionScheme, y: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scheme.n_reactions()];
    Network::new(scheme).rates_into(y, k, &mut out);
    out
}

pub fn rhs(scheme: &ReactionScheme, y: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scheme.n_species()];
    Network::new(scheme).rhs_into(y, k, &mut out);
    out
}

pub fn jacobian(scheme: &ReactionScheme, y: &[f64], k: &[f64]) -> DMatrix<f64> {
    Network::new(scheme).jacobian(y, k)
}

pub fn crnn_rates(scheme: &ReactionScheme, y: &[f64], params: &CrnnParams) -> Vec<f64> {
    let mut out = vec![0.0; scheme.n_reactions()];
    Network::new(scheme).crnn_rates_into(y, &params.log_k, &mut out);
    out
}

pub fn crnn_rhs(scheme: &ReactionScheme, y: &[f64], params: &CrnnParams) -> Vec<f64> {
    let mut out = vec![0.0; scheme.n_species()];
    Network::new(scheme).crnn_rhs_into(y, &params.log_k, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StiffnessRatio {
    Value(f64),
    /// The smallest |Re λ| is numerically zero.
    Undefined,
}

/// Relative threshold below which the smallest |Re λ| counts as zero.
pub const STIFFNESS_EPS: f64 = 1e-12;

/// max|Re λ| / min|Re λ| over the eigenvalues of `jac`.
pub fn stiffness_ratio_of(jac: &DMatrix<f64>) -> StiffnessRatio {
    if jac.nrows() == 0 {
        return StiffnessRatio::Undefined;
    }
    let re: Vec<f64> = jac
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re.abs())
        .collect();
    let max = re.iter().cloned().fold(0.0, f64::max);
    let min = re.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 || min < STIFFNESS_EPS * max {
        StiffnessRatio::Undefined
    } else {
        StiffnessRatio::Value(max / min)
    }
}

pub fn stiffness_ratio(scheme: &ReactionScheme, y: &[f64], k: &[f64]) -> StiffnessRatio {
    stiffness_ratio_of(&jacobian(scheme, y, k))
}

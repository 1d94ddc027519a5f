//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stiffkin::autodiff::{grad, AdError, Tensor};
use stiffkin::kinetics::{jacobian, rhs, Network};
use stiffkin::models::{Activation, MlpField, MlpParams, NormStats};
use stiffkin::scheme::ReactionScheme;
use stiffkin::solver::{ode_solve_node, CrnnField, ParametricField, SolverConfig, VectorField};

/// Random scheme text: up to two reactant and product species, occasional
/// coefficient 2, some reactions scaled by an RO2 pool.
pub fn random_scheme(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..7);
    let names: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
    let mut text = format!("@species {}\n", names.join(" "));
    let pool: Vec<&str> = names
        .iter()
        .take(rng.random_range(1..=n.min(3)))
        .map(String::as_str)
        .collect();
    text.push_str(&format!("@ro2 {}\n", pool.join(" ")));
    let side = |rng: &mut ChaCha8Rng| -> String {
        let k = rng.random_range(1..=2);
        let mut picks: Vec<usize> = (0..n).collect();
        let mut terms = Vec::new();
        for _ in 0..k {
            let j = picks.remove(rng.random_range(0..picks.len()));
            let c = if rng.random_bool(0.25) { "2 " } else { "" };
            terms.push(format!("{c}{}", names[j]));
        }
        terms.join(" + ")
    };
    for r in 1..=rng.random_range(1..8) {
        let k = 10f64.powf(rng.random_range(-3.0..3.0));
        let ro2 = if rng.random_bool(0.3) { " @RO2" } else { "" };
        text.push_str(&format!(
            "R{r}: {} = {} : {k:e}{ro2}\n",
            side(rng),
            side(rng)
        ));
    }
    text
}

/// `dy/dt` straight from the reaction list.
pub fn oracle_rhs(s: &ReactionScheme, y: &[f64], k: &[f64]) -> Vec<f64> {
    let pool: f64 = s.ro2_pool.iter().map(|&j| y[j]).sum();
    let mut dy = vec![0.0; y.len()];
    for (r, kr) in s.reactions.iter().zip(k) {
        let mut rate = *kr;
        for (&j, &c) in &r.forward {
            rate *= y[j].powi(c as i32);
        }
        if r.ro2_scaled {
            rate *= pool;
        }
        for (&j, &c) in &r.forward {
            dy[j] -= c as f64 * rate;
        }
        for (&j, &c) in &r.reverse {
            dy[j] += c as f64 * rate;
        }
    }
    dy
}

/// Two-stage L-stable linearly implicit Rosenbrock method (Verwer's ROS2)
/// with `sub` equal steps between consecutive output times.
pub fn ros2(s: &ReactionScheme, y0: &[f64], times: &[f64], sub: usize) -> Vec<Vec<f64>> {
    let k = s.rate_coefficients();
    let g = 1.0 + 1.0 / 2f64.sqrt();
    let n = y0.len();
    let mut y = DVector::from_column_slice(y0);
    let mut out = vec![y0.to_vec()];
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / sub as f64;
        for _ in 0..sub {
            let ys: Vec<f64> = y.iter().copied().collect();
            let m = DMatrix::identity(n, n) - jacobian(s, &ys, &k) * (g * h);
            let lu = m.lu();
            let k1 = lu.solve(&DVector::from_vec(rhs(s, &ys, &k))).unwrap();
            let y1: Vec<f64> = (0..n).map(|i| ys[i] + h * k1[i]).collect();
            let f1 = DVector::from_vec(rhs(s, &y1, &k));
            let k2 = lu.solve(&(f1 - &k1 * 2.0)).unwrap();
            y += &k1 * (1.5 * h) + &k2 * (0.5 * h);
        }
        out.push(y.iter().copied().collect());
    }
    out
}

/// y' = -k y with the single parameter k.
pub struct Decay(pub f64);

impl VectorField for Decay {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        out[0] = -self.0 * y[0];
    }
    fn jacobian(&self, _: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -self.0)
    }
}

impl ParametricField for Decay {
    fn n_params(&self) -> usize {
        1
    }
    fn vjp_params(&self, y: &[f64], w: &[f64], grad: &mut [f64]) {
        grad[0] += -y[0] * w[0];
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn decay_grad(k: f64, t_end: f64) -> (f64, f64) {
    let cfg = SolverConfig::with_rtol(1e-10);
    let (val, g) = grad(&[k], None, |tape, p| {
        let y0 = tape.constant_vector(&[1.0]);
        let (y, _) = ode_solve_node(tape, |th| Decay(th[0]), p, y0, &[0.0, t_end], &cfg)
            .map_err(|e| AdError::Solver(e.to_string()))?;
        let last = tape.select(y, vec![1]);
        Ok(tape.sum(last))
    })
    .unwrap();
    (val, g[0])
}

pub fn scaled_window_loss(
    net: &Network,
    log_k: &[f64],
    obs: &[Vec<f64>],
    times: &[f64],
    range: &[f64],
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>), AdError> {
    let n = range.len();
    let obs_m = Tensor::from_fn(obs.len(), n, |r, c| obs[r][c]);
    let inv = Tensor::from_fn(obs.len(), n, |_, c| 1.0 / range[c]);
    grad(log_k, None, |tape, p| {
        let y0 = tape.constant_vector(&obs[0]);
        let (y, _) = ode_solve_node(
            tape,
            |th| CrnnField::from_network(net.clone(), th.to_vec()),
            p,
            y0,
            times,
            cfg,
        )
        .map_err(|e| AdError::Solver(e.to_string()))?;
        let o = tape.constant(obs_m.clone());
        let d = tape.sub(y, o);
        let s = tape.constant(inv.clone());
        let d = tape.mul(d, s);
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    })
}

pub fn central_fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Compares the adjoint gradient of a scaled MLP window loss with central
/// differences on `samples` randomly chosen weights. Returns the number of
/// informative weights and the worst relative error among them.
pub fn mlp_window_check(seed: u64, samples: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = MlpParams::glorot(3, Activation::Tanh, &mut rng);
    let stats = NormStats::new(vec![0.0, 0.1, -0.5], vec![1.0, 0.4, 0.5], 2.0).unwrap();
    let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.2).collect();
    let obs: Vec<Vec<f64>> = times
        .iter()
        .map(|t| {
            vec![
                0.8 * (-t).exp(),
                0.1 + 0.3 * (1.0 - (-t).exp()),
                0.5 * (2.0 * t).cos(),
            ]
        })
        .collect();
    let ranges = stats.ranges();
    let obs_m = Tensor::from_fn(obs.len(), 3, |r, c| obs[r][c]);
    let inv = Tensor::from_fn(obs.len(), 3, |_, c| 1.0 / ranges[c]);
    let cfg = SolverConfig::with_rtol(1e-10);
    let loss = |theta: &[f64]| {
        grad(theta, None, |tape, p| {
            let y0 = tape.constant_vector(&obs[0]);
            let make = |th: &[f64]| {
                MlpField::new(
                    MlpParams {
                        theta: th.to_vec(),
                        ..template.clone()
                    },
                    stats.clone(),
                )
            };
            let (y, _) = ode_solve_node(tape, make, p, y0, &times, &cfg)
                .map_err(|e| AdError::Solver(e.to_string()))?;
            let o = tape.constant(obs_m.clone());
            let d = tape.sub(y, o);
            let s = tape.constant(inv.clone());
            let d = tape.mul(d, s);
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        })
        .unwrap()
    };
    let theta = template.theta.clone();
    let (_, g) = loss(&theta);
    let (mut checked, mut worst) = (0, 0.0f64);
    for _ in 0..samples {
        let i = rng.random_range(0..theta.len());
        let h = 1e-5;
        let (mut a, mut b) = (theta.clone(), theta.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (loss(&a).0 - loss(&b).0) / (2.0 * h);
        if g[i].abs().max(fd.abs()) < 1e-9 {
            continue;
        }
        worst = worst.max(rel_err(g[i], fd));
        checked += 1;
    }
    (checked, worst)
}

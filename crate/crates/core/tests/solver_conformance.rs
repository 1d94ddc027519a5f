//! ESDIRK integrator against an independent Rosenbrock integration and the
//! structural properties of stiff kinetics.

mod common;

use common::ros2;
use nalgebra::{DMatrix, DVector};
use stiffkin::scheme::bundled;
use stiffkin::solver::{
    generate_dataset, integrate, integrate_recorded, MassActionField, SolverConfig, VectorField,
};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn robertson_matches_rosenbrock_oracle() {
    let s = bundled("robertson").unwrap();
    let cfg = SolverConfig::data_generation();
    let times = s.time_grid.unwrap().times();
    let coarse = ros2(&s, &s.initial, &times, 4000);
    let fine = ros2(&s, &s.initial, &times, 8000);
    let ours = generate_dataset(&s, &cfg).unwrap();
    assert_eq!((ours.n_times(), ours.n_species()), (50, 3));
    let mut worst: f64 = 0.0;
    for i in 0..times.len() {
        for j in 0..3 {
            if fine[i][j].abs() <= cfg.atol {
                continue;
            }
            // The oracle itself must be converged well below the tolerance.
            assert!(
                rel(coarse[i][j], fine[i][j]) < 1e-7,
                "oracle unconverged at t={} species {j}",
                times[i]
            );
            worst = worst.max(rel(ours.states[i][j], fine[i][j]));
        }
    }
    assert!(worst <= 1e-5, "worst relative deviation {worst:e}");
}

#[test]
fn robertson_conserves_mass() {
    let s = bundled("robertson").unwrap();
    for cfg in [SolverConfig::data_generation(), SolverConfig::training()] {
        let tr = generate_dataset(&s, &cfg).unwrap();
        assert!((tr.states[0][0] - 1.0).abs() < 1e-12);
        for y in &tr.states {
            let total: f64 = y.iter().sum();
            assert!((total - 1.0).abs() <= 1e-8, "sum {total}");
        }
    }
}

#[test]
fn pollu_conserves_element_balances() {
    // Sulfur (SO2 + SO4) and nitrogen-bearing totals are fixed by the stoichiometry.
    let s = bundled("pollu").unwrap();
    let st = s.net_stoichiometry_f64();
    let tr = generate_dataset(&s, &SolverConfig::data_generation()).unwrap();
    assert_eq!(tr.n_times(), 100);
    assert!(tr
        .states
        .iter()
        .flatten()
        .all(|v| v.is_finite() && *v >= 0.0));
    let idx = |n: &str| s.species_index(n).unwrap();
    let mut sulfur = vec![0.0; s.n_species()];
    sulfur[idx("SO2")] = 1.0;
    sulfur[idx("SO4")] = 1.0;
    let w = DVector::from_vec(sulfur);
    assert!(
        (st.transpose() * &w).iter().all(|v| *v == 0.0),
        "sulfur is not a left null vector"
    );
    let q0: f64 = w.iter().zip(&tr.states[0]).map(|(a, b)| a * b).sum();
    for y in &tr.states {
        let q: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
        assert!((q - q0).abs() <= 1e-8 * q0);
    }
}

#[test]
fn aoxid_initial_state() {
    let s = bundled("aoxid").unwrap();
    let tr = generate_dataset(&s, &SolverConfig::data_generation()).unwrap();
    assert_eq!(tr.n_times(), 100);
    assert_eq!(tr.states[0][s.species_index("TOY").unwrap()], 3.10e11);
}

struct Decay;

impl VectorField for Decay {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        out[0] = -y[0];
    }
    fn jacobian(&self, _: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -1.0)
    }
}

#[test]
fn decay_error_falls_with_tolerance() {
    let exact = (-1f64).exp();
    let mut errs = Vec::new();
    for rtol in [1e-3, 1e-5, 1e-7, 1e-9] {
        let cfg = SolverConfig::with_rtol(rtol);
        let tr = integrate(&Decay, &[1.0], &[0.0, 1.0], &cfg).unwrap();
        let e = (tr.states[1][0] - exact).abs();
        assert!(e <= 10.0 * rtol * exact, "rtol {rtol}: error {e:e}");
        errs.push(e);
    }
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] / 10.0 || w[1] < 1e-14, "errors {errs:?}");
    }
    let tr = integrate(&Decay, &[1.0], &[0.0, 1.0], &SolverConfig::training()).unwrap();
    assert!((tr.states[1][0] - 0.367879).abs() < 1e-6);
}

fn rk4(f: &dyn VectorField, y0: &[f64], t_end: f64, steps: usize) -> Vec<f64> {
    let n = y0.len();
    let h = t_end / steps as f64;
    let mut y = y0.to_vec();
    let ev = |y: &[f64]| {
        let mut o = vec![0.0; n];
        f.eval(y, &mut o);
        o
    };
    for _ in 0..steps {
        let k1 = ev(&y);
        let k2 = ev(&y
            .iter()
            .zip(&k1)
            .map(|(a, b)| a + 0.5 * h * b)
            .collect::<Vec<_>>());
        let k3 = ev(&y
            .iter()
            .zip(&k2)
            .map(|(a, b)| a + 0.5 * h * b)
            .collect::<Vec<_>>());
        let k4 = ev(&y
            .iter()
            .zip(&k3)
            .map(|(a, b)| a + h * b)
            .collect::<Vec<_>>());
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            break;
        }
    }
    y
}

#[test]
fn robertson_is_stiff_for_explicit_methods() {
    let s = bundled("robertson").unwrap();
    let f = MassActionField::new(&s, s.rate_coefficients());
    let cfg = SolverConfig::training();
    let sol = integrate_recorded(&f, &s.initial, &[0.0, 1e5], &cfg).unwrap();
    let steps = sol.stats.accepted + sol.stats.rejected;
    assert!(steps < cfg.max_steps);
    let y = &sol.trajectory.states[1];
    assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    let explicit = rk4(&f, &s.initial, 1e5, steps);
    let broke = explicit.iter().any(|v| !v.is_finite() || v.abs() > 1e6)
        || explicit.iter().zip(y).any(|(a, b)| (a - b).abs() > 1e-2);
    assert!(
        broke,
        "RK4 with {steps} steps unexpectedly tracked the solution: {explicit:?}"
    );
}

#[test]
fn repeated_integrations_are_bit_identical() {
    let s = bundled("pollu").unwrap();
    let a = generate_dataset(&s, &SolverConfig::training()).unwrap();
    let b = generate_dataset(&s, &SolverConfig::training()).unwrap();
    for (x, y) in a.states.iter().flatten().zip(b.states.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

use nalgebra::{DMatrix, DVector};

use super::trajectory::{Provenance, Trajectory};
use super::{InitialStep, SolverConfig, SolverError, VectorField};

/// Butcher tableau of a four-stage ESDIRK method with an explicit first
/// stage and a constant diagonal `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tableau {
    pub gamma: f64,
    /// Strictly lower part plus diagonal; row 0 is the explicit stage.
    pub a: [[f64; 4]; 4],
    pub c: [f64; 4],
    /// Weights of the embedded solution used for error control.
    pub b_embedded: [f64; 4],
}

impl Tableau {
    /// Weights of the propagated solution (the last row, stiffly accurate).
    pub fn b(&self) -> [f64; 4] {
        self.a[3]
    }
}

const G: f64 = 0.43586652150;

const NEWTON_STALL_ACCEPT: f64 = 0.1;

/// Kværnø's L-stable 3(2) pair. The third stage doubles as the embedded
/// second-order solution, so the error estimate is `Z4 - Z3`.
pub const KVAERNO3: Tableau = Tableau {
    gamma: G,
    a: [
        [0.0, 0.0, 0.0, 0.0],
        [G, G, 0.0, 0.0],
        [
            (-4.0 * G * G + 6.0 * G - 1.0) / (4.0 * G),
            (-2.0 * G + 1.0) / (4.0 * G),
            G,
            0.0,
        ],
        [
            (6.0 * G - 1.0) / (12.0 * G),
            -1.0 / ((24.0 * G - 12.0) * G),
            (-6.0 * G * G + 6.0 * G - 1.0) / (6.0 * G - 3.0),
            G,
        ],
    ],
    c: [0.0, 2.0 * G, 1.0, 1.0],
    b_embedded: [
        (-4.0 * G * G + 6.0 * G - 1.0) / (4.0 * G),
        (-2.0 * G + 1.0) / (4.0 * G),
        G,
        0.0,
    ],
};

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_failures: usize,
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
    /// Accepted steps in which a negative component was reset to zero.
    pub clamped_steps: usize,
}

/// Accepted-step history needed by the discrete adjoint.
#[derive(Debug, Clone, Default)]
pub struct Recording {
    /// Step endpoints `t_0 .. t_N`.
    pub t: Vec<f64>,
    /// States at the endpoints, after clamping.
    pub y: Vec<Vec<f64>>,
    /// `f(y)` at each endpoint.
    pub f: Vec<Vec<f64>>,
    /// Converged implicit stages `Z2, Z3, Z4` of each step (before clamping).
    pub stages: Vec<[Vec<f64>; 3]>,
    /// For each output time: the step it falls in (None for the initial time)
    /// and the normalized position inside that step.
    pub outputs: Vec<(Option<usize>, f64)>,
    pub nonnegative: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub recording: Option<Recording>,
    pub stats: SolveStats,
}

/// Hermite basis weights at `theta`: (y0, h·f0, y1, h·f1).
pub(crate) fn hermite_weights(theta: f64) -> [f64; 4] {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    [
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + theta,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    ]
}

/// Which bound, if any, the monotone clip selected for one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Clip {
    None,
    Start,
    End,
}

/// Interpolates one component. On segments where both endpoint slopes agree
/// with the secant, the value is clipped to the endpoint range.
pub(crate) fn hermite_component(
    y0: f64,
    f0: f64,
    y1: f64,
    f1: f64,
    h: f64,
    w: &[f64; 4],
) -> (f64, Clip) {
    let v = w[0] * y0 + w[1] * h * f0 + w[2] * y1 + w[3] * h * f1;
    let d = y1 - y0;
    if d * f0 >= 0.0 && d * f1 >= 0.0 {
        let (lo, lo_clip, hi, hi_clip) = if y0 <= y1 {
            (y0, Clip::Start, y1, Clip::End)
        } else {
            (y1, Clip::End, y0, Clip::Start)
        };
        if v < lo {
            return (lo, lo_clip);
        }
        if v > hi {
            return (hi, hi_clip);
        }
    }
    (v, Clip::None)
}

fn wrms(err: &[f64], y0: &[f64], y1: &[f64], cfg: &SolverConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

struct Integrator<'a, F: VectorField + ?Sized> {
    field: &'a F,
    cfg: &'a SolverConfig,
    tab: &'a Tableau,
    stats: SolveStats,
}

enum StepOutcome {
    Done { stages: [Vec<f64>; 3], err: f64 },
    NewtonFailed,
}

impl<F: VectorField + ?Sized> Integrator<'_, F> {
    fn eval(&mut self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.field.eval(y, &mut out);
        self.stats.rhs_evals += 1;
        out
    }

    fn initial_step(&mut self, t0: f64, t1: f64, y0: &[f64], f0: &[f64]) -> f64 {
        let span = t1 - t0;
        match self.cfg.initial_step {
            InitialStep::Fixed(h) => h.min(span),
            InitialStep::Auto => {
                let mut h = 1e-4 * span;
                let floor = 1e-14 * span;
                while h > floor {
                    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h * f).collect();
                    let f1 = self.eval(&y1);
                    let est: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| 0.5 * h * (a - b)).collect();
                    let e = wrms(&est, y0, &y1, self.cfg);
                    if e.is_finite() && e <= 1.0 {
                        break;
                    }
                    h *= 0.1;
                }
                h.max(floor)
            }
        }
    }

    /// Attempts one step of size `h` from `y` with `f(y) = f0`.
    fn attempt(&mut self, y: &[f64], f0: &[f64], h: f64, jac: &DMatrix<f64>) -> StepOutcome {
        let n = y.len();
        let tab = self.tab;
        let hg = h * tab.gamma;
        let mut m = -jac * hg;
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        let lu = m.lu();

        let mut k: Vec<Vec<f64>> = vec![f0.to_vec()];
        let mut z_out: Vec<Vec<f64>> = Vec::with_capacity(3);
        for stage in 1..4 {
            let mut base = y.to_vec();
            for (j, kj) in k.iter().enumerate() {
                let a = h * tab.a[stage][j];
                if a != 0.0 {
                    base.iter_mut().zip(kj).for_each(|(b, kv)| *b += a * kv);
                }
            }
            let prev = k.last().unwrap();
            let mut z: Vec<f64> = base.iter().zip(prev).map(|(b, kv)| b + hg * kv).collect();
            let mut converged = false;
            let mut last_norm = f64::INFINITY;
            for _ in 0..self.cfg.newton_max_iters {
                let fz = self.eval(&z);
                let r = DVector::from_iterator(n, (0..n).map(|i| z[i] - base[i] - hg * fz[i]));
                let Some(delta) = lu.solve(&r) else {
                    break;
                };
                let mut norm: f64 = 0.0;
                for i in 0..n {
                    z[i] -= delta[i];
                    norm = norm.max(delta[i].abs() / (self.cfg.atol + self.cfg.rtol * z[i].abs()));
                }
                if !norm.is_finite() {
                    break;
                }
                let rate = norm / last_norm;
                if norm <= self.cfg.newton_tol
                    || (rate > 0.0
                        && rate < 1.0
                        && rate / (1.0 - rate) * norm <= self.cfg.newton_tol)
                {
                    converged = true;
                    break;
                }
                // Stalled at the rounding floor: fine once far below the error tolerance.
                if rate >= 1.0 && last_norm.is_finite() {
                    converged = norm <= NEWTON_STALL_ACCEPT;
                    break;
                }
                converged = norm <= NEWTON_STALL_ACCEPT;
                last_norm = norm;
            }
            if !converged || z.iter().any(|v| !v.is_finite()) {
                self.stats.newton_failures += 1;
                return StepOutcome::NewtonFailed;
            }
            let kz: Vec<f64> = z.iter().zip(&base).map(|(zv, b)| (zv - b) / hg).collect();
            k.push(kz);
            z_out.push(z);
        }
        // Filtered through (I - h gamma J)^-1 so very stiff components do not
        // dominate the estimate.
        let raw = DVector::from_iterator(n, z_out[2].iter().zip(&z_out[1]).map(|(a, b)| a - b));
        let err: Vec<f64> = match lu.solve(&raw) {
            Some(v) => v.iter().copied().collect(),
            None => raw.iter().copied().collect(),
        };
        let e = wrms(&err, y, &z_out[2], self.cfg);
        let stages: [Vec<f64>; 3] = z_out.try_into().expect("three implicit stages");
        StepOutcome::Done { stages, err: e }
    }
}

/// Integrates `field` from `y0` at `times[0]`, returning states at `times`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    solve(field, y0, times, cfg, false).map(|s| s.trajectory)
}

/// Like [`integrate`], also keeping the history required by the adjoint.
pub fn integrate_recorded<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Solution, SolverError> {
    solve(field, y0, times, cfg, true)
}

fn solve<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
    record: bool,
) -> Result<Solution, SolverError> {
    cfg.validate()?;
    if y0.len() != field.dim() {
        return Err(SolverError::InvalidInput(format!(
            "initial state has {} entries, field has dimension {}",
            y0.len(),
            field.dim()
        )));
    }
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SolverError::InvalidInput(
            "output times must be strictly increasing".into(),
        ));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteState { t: times[0] });
    }
    let tab = &KVAERNO3;
    let mut it = Integrator {
        field,
        cfg,
        tab,
        stats: SolveStats::default(),
    };
    let (t0, t_end) = (times[0], *times.last().unwrap());

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f = it.eval(&y);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteState { t });
    }
    let mut h = it.initial_step(t0, t_end, &y, &f);
    let h_min = 1e-14 * (t_end - t0).max(t_end.abs());

    let mut out_states = vec![y.clone()];
    let mut rec = Recording {
        nonnegative: field.nonnegative(),
        ..Default::default()
    };
    if record {
        rec.t.push(t);
        rec.y.push(y.clone());
        rec.f.push(f.clone());
        rec.outputs.push((None, 0.0));
    }
    let mut next_out = 1;
    let mut err_prev: f64 = 1.0;
    let mut attempts = 0usize;

    while next_out < times.len() {
        if attempts >= cfg.max_steps {
            return Err(SolverError::StepLimitExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        attempts += 1;
        let remaining = t_end - t;
        let last = h >= remaining * (1.0 - 1e-12);
        let h_step = if last { remaining } else { h };
        let jac = field.jacobian(&y);
        it.stats.jacobian_evals += 1;
        match it.attempt(&y, &f, h_step, &jac) {
            StepOutcome::NewtonFailed => {
                it.stats.rejected += 1;
                h = h_step * 0.5;
                if h < h_min {
                    return Err(SolverError::NewtonDivergence { t, h });
                }
            }
            StepOutcome::Done { stages, err } if !(err <= 1.0) => {
                it.stats.rejected += 1;
                let fac = if err.is_finite() {
                    (0.9 * err.powf(-1.0 / 3.0)).max(0.2)
                } else {
                    0.2
                };
                h = h_step * fac;
                if h < h_min {
                    return Err(SolverError::NewtonDivergence { t, h });
                }
                drop(stages);
            }
            StepOutcome::Done { stages, err } => {
                let t_new = if last { t_end } else { t + h_step };
                let mut y_new = stages[2].clone();
                if field.nonnegative() && y_new.iter().any(|v| *v < 0.0) {
                    y_new.iter_mut().for_each(|v| *v = v.max(0.0));
                    it.stats.clamped_steps += 1;
                }
                let f_new = it.eval(&y_new);
                if y_new.iter().chain(&f_new).any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFiniteState { t: t_new });
                }
                let hh = t_new - t;
                while next_out < times.len()
                    && (times[next_out] <= t_new || (last && next_out == times.len() - 1))
                {
                    let theta = ((times[next_out] - t) / hh).clamp(0.0, 1.0);
                    let w = hermite_weights(theta);
                    let row: Vec<f64> = (0..y.len())
                        .map(|i| hermite_component(y[i], f[i], y_new[i], f_new[i], hh, &w).0)
                        .collect();
                    out_states.push(row);
                    if record {
                        rec.outputs.push((Some(rec.stages.len()), theta));
                    }
                    next_out += 1;
                }
                if record {
                    rec.t.push(t_new);
                    rec.y.push(y_new.clone());
                    rec.f.push(f_new.clone());
                    rec.stages.push(stages);
                }
                it.stats.accepted += 1;
                let e = err.max(1e-10);
                let fac = (0.9 * e.powf(-0.7 / 3.0) * err_prev.powf(0.4 / 3.0)).clamp(0.2, 5.0);
                err_prev = e;
                h = hh * fac;
                t = t_new;
                y = y_new;
                f = f_new;
            }
        }
    }

    let trajectory = Trajectory {
        times: times.to_vec(),
        states: out_states,
        provenance: Provenance::Fitted,
    };
    Ok(Solution {
        trajectory,
        recording: record.then_some(rec),
        stats: it.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(DMatrix<f64>);
    impl VectorField for Linear {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn eval(&self, y: &[f64], out: &mut [f64]) {
            let v = &self.0 * DVector::from_column_slice(y);
            out.copy_from_slice(v.as_slice());
        }
        fn jacobian(&self, _: &[f64]) -> DMatrix<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn tableau_order_conditions() {
        let t = KVAERNO3;
        let b = t.b();
        for i in 0..4 {
            let row: f64 = t.a[i].iter().sum();
            assert!((row - t.c[i]).abs() < 1e-14, "row {i}");
        }
        let dot = |u: &[f64; 4], v: &[f64; 4]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((dot(&b, &t.c) - 0.5).abs() < 1e-12);
        let c2 = t.c.map(|c| c * c);
        assert!((dot(&b, &c2) - 1.0 / 3.0).abs() < 1e-10);
        let ac: [f64; 4] = std::array::from_fn(|i| dot(&t.a[i], &t.c));
        assert!((dot(&b, &ac) - 1.0 / 6.0).abs() < 1e-10);
        let be = t.b_embedded;
        assert!((be.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((dot(&be, &t.c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exponential_decay() {
        let f = Linear(DMatrix::from_element(1, 1, -1.0));
        let cfg = SolverConfig::with_rtol(1e-8);
        let tr = integrate(&f, &[1.0], &[0.0, 0.5, 1.0], &cfg).unwrap();
        assert!((tr.states[2][0] - (-1.0f64).exp()).abs() < 1e-7);
        assert!((tr.states[1][0] - (-0.5f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn zero_field_keeps_initial_state() {
        let f = Linear(DMatrix::zeros(3, 3));
        let y0 = [0.3, -2.0, 7.5];
        let tr = integrate(&f, &y0, &[0.0, 1.0, 2.0, 10.0], &SolverConfig::training()).unwrap();
        for row in &tr.states {
            assert_eq!(row.as_slice(), &y0);
        }
    }

    #[test]
    fn hermite_reproduces_endpoints_and_clips() {
        let w0 = hermite_weights(0.0);
        let w1 = hermite_weights(1.0);
        assert_eq!(hermite_component(2.0, 5.0, 3.0, -1.0, 0.1, &w0).0, 2.0);
        assert_eq!(hermite_component(2.0, 5.0, 3.0, -1.0, 0.1, &w1).0, 3.0);
        // Steep slopes on a monotone segment overshoot without the clip.
        let w = hermite_weights(0.1);
        let (v, c) = hermite_component(0.0, 50.0, 1.0, 50.0, 1.0, &w);
        assert_eq!((v, c), (1.0, Clip::End));
    }

    #[test]
    fn reports_step_limit_and_bad_input() {
        let f = Linear(DMatrix::from_element(1, 1, -1.0));
        let mut cfg = SolverConfig::training();
        cfg.max_steps = 3;
        let err = integrate(&f, &[1.0], &[0.0, 100.0], &cfg).unwrap_err();
        assert!(matches!(err, SolverError::StepLimitExceeded { .. }));
        let err = integrate(&f, &[1.0], &[0.0, 0.0], &SolverConfig::training()).unwrap_err();
        assert!(matches!(err, SolverError::InvalidInput(_)));
        let err = integrate(&f, &[f64::NAN], &[0.0, 1.0], &SolverConfig::training()).unwrap_err();
        assert!(matches!(err, SolverError::NonFiniteState { .. }));
    }

    #[test]
    fn blow_up_is_reported() {
        struct Quad;
        impl VectorField for Quad {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, y: &[f64], out: &mut [f64]) {
                out[0] = y[0] * y[0];
            }
            fn jacobian(&self, y: &[f64]) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 2.0 * y[0])
            }
        }
        // y' = y², y(0) = 1 explodes at t = 1.
        let err = integrate(&Quad, &[1.0], &[0.0, 2.0], &SolverConfig::training()).unwrap_err();
        assert!(matches!(
            err,
            SolverError::NewtonDivergence { .. }
                | SolverError::NonFiniteState { .. }
                | SolverError::StepLimitExceeded { .. }
        ));
    }
}

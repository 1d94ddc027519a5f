use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::solver::{Provenance, Trajectory};

/// Coordinate in which samples are treated as evenly spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeAxis {
    Linear,
    Log10,
}

impl TimeAxis {
    pub fn map(self, t: f64) -> f64 {
        match self {
            TimeAxis::Linear => t,
            TimeAxis::Log10 => t.log10(),
        }
    }

    pub fn unmap(self, u: f64) -> f64 {
        match self {
            TimeAxis::Linear => u,
            TimeAxis::Log10 => 10f64.powf(u),
        }
    }

    /// `ds/dt` at `t`.
    pub fn rate(self, t: f64) -> f64 {
        match self {
            TimeAxis::Linear => 1.0,
            TimeAxis::Log10 => 1.0 / (t * std::f64::consts::LN_10),
        }
    }

    pub fn check(self, times: &[f64]) -> Result<(), PipelineError> {
        if self == TimeAxis::Log10 && times.iter().any(|t| *t <= 0.0) {
            return Err(PipelineError::Config(
                "log10 time axis needs strictly positive times".into(),
            ));
        }
        Ok(())
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() || d0 == 0.0 {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Monotone piecewise-cubic (Fritsch–Carlson) interpolation of `(x, y)`
/// evaluated at `xq`. Queries outside the knots are clamped to the ends.
pub fn pchip(x: &[f64], y: &[f64], xq: &[f64]) -> Vec<f64> {
    assert!(x.len() >= 2 && x.len() == y.len());
    let d = pchip_slopes(x, y);
    let n = x.len();
    xq.iter()
        .map(|&q| {
            let q = q.clamp(x[0], x[n - 1]);
            let k = match x.partition_point(|v| *v <= q) {
                0 => 0,
                p => (p - 1).min(n - 2),
            };
            let h = x[k + 1] - x[k];
            let s = (q - x[k]) / h;
            let (s2, s3) = (s * s, s * s * s);
            (2.0 * s3 - 3.0 * s2 + 1.0) * y[k]
                + (s3 - 2.0 * s2 + s) * h * d[k]
                + (-2.0 * s3 + 3.0 * s2) * y[k + 1]
                + (s3 - s2) * h * d[k + 1]
        })
        .collect()
}

/// Finite-difference time derivatives: central in the interior and
/// one-sided at both ends.
pub fn fd_derivatives(times: &[f64], states: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = times.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            let dt = times[b] - times[a];
            states[b]
                .iter()
                .zip(&states[a])
                .map(|(yb, ya)| (yb - ya) / dt)
                .collect()
        })
        .collect()
}

/// Densifies `traj` by `factor` with monotone cubic interpolation in the
/// `axis` coordinate (original knots are kept exactly) and returns the dense
/// trajectory with its finite-difference derivatives.
pub fn resample(
    traj: &Trajectory,
    factor: usize,
    axis: TimeAxis,
) -> Result<(Trajectory, Vec<Vec<f64>>), PipelineError> {
    if factor < 1 {
        return Err(PipelineError::Config(
            "interpolation factor must be at least 1".into(),
        ));
    }
    traj.validate()?;
    axis.check(&traj.times)?;
    let u: Vec<f64> = traj.times.iter().map(|t| axis.map(*t)).collect();
    let m = u.len();
    let mut uq = Vec::with_capacity((m - 1) * factor + 1);
    let mut tq = Vec::with_capacity(uq.capacity());
    for k in 0..m - 1 {
        tq.push(traj.times[k]);
        uq.push(u[k]);
        for j in 1..factor {
            let v = u[k] + (u[k + 1] - u[k]) * j as f64 / factor as f64;
            uq.push(v);
            tq.push(axis.unmap(v));
        }
    }
    tq.push(traj.times[m - 1]);
    uq.push(u[m - 1]);

    let ns = traj.n_species();
    let mut states = vec![vec![0.0; ns]; uq.len()];
    for s in 0..ns {
        let col = traj.column(s);
        let vals = pchip(&u, &col, &uq);
        for (i, v) in vals.into_iter().enumerate() {
            states[i][s] = v;
        }
    }
    for k in 0..m {
        states[k * factor] = traj.states[k].clone();
    }
    let derivs = fd_derivatives(&tq, &states);
    let dense = Trajectory::new(tq, states, Provenance::Resampled)?;
    Ok((dense, derivs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_data_has_exact_slope() {
        let tr = Trajectory::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![0.0], vec![2.0], vec![4.0]],
            Provenance::Fitted,
        )
        .unwrap();
        let (dense, d) = resample(&tr, 4, TimeAxis::Linear).unwrap();
        assert_eq!(dense.n_times(), 9);
        assert_eq!(dense.provenance, Provenance::Resampled);
        for row in &d {
            assert!((row[0] - 2.0).abs() < 1e-12);
        }
        assert_eq!(dense.states[4][0], 2.0);
    }

    #[test]
    fn factor_one_is_plain_finite_differences() {
        let tr = Trajectory::new(
            vec![0.0, 1.0, 3.0, 4.0],
            vec![vec![1.0], vec![2.0], vec![8.0], vec![9.0]],
            Provenance::Observed,
        )
        .unwrap();
        let (dense, d) = resample(&tr, 1, TimeAxis::Linear).unwrap();
        assert_eq!(dense.states, tr.states);
        assert_eq!(d[0][0], 1.0);
        assert_eq!(d[1][0], 7.0 / 3.0);
        assert_eq!(d[2][0], 7.0 / 3.0);
        assert_eq!(d[3][0], 1.0);
    }

    #[test]
    fn pchip_does_not_overshoot_a_step() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, 0.0, 1.0, 1.0, 1.0];
        let q: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        for v in pchip(&x, &y, &q) {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn log_axis_keeps_knots_and_spacing() {
        let tr = Trajectory::new(
            vec![1e-2, 1.0, 1e2],
            vec![vec![1.0], vec![0.5], vec![0.1]],
            Provenance::Fitted,
        )
        .unwrap();
        let (dense, _) = resample(&tr, 2, TimeAxis::Log10).unwrap();
        assert_eq!(dense.times.len(), 5);
        assert!((dense.times[1] - 0.1).abs() < 1e-15);
        assert_eq!(dense.times[2], 1.0);
        assert!(resample(
            &Trajectory::new(
                vec![0.0, 1.0],
                vec![vec![0.0], vec![1.0]],
                Provenance::Fitted
            )
            .unwrap(),
            2,
            TimeAxis::Log10
        )
        .is_err());
    }
}

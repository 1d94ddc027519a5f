use nalgebra::DMatrix;

use super::{PipelineError, TimeAxis};
use crate::models::NormStats;
use crate::solver::Trajectory;

fn same_grid(a: &Trajectory, b: &Trajectory) -> Result<(), PipelineError> {
    if a.times != b.times || a.n_species() != b.n_species() {
        return Err(PipelineError::GridMismatch);
    }
    Ok(())
}

/// Mean over all samples and species of `((pred - obs) / range)²`.
pub fn scaled_mse(
    pred: &Trajectory,
    obs: &Trajectory,
    stats: &NormStats,
) -> Result<f64, PipelineError> {
    same_grid(pred, obs)?;
    let r = stats.ranges();
    let mut s = 0.0;
    for (p, o) in pred.states.iter().zip(&obs.states) {
        for j in 0..r.len() {
            let d = (p[j] - o[j]) / r[j];
            s += d * d;
        }
    }
    Ok(s / (pred.n_times() * r.len()) as f64)
}

/// Difference operators on a sample grid.
///
/// `velocity · Y` gives first differences per unit of normalized time and
/// `acceleration · V` differences those again, with `u` the axis coordinate
/// and `span` the full extent of `u` over the dataset.
#[derive(Debug, Clone)]
pub struct FdOperators {
    pub velocity: DMatrix<f64>,
    pub acceleration: DMatrix<f64>,
}

pub fn fd_operators(times: &[f64], axis: TimeAxis, span: f64) -> FdOperators {
    let u: Vec<f64> = times.iter().map(|t| axis.map(*t)).collect();
    let m = u.len();
    let mut vel = DMatrix::zeros(m.saturating_sub(1), m);
    for i in 0..m.saturating_sub(1) {
        let s = span / (u[i + 1] - u[i]);
        vel[(i, i)] = -s;
        vel[(i, i + 1)] = s;
    }
    let mut acc = DMatrix::zeros(m.saturating_sub(2), m.saturating_sub(1));
    for i in 0..m.saturating_sub(2) {
        let s = span / (0.5 * (u[i + 2] - u[i]));
        acc[(i, i)] = -s;
        acc[(i, i + 1)] = s;
    }
    FdOperators {
        velocity: vel,
        acceleration: acc,
    }
}

fn scaled_matrix(tr: &Trajectory, ranges: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(tr.n_times(), ranges.len(), |i, j| {
        tr.states[i][j] / ranges[j]
    })
}

/// Mean squared gaps of range-scaled velocities and accelerations.
///
/// Velocities are taken per unit of normalized time along `axis`, so on a
/// linear axis they carry the `range / t_scale` scaling of the MLP output.
pub fn derivative_losses(
    pred: &Trajectory,
    obs: &Trajectory,
    stats: &NormStats,
    axis: TimeAxis,
) -> Result<(f64, f64), PipelineError> {
    same_grid(pred, obs)?;
    if pred.n_times() < 3 {
        return Err(PipelineError::TooShort(format!(
            "derivative losses need 3 samples, got {}",
            pred.n_times()
        )));
    }
    axis.check(&pred.times)?;
    let span = match axis {
        TimeAxis::Linear => stats.t_scale,
        TimeAxis::Log10 => axis.map(*pred.times.last().unwrap()) - axis.map(pred.times[0]),
    };
    let ops = fd_operators(&pred.times, axis, span);
    let r = stats.ranges();
    let d = scaled_matrix(pred, &r) - scaled_matrix(obs, &r);
    let v = &ops.velocity * d;
    let a = &ops.acceleration * &v;
    Ok((v.map(|x| x * x).mean(), a.map(|x| x * x).mean()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Provenance;

    fn tr(t: &[f64], y: &[f64]) -> Trajectory {
        Trajectory::new(
            t.to_vec(),
            y.iter().map(|v| vec![*v]).collect(),
            Provenance::Fitted,
        )
        .unwrap()
    }

    fn unit_stats(t_scale: f64) -> NormStats {
        NormStats::new(vec![0.0], vec![1.0], t_scale).unwrap()
    }

    #[test]
    fn scaled_mse_examples() {
        let s = NormStats::new(vec![0.0], vec![2.0], 1.0).unwrap();
        let a = tr(&[0.0, 1.0], &[1.0, 3.0]);
        assert_eq!(scaled_mse(&a, &a, &s).unwrap(), 0.0);
        let b = tr(&[0.0, 1.0], &[3.0, 5.0]);
        assert_eq!(scaled_mse(&b, &a, &s).unwrap(), 1.0);
        let c = tr(&[0.0, 2.0], &[3.0, 5.0]);
        assert_eq!(scaled_mse(&c, &a, &s), Err(PipelineError::GridMismatch));
    }

    #[test]
    fn offsets_do_not_affect_velocity() {
        let t = [0.0, 0.5, 1.0, 2.0];
        let p = tr(&t, &[1.0, 2.0, 3.0, 5.0]);
        let o = tr(&t, &[0.0, 1.0, 2.0, 4.0]);
        let (l1, l2) = derivative_losses(&p, &o, &unit_stats(2.0), TimeAxis::Linear).unwrap();
        assert!(l1.abs() < 1e-24 && l2.abs() < 1e-24);
    }

    #[test]
    fn curvature_gap_on_three_points() {
        // t², against t, on t = 0, 1, 2 with t_scale 2: the normalized second
        // derivative of t² is 2·t_scale² = 8 and that of t is 0.
        let t = [0.0, 1.0, 2.0];
        let p = tr(&t, &[0.0, 1.0, 4.0]);
        let o = tr(&t, &[0.0, 1.0, 2.0]);
        let (l1, l2) = derivative_losses(&p, &o, &unit_stats(2.0), TimeAxis::Linear).unwrap();
        assert_eq!(l2, 64.0);
        // Velocities (2, 6) against (2, 2).
        assert_eq!(l1, 8.0);
        assert!(derivative_losses(
            &tr(&[0.0, 1.0], &[0.0, 1.0]),
            &tr(&[0.0, 1.0], &[0.0, 1.0]),
            &unit_stats(1.0),
            TimeAxis::Linear
        )
        .is_err());
    }
}

use nalgebra::{DMatrix, DVector};

use super::esdirk::{hermite_component, hermite_weights, Clip, KVAERNO3};
use super::{
    integrate_recorded, ParametricField, Recording, SolveStats, SolverConfig, SolverError,
};
use crate::autodiff::{AdError, CustomOp, Tape, Tensor, Var};

/// Gradients of a scalar loss with respect to the initial state and the
/// field parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub y0_bar: Vec<f64>,
    pub params_bar: Vec<f64>,
}

fn add_tr_mul(acc: &mut [f64], m: &DMatrix<f64>, v: &[f64]) {
    let r = m.tr_mul(&DVector::from_column_slice(v));
    acc.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
}

/// Discrete adjoint of a recorded solve.
///
/// `out_bar[k]` is the cotangent of the state returned at output time `k`.
/// Step sizes and the monotone-clip branch are held fixed, so the result is
/// the exact derivative of the computation that produced the recording.
pub fn adjoint<F: ParametricField + ?Sized>(
    field: &F,
    rec: &Recording,
    out_bar: &[Vec<f64>],
) -> Result<AdjointResult, SolverError> {
    let n = field.dim();
    let steps = rec.stages.len();
    if out_bar.len() != rec.outputs.len() || out_bar.iter().any(|g| g.len() != n) {
        return Err(SolverError::InvalidInput(
            "cotangent shape does not match the recorded outputs".into(),
        ));
    }
    let tab = &KVAERNO3;
    let mut ybar = vec![vec![0.0; n]; steps + 1];
    let mut fbar = vec![vec![0.0; n]; steps + 1];
    let mut pbar = vec![0.0; field.n_params()];

    for (g, &(step, theta)) in out_bar.iter().zip(&rec.outputs) {
        let Some(s) = step else {
            ybar[0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            continue;
        };
        let hh = rec.t[s + 1] - rec.t[s];
        let w = hermite_weights(theta);
        for i in 0..n {
            if g[i] == 0.0 {
                continue;
            }
            let (_, clip) = hermite_component(
                rec.y[s][i],
                rec.f[s][i],
                rec.y[s + 1][i],
                rec.f[s + 1][i],
                hh,
                &w,
            );
            match clip {
                Clip::Start => ybar[s][i] += g[i],
                Clip::End => ybar[s + 1][i] += g[i],
                Clip::None => {
                    ybar[s][i] += w[0] * g[i];
                    fbar[s][i] += w[1] * hh * g[i];
                    ybar[s + 1][i] += w[2] * g[i];
                    fbar[s + 1][i] += w[3] * hh * g[i];
                }
            }
        }
    }

    // The endpoint derivative f_n = f(y_n) is closed once all its uses are in.
    let close_endpoint =
        |k: usize, ybar: &mut Vec<Vec<f64>>, fbar: &[Vec<f64>], pbar: &mut Vec<f64>| {
            if fbar[k].iter().any(|v| *v != 0.0) {
                let j = field.jacobian(&rec.y[k]);
                add_tr_mul(&mut ybar[k], &j, &fbar[k]);
                field.vjp_params(&rec.y[k], &fbar[k], pbar);
            }
        };

    close_endpoint(steps, &mut ybar, &fbar, &mut pbar);
    for s in (0..steps).rev() {
        let h = rec.t[s + 1] - rec.t[s];
        let hg = h * tab.gamma;
        let z = &rec.stages[s];
        let mut kbar = vec![vec![0.0; n]; 4];
        let mut zbar = ybar[s + 1].clone();
        if rec.nonnegative {
            for i in 0..n {
                if z[2][i] < 0.0 {
                    zbar[i] = 0.0;
                }
            }
        }
        let mut stage_bar = [vec![0.0; n], vec![0.0; n], zbar];
        for stage in (1..4).rev() {
            let zi = &z[stage - 1];
            let j = field.jacobian(zi);
            let mut total = std::mem::take(&mut stage_bar[stage - 1]);
            add_tr_mul(&mut total, &j, &kbar[stage]);
            let mut m = -&j * hg;
            for d in 0..n {
                m[(d, d)] += 1.0;
            }
            let w = m
                .transpose()
                .lu()
                .solve(&DVector::from_vec(total))
                .ok_or(SolverError::SingularAdjoint { t: rec.t[s] })?;
            ybar[s].iter_mut().zip(w.iter()).for_each(|(a, b)| *a += b);
            for jdx in 0..stage {
                let a = h * tab.a[stage][jdx];
                if a != 0.0 {
                    kbar[jdx]
                        .iter_mut()
                        .zip(w.iter())
                        .for_each(|(k, wv)| *k += a * wv);
                }
            }
            let pv: Vec<f64> = kbar[stage]
                .iter()
                .zip(w.iter())
                .map(|(k, wv)| k + hg * wv)
                .collect();
            field.vjp_params(zi, &pv, &mut pbar);
        }
        fbar[s].iter_mut().zip(&kbar[0]).for_each(|(a, b)| *a += b);
        close_endpoint(s, &mut ybar, &fbar, &mut pbar);
    }

    Ok(AdjointResult {
        y0_bar: ybar.swap_remove(0),
        params_bar: pbar,
    })
}

struct OdeSolveOp<F> {
    field: F,
    rec: Recording,
    n_params: usize,
}

impl<F: ParametricField> CustomOp for OdeSolveOp<F> {
    fn name(&self) -> &'static str {
        "ode_solve"
    }

    fn backward(&self, out_grad: &Tensor) -> Result<Vec<Tensor>, AdError> {
        let rows: Vec<Vec<f64>> = (0..out_grad.nrows())
            .map(|r| out_grad.row(r).iter().copied().collect())
            .collect();
        let res =
            adjoint(&self.field, &self.rec, &rows).map_err(|e| AdError::Solver(e.to_string()))?;
        Ok(vec![
            Tensor::from_column_slice(self.n_params, 1, &res.params_bar),
            Tensor::from_column_slice(res.y0_bar.len(), 1, &res.y0_bar),
        ])
    }
}

/// Records an ODE solve on `tape`. `theta` and `y0` are column vectors; the
/// output is a `times × species` matrix whose backward pass is the discrete
/// adjoint.
pub fn ode_solve_node<'a, F, M>(
    tape: &mut Tape<'a>,
    make_field: M,
    theta: Var,
    y0: Var,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<(Var, SolveStats), SolverError>
where
    F: ParametricField + 'a,
    M: FnOnce(&[f64]) -> F,
{
    let field = make_field(tape.value(theta).as_slice());
    let y0v: Vec<f64> = tape.value(y0).iter().copied().collect();
    let sol = integrate_recorded(&field, &y0v, times, cfg)?;
    let states = &sol.trajectory.states;
    let value = Tensor::from_fn(states.len(), field.dim(), |r, c| states[r][c]);
    let n_params = field.n_params();
    let op = OdeSolveOp {
        field,
        rec: sol.recording.expect("recorded solve"),
        n_params,
    };
    Ok((tape.custom(&[theta, y0], value, Box::new(op)), sol.stats))
}

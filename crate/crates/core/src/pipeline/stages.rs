use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fd_operators, resample, window_ranges, Adam, Annealer, PipelineError, TimeAxis, TrainConfig,
    WindowSpec,
};
use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::kinetics::{CrnnParams, Network, CLAMP_FLOOR};
use crate::models::{MlpField, MlpParams, NormStats};
use crate::scheme::ReactionScheme;
use crate::solver::{integrate, ode_solve_node, CrnnField, Provenance, SolverConfig, Trajectory};

/// Loss and gradient of one window, or the reason it could not be evaluated.
pub type WindowResult = Result<(f64, Vec<f64>), String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epochs: usize,
    /// Mean window loss per epoch, before that epoch's update.
    pub loss_curve: Vec<f64>,
    pub lr_curve: Vec<f64>,
    pub best_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Anneal, retry and skip events.
    pub events: Vec<String>,
    pub skipped_windows: usize,
    pub wall_time_s: f64,
}

/// RNG stream for one purpose under a run seed.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub(crate) const STREAM_MLP: u64 = 1;
pub(crate) const STREAM_CRNN: u64 = 2;

/// RNG for CRNN initialization under a run seed, independent of the stream
/// that initializes the MLP.
pub fn crnn_init_rng(seed: u64) -> ChaCha8Rng {
    rng_for(seed, STREAM_CRNN)
}

/// Full-batch Adam with plateau annealing over `epochs` epochs.
///
/// `eval` returns one result per window for a parameter vector. When a
/// window fails, the previous update is redone with the learning rate halved
/// (up to three times); windows that still fail are skipped for that epoch.
/// Returns the parameters with the lowest observed loss.
pub fn optimize<F>(
    stage: &str,
    theta0: Vec<f64>,
    frozen: Option<&[bool]>,
    epochs: usize,
    cfg: &TrainConfig,
    eval: F,
) -> Result<(Vec<f64>, StageReport), PipelineError>
where
    F: Fn(&[f64]) -> Vec<WindowResult>,
{
    let start = Instant::now();
    let n = theta0.len();
    let mut theta = theta0;
    let mut adam = Adam::new(n, cfg.learning_rate);
    let mut annealer = Annealer::new(epochs, cfg.anneal_patience_fraction, cfg.anneal_factor);
    let mut report = StageReport {
        stage: stage.to_string(),
        epochs,
        loss_curve: Vec::with_capacity(epochs),
        lr_curve: Vec::with_capacity(epochs),
        best_loss: None,
        best_epoch: None,
        events: Vec::new(),
        skipped_windows: 0,
        wall_time_s: 0.0,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut prev: Option<(Vec<f64>, Adam, Vec<f64>)> = None;

    let reduce = |results: &[WindowResult]| -> Option<(f64, Vec<f64>)> {
        let ok: Vec<&(f64, Vec<f64>)> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        if ok.is_empty() {
            return None;
        }
        let w = 1.0 / ok.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for (l, g) in ok {
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|v| *v *= w);
        if let Some(f) = frozen {
            grad.iter_mut()
                .zip(f)
                .filter(|(_, f)| **f)
                .for_each(|(g, _)| *g = 0.0);
        }
        Some((loss * w, grad))
    };
    let failed = |results: &[WindowResult]| -> Vec<usize> {
        results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_err())
            .map(|(i, _)| i)
            .collect()
    };

    for epoch in 0..epochs {
        let mut results = eval(&theta);
        let mut retries = 0;
        while !failed(&results).is_empty() && retries < 3 {
            let Some((th_prev, adam_prev, g_prev)) = prev.as_ref() else {
                break;
            };
            retries += 1;
            let scale = 0.5f64.powi(retries);
            report.events.push(format!(
                "epoch {epoch}: solver failure in windows {:?}; redoing previous update with lr x{scale}",
                failed(&results)
            ));
            theta = th_prev.clone();
            adam = adam_prev.clone();
            adam.step_scaled(&mut theta, g_prev, frozen, scale);
            results = eval(&theta);
        }
        let bad = failed(&results);
        if !bad.is_empty() {
            let why = results
                .iter()
                .find_map(|r| r.as_ref().err())
                .cloned()
                .unwrap_or_default();
            report
                .events
                .push(format!("epoch {epoch}: skipped windows {bad:?} ({why})"));
            report.skipped_windows += bad.len();
        }
        let Some((loss, grad)) = reduce(&results) else {
            let why = results
                .iter()
                .find_map(|r| r.as_ref().err())
                .cloned()
                .unwrap_or_default();
            return Err(PipelineError::Config(format!(
                "{stage}: every window failed at epoch {epoch}: {why}"
            )));
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PipelineError::NonFiniteLoss {
                stage: stage.to_string(),
                epoch,
            });
        }
        report.loss_curve.push(loss);
        report.lr_curve.push(adam.lr);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, theta.clone()));
            report.best_epoch = Some(epoch);
        }
        if let Some(f) = annealer.observe(loss) {
            adam.lr *= f;
            report.events.push(format!(
                "epoch {epoch}: learning rate annealed to {:e}",
                adam.lr
            ));
        }
        prev = Some((theta.clone(), adam.clone(), grad.clone()));
        adam.step(&mut theta, &grad, frozen);
    }
    if epochs > 0 {
        let results = eval(&theta);
        if failed(&results).is_empty() {
            if let Some((loss, _)) = reduce(&results) {
                if loss.is_finite() && best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    best = Some((loss, theta.clone()));
                    report.best_epoch = Some(epochs);
                }
            }
        }
    }
    report.best_loss = best.as_ref().map(|(l, _)| *l);
    report.wall_time_s = start.elapsed().as_secs_f64();
    let theta = best.map(|(_, t)| t).unwrap_or(theta);
    Ok((theta, report))
}

/// Span of the axis coordinate over the dataset, used to normalize
/// finite-difference derivatives.
fn axis_span(times: &[f64], stats: &NormStats, axis: TimeAxis) -> f64 {
    match axis {
        TimeAxis::Linear => stats.t_scale,
        TimeAxis::Log10 => axis.map(*times.last().unwrap()) - axis.map(times[0]),
    }
}

fn obs_block(obs: &Trajectory, r: &Range<usize>) -> Tensor {
    Tensor::from_fn(r.len(), obs.n_species(), |i, j| obs.states[r.start + i][j])
}

fn inv_range_block(rows: usize, ranges: &[f64]) -> Tensor {
    Tensor::from_fn(rows, ranges.len(), |_, j| 1.0 / ranges[j])
}

struct WindowLoss<'a> {
    obs: &'a Trajectory,
    ranges: Vec<f64>,
    alpha: f64,
    beta: f64,
    axis: TimeAxis,
    span: f64,
    solver: &'a SolverConfig,
}

impl WindowLoss<'_> {
    /// `L_y + α L_ẏ + β L_ÿ` for the predicted block `pred`.
    fn build(&self, tape: &mut Tape<'_>, pred: Var, r: &Range<usize>) -> Var {
        let o = tape.constant(obs_block(self.obs, r));
        let inv = tape.constant(inv_range_block(r.len(), &self.ranges));
        let d = tape.sub(pred, o);
        let d = tape.mul(d, inv);
        let sq = tape.square(d);
        let mut loss = tape.mean(sq);
        let m = r.len();
        if (self.alpha > 0.0 && m >= 2) || (self.beta > 0.0 && m >= 3) {
            let ops = fd_operators(&self.obs.times[r.clone()], self.axis, self.span);
            let vop = tape.constant(ops.velocity);
            let v = tape.matmul(vop, d);
            if self.alpha > 0.0 {
                let v2 = tape.square(v);
                let l1 = tape.mean(v2);
                let l1 = tape.scale(l1, self.alpha);
                loss = tape.add(loss, l1);
            }
            if self.beta > 0.0 && m >= 3 {
                let aop = tape.constant(ops.acceleration);
                let a = tape.matmul(aop, v);
                let a2 = tape.square(a);
                let l2 = tape.mean(a2);
                let l2 = tape.scale(l2, self.beta);
                loss = tape.add(loss, l2);
            }
        }
        loss
    }
}

fn finish(tape: &Tape<'_>, loss: Var, p: Var) -> WindowResult {
    let value = tape.scalar(loss);
    let g = tape.backward(loss).map_err(|e| e.to_string())?;
    let grad: Vec<f64> = g.wrt(p).iter().copied().collect();
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err("non-finite window loss".into());
    }
    Ok((value, grad))
}

fn solver_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Stage 1: fits a black-box MLP field to the observations.
pub fn stage1_fit(
    scheme: &ReactionScheme,
    obs: &Trajectory,
    cfg: &TrainConfig,
) -> Result<(MlpParams, NormStats, StageReport), PipelineError> {
    cfg.validate()?;
    obs.validate()?;
    if obs.n_species() != scheme.n_species() {
        return Err(PipelineError::Config(
            "observation width differs from the scheme".into(),
        ));
    }
    cfg.time_axis.check(&obs.times)?;
    let stats = crate::models::fit_norm_stats(obs);
    let mut rng = rng_for(cfg.seed, STREAM_MLP);
    let template = MlpParams::glorot(scheme.n_species(), cfg.activation, &mut rng);
    let (params, report) = stage1_from(&template, &stats, obs, cfg)?;
    Ok((params, stats, report))
}

/// Normalization and sample coordinates for integrating the black-box field
/// in the axis coordinate `s`. On a log10 axis `t_scale` becomes the span of
/// `s`, so `dy/ds = NN(ŷ) · range / span`.
pub fn mlp_frame(stats: &NormStats, times: &[f64], axis: TimeAxis) -> (NormStats, Vec<f64>) {
    let s: Vec<f64> = times.iter().map(|t| axis.map(*t)).collect();
    let mut st = stats.clone();
    if axis == TimeAxis::Log10 {
        st.t_scale = s[s.len() - 1] - s[0];
    }
    (st, s)
}

/// Stage 1 starting from given MLP parameters.
pub fn stage1_from(
    init: &MlpParams,
    stats: &NormStats,
    obs: &Trajectory,
    cfg: &TrainConfig,
) -> Result<(MlpParams, StageReport), PipelineError> {
    cfg.time_axis.check(&obs.times)?;
    let (fstats, s) = mlp_frame(stats, &obs.times, cfg.time_axis);
    let windows = window_ranges(obs.n_times(), cfg.window);
    let wl = WindowLoss {
        obs,
        ranges: stats.ranges(),
        alpha: cfg.weights.alpha,
        beta: cfg.weights.beta,
        axis: cfg.time_axis,
        span: axis_span(&obs.times, stats, cfg.time_axis),
        solver: &cfg.solver,
    };
    let eval = |theta: &[f64]| -> Vec<WindowResult> {
        windows
            .par_iter()
            .map(|r| {
                let mut tape = Tape::new();
                let p = tape.leaf_vector(theta);
                let y0 = tape.constant_vector(&obs.states[r.start]);
                let make = |th: &[f64]| {
                    MlpField::new(
                        MlpParams {
                            theta: th.to_vec(),
                            ..init.clone()
                        },
                        fstats.clone(),
                    )
                };
                let (pred, _) = ode_solve_node(&mut tape, make, p, y0, &s[r.clone()], wl.solver)
                    .map_err(solver_err)?;
                let loss = wl.build(&mut tape, pred, r);
                finish(&tape, loss, p)
            })
            .collect()
    };
    let (theta, report) = optimize(
        "stage1",
        init.theta.clone(),
        None,
        cfg.epochs.stage1,
        cfg,
        eval,
    )?;
    Ok((init.with_theta(theta)?, report))
}

/// Trajectory of a trained MLP on the observation grid. Each sample comes
/// from the window whose start is the latest one strictly before it; the
/// first sample is the observed initial state.
pub fn fit_trajectory(
    params: &MlpParams,
    stats: &NormStats,
    obs: &Trajectory,
    window: Option<WindowSpec>,
    axis: TimeAxis,
    solver: &SolverConfig,
) -> Result<Trajectory, PipelineError> {
    axis.check(&obs.times)?;
    let (fstats, s) = mlp_frame(stats, &obs.times, axis);
    let field = MlpField::new(params.clone(), fstats);
    let windows = window_ranges(obs.n_times(), window);
    let preds: Vec<Result<Trajectory, PipelineError>> = windows
        .par_iter()
        .map(|r| {
            integrate(&field, &obs.states[r.start], &s[r.clone()], solver).map_err(|e| {
                PipelineError::Solver {
                    stage: "stage1 fit".into(),
                    source: e,
                }
            })
        })
        .collect();
    let preds: Vec<Trajectory> = preds.into_iter().collect::<Result<_, _>>()?;
    let mut states = obs.states.clone();
    for i in 1..obs.n_times() {
        let w = windows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.start < i && i < r.end)
            .map(|(k, _)| k)
            .next_back()
            .expect("windows cover every sample");
        states[i] = preds[w].states[i - windows[w].start].clone();
    }
    Ok(Trajectory::new(
        obs.times.clone(),
        states,
        Provenance::Fitted,
    )?)
}

/// Stage 2 on a trajectory: resample, difference, then fit the CRNN rates
/// to the derivatives.
pub fn stage2_pretrain(
    scheme: &ReactionScheme,
    fitted: &Trajectory,
    stats: &NormStats,
    init: CrnnParams,
    cfg: &TrainConfig,
) -> Result<(CrnnParams, StageReport), PipelineError> {
    cfg.validate()?;
    let (dense, derivs) = resample(fitted, cfg.interpolation_factor, cfg.time_axis)?;
    stage2_from_pairs(
        scheme,
        &dense.states,
        &derivs,
        stats,
        init,
        cfg.epochs.stage2,
        cfg,
        "stage2",
    )
}

/// Supervised CRNN fit on collocation pairs `(y, dy/dt)`. Residuals are
/// scaled by `t_scale / range` per species.
#[allow(clippy::too_many_arguments)]
pub fn stage2_from_pairs(
    scheme: &ReactionScheme,
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
    stats: &NormStats,
    init: CrnnParams,
    epochs: usize,
    cfg: &TrainConfig,
    label: &str,
) -> Result<(CrnnParams, StageReport), PipelineError> {
    let (n, nr) = (scheme.n_species(), scheme.n_reactions());
    if states.len() != targets.len() || states.is_empty() {
        return Err(PipelineError::Config(
            "collocation states and targets differ in length".into(),
        ));
    }
    if init.len() != nr {
        return Err(PipelineError::Config(
            "initial parameters do not match the scheme".into(),
        ));
    }
    let base = collocation_base(scheme, states);
    let st = scheme.net_stoichiometry_f64().transpose();
    let tgt = Tensor::from_fn(states.len(), n, |i, j| targets[i][j]);
    let ranges = stats.ranges();
    let w = Tensor::from_fn(states.len(), n, |_, j| stats.t_scale / ranges[j]);
    let eval = |theta: &[f64]| -> Vec<WindowResult> {
        let mut tape = Tape::new();
        let p = tape.leaf_vector(theta);
        let loss = (|| -> Result<Var, AdError> {
            let row = tape.transpose(p);
            let b = tape.constant(base.clone());
            let z = tape.add_row(b, row);
            let r = tape.exp(z);
            let s = tape.constant(st.clone());
            let pred = tape.matmul(r, s);
            let t = tape.constant(tgt.clone());
            let d = tape.sub(pred, t);
            let wv = tape.constant(w.clone());
            let d = tape.mul(d, wv);
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        })();
        vec![loss
            .map_err(|e| e.to_string())
            .and_then(|l| finish(&tape, l, p))]
    };
    let frozen = init.frozen.clone();
    let (theta, report) = optimize(label, init.log_k, Some(&frozen), epochs, cfg, eval)?;
    Ok((CrnnParams::new(theta, frozen), report))
}

/// `ln` of the rate law without the coefficient, per collocation point and
/// reaction.
fn collocation_base(scheme: &ReactionScheme, states: &[Vec<f64>]) -> Tensor {
    Tensor::from_fn(states.len(), scheme.n_reactions(), |i, r| {
        let y = &states[i];
        let rx = &scheme.reactions[r];
        let mut v: f64 = rx
            .forward
            .iter()
            .map(|(&j, &c)| c as f64 * y[j].max(CLAMP_FLOOR).ln())
            .sum();
        if rx.ro2_scaled {
            let pool: f64 = scheme.ro2_pool.iter().map(|&j| y[j]).sum();
            v += pool.max(CLAMP_FLOOR).ln();
        }
        v
    })
}

/// Stage 3: refines CRNN coefficients through the stiff solver against the
/// observations.
pub fn stage3_finetune(
    scheme: &ReactionScheme,
    obs: &Trajectory,
    stats: &NormStats,
    init: CrnnParams,
    cfg: &TrainConfig,
) -> Result<(CrnnParams, StageReport), PipelineError> {
    cfg.validate()?;
    obs.validate()?;
    if init.len() != scheme.n_reactions() {
        return Err(PipelineError::Config(
            "initial parameters do not match the scheme".into(),
        ));
    }
    let net = Network::new(scheme);
    let windows = window_ranges(obs.n_times(), cfg.window);
    let wl = WindowLoss {
        obs,
        ranges: stats.ranges(),
        alpha: 0.0,
        beta: 0.0,
        axis: cfg.time_axis,
        span: 1.0,
        solver: &cfg.solver,
    };
    let eval = |theta: &[f64]| -> Vec<WindowResult> {
        windows
            .par_iter()
            .map(|r| {
                let mut tape = Tape::new();
                let p = tape.leaf_vector(theta);
                let y0 = tape.constant_vector(&obs.states[r.start]);
                let make = |th: &[f64]| CrnnField::from_network(net.clone(), th.to_vec());
                let (pred, _) =
                    ode_solve_node(&mut tape, make, p, y0, &obs.times[r.clone()], wl.solver)
                        .map_err(solver_err)?;
                let loss = wl.build(&mut tape, pred, r);
                finish(&tape, loss, p)
            })
            .collect()
    };
    let frozen = init.frozen.clone();
    let (theta, report) = optimize(
        "stage3",
        init.log_k,
        Some(&frozen),
        cfg.epochs.stage3,
        cfg,
        eval,
    )?;
    Ok((CrnnParams::new(theta, frozen), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::crnn_rhs;
    use crate::models::fit_norm_stats;
    use crate::scheme::bundled;
    use crate::solver::generate_dataset;

    #[test]
    fn zero_epochs_return_initialization() {
        let cfg = TrainConfig {
            epochs: super::super::StageEpochs {
                stage1: 0,
                stage2: 0,
                stage3: 0,
            },
            ..TrainConfig::default()
        };
        let (theta, rep) = optimize("x", vec![1.0, 2.0], None, 0, &cfg, |_| {
            vec![Ok((1.0, vec![0.0, 0.0]))]
        })
        .unwrap();
        assert_eq!(theta, vec![1.0, 2.0]);
        assert!(rep.loss_curve.is_empty());
    }

    #[test]
    fn optimize_skips_failing_windows_and_records_it() {
        let cfg = TrainConfig::default();
        let eval = |t: &[f64]| -> Vec<WindowResult> {
            vec![
                Ok((t[0] * t[0], vec![2.0 * t[0]])),
                if t[0] > 0.5 {
                    Err("boom".into())
                } else {
                    Ok((0.0, vec![0.0]))
                },
            ]
        };
        let (theta, rep) = optimize("x", vec![1.0], None, 5, &cfg, eval).unwrap();
        assert!(rep.skipped_windows > 0);
        assert!(rep.events.iter().any(|e| e.contains("skipped")));
        assert!(theta[0] < 1.0);
    }

    #[test]
    fn stage2_truth_is_a_stationary_point() {
        let s = bundled("pollu").unwrap();
        let obs = generate_dataset(&s, &SolverConfig::data_generation()).unwrap();
        let stats = fit_norm_stats(&obs);
        let truth = CrnnParams::truth(&s);
        let targets: Vec<Vec<f64>> = obs.states.iter().map(|y| crnn_rhs(&s, y, &truth)).collect();
        let cfg = TrainConfig::default();
        let (p, rep) = stage2_from_pairs(
            &s,
            &obs.states,
            &targets,
            &stats,
            truth.clone(),
            1,
            &cfg,
            "t",
        )
        .unwrap();
        assert!(rep.loss_curve[0] < 1e-20, "{}", rep.loss_curve[0]);
        for (a, b) in p.log_k.iter().zip(&truth.log_k) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

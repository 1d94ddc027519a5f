//! Acceptance suite. Prints one `criterion <id>: PASS|FAIL ...` line per
//! criterion and a summary. Lines go straight to stderr so they show up
//! without `--nocapture`. Failed criteria only fail the test when
//! `STIFFKIN_ACCEPTANCE_STRICT=1`; the suite itself must always run to the end.
//!
//! The training criteria run the `stiffkin` binary end to end and take tens of
//! minutes on a single core.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use stiffkin::kinetics::{crnn_rhs, jacobian, rhs, CrnnParams, Network};
use stiffkin::pipeline::{
    coeff_mae, crnn_init_rng, evaluate, init_crnn, parse_estimates_csv, InitSpec,
};
use stiffkin::scheme::{bundled, bundled_estimates, parse_scheme};
use stiffkin::solver::{generate_dataset, integrate, SolverConfig};

const ROBERTSON_MAE: f64 = 0.05;
const ROBERTSON_MSE: f64 = 1e-4;
const ROBERTSON_BUDGET: Duration = Duration::from_secs(30 * 60);
const ROBERTSON_STAGE2_MAE: f64 = 0.8;
const POLLU_CALIBRATION_EPOCHS: &str = "500";
const POLLU_CALIBRATION_REDUCTION: f64 = 0.5;
const POLLU_BUDGET: Duration = Duration::from_secs(20 * 60);
const AOXID_STAGE2_MAE: f64 = 0.30;
const AOXID_BUDGET: Duration = Duration::from_secs(30 * 60);
const PREDICTED_POLLU: f64 = 0.46;
const PREDICTED_AOXID: f64 = 0.10;
const PREDICTED_TOL: f64 = 0.05;
const ORACLE_REL: f64 = 1e-5;
const CONSERVATION: f64 = 1e-8;
const GRADIENT_REL: f64 = 1e-4;
const KINETICS_REL: f64 = 1e-9;
const JACOBIAN_REL: f64 = 1e-5;
const DOWNSAMPLE_RATIO: f64 = 4.0;

const STRICT_ENV: &str = "STIFFKIN_ACCEPTANCE_STRICT";

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn record(outcomes: &mut Vec<Outcome>, id: &'static str, pass: bool, detail: String) {
    say(&format!(
        "criterion {id}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    outcomes.push(Outcome { id, pass, detail });
}

struct Run {
    report: Value,
    elapsed: Duration,
    ok: bool,
    stderr: String,
}

fn train(args: &[&str], out: &Path) -> Run {
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_stiffkin"))
        .arg("train")
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("STIFFKIN_SEED")
        .output()
        .expect("binary runs");
    let elapsed = start.elapsed();
    let report = fs::read_to_string(out.join("report.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(Value::Null);
    Run {
        report,
        elapsed,
        ok: o.status.success(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn stage_metric(report: &Value, stage: &str, key: &str) -> f64 {
    report["stage_metrics"]
        .as_array()
        .and_then(|a| a.iter().find(|m| m["stage"] == stage))
        .and_then(|m| m[key].as_f64())
        .unwrap_or(f64::INFINITY)
}

fn final_metric(report: &Value, key: &str) -> f64 {
    report["metrics"][key].as_f64().unwrap_or(f64::INFINITY)
}

/// Report without wall-clock fields.
fn deterministic(report: &Value) -> Value {
    let mut r = report.clone();
    r["wall_time_s"] = Value::Null;
    if let Some(stages) = r["stages"].as_array_mut() {
        for s in stages {
            s["wall_time_s"] = Value::Null;
        }
    }
    r
}

fn failure_note(run: &Run) -> String {
    if run.ok {
        String::new()
    } else {
        format!(" (run failed: {})", run.stderr.lines().last().unwrap_or(""))
    }
}

fn robertson(outcomes: &mut Vec<Outcome>, tmp: &Path) {
    let a = train(&["robertson", "--stage", "all"], &tmp.join("robertson_a"));
    let (mae, mse) = (
        final_metric(&a.report, "coeff_mae"),
        final_metric(&a.report, "traj_mse"),
    );
    record(
        outcomes,
        "1",
        a.ok && mae <= ROBERTSON_MAE && mse <= ROBERTSON_MSE && a.elapsed <= ROBERTSON_BUDGET,
        format!(
            "Robertson end to end: coeff MAE {mae:.3e} (<= {ROBERTSON_MAE}), scaled MSE {mse:.3e} (<= {ROBERTSON_MSE:e}), {:.0} s (<= {} s){}",
            a.elapsed.as_secs_f64(),
            ROBERTSON_BUDGET.as_secs(),
            failure_note(&a)
        ),
    );

    let (m2, e2) = (
        stage_metric(&a.report, "2", "coeff_mae"),
        stage_metric(&a.report, "2", "traj_mse"),
    );
    let (m3, e3) = (
        stage_metric(&a.report, "3", "coeff_mae"),
        stage_metric(&a.report, "3", "traj_mse"),
    );
    record(
        outcomes,
        "2",
        a.ok && m2 <= ROBERTSON_STAGE2_MAE && m3 < m2 && e3 < e2,
        format!(
            "Robertson stage 2 MAE {m2:.3e} (<= {ROBERTSON_STAGE2_MAE}); stage 3 MAE {m3:.3e} < {m2:.3e} and MSE {e3:.3e} < {e2:.3e}"
        ),
    );

    let b = train(&["robertson", "--stage", "all"], &tmp.join("robertson_b"));
    let same = a.ok && b.ok && deterministic(&a.report) == deterministic(&b.report);
    record(
        outcomes,
        "8",
        same,
        format!(
            "two seeded Robertson runs: identical reports {same} (MAE {:.6e} vs {:.6e})",
            mae,
            final_metric(&b.report, "coeff_mae")
        ),
    );
}

fn pollu_calibration(outcomes: &mut Vec<Outcome>, tmp: &Path) {
    let s = bundled("pollu").unwrap();
    let init = init_crnn(&s, &InitSpec::Perturbed(0.2), &mut crnn_init_rng(0)).unwrap();
    let before = coeff_mae(&s, &init);
    let run = train(
        &[
            "pollu",
            "--stage",
            "3",
            "--init",
            "perturbed:0.2",
            "--set",
            &format!("epochs_stage3={POLLU_CALIBRATION_EPOCHS}"),
        ],
        &tmp.join("pollu_calibration"),
    );
    let after = final_metric(&run.report, "coeff_mae");
    record(
        outcomes,
        "3a",
        run.ok && after <= POLLU_CALIBRATION_REDUCTION * before && run.elapsed <= POLLU_BUDGET,
        format!(
            "POLLU calibration from truth ±20%: MAE {before:.4} -> {after:.4} (needs <= {:.4}), {:.0} s (<= {} s){}",
            POLLU_CALIBRATION_REDUCTION * before,
            run.elapsed.as_secs_f64(),
            POLLU_BUDGET.as_secs(),
            failure_note(&run)
        ),
    );
}

fn aoxid_stage2(outcomes: &mut Vec<Outcome>, tmp: &Path) {
    let full = train(
        &[
            "aoxid",
            "--stage",
            "2",
            "--set",
            "stage2_source=observations",
        ],
        &tmp.join("aoxid_full"),
    );
    let mae_full = stage_metric(&full.report, "2", "coeff_mae");
    record(
        outcomes,
        "3b",
        full.ok && mae_full <= AOXID_STAGE2_MAE && full.elapsed <= AOXID_BUDGET,
        format!(
            "AOXID stage 2 on generated trajectories: MAE {mae_full:.4} (<= {AOXID_STAGE2_MAE}), {:.0} s (<= {} s){}",
            full.elapsed.as_secs_f64(),
            AOXID_BUDGET.as_secs(),
            failure_note(&full)
        ),
    );

    let ds = train(
        &[
            "aoxid",
            "--stage",
            "2",
            "--downsample",
            "10",
            "--set",
            "stage2_source=observations",
        ],
        &tmp.join("aoxid_ds10"),
    );
    let mae_ds = stage_metric(&ds.report, "2", "coeff_mae");
    record(
        outcomes,
        "7",
        full.ok && ds.ok && mae_ds <= DOWNSAMPLE_RATIO * mae_full,
        format!(
            "AOXID stage 2 at downsample 10: MAE {mae_ds:.4} vs full {mae_full:.4}, ratio {:.2} (<= {DOWNSAMPLE_RATIO}){}",
            mae_ds / mae_full,
            failure_note(&ds)
        ),
    );
}

fn predicted_columns(outcomes: &mut Vec<Outcome>) {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, want) in [("pollu", PREDICTED_POLLU), ("aoxid", PREDICTED_AOXID)] {
        let s = bundled(name).unwrap();
        let p = parse_estimates_csv(bundled_estimates(name).unwrap(), &s).unwrap();
        let obs = generate_dataset(&s, &SolverConfig::data_generation()).unwrap();
        let m = evaluate(&s, &p, &obs, &SolverConfig::training());
        pass &= (m.coeff_mae_ln_all - want).abs() <= PREDICTED_TOL;
        parts.push(format!(
            "{name}: ln over all reactions {:.4} (target {want} ± {PREDICTED_TOL}), log10 over trainable {:.4}",
            m.coeff_mae_ln_all, m.coeff_mae
        ));
    }
    record(
        outcomes,
        "3c",
        pass,
        format!("supplementary predicted columns; {}", parts.join("; ")),
    );
}

fn solver(outcomes: &mut Vec<Outcome>) {
    let s = bundled("robertson").unwrap();
    let cfg = SolverConfig::data_generation();
    let times = s.time_grid.unwrap().times();
    let oracle = common::ros2(&s, &s.initial, &times, 8000);
    let ours = generate_dataset(&s, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in ours.states.iter().zip(&oracle) {
        for (x, y) in a.iter().zip(b) {
            if y.abs() > cfg.atol {
                worst = worst.max((x - y).abs() / y.abs());
            }
        }
    }
    let drift = ours
        .states
        .iter()
        .map(|y| (y.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let exact = (-1f64).exp();
    let errs: Vec<f64> = [1e-3, 1e-5, 1e-7, 1e-9]
        .iter()
        .map(|&rtol| {
            let tr = integrate(
                &common::Decay(1.0),
                &[1.0],
                &[0.0, 1.0],
                &SolverConfig::with_rtol(rtol),
            )
            .unwrap();
            (tr.states[1][0] - exact).abs()
        })
        .collect();
    let order_ok = errs.windows(2).all(|w| w[1] <= w[0] / 10.0 || w[1] < 1e-14);
    record(
        outcomes,
        "4",
        worst <= ORACLE_REL && drift <= CONSERVATION && order_ok,
        format!(
            "solver: worst deviation from Rosenbrock oracle {worst:.2e} (<= {ORACLE_REL:e}), max |Σy - 1| {drift:.2e} (<= {CONSERVATION:e}), decay errors [{}] fall >= 10x per 100x rtol: {order_ok}",
            errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

fn gradients(outcomes: &mut Vec<Outcome>) {
    let (checked, mlp_worst) = common::mlp_window_check(17, 30);

    let scheme = bundled("robertson").unwrap();
    let obs = generate_dataset(&scheme, &SolverConfig::data_generation()).unwrap();
    let range: Vec<f64> = (0..3)
        .map(|j| {
            let c = obs.column(j);
            let (lo, hi) = c
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            hi - lo
        })
        .collect();
    let net = Network::new(&scheme);
    let theta: Vec<f64> = CrnnParams::truth(&scheme)
        .log_k
        .iter()
        .zip([0.3, -0.2, 0.25])
        .map(|(a, b)| a + b)
        .collect();
    let cfg = SolverConfig::with_rtol(1e-11);
    let (_, g) =
        common::scaled_window_loss(&net, &theta, &obs.states, &obs.times, &range, &cfg).unwrap();
    let num = common::central_fd(
        |x| {
            common::scaled_window_loss(&net, x, &obs.states, &obs.times, &range, &cfg)
                .unwrap()
                .0
        },
        &theta,
    );
    let crnn_worst = g
        .iter()
        .zip(&num)
        .map(|(a, b)| common::rel_err(*a, *b))
        .fold(0.0, f64::max);

    let decay_worst = [(2.0, 1.0), (1.0, 2.0), (0.5, 3.0)]
        .iter()
        .map(|&(k, t)| common::rel_err(common::decay_grad(k, t).1, -t * (-k * t).exp()))
        .fold(0.0, f64::max);
    record(
        outcomes,
        "5",
        checked >= 15 && mlp_worst < GRADIENT_REL && crnn_worst < GRADIENT_REL && decay_worst < GRADIENT_REL,
        format!(
            "gradients vs finite differences: MLP window {mlp_worst:.2e} over {checked} weights, Robertson CRNN {crnn_worst:.2e}, linear decay vs -T e^(-kT) {decay_worst:.2e} (all < {GRADIENT_REL:e})"
        ),
    );
}

fn kinetics(outcomes: &mut Vec<Outcome>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_rhs, mut worst_jac) = (0.0f64, 0.0f64);
    let (mut ro2, mut two) = (0, 0);
    for _ in 0..100 {
        let s = parse_scheme(&common::random_scheme(&mut rng)).unwrap();
        ro2 += s.reactions.iter().any(|r| r.ro2_scaled) as usize;
        two += s.reactions.iter().any(|r| {
            r.forward
                .values()
                .chain(r.reverse.values())
                .any(|&c| c == 2)
        }) as usize;
        let y: Vec<f64> = (0..s.n_species())
            .map(|_| 10f64.powf(rng.random_range(-4.0..0.5)))
            .collect();
        let k = s.rate_coefficients();
        let a = rhs(&s, &y, &k);
        let b = crnn_rhs(&s, &y, &CrnnParams::truth(&s));
        let scale = a.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        worst_rhs = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(worst_rhs, f64::max);

        let jac = jacobian(&s, &y, &k);
        let jscale = jac.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for c in 0..y.len() {
            let h = 1e-6 * y[c];
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp[c] += h;
            ym[c] -= h;
            let (fp, fm) = (rhs(&s, &yp, &k), rhs(&s, &ym, &k));
            for r in 0..y.len() {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                worst_jac = worst_jac.max((jac[(r, c)] - fd).abs() / jscale.max(fd.abs()));
            }
        }
    }
    record(
        outcomes,
        "6",
        worst_rhs <= KINETICS_REL && worst_jac <= JACOBIAN_REL && ro2 > 0 && two > 0,
        format!(
            "100 fuzzed schemes ({ro2} with RO2 scaling, {two} with coefficient 2): |crnn_rhs - rhs| {worst_rhs:.1e} (<= {KINETICS_REL:e}), Jacobian vs FD {worst_jac:.1e} (<= {JACOBIAN_REL:e})"
        ),
    );
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();
    predicted_columns(&mut outcomes);
    solver(&mut outcomes);
    gradients(&mut outcomes);
    kinetics(&mut outcomes);
    pollu_calibration(&mut outcomes, tmp.path());
    aoxid_stage2(&mut outcomes, tmp.path());
    robertson(&mut outcomes, tmp.path());

    outcomes.sort_by_key(|o| o.id);
    say("\nacceptance summary");
    for o in &outcomes {
        say(&format!(
            "  criterion {:<3} {}  {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    say(&format!(
        "acceptance: {} of {} criteria passed; failed {failed:?}",
        outcomes.len() - failed.len(),
        outcomes.len()
    ));
    assert_eq!(outcomes.len(), 10, "every criterion reports a result");
    if std::env::var(STRICT_ENV).is_ok_and(|v| v == "1") {
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use stiffkin::kinetics::CrnnParams;
use stiffkin::models::{fit_norm_stats, Checkpoint, MlpParams, NormStats};
use stiffkin::pipeline::{
    ablation_run, coeff_table, crnn_init_rng, evaluate, fit_trajectory, init_crnn,
    parse_estimates_csv, scaled_mse, stage1_fit, stage2_pretrain, stage3_finetune, InitSpec,
    Metrics, StageMetrics, StageReport, TimeAxis, TrainReport,
};
use stiffkin::plot::{coeff_scatter_svg, loss_curves_svg, trajectory_overlay_svg, GROUP_SIZE};
use stiffkin::scheme::{bundled, parse_scheme, serialize_scheme, ReactionScheme};
use stiffkin::solver::{
    downsample, generate_dataset, integrate, CrnnField, Provenance, Trajectory,
};

use crate::config::{RunConfig, Stage2Source};

/// Loads a mechanism from a path, falling back to the bundled schemes by
/// name (`robertson`, `pollu.mech`, ...). Returns a short display name.
pub fn load_scheme(arg: &str) -> Result<(String, ReactionScheme)> {
    let path = Path::new(arg);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    if path.is_file() {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let scheme = parse_scheme(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok((name, scheme));
    }
    let file = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match bundled(&file) {
        Some(s) => Ok((name, s)),
        None => bail!("no mechanism file `{arg}` and no bundled scheme of that name"),
    }
}

fn write(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, content).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn log(msg: &str) {
    eprintln!("stiffkin: {msg}");
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Observations for a run: `data` when given, otherwise generated from the
/// scheme; then downsampled.
pub fn observations(cfg: &RunConfig, scheme: &ReactionScheme) -> Result<Trajectory> {
    let obs = match &cfg.data {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let (traj, names) = Trajectory::from_csv(&text, Provenance::Observed)?;
            let want: Vec<&str> = scheme.species_names();
            if names.iter().map(String::as_str).ne(want.iter().copied()) {
                bail!("dataset columns {names:?} do not match the scheme species {want:?}");
            }
            traj
        }
        None => generate_dataset(scheme, &cfg.data_solver).context("generating the dataset")?,
    };
    if cfg.downsample > 1 {
        Ok(downsample(&obs, cfg.downsample)?)
    } else {
        Ok(obs)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetMeta {
    pub scheme: String,
    pub species: Vec<String>,
    pub n_times: usize,
    pub downsample: usize,
    pub rtol: f64,
    pub atol: f64,
    pub sha256: String,
}

/// Writes the dataset CSV, its metadata, the scheme echo and the config.
pub fn cmd_generate(cfg: &RunConfig, scheme: &ReactionScheme) -> Result<DatasetMeta> {
    let obs = observations(cfg, scheme)?;
    let names = scheme.species_names();
    let csv = obs.to_csv(&names);
    let dir = &cfg.output_dir;
    write(dir, "dataset.csv", &csv)?;
    let meta = DatasetMeta {
        scheme: cfg.scheme.clone(),
        species: names.iter().map(|s| s.to_string()).collect(),
        n_times: obs.n_times(),
        downsample: cfg.downsample,
        rtol: cfg.data_solver.rtol,
        atol: cfg.data_solver.atol,
        sha256: sha256_hex(csv.as_bytes()),
    };
    write(dir, "dataset.json", &to_json(&meta))?;
    write(dir, "scheme.mech", &serialize_scheme(scheme))?;
    write(dir, "config.txt", &cfg.echo())?;
    log(&format!(
        "wrote {} rows to {}",
        obs.n_times(),
        dir.join("dataset.csv").display()
    ));
    Ok(meta)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Checkpoint::from_json(&text).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Resolves an init spec to CRNN parameters; `file:` accepts a checkpoint
/// or an `id,k` CSV.
pub fn resolve_init(spec: &InitSpec, scheme: &ReactionScheme, seed: u64) -> Result<CrnnParams> {
    match spec {
        InitSpec::File(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading init file {p}"))?;
            let params = if text.trim_start().starts_with('{') {
                Checkpoint::from_json(&text)?
                    .crnn
                    .ok_or_else(|| anyhow!("checkpoint {p} holds no CRNN parameters"))?
            } else {
                parse_estimates_csv(&text, scheme)?
            };
            if params.len() != scheme.n_reactions() {
                bail!(
                    "init file {p} has {} coefficients, the scheme has {} reactions",
                    params.len(),
                    scheme.n_reactions()
                );
            }
            let mut p = params;
            p.frozen = scheme.frozen_mask();
            Ok(p)
        }
        other => Ok(init_crnn(scheme, other, &mut crnn_init_rng(seed))?),
    }
}

fn stage_dir(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.output_dir.join(format!("stage{stage}"))
}

fn save_stage(cfg: &RunConfig, stage: u8, ckpt: &Checkpoint, report: &StageReport) -> Result<()> {
    let dir = stage_dir(cfg, stage);
    write(&dir, "checkpoint.json", &(ckpt.to_json() + "\n"))?;
    write(&dir, "report.json", &to_json(report))?;
    let mut csv = String::from("epoch,loss,learning_rate\n");
    for (i, (l, lr)) in report.loss_curve.iter().zip(&report.lr_curve).enumerate() {
        csv.push_str(&format!("{i},{l:.17e},{lr:.17e}\n"));
    }
    write(&dir, "loss.csv", &csv)?;
    Ok(())
}

fn crnn_stage_metrics(stage: &str, m: &Metrics) -> StageMetrics {
    StageMetrics {
        stage: stage.into(),
        traj_mse: m.traj_mse,
        coeff_mae: Some(m.coeff_mae),
        coeff_mae_ln_all: Some(m.coeff_mae_ln_all),
    }
}

/// Coefficient table, metrics, predicted trajectory and plots for `params`.
fn write_evaluation(
    dir: &Path,
    cfg: &RunConfig,
    scheme: &ReactionScheme,
    params: &CrnnParams,
    obs: &Trajectory,
    metrics: &Metrics,
) -> Result<()> {
    let rows = coeff_table(scheme, params);
    let mut csv = String::from("id,truth,estimate,abs_log10_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            r.id,
            r.truth,
            r.estimate,
            r.abs_log10_error()
        ));
    }
    write(dir, "coefficients.csv", &csv)?;
    write(dir, "metrics.json", &to_json(metrics))?;
    write(
        dir,
        "coefficients.svg",
        &coeff_scatter_svg(&rows, &format!("{}: rate coefficients", cfg.scheme)),
    )?;
    let names: Vec<String> = scheme
        .species_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let field = CrnnField::new(scheme, params);
    match integrate(&field, &obs.states[0], &obs.times, &cfg.train.solver) {
        Ok(pred) => {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            write(dir, "predicted.csv", &pred.to_csv(&refs))?;
            let log_time = cfg.train.time_axis == TimeAxis::Log10;
            let idx: Vec<usize> = (0..scheme.n_species()).collect();
            for (g, group) in idx.chunks(GROUP_SIZE).enumerate() {
                let title = format!("{}: species group {}", cfg.scheme, g + 1);
                let svg = trajectory_overlay_svg(obs, &pred, &names, group, log_time, &title);
                write(dir, &format!("trajectory_{}.svg", g + 1), &svg)?;
            }
        }
        Err(e) => log(&format!("no trajectory plot: {e}")),
    }
    Ok(())
}

/// Runs the selected training stages. Each stage writes its checkpoint and
/// report under `<output_dir>/stage<k>/`.
pub fn cmd_train(cfg: &RunConfig, scheme: &ReactionScheme) -> Result<TrainReport> {
    let start = Instant::now();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "config.txt", &cfg.echo())?;
    let obs = observations(cfg, scheme)?;
    let names = scheme.species_names();
    write(out, "dataset.csv", &obs.to_csv(&names))?;
    let stats = fit_norm_stats(&obs);
    let tc = &cfg.train;
    let seed = tc.seed;
    let mut report = TrainReport::new(&cfg.scheme, tc.clone());

    let mut stage1: Option<(MlpParams, NormStats)> = None;
    let skip1 = cfg.stage2_source == Stage2Source::Observations;
    if cfg.stage.runs(1) && !skip1 {
        log("stage 1: fitting the black-box neural ODE");
        let (mlp, st, rep) = stage1_fit(scheme, &obs, tc).context("stage 1")?;
        let fitted = fit_trajectory(&mlp, &st, &obs, tc.window, tc.time_axis, &tc.solver)
            .context("stage 1 trajectory")?;
        let mse = scaled_mse(&fitted, &obs, &st)?;
        log(&format!(
            "stage 1: scaled MSE {mse:.3e} after {} epochs",
            rep.epochs
        ));
        let mut ck = Checkpoint::new(seed, "1");
        ck.norm_stats = Some(st.clone());
        ck.mlp = Some(mlp.clone());
        save_stage(cfg, 1, &ck, &rep)?;
        write(&stage_dir(cfg, 1), "fitted.csv", &fitted.to_csv(&names))?;
        report.stages.push(rep);
        report.stage_metrics.push(StageMetrics {
            stage: "1".into(),
            traj_mse: mse,
            coeff_mae: None,
            coeff_mae_ln_all: None,
        });
        stage1 = Some((mlp, st));
    }

    let mut crnn: Option<CrnnParams> = None;
    if cfg.stage.runs(2) {
        let source = match cfg.stage2_source {
            Stage2Source::Observations => obs.clone(),
            Stage2Source::Fitted => {
                let (mlp, st) = match stage1.take() {
                    Some(s) => s,
                    None => {
                        let path = cfg
                            .checkpoint
                            .clone()
                            .unwrap_or_else(|| stage_dir(cfg, 1).join("checkpoint.json"));
                        if !path.is_file() {
                            bail!(
                                "stage 2 needs a stage-1 checkpoint ({} not found); run stage 1 first, pass --checkpoint, or set stage2_source = observations",
                                path.display()
                            );
                        }
                        let ck = read_checkpoint(&path)?;
                        match (ck.mlp, ck.norm_stats) {
                            (Some(m), Some(s)) => (m, s),
                            _ => bail!("{} is not a stage-1 checkpoint", path.display()),
                        }
                    }
                };
                fit_trajectory(&mlp, &st, &obs, tc.window, tc.time_axis, &tc.solver)
                    .context("stage 1 trajectory")?
            }
        };
        let init = resolve_init(cfg.init.as_ref().unwrap_or(&InitSpec::Random), scheme, seed)?;
        log(&format!(
            "stage 2: CRNN on {} resampled collocation points",
            (source.n_times() - 1) * tc.interpolation_factor + 1
        ));
        let (p, rep) = stage2_pretrain(scheme, &source, &stats, init, tc).context("stage 2")?;
        let m = evaluate(scheme, &p, &obs, &tc.solver);
        log(&format!(
            "stage 2: coeff MAE {:.4}, scaled MSE {:.3e}",
            m.coeff_mae, m.traj_mse
        ));
        let mut ck = Checkpoint::new(seed, "2");
        ck.norm_stats = Some(stats.clone());
        ck.crnn = Some(p.clone());
        save_stage(cfg, 2, &ck, &rep)?;
        report.stages.push(rep);
        report.stage_metrics.push(crnn_stage_metrics("2", &m));
        crnn = Some(p);
    }

    if cfg.stage.runs(3) {
        let init = match (crnn.take(), &cfg.init) {
            (Some(p), _) => p,
            (None, Some(spec)) => resolve_init(spec, scheme, seed)?,
            (None, None) => {
                let path = cfg
                    .checkpoint
                    .clone()
                    .unwrap_or_else(|| stage_dir(cfg, 2).join("checkpoint.json"));
                if !path.is_file() {
                    bail!(
                        "stage 3 needs a stage-2 checkpoint or --init ({} not found)",
                        path.display()
                    );
                }
                read_checkpoint(&path)?
                    .crnn
                    .ok_or_else(|| anyhow!("{} holds no CRNN parameters", path.display()))?
            }
        };
        let m0 = evaluate(scheme, &init, &obs, &tc.solver);
        log(&format!(
            "stage 3: starting from coeff MAE {:.4}, scaled MSE {:.3e}",
            m0.coeff_mae, m0.traj_mse
        ));
        let (p, rep) = stage3_finetune(scheme, &obs, &stats, init, tc).context("stage 3")?;
        let m = evaluate(scheme, &p, &obs, &tc.solver);
        log(&format!(
            "stage 3: coeff MAE {:.4}, scaled MSE {:.3e}",
            m.coeff_mae, m.traj_mse
        ));
        let mut ck = Checkpoint::new(seed, "3");
        ck.norm_stats = Some(stats.clone());
        ck.crnn = Some(p.clone());
        save_stage(cfg, 3, &ck, &rep)?;
        report.stages.push(rep);
        report.stage_metrics.push(crnn_stage_metrics("3", &m));
        crnn = Some(p);
    }

    if let Some(p) = &crnn {
        let m = evaluate(scheme, p, &obs, &tc.solver);
        write_evaluation(out, cfg, scheme, p, &obs, &m)?;
        report.coefficients = coeff_table(scheme, p);
        report.metrics = Some(m);
    }
    let curves: Vec<(String, Vec<f64>)> = report
        .stages
        .iter()
        .map(|s| (s.stage.clone(), s.loss_curve.clone()))
        .collect();
    let mut csv = String::from("stage,epoch,loss\n");
    for (name, c) in &curves {
        for (i, l) in c.iter().enumerate() {
            csv.push_str(&format!("{name},{i},{l:.17e}\n"));
        }
    }
    write(out, "loss.csv", &csv)?;
    write(
        out,
        "loss.svg",
        &loss_curves_svg(&curves, &format!("{}: training loss", cfg.scheme)),
    )?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    write(out, "report.json", &to_json(&report))?;
    Ok(report)
}

/// Metrics and plots for CRNN parameters from `checkpoint` or `init`.
pub fn cmd_evaluate(cfg: &RunConfig, scheme: &ReactionScheme) -> Result<Metrics> {
    let params = match (&cfg.checkpoint, &cfg.init) {
        (Some(path), _) => {
            if !path.is_file() {
                bail!("checkpoint {} not found", path.display());
            }
            read_checkpoint(path)?
                .crnn
                .ok_or_else(|| anyhow!("{} holds no CRNN parameters", path.display()))?
        }
        (None, Some(spec)) => resolve_init(spec, scheme, cfg.train.seed)?,
        (None, None) => bail!("evaluate needs --checkpoint or --init"),
    };
    if params.len() != scheme.n_reactions() {
        bail!(
            "parameters cover {} reactions, the scheme has {}",
            params.len(),
            scheme.n_reactions()
        );
    }
    let obs = observations(cfg, scheme)?;
    let m = evaluate(scheme, &params, &obs, &cfg.train.solver);
    write(&cfg.output_dir, "config.txt", &cfg.echo())?;
    write(
        &cfg.output_dir,
        "dataset.csv",
        &obs.to_csv(&scheme.species_names()),
    )?;
    write_evaluation(&cfg.output_dir, cfg, scheme, &params, &obs, &m)?;
    log(&format!(
        "coeff MAE {:.4} (log10, trainable), {:.4} (ln, all reactions), scaled MSE {:.3e}",
        m.coeff_mae, m.coeff_mae_ln_all, m.traj_mse
    ));
    Ok(m)
}

/// One stage-2 ablation. Variants built on stage 1 use `checkpoint` (or
/// `<output_dir>/stage1/checkpoint.json`) and run stage 1 when neither exists.
pub fn cmd_ablate(cfg: &RunConfig, scheme: &ReactionScheme) -> Result<TrainReport> {
    let start = Instant::now();
    let variant = cfg
        .variant
        .ok_or_else(|| anyhow!("ablate needs --variant"))?;
    let out = &cfg.output_dir;
    write(out, "config.txt", &cfg.echo())?;
    let obs = observations(cfg, scheme)?;
    let tc = &cfg.train;
    let mut report = TrainReport::new(&cfg.scheme, tc.clone());
    let stage1 = if variant.needs_stage1() {
        let path = cfg
            .checkpoint
            .clone()
            .unwrap_or_else(|| stage_dir(cfg, 1).join("checkpoint.json"));
        if path.is_file() {
            let ck = read_checkpoint(&path)?;
            match (ck.mlp, ck.norm_stats) {
                (Some(m), Some(s)) => Some((m, s)),
                _ => bail!("{} is not a stage-1 checkpoint", path.display()),
            }
        } else {
            log("ablation: no stage-1 checkpoint, running stage 1");
            let (mlp, st, rep) = stage1_fit(scheme, &obs, tc).context("stage 1")?;
            let mut ck = Checkpoint::new(tc.seed, "1");
            ck.norm_stats = Some(st.clone());
            ck.mlp = Some(mlp.clone());
            save_stage(cfg, 1, &ck, &rep)?;
            report.stages.push(rep);
            Some((mlp, st))
        }
    } else {
        None
    };
    let init = resolve_init(
        cfg.init.as_ref().unwrap_or(&InitSpec::Random),
        scheme,
        tc.seed,
    )?;
    let (p, rep) = ablation_run(
        variant,
        scheme,
        &obs,
        stage1.as_ref().map(|(m, s)| (m, s)),
        init,
        tc,
    )
    .with_context(|| format!("ablation {variant}"))?;
    let m = evaluate(scheme, &p, &obs, &tc.solver);
    log(&format!(
        "ablation {variant}: coeff MAE {:.4}, scaled MSE {:.3e}",
        m.coeff_mae, m.traj_mse
    ));
    let mut ck = Checkpoint::new(tc.seed, "2");
    ck.norm_stats = Some(fit_norm_stats(&obs));
    ck.crnn = Some(p.clone());
    write(out, "checkpoint.json", &(ck.to_json() + "\n"))?;
    report.stages.push(rep);
    report
        .stage_metrics
        .push(crnn_stage_metrics(&variant.to_string(), &m));
    write_evaluation(out, cfg, scheme, &p, &obs, &m)?;
    report.coefficients = coeff_table(scheme, &p);
    report.metrics = Some(m);
    report.wall_time_s = start.elapsed().as_secs_f64();
    write(out, "report.json", &to_json(&report))?;
    Ok(report)
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use stiffkin_cli::commands::{cmd_ablate, cmd_evaluate, cmd_generate, cmd_train, load_scheme};
use stiffkin_cli::config::{parse_kv, RunConfig, SEED_ENV};

/// Three-stage discovery of stiff reaction kinetics.
#[derive(Parser)]
#[command(name = "stiffkin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a mechanism at data tolerances and write the dataset.
    Generate(Common),
    /// Run training stages 1, 2, 3 or all.
    Train(Common),
    /// Score CRNN parameters from a checkpoint or init spec.
    Evaluate(Common),
    /// Run one stage-2 ablation variant.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Mechanism file, or a bundled name (robertson, pollu, aoxid).
    scheme: Option<String>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// 1, 2, 3 or all.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// random, truth, perturbed:<factor> or file:<path>.
    #[arg(long)]
    init: Option<String>,
    /// Observation CSV to use instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    downsample: Option<usize>,
    /// direct_fd, mlp_proxy or no_interpolation.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides any configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, stiffkin::scheme::ReactionScheme)> {
        let file_layer = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_kv(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Vec::new(),
        };
        let mut flags: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k.to_string(), v));
            }
        };
        push(
            "output_dir",
            self.out.as_ref().map(|p| p.display().to_string()),
        );
        push("stage", self.stage.clone());
        push("seed", self.seed.map(|s| s.to_string()));
        push("init", self.init.clone());
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()),
        );
        push("downsample", self.downsample.map(|d| d.to_string()));
        push("variant", self.variant.clone());
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
            flags.push((k.trim().to_string(), v.trim().to_string()));
        }
        let scheme_arg = self
            .scheme
            .clone()
            .or_else(|| {
                file_layer
                    .iter()
                    .rev()
                    .find(|(k, _)| k == "scheme")
                    .map(|(_, v)| v.clone())
            })
            .ok_or_else(|| anyhow!("no scheme given; pass a mechanism path or bundled name"))?;
        let (name, scheme) = load_scheme(&scheme_arg)?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let mut layers = vec![vec![("scheme".to_string(), name)]];
        layers.push(
            file_layer
                .into_iter()
                .filter(|(k, _)| k != "scheme")
                .collect(),
        );
        layers.push(flags);
        let cfg = RunConfig::resolve(&scheme_arg, &scheme, &layers, env_seed.as_deref())?;
        Ok((cfg, scheme))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, scheme) = c.resolve()?;
            cmd_generate(&cfg, &scheme)?;
        }
        Command::Train(c) => {
            let (cfg, scheme) = c.resolve()?;
            let report = cmd_train(&cfg, &scheme)?;
            if let Some(m) = report.metrics {
                println!("coeff_mae = {:.6}", m.coeff_mae);
                println!("coeff_mae_ln_all = {:.6}", m.coeff_mae_ln_all);
                println!("traj_mse = {:.6e}", m.traj_mse);
            }
        }
        Command::Evaluate(c) => {
            let (cfg, scheme) = c.resolve()?;
            let m = cmd_evaluate(&cfg, &scheme)?;
            println!("coeff_mae = {:.6}", m.coeff_mae);
            println!("coeff_mae_ln_all = {:.6}", m.coeff_mae_ln_all);
            println!("traj_mse = {:.6e}", m.traj_mse);
        }
        Command::Ablate(c) => {
            let (cfg, scheme) = c.resolve()?;
            let report = cmd_ablate(&cfg, &scheme)?;
            if let Some(m) = report.metrics {
                println!("coeff_mae = {:.6}", m.coeff_mae);
                println!("traj_mse = {:.6e}", m.traj_mse);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

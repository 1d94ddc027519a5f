//! Run configuration: flat `key = value` text layered over defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use stiffkin::models::Activation;
use stiffkin::pipeline::{AblationVariant, InitSpec, TimeAxis, TrainConfig, WindowSpec};
use stiffkin::scheme::ReactionScheme;
use stiffkin::solver::{InitialStep, SolverConfig};

pub const SEED_ENV: &str = "STIFFKIN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Three,
    All,
}

impl StageSel {
    pub fn runs(self, stage: u8) -> bool {
        match self {
            StageSel::All => true,
            StageSel::One => stage == 1,
            StageSel::Two => stage == 2,
            StageSel::Three => stage == 3,
        }
    }
}

impl FromStr for StageSel {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "1" => StageSel::One,
            "2" => StageSel::Two,
            "3" => StageSel::Three,
            "all" => StageSel::All,
            _ => bail!("stage must be 1, 2, 3 or all, got `{s}`"),
        })
    }
}

impl fmt::Display for StageSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageSel::One => "1",
            StageSel::Two => "2",
            StageSel::Three => "3",
            StageSel::All => "all",
        })
    }
}

/// What stage 2 differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Source {
    /// The stage-1 fitted trajectory.
    Fitted,
    /// The observations themselves, skipping stage 1.
    Observations,
}

impl FromStr for Stage2Source {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fitted" => Ok(Stage2Source::Fitted),
            "observations" => Ok(Stage2Source::Observations),
            _ => bail!("stage2_source must be fitted or observations, got `{s}`"),
        }
    }
}

impl fmt::Display for Stage2Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage2Source::Fitted => "fitted",
            Stage2Source::Observations => "observations",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scheme: String,
    pub output_dir: PathBuf,
    pub stage: StageSel,
    pub train: TrainConfig,
    pub data_solver: SolverConfig,
    pub downsample: usize,
    /// `None` leaves the choice to the command (random for stage 2).
    pub init: Option<InitSpec>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub stage2_source: Stage2Source,
    pub variant: Option<AblationVariant>,
}

/// Keys in the order they are applied and echoed.
pub const KEYS: &[&str] = &[
    "scheme",
    "output_dir",
    "stage",
    "seed",
    "init",
    "data",
    "checkpoint",
    "downsample",
    "stage2_source",
    "variant",
    "learning_rate",
    "epochs_stage1",
    "epochs_stage2",
    "epochs_stage3",
    "anneal_patience_fraction",
    "anneal_factor",
    "interpolation_factor",
    "alpha",
    "beta",
    "window",
    "time_axis",
    "activation",
    "rtol",
    "atol",
    "max_steps",
    "newton_tol",
    "newton_max_iters",
    "initial_step",
    "data_rtol",
    "data_atol",
];

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            bail!("config line {}: unknown key `{k}`", i + 1);
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| anyhow!("`{key}`: cannot parse `{v}`"))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

impl RunConfig {
    /// Builds the effective configuration. `layers` are applied in order,
    /// later ones winning; the seed falls back to `env_seed` when no layer
    /// sets it.
    pub fn resolve(
        scheme_name: &str,
        scheme: &ReactionScheme,
        layers: &[Vec<(String, String)>],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut merged: BTreeMap<String, String> = BTreeMap::new();
        for layer in layers {
            for (k, v) in layer {
                if !KEYS.contains(&k.as_str()) {
                    bail!("unknown configuration key `{k}`");
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        if !merged.contains_key("seed") {
            if let Some(s) = env_seed {
                merged.insert("seed".into(), s.trim().to_string());
            }
        }
        let mut c = RunConfig {
            scheme: scheme_name.to_string(),
            output_dir: PathBuf::from("out"),
            stage: StageSel::All,
            train: TrainConfig::for_scheme(scheme),
            data_solver: SolverConfig::data_generation(),
            downsample: 1,
            init: None,
            data: None,
            checkpoint: None,
            stage2_source: Stage2Source::Fitted,
            variant: None,
        };
        for key in KEYS {
            if let Some(v) = merged.get(*key) {
                c.set(key, v)
                    .with_context(|| format!("invalid value for `{key}`"))?;
            }
        }
        c.train.validate().map_err(|e| anyhow!("{e}"))?;
        c.data_solver.validate().map_err(|e| anyhow!("{e}"))?;
        if c.downsample < 1 {
            bail!("downsample must be at least 1");
        }
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "scheme" => self.scheme = v.to_string(),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "stage" => self.stage = v.parse()?,
            "seed" => t.seed = num(key, v)?,
            "init" => {
                self.init = if v == "default" {
                    None
                } else {
                    Some(v.parse().map_err(|e: String| anyhow!(e))?)
                }
            }
            "data" => self.data = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "downsample" => self.downsample = num(key, v)?,
            "stage2_source" => self.stage2_source = v.parse()?,
            "variant" => {
                self.variant = if v == "none" {
                    None
                } else {
                    Some(v.parse().map_err(|e: String| anyhow!(e))?)
                }
            }
            "learning_rate" => t.learning_rate = num(key, v)?,
            "epochs_stage1" => t.epochs.stage1 = num(key, v)?,
            "epochs_stage2" => t.epochs.stage2 = num(key, v)?,
            "epochs_stage3" => t.epochs.stage3 = num(key, v)?,
            "anneal_patience_fraction" => t.anneal_patience_fraction = num(key, v)?,
            "anneal_factor" => t.anneal_factor = num(key, v)?,
            "interpolation_factor" => t.interpolation_factor = num(key, v)?,
            "alpha" => t.weights.alpha = num(key, v)?,
            "beta" => t.weights.beta = num(key, v)?,
            "window" => {
                t.window = if v == "full" {
                    None
                } else {
                    let (a, b) = v
                        .split_once(',')
                        .ok_or_else(|| anyhow!("window must be `full` or `size,stride`"))?;
                    Some(WindowSpec {
                        size: num(key, a.trim())?,
                        stride: num(key, b.trim())?,
                    })
                }
            }
            "time_axis" => {
                t.time_axis = match v {
                    "linear" => TimeAxis::Linear,
                    "log10" => TimeAxis::Log10,
                    _ => bail!("time_axis must be linear or log10"),
                }
            }
            "activation" => t.activation = v.parse::<Activation>().map_err(|e| anyhow!("{e}"))?,
            "rtol" => {
                t.solver.rtol = num(key, v)?;
                t.solver.atol = t.solver.rtol * 1e-3;
            }
            "atol" => t.solver.atol = num(key, v)?,
            "max_steps" => {
                t.solver.max_steps = num(key, v)?;
                self.data_solver.max_steps = t.solver.max_steps;
            }
            "newton_tol" => {
                t.solver.newton_tol = num(key, v)?;
                self.data_solver.newton_tol = t.solver.newton_tol;
            }
            "newton_max_iters" => {
                t.solver.newton_max_iters = num(key, v)?;
                self.data_solver.newton_max_iters = t.solver.newton_max_iters;
            }
            "initial_step" => {
                t.solver.initial_step = if v == "auto" {
                    InitialStep::Auto
                } else {
                    InitialStep::Fixed(num(key, v)?)
                };
                self.data_solver.initial_step = t.solver.initial_step;
            }
            "data_rtol" => {
                self.data_solver.rtol = num(key, v)?;
                self.data_solver.atol = self.data_solver.rtol * 1e-3;
            }
            "data_atol" => self.data_solver.atol = num(key, v)?,
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into())
        };
        match key {
            "scheme" => self.scheme.clone(),
            "output_dir" => self.output_dir.display().to_string(),
            "stage" => self.stage.to_string(),
            "seed" => t.seed.to_string(),
            "init" => match &self.init {
                None => "default".into(),
                Some(InitSpec::Random) => "random".into(),
                Some(InitSpec::Truth) => "truth".into(),
                Some(InitSpec::Perturbed(f)) => format!("perturbed:{f}"),
                Some(InitSpec::File(p)) => format!("file:{p}"),
            },
            "data" => path(&self.data),
            "checkpoint" => path(&self.checkpoint),
            "downsample" => self.downsample.to_string(),
            "stage2_source" => self.stage2_source.to_string(),
            "variant" => self
                .variant
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
            "learning_rate" => format!("{:e}", t.learning_rate),
            "epochs_stage1" => t.epochs.stage1.to_string(),
            "epochs_stage2" => t.epochs.stage2.to_string(),
            "epochs_stage3" => t.epochs.stage3.to_string(),
            "anneal_patience_fraction" => t.anneal_patience_fraction.to_string(),
            "anneal_factor" => t.anneal_factor.to_string(),
            "interpolation_factor" => t.interpolation_factor.to_string(),
            "alpha" => t.weights.alpha.to_string(),
            "beta" => t.weights.beta.to_string(),
            "window" => t
                .window
                .map(|w| format!("{},{}", w.size, w.stride))
                .unwrap_or_else(|| "full".into()),
            "time_axis" => match t.time_axis {
                TimeAxis::Linear => "linear".into(),
                TimeAxis::Log10 => "log10".into(),
            },
            "activation" => match t.activation {
                Activation::Tanh => "tanh".into(),
                Activation::Sigmoid => "sigmoid".into(),
            },
            "rtol" => format!("{:e}", t.solver.rtol),
            "atol" => format!("{:e}", t.solver.atol),
            "max_steps" => t.solver.max_steps.to_string(),
            "newton_tol" => format!("{:e}", t.solver.newton_tol),
            "newton_max_iters" => t.solver.newton_max_iters.to_string(),
            "initial_step" => match t.solver.initial_step {
                InitialStep::Auto => "auto".into(),
                InitialStep::Fixed(h) => format!("{h:e}"),
            },
            "data_rtol" => format!("{:e}", self.data_solver.rtol),
            "data_atol" => format!("{:e}", self.data_solver.atol),
            _ => unreachable!("key list is closed"),
        }
    }

    /// The effective configuration as `key = value` text that [`parse_kv`]
    /// reads back to the same run.
    pub fn echo(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for k in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stiffkin::scheme::bundled;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn flags_beat_file_beat_env_beat_defaults() {
        let s = bundled("robertson").unwrap();
        let file = kv(&[
            ("seed", "3"),
            ("learning_rate", "0.01"),
            ("epochs_stage1", "7"),
        ]);
        let flags = kv(&[("seed", "9")]);
        let c = RunConfig::resolve("robertson", &s, &[file.clone(), flags], Some("5")).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.epochs.stage1, 7);
        let c = RunConfig::resolve("robertson", &s, &[file], Some("5")).unwrap();
        assert_eq!(c.train.seed, 3);
        let c = RunConfig::resolve("robertson", &s, &[], Some("5")).unwrap();
        assert_eq!(c.train.seed, 5);
        let c = RunConfig::resolve("robertson", &s, &[], None).unwrap();
        assert_eq!(c.train.seed, 0);
        assert_eq!(c.train.window, None);
    }

    #[test]
    fn echo_round_trips() {
        let s = bundled("pollu").unwrap();
        let c = RunConfig::resolve(
            "pollu",
            &s,
            &[kv(&[
                ("init", "perturbed:0.2"),
                ("rtol", "1e-7"),
                ("window", "10,5"),
                ("stage", "3"),
            ])],
            None,
        )
        .unwrap();
        let back = RunConfig::resolve("pollu", &s, &[parse_kv(&c.echo()).unwrap()], None).unwrap();
        assert_eq!(back.echo(), c.echo());
        assert_eq!(back.train, c.train);
        assert_eq!(back.train.solver.atol, 1e-10);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let s = bundled("robertson").unwrap();
        assert!(parse_kv("bogus = 1\n").is_err());
        assert!(parse_kv("no equals sign\n").is_err());
        assert!(RunConfig::resolve("r", &s, &[kv(&[("stage", "4")])], None).is_err());
        assert!(RunConfig::resolve("r", &s, &[kv(&[("anneal_factor", "1.5")])], None).is_err());
        assert!(RunConfig::resolve("r", &s, &[], Some("not-a-number")).is_err());
        assert_eq!(
            parse_kv("# c\n\nseed = 4 # four\n").unwrap(),
            kv(&[("seed", "4")])
        );
    }
}

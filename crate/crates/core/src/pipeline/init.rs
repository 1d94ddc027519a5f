use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PipelineError;
use crate::kinetics::CrnnParams;
use crate::scheme::ReactionScheme;

/// How CRNN coefficients are initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    /// `log10 k ~ Normal(0, 1)`.
    Random,
    Truth,
    /// `ln k` shifted uniformly within `±ln(1 + f)`.
    Perturbed(f64),
    /// A checkpoint or an `id,k` CSV.
    File(String),
}

impl FromStr for InitSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(InitSpec::Random),
            "truth" => Ok(InitSpec::Truth),
            _ => {
                if let Some(f) = s.strip_prefix("perturbed:") {
                    let v: f64 = f
                        .parse()
                        .map_err(|_| format!("bad perturbation fraction `{f}`"))?;
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(format!(
                            "perturbation fraction must be non-negative, got {v}"
                        ));
                    }
                    Ok(InitSpec::Perturbed(v))
                } else if let Some(p) = s.strip_prefix("file:") {
                    Ok(InitSpec::File(p.to_string()))
                } else {
                    Err(format!(
                        "unknown init `{s}` (random, truth, perturbed:<frac>, file:<path>)"
                    ))
                }
            }
        }
    }
}

/// Builds initial CRNN parameters. Frozen reactions always start at their
/// known coefficient. `File` specs are resolved by the caller.
pub fn init_crnn<R: Rng + ?Sized>(
    scheme: &ReactionScheme,
    spec: &InitSpec,
    rng: &mut R,
) -> Result<CrnnParams, PipelineError> {
    let mut p = CrnnParams::truth(scheme);
    match spec {
        InitSpec::Truth => {}
        InitSpec::Random => {
            for (lk, r) in p.log_k.iter_mut().zip(&scheme.reactions) {
                let z: f64 = StandardNormal.sample(rng);
                if !r.frozen {
                    *lk = z * std::f64::consts::LN_10;
                }
            }
        }
        InitSpec::Perturbed(f) => {
            let w = (1.0 + f).ln();
            for (lk, r) in p.log_k.iter_mut().zip(&scheme.reactions) {
                let d = if w > 0.0 {
                    rng.random_range(-w..w)
                } else {
                    0.0
                };
                if !r.frozen {
                    *lk += d;
                }
            }
        }
        InitSpec::File(path) => {
            return Err(PipelineError::Config(format!(
                "file init `{path}` must be loaded by the caller"
            )));
        }
    }
    Ok(p)
}

/// Reads `id,k` rows (header optional). Reactions without a row keep their
/// known coefficient.
pub fn parse_estimates_csv(
    text: &str,
    scheme: &ReactionScheme,
) -> Result<CrnnParams, PipelineError> {
    let mut p = CrnnParams::truth(scheme);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 2 {
            return Err(PipelineError::Config(format!(
                "estimates line {}: expected `id,k`",
                i + 1
            )));
        }
        let id = cols[0].trim_start_matches(['R', 'r']);
        let Ok(id) = id.parse::<usize>() else {
            if i == 0 {
                continue;
            }
            return Err(PipelineError::Config(format!(
                "estimates line {}: bad reaction id `{}`",
                i + 1,
                cols[0]
            )));
        };
        let k: f64 = cols[1].parse().map_err(|_| {
            PipelineError::Config(format!(
                "estimates line {}: bad coefficient `{}`",
                i + 1,
                cols[1]
            ))
        })?;
        if !(k > 0.0 && k.is_finite()) {
            return Err(PipelineError::Config(format!(
                "estimates line {}: coefficient must be positive",
                i + 1
            )));
        }
        let idx = scheme
            .reactions
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| {
                PipelineError::Config(format!("estimates line {}: no reaction R{id}", i + 1))
            })?;
        p.log_k[idx] = k.ln();
    }
    Ok(p)
}

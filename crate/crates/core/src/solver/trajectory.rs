use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Fitted,
    Resampled,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("times must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("row {row} has {got} values, expected {expected}")]
    Ragged {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("downsample factor {factor} is invalid for {n} samples")]
    BadFactor { factor: usize, n: usize },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// Concentrations sampled on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One row per time, one column per species.
    pub states: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        states: Vec<Vec<f64>>,
        provenance: Provenance,
    ) -> Result<Self, TrajectoryError> {
        let t = Self {
            times,
            states,
            provenance,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let n = self.times.len();
        if n < 2 {
            return Err(TrajectoryError::TooShort(n));
        }
        if self.states.len() != n {
            return Err(TrajectoryError::Ragged {
                row: self.states.len(),
                got: self.states.len(),
                expected: n,
            });
        }
        let width = self.states[0].len();
        for (i, row) in self.states.iter().enumerate() {
            if row.len() != width {
                return Err(TrajectoryError::Ragged {
                    row: i,
                    got: row.len(),
                    expected: width,
                });
            }
            if !self.times[i].is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(TrajectoryError::NonFinite(i));
            }
            if i > 0 && self.times[i] <= self.times[i - 1] {
                return Err(TrajectoryError::NotIncreasing(i));
            }
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_species(&self) -> usize {
        self.states.first().map_or(0, |r| r.len())
    }

    pub fn column(&self, species: usize) -> Vec<f64> {
        self.states.iter().map(|r| r[species]).collect()
    }

    /// Sub-trajectory over `range` of sample indices.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            times: self.times[range.clone()].to_vec(),
            states: self.states[range].to_vec(),
            provenance: self.provenance,
        }
    }

    /// CSV with header `t,<species...>` and 17 significant digits, which
    /// reproduces every `f64` exactly.
    pub fn to_csv(&self, species: &[&str]) -> String {
        let mut out = String::from("t");
        for s in species {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t:.16e}");
            for v in row {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output; returns the species names too.
    pub fn from_csv(
        text: &str,
        provenance: Provenance,
    ) -> Result<(Trajectory, Vec<String>), TrajectoryError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(TrajectoryError::Csv {
            line: 1,
            msg: "empty file".into(),
        })?;
        let mut cols = header.split(',').map(str::trim);
        if cols.next() != Some("t") {
            return Err(TrajectoryError::Csv {
                line: 1,
                msg: "first column must be `t`".into(),
            });
        }
        let names: Vec<String> = cols.map(String::from).collect();
        let (mut times, mut states) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            let vals: Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| TrajectoryError::Csv {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if vals.len() != names.len() + 1 {
                return Err(TrajectoryError::Csv {
                    line: i + 1,
                    msg: format!("expected {} columns, got {}", names.len() + 1, vals.len()),
                });
            }
            times.push(vals[0]);
            states.push(vals[1..].to_vec());
        }
        Ok((Trajectory::new(times, states, provenance)?, names))
    }
}

/// Keeps every `factor`-th sample starting with the first, and always the
/// last sample so the time span is unchanged.
pub fn downsample(traj: &Trajectory, factor: usize) -> Result<Trajectory, TrajectoryError> {
    let n = traj.n_times();
    if factor == 0 || factor > n.saturating_sub(1) {
        return Err(TrajectoryError::BadFactor { factor, n });
    }
    let mut idx: Vec<usize> = (0..n).step_by(factor).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    Ok(Trajectory {
        times: idx.iter().map(|&i| traj.times[i]).collect(),
        states: idx.iter().map(|&i| traj.states[i].clone()).collect(),
        provenance: traj.provenance,
    })
}

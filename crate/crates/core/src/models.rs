//! Trainable dynamics models: the normalized MLP field used to fit
//! trajectories, and the checkpoint container shared by all stages.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::CrnnParams;
use crate::solver::{ParametricField, Trajectory, VectorField};

/// Replaces degenerate species ranges.
pub const RANGE_EPS: f64 = 1e-30;

pub const HIDDEN_WIDTH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid normalization statistics: {0}")]
    InvalidStats(String),
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Species-wise concentration bounds and the time scale of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub t_scale: f64,
}

impl NormStats {
    pub fn new(y_min: Vec<f64>, y_max: Vec<f64>, t_scale: f64) -> Result<Self, ModelError> {
        let s = Self {
            y_min,
            y_max,
            t_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.y_min.len() != self.y_max.len() {
            return Err(ModelError::InvalidStats(
                "y_min and y_max lengths differ".into(),
            ));
        }
        if !(self.t_scale > 0.0 && self.t_scale.is_finite()) {
            return Err(ModelError::InvalidStats(format!(
                "t_scale must be positive, got {}",
                self.t_scale
            )));
        }
        for (i, (lo, hi)) in self.y_min.iter().zip(&self.y_max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
                return Err(ModelError::InvalidStats(format!(
                    "species {i}: min {lo} max {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_species(&self) -> usize {
        self.y_min.len()
    }

    /// `y_max - y_min`, floored at [`RANGE_EPS`].
    pub fn range(&self, i: usize) -> f64 {
        (self.y_max[i] - self.y_min[i]).max(RANGE_EPS)
    }

    pub fn ranges(&self) -> Vec<f64> {
        (0..self.n_species()).map(|i| self.range(i)).collect()
    }

    /// Per-species scale of time derivatives, `range / t_scale`.
    pub fn derivative_scales(&self) -> Vec<f64> {
        self.ranges().iter().map(|r| r / self.t_scale).collect()
    }
}

pub fn fit_norm_stats(traj: &Trajectory) -> NormStats {
    let n = traj.n_species();
    let mut y_min = vec![f64::INFINITY; n];
    let mut y_max = vec![f64::NEG_INFINITY; n];
    for row in &traj.states {
        for (j, &v) in row.iter().enumerate() {
            y_min[j] = y_min[j].min(v);
            y_max[j] = y_max[j].max(v);
        }
    }
    let t_scale = traj.times[traj.n_times() - 1] - traj.times[0];
    NormStats {
        y_min,
        y_max,
        t_scale,
    }
}

pub fn normalize(y: &[f64], stats: &NormStats) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, v)| (v - stats.y_min[i]) / stats.range(i))
        .collect()
}

pub fn denormalize(u: &[f64], stats: &NormStats) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(i, v)| v * stats.range(i) + stats.y_min[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 0.5 * (1.0 + (0.5 * x).tanh()),
        }
    }

    /// Derivative expressed through the activation value `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(format!(
                "unknown activation `{s}` (expected tanh or sigmoid)"
            )),
        }
    }
}

/// Fully connected network stored as one flat vector. Layer `l` holds a
/// row-major `sizes[l+1] × sizes[l]` weight block followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub theta: Vec<f64>,
}

/// Activations of every layer from one forward pass.
struct Forward {
    acts: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `n → 128 → 128 → n` with all parameters zero.
    pub fn zeros(n_species: usize, activation: Activation) -> Self {
        let sizes = vec![n_species, HIDDEN_WIDTH, HIDDEN_WIDTH, n_species];
        let theta = vec![0.0; Self::count(&sizes)];
        Self {
            sizes,
            activation,
            theta,
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot<R: Rng + ?Sized>(n_species: usize, activation: Activation, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_species, activation);
        let mut off = 0;
        for w in p.sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.theta[off..off + fan_in * fan_out] {
                *v = rng.random_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, ModelError> {
        if theta.len() != self.theta.len() {
            return Err(ModelError::ParamCount {
                got: theta.len(),
                expected: self.theta.len(),
            });
        }
        Ok(Self {
            sizes: self.sizes.clone(),
            activation: self.activation,
            theta,
        })
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    fn run(&self, x: &[f64]) -> Forward {
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let input = &acts[l];
            let w = &self.theta[off..off + n_in * n_out];
            let b = &self.theta[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut out = b.to_vec();
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                *o += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            acts.push(out);
        }
        Forward { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).acts.pop().expect("output layer")
    }

    /// Jacobian of the network output with respect to its input.
    pub fn input_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let fw = self.run(x);
        let n0 = self.sizes[0];
        let n_layers = self.sizes.len() - 1;
        // row-major, rows = current layer width
        let mut j: Vec<f64> = (0..n0 * n0)
            .map(|i| if i / n0 == i % n0 { 1.0 } else { 0.0 })
            .collect();
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let w = &self.theta[off..off + n_in * n_out];
            let mut next = vec![0.0; n_out * n0];
            for r in 0..n_out {
                let acc = &mut next[r * n0..(r + 1) * n0];
                for (c, wv) in w[r * n_in..(r + 1) * n_in].iter().enumerate() {
                    if *wv != 0.0 {
                        acc.iter_mut()
                            .zip(&j[c * n0..(c + 1) * n0])
                            .for_each(|(a, jv)| *a += wv * jv);
                    }
                }
                if l + 1 < n_layers {
                    let s = self.activation.slope(fw.acts[l + 1][r]);
                    acc.iter_mut().for_each(|v| *v *= s);
                }
            }
            j = next;
        }
        DMatrix::from_row_slice(self.sizes[n_layers], n0, &j)
    }

    /// Accumulates `(∂NN(x)/∂θ)ᵀ g` into `grad`.
    pub fn vjp_params(&self, x: &[f64], g: &[f64], grad: &mut [f64]) {
        let fw = self.run(x);
        let layers: Vec<_> = self.layers().collect();
        let mut delta = g.to_vec();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            let input = &fw.acts[l];
            for r in 0..n_out {
                let d = delta[r];
                if d != 0.0 {
                    let gw = &mut grad[off + r * n_in..off + (r + 1) * n_in];
                    gw.iter_mut().zip(input).for_each(|(gv, a)| *gv += d * a);
                }
                grad[off + n_in * n_out + r] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.theta[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                if d != 0.0 {
                    prev.iter_mut()
                        .zip(&w[r * n_in..(r + 1) * n_in])
                        .for_each(|(p, wv)| *p += d * wv);
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= self.activation.slope(*a);
            }
            delta = prev;
        }
    }
}

/// `dy/dt = NN((y - y_min)/range) · range / t_scale`.
#[derive(Debug, Clone)]
pub struct MlpField {
    pub params: MlpParams,
    pub stats: NormStats,
    ranges: Vec<f64>,
}

impl MlpField {
    pub fn new(params: MlpParams, stats: NormStats) -> Self {
        assert_eq!(params.n_inputs(), stats.n_species());
        let ranges = stats.ranges();
        Self {
            params,
            stats,
            ranges,
        }
    }

    fn input(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, v)| (v - self.stats.y_min[i]) / self.ranges[i])
            .collect()
    }
}

impl VectorField for MlpField {
    fn dim(&self) -> usize {
        self.ranges.len()
    }

    fn eval(&self, y: &[f64], out: &mut [f64]) {
        let o = self.params.forward(&self.input(y));
        for (i, v) in out.iter_mut().enumerate() {
            *v = o[i] * self.ranges[i] / self.stats.t_scale;
        }
    }

    fn jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        let mut j = self.params.input_jacobian(&self.input(y));
        let n = self.dim();
        for r in 0..n {
            for c in 0..n {
                j[(r, c)] *= self.ranges[r] / (self.stats.t_scale * self.ranges[c]);
            }
        }
        j
    }
}

impl ParametricField for MlpField {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn vjp_params(&self, y: &[f64], w: &[f64], grad: &mut [f64]) {
        let g: Vec<f64> = w
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.ranges[i] / self.stats.t_scale)
            .collect();
        self.params.vjp_params(&self.input(y), &g, grad);
    }
}

pub const CHECKPOINT_FORMAT: &str = "stiffkin-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container for trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Stage that produced the parameters: "1", "2" or "3".
    pub stage: String,
    pub norm_stats: Option<NormStats>,
    pub mlp: Option<MlpParams>,
    pub crnn: Option<CrnnParams>,
}

impl Checkpoint {
    pub fn new(seed: u64, stage: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            stage: stage.into(),
            norm_stats: None,
            mlp: None,
            crnn: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unknown format `{}`",
                c.format
            )));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                c.version
            )));
        }
        if let Some(s) = &c.norm_stats {
            s.validate()?;
        }
        if let Some(m) = &c.mlp {
            if m.theta.len() != MlpParams::count(&m.sizes) {
                return Err(ModelError::ParamCount {
                    got: m.theta.len(),
                    expected: MlpParams::count(&m.sizes),
                });
            }
        }
        Ok(c)
    }
}

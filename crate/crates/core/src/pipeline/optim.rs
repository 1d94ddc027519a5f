/// Adam with bias correction. Frozen entries are never written.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], frozen: Option<&[bool]>) {
        self.step_scaled(params, grad, frozen, 1.0)
    }

    /// One update with the learning rate multiplied by `scale`.
    pub fn step_scaled(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        frozen: Option<&[bool]>,
        scale: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * scale;
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without
/// a new best loss the learning rate is multiplied by `factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annealer {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    stale: usize,
}

impl Annealer {
    pub fn new(epochs: usize, patience_fraction: f64, factor: f64) -> Self {
        let patience = ((epochs as f64 * patience_fraction).ceil() as usize).max(1);
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; returns the factor to apply when the
    /// learning rate should drop.
    pub fn observe(&mut self, loss: f64) -> Option<f64> {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            Some(self.factor)
        } else {
            None
        }
    }
}

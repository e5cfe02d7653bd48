use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, used by the influence oracles.
    Sgd,
}

/// Linear warmup to `peak_lr`, then linear decay to `final_ratio · peak_lr`
/// at the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub final_ratio: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { peak_lr: 4e-3, warmup_steps: 20, final_ratio: 0.1 }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { peak_lr: lr, warmup_steps: 0, final_ratio: 1.0 }
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = total_steps.saturating_sub(self.warmup_steps).saturating_sub(1);
        if decay_steps == 0 {
            return self.peak_lr;
        }
        let frac = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.peak_lr * (1.0 - frac * (1.0 - self.final_ratio))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            schedule: LrSchedule::default(),
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, weight_decay: 0.0, schedule: LrSchedule::constant(lr), ..Self::default() }
    }
}

/// Adam moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub total_steps: usize,
}

impl OptimState {
    pub fn new(config: OptimConfig, num_params: usize, total_steps: usize) -> Self {
        let moments = matches!(config.kind, OptimizerKind::Adam);
        let len = if moments { num_params } else { 0 };
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0, total_steps }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.step, self.total_steps)
    }

    /// One update. Decoupled weight decay is applied before the gradient step.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.current_lr();
        let c = &self.config;
        if c.weight_decay != 0.0 {
            let shrink = 1.0 - lr * c.weight_decay;
            for p in params.iter_mut() {
                *p *= shrink;
            }
        }
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = (self.step + 1) as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        self.step += 1;
    }
}

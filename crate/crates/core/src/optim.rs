//! First-order optimisers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// `v = momentum * v + g; w -= lr * v`.
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("optimiser settings out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiplies the rate by `gamma` at every listed epoch (1-based).
    StepDecay { milestones: Vec<usize>, gamma: f64 },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::StepDecay { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<DenseTensor>,
    second: Vec<DenseTensor>,
    steps: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of `params` in place at rate `lr`.
    pub fn step(&mut self, params: &mut [DenseTensor], grads: &[DenseTensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| DenseTensor::zeros(p.shape()))
                .collect::<Result<_>>()?;
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { momentum, .. } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((w, &gi), mi), vi) in it {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

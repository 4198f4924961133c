//! Adam and rectified Adam over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Radam,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radam" => Ok(OptimizerKind::Radam),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Optimizer state; `m` and `v` are the first and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n: usize) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        })
    }

    /// Applies one update in place. `grad` may be rescaled by clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let c = self.config;
        if let Some(limit) = c.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                let s = limit / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grad.iter()) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        }
        match c.kind {
            OptimizerKind::Adam => {
                let step = c.lr / bc1;
                for ((p, m), v) in params.iter_mut().zip(&self.m).zip(&self.v) {
                    *p -= step * m / ((v / bc2).sqrt() + c.eps);
                }
            }
            OptimizerKind::Radam => {
                let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * c.beta2.powf(t) / bc2;
                if rho_t > 5.0 {
                    let rect = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
                    let step = c.lr * rect / bc1;
                    for ((p, m), v) in params.iter_mut().zip(&self.m).zip(&self.v) {
                        *p -= step * m * bc2.sqrt() / (v.sqrt() + c.eps);
                    }
                } else {
                    // Variance estimate not yet tractable: momentum SGD.
                    let step = c.lr / bc1;
                    for (p, m) in params.iter_mut().zip(&self.m) {
                        *p -= step * m;
                    }
                }
            }
        }
    }
}

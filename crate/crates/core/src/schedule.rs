//! Discretized noise levels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// A rho-warped grid of noise levels, stored in descending order.
///
/// Index 1 is `sigma_max` and index `n_steps` is `sigma_min`. The
/// consistency objective indexes the same grid in ascending order; see
/// [`NoiseSchedule::ascending`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `sigma(u) = (sigma_max^(1/rho) + u (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`
    /// for `u` evenly spaced on `[0, 1]`. Endpoints are pinned exactly.
    pub fn build(sigma_min: f64, sigma_max: f64, rho: f64, n_steps: usize) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite() && rho.is_finite()) {
            return Err(invalid("schedule parameters must be finite"));
        }
        if sigma_min <= 0.0 {
            return Err(invalid(format!("sigma_min must be positive, got {sigma_min}")));
        }
        if sigma_min >= sigma_max {
            return Err(invalid(format!(
                "sigma_min ({sigma_min}) must be below sigma_max ({sigma_max})"
            )));
        }
        if rho <= 0.0 {
            return Err(invalid(format!("rho must be positive, got {rho}")));
        }
        if n_steps < 2 {
            return Err(invalid(format!("n_steps must be at least 2, got {n_steps}")));
        }
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let last = (n_steps - 1) as f64;
        let mut sigmas: Vec<f64> = (0..n_steps)
            .map(|k| (hi + (k as f64 / last) * (lo - hi)).powf(rho))
            .collect();
        sigmas[0] = sigma_max;
        sigmas[n_steps - 1] = sigma_min;
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("schedule is not strictly decreasing; too many steps for the range"));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            rho,
            sigmas,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n_steps(&self) -> usize {
        self.sigmas.len()
    }

    /// Descending noise levels.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Noise level at 1-based descending index `i` (1 is `sigma_max`).
    pub fn index_to_sigma(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.sigmas.len() {
            return Err(invalid(format!(
                "schedule index {i} outside 1..={}",
                self.sigmas.len()
            )));
        }
        Ok(self.sigmas[i - 1])
    }

    /// Noise level at 1-based ascending index `i` (1 is `sigma_min`), the
    /// convention of the consistency-matching objective.
    pub fn ascending(&self, i: usize) -> Result<f64> {
        let n = self.sigmas.len();
        if i == 0 || i > n {
            return Err(invalid(format!("ascending index {i} outside 1..={n}")));
        }
        Ok(self.sigmas[n - i])
    }

    /// Short content hash used to tie checkpoints to the grid they were trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.rho.to_le_bytes());
        for s in &self.sigmas {
            h.update(s.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

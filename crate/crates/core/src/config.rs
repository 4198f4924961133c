//! Run configuration and its flat `key = value` file format.
//!
//! Recognised keys: `d`, `sigma_min`, `sigma_max`, `rho`, `n_steps`,
//! `sigma_data`, `seed`, `lr`, `iters`, `batch`, `dropout`. Blank lines and
//! lines starting with `#` are ignored. Floats are written with 17
//! significant digits so a file round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 380.0;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_N_STEPS: usize = 40;
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Augmentation dimension `D`.
    pub d: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub sigma_data: f64,
    pub seed: u64,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub dropout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 128.0,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            rho: DEFAULT_RHO,
            n_steps: DEFAULT_N_STEPS,
            sigma_data: DEFAULT_SIGMA_DATA,
            seed: 0,
            lr: 1e-3,
            iters: 20_000,
            batch: 4,
            dropout: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.d > 2.0) {
            return Err(invalid(format!("D must be finite and > 2, got {}", self.d)));
        }
        if !(self.sigma_data > 0.0) {
            return Err(invalid("sigma_data must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.sigma_min, self.sigma_max, self.rho, self.n_steps)
    }

    /// Applies one `key`/`value` pair, as found in a config file or on the
    /// command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn float(key: &str, v: &str) -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| invalid(format!("config key `{key}`: `{v}` is not a number")))
        }
        fn int(key: &str, v: &str) -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| invalid(format!("config key `{key}`: `{v}` is not an integer")))
        }
        match key {
            "d" => self.d = float(key, value)?,
            "sigma_min" => self.sigma_min = float(key, value)?,
            "sigma_max" => self.sigma_max = float(key, value)?,
            "rho" => self.rho = float(key, value)?,
            "n_steps" => self.n_steps = int(key, value)? as usize,
            "sigma_data" => self.sigma_data = float(key, value)?,
            "seed" => self.seed = int(key, value)?,
            "lr" => self.lr = float(key, value)?,
            "iters" => self.iters = int(key, value)? as usize,
            "batch" => self.batch = int(key, value)? as usize,
            "dropout" => self.dropout = float(key, value)?,
            other => return Err(invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let f = |v: f64| format!("{v:.16e}");
        let _ = writeln!(s, "d = {}", f(self.d));
        let _ = writeln!(s, "sigma_min = {}", f(self.sigma_min));
        let _ = writeln!(s, "sigma_max = {}", f(self.sigma_max));
        let _ = writeln!(s, "rho = {}", f(self.rho));
        let _ = writeln!(s, "n_steps = {}", self.n_steps);
        let _ = writeln!(s, "sigma_data = {}", f(self.sigma_data));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr = {}", f(self.lr));
        let _ = writeln!(s, "iters = {}", self.iters);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "dropout = {}", f(self.dropout));
        s
    }
}

//! PFGM++ pretraining and consistency distillation.
//!
//! Both loops draw all randomness for step `t` from streams derived from
//! `(seed, t)`, so a run resumed from a saved state replays the remaining
//! steps exactly.

pub mod distill;
pub mod metric;
pub mod optim;
pub mod pretrain;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::checkpoint::{save_checkpoint, write_atomic, Container, STATE_MAGIC};
use crate::field::{Arch, DenoiserParams, ModelMeta};
use crate::phantoms::{augment, extract_patch, PairedSample};
use crate::rng::Rng;

pub use distill::{
    consistency_loss, consistency_self_error, distill, distill_loss_grad, distill_step, ema_update, DistillConfig,
};
pub use metric::{Metric, MetricKind, PerceptualDistance};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use pretrain::{pfgmpp_loss, pfgmpp_loss_grad, pretrain, sample_training_sigma, LossWeighting, PretrainConfig};

/// How training examples are cut from the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    /// Side of random square crops; `None` trains on whole images.
    pub patch: Option<usize>,
    /// Apply a random square symmetry to each example.
    pub augment: bool,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            patch: None,
            augment: true,
        }
    }
}

impl BatchPolicy {
    /// Picks one dataset entry and crops/augments it.
    pub fn draw(&self, dataset: &[PairedSample], rng: &mut Rng) -> Result<PairedSample> {
        if dataset.is_empty() {
            return Err(invalid("empty dataset"));
        }
        let base = &dataset[rng.random_range(0..dataset.len())];
        let mut s = match self.patch {
            Some(p) if p < base.n() => extract_patch(&base.clean, &base.noisy, p, rng.random())?,
            _ => base.clone(),
        };
        if self.augment {
            s = augment(&s, rng.random())?;
        }
        Ok(s)
    }
}

/// Where and how often a loop persists its progress.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoopOptions {
    /// Output directory for checkpoints, state and the loss trace.
    pub out_dir: Option<PathBuf>,
    /// Save every `k` iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// State file to resume from.
    pub resume: Option<PathBuf>,
    /// Record wallclock seconds in the trace; off for byte-stable output.
    pub record_wallclock: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,lr,wallclock\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.17e},{:e},{:.3}", r.iteration, r.loss, r.lr, r.wallclock);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad trace row `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
            rows.push(TraceRow {
                iteration: f[0].parse().map_err(|e| Error::Format(format!("{}: {e}", f[0])))?,
                loss: num(f[1])?,
                lr: num(f[2])?,
                wallclock: num(f[3])?,
            });
        }
        Ok(LossTrace { rows })
    }
}

/// Everything needed to continue a run: weights, optimizer moments, the
/// target network (distillation only) and the next step index. The random
/// state is implied by `(seed, step)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub meta: ModelMeta,
    pub arch: Arch,
    pub seed: u64,
    pub step: usize,
    pub weights: Vec<f64>,
    pub target: Option<Vec<f64>>,
    pub optimizer: Optimizer,
    pub trace: LossTrace,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    meta: ModelMeta,
    arch: Arch,
    seed: u64,
    step: usize,
    optimizer: OptimizerConfig,
    optimizer_t: u64,
    has_target: bool,
    trace: Vec<TraceRow>,
}

impl TrainState {
    pub fn model(&self) -> DenoiserParams {
        DenoiserParams {
            meta: self.meta.clone(),
            arch: self.arch.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StateHeader {
            meta: self.meta.clone(),
            arch: self.arch.clone(),
            seed: self.seed,
            step: self.step,
            optimizer: self.optimizer.config,
            optimizer_t: self.optimizer.t,
            has_target: self.target.is_some(),
            trace: self.trace.rows.clone(),
        };
        let mut arrays = vec![self.weights.clone(), self.optimizer.m.clone(), self.optimizer.v.clone()];
        if let Some(t) = &self.target {
            arrays.push(t.clone());
        }
        Container {
            header: serde_json::to_value(header)?,
            arrays,
        }
        .write(STATE_MAGIC, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(STATE_MAGIC, path)?;
        let h: StateHeader = serde_json::from_value(c.header)?;
        let n = h.arch.num_params();
        let expected = if h.has_target { 4 } else { 3 };
        if c.arrays.len() != expected || c.arrays.iter().any(|a| a.len() != n) {
            return Err(Error::Format("training state arrays do not match the architecture".into()));
        }
        let mut arrays = c.arrays.into_iter();
        let weights = arrays.next().unwrap();
        let m = arrays.next().unwrap();
        let v = arrays.next().unwrap();
        let target = arrays.next();
        let mut optimizer = Optimizer::new(h.optimizer, n)?;
        optimizer.t = h.optimizer_t;
        optimizer.m = m;
        optimizer.v = v;
        Ok(TrainState {
            meta: h.meta,
            arch: h.arch,
            seed: h.seed,
            step: h.step,
            weights,
            target,
            optimizer,
            trace: LossTrace { rows: h.trace },
        })
    }

    /// Writes `<prefix>.ckpt`, `<prefix>.state` and `<prefix>_loss.csv`.
    pub fn persist(&self, dir: &Path, prefix: &str) -> Result<()> {
        save_checkpoint(&dir.join(format!("{prefix}.ckpt")), &self.model())?;
        self.save(&dir.join(format!("{prefix}.state")))?;
        self.trace.write_csv(&dir.join(format!("{prefix}_loss.csv")))
    }
}

/// Result of a training loop.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DenoiserParams,
    pub trace: LossTrace,
    pub state: TrainState,
}

/// Drives `step_fn` from `state.step` up to `iters`, appending to the trace
/// and persisting under `prefix`. `step_fn` must leave the state untouched
/// when it fails; a non-finite loss then saves the last good state as
/// `<prefix>_last_good` before returning the error.
pub(crate) fn run_loop(
    state: &mut TrainState,
    iters: usize,
    opts: &LoopOptions,
    prefix: &str,
    mut step_fn: impl FnMut(&mut TrainState, usize) -> Result<f64>,
) -> Result<()> {
    let start = std::time::Instant::now();
    while state.step < iters {
        let step = state.step;
        let loss = match step_fn(state, step).and_then(|l| ensure_finite(l, step).map(|_| l)) {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = &opts.out_dir {
                    state.persist(dir, &format!("{prefix}_last_good"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.trace.rows.push(TraceRow {
            iteration: step,
            loss,
            lr: state.optimizer.config.lr,
            wallclock: if opts.record_wallclock { start.elapsed().as_secs_f64() } else { 0.0 },
        });
        state.step += 1;
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && state.step.is_multiple_of(opts.checkpoint_every) && state.step < iters {
                state.persist(dir, &format!("{prefix}_{:07}", state.step))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        state.persist(dir, prefix)?;
    }
    Ok(())
}

pub(crate) fn ensure_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss is {loss} at iteration {step}")))
    }
}

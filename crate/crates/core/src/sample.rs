//! Inference paths: single-step consistency sampling, the task-specific
//! hijack + regularize sampler, its two ablations, and the multi-step Heun
//! baseline for the pretrained teacher.
//!
//! Every sampler wraps the model in a [`CountingDenoiser`], so the reported
//! `nfe` is the number of forward evaluations that actually happened.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{phi_pfgmpp, CountingDenoiser, Denoiser, Stage};
use crate::image::ImageTensor;
use crate::pfkernel::sample_prior;
use crate::rng::{derived_rng, stream};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Vanilla,
    Task,
    Heun,
    Hijack,
    Reg,
}

impl std::str::FromStr for SamplerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" => SamplerKind::Vanilla,
            "task" => SamplerKind::Task,
            "heun" => SamplerKind::Heun,
            "hijack" => SamplerKind::Hijack,
            "reg" => SamplerKind::Reg,
            other => return Err(invalid(format!("unknown sampler `{other}`"))),
        })
    }
}

/// Hijack noise level and regularization weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSamplerConfig {
    pub sigma_hat: f64,
    pub w: f64,
}

impl TaskSamplerConfig {
    /// Uses the 1-based descending schedule index `i` (1 is `sigma_max`).
    pub fn from_index(sched: &NoiseSchedule, i: usize, w: f64) -> Result<Self> {
        Self::new(sched, sched.index_to_sigma(i)?, w)
    }

    pub fn new(sched: &NoiseSchedule, sigma_hat: f64, w: f64) -> Result<Self> {
        let cfg = TaskSamplerConfig { sigma_hat, w };
        cfg.validate(sched)?;
        Ok(cfg)
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.sigma_hat >= sched.sigma_min() && self.sigma_hat <= sched.sigma_max()) {
            return Err(invalid(format!(
                "sigma_hat {} outside [{}, {}]",
                self.sigma_hat,
                sched.sigma_min(),
                sched.sigma_max()
            )));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(invalid(format!("w must lie in [0, 1], got {}", self.w)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    #[serde(skip)]
    pub output: Option<ImageTensor>,
    pub nfe: usize,
    pub sampler: SamplerKind,
    pub config: serde_json::Value,
}

impl SampleReport {
    fn new(output: ImageTensor, nfe: usize, sampler: SamplerKind, config: serde_json::Value) -> Self {
        SampleReport {
            output: Some(output),
            nfe,
            sampler,
            config,
        }
    }

    pub fn image(&self) -> &ImageTensor {
        self.output.as_ref().expect("report carries no image")
    }
}

/// `w * denoised + (1 - w) * x`. The endpoints are returned exactly.
pub fn mix(denoised: &ImageTensor, x: &ImageTensor, w: f64) -> Result<ImageTensor> {
    if w == 1.0 {
        denoised.ensure_same_shape(x)?;
        return Ok(denoised.clone());
    }
    denoised.zip_map(x, |d, v| v + w * (d - v))
}

/// One network call from a prior draw at `sigma_max`.
pub fn pfcm_sample(theta: &dyn Denoiser, y: &ImageTensor, seed: u64) -> Result<SampleReport> {
    let meta = theta.meta();
    meta.require_stage(Stage::Pfcm)?;
    let counter = CountingDenoiser::new(theta);
    let mut rng = derived_rng(seed, &[stream::SAMPLE]);
    let x = sample_prior(meta.sigma_max, meta.d, y.n(), &mut rng)?;
    let out = counter.denoise(&x, meta.sigma_max, y)?;
    Ok(SampleReport::new(
        out,
        counter.count(),
        SamplerKind::Vanilla,
        serde_json::json!({ "seed": seed, "d": meta.d }),
    ))
}

/// Starts from `y` at `sigma_hat` instead of a prior draw, then mixes the
/// result back with `y`. Uses no randomness.
pub fn task_specific_sample(theta: &dyn Denoiser, y: &ImageTensor, cfg: &TaskSamplerConfig) -> Result<SampleReport> {
    let meta = theta.meta();
    meta.require_stage(Stage::Pfcm)?;
    cfg.validate(&meta.schedule()?)?;
    let counter = CountingDenoiser::new(theta);
    let denoised = counter.denoise(y, cfg.sigma_hat, y)?;
    let out = mix(&denoised, y, cfg.w)?;
    Ok(SampleReport::new(
        out,
        counter.count(),
        SamplerKind::Task,
        serde_json::json!({ "sigma_hat": cfg.sigma_hat, "w": cfg.w, "d": meta.d }),
    ))
}

/// Task-specific sampling with `w = 1`.
pub fn hijack_only(theta: &dyn Denoiser, y: &ImageTensor, sigma_hat: f64) -> Result<SampleReport> {
    let cfg = TaskSamplerConfig { sigma_hat, w: 1.0 };
    let mut report = task_specific_sample(theta, y, &cfg)?;
    report.sampler = SamplerKind::Hijack;
    Ok(report)
}

/// Vanilla sampling followed by mixing the result with `y`.
pub fn regularize_only(theta: &dyn Denoiser, y: &ImageTensor, w: f64, seed: u64) -> Result<SampleReport> {
    if !(0.0..=1.0).contains(&w) {
        return Err(invalid(format!("w must lie in [0, 1], got {w}")));
    }
    let vanilla = pfcm_sample(theta, y, seed)?;
    let out = mix(vanilla.image(), y, w)?;
    Ok(SampleReport::new(
        out,
        vanilla.nfe,
        SamplerKind::Reg,
        serde_json::json!({ "seed": seed, "w": w, "d": theta.meta().d }),
    ))
}

/// Integrates the probability-flow ODE from `x_start` at `sigmas[0]` down
/// the descending schedule. Each step between two schedule entries uses a
/// Heun predictor-corrector pair; the final step from `sigma_min` to zero is
/// a single Euler step. With 40 entries this costs 39 * 2 + 1 = 79
/// evaluations. Returns every visited state, ending with the output.
pub fn heun_trajectory(
    phi: &dyn Denoiser,
    y: &ImageTensor,
    x_start: ImageTensor,
    sched: &NoiseSchedule,
) -> Result<Vec<ImageTensor>> {
    let sigmas = sched.sigmas();
    let mut states = Vec::with_capacity(sigmas.len() + 1);
    let mut x = x_start;
    for k in 0..sigmas.len() {
        let (s, next) = (sigmas[k], sigmas.get(k + 1).copied().unwrap_or(0.0));
        let h = next - s;
        let d = phi_pfgmpp(phi, &x, s, y)?;
        let euler = x.add_scaled(h, &d)?;
        let x_next = if next > 0.0 {
            let d2 = phi_pfgmpp(phi, &euler, next, y)?;
            let avg = d.zip_map(&d2, |a, b| 0.5 * (a + b))?;
            x.add_scaled(h, &avg)?
        } else {
            euler
        };
        states.push(std::mem::replace(&mut x, x_next));
    }
    states.push(x);
    Ok(states)
}

/// Multi-step teacher baseline from a prior draw at `sigma_max`.
pub fn heun_sample(phi: &dyn Denoiser, y: &ImageTensor, sched: &NoiseSchedule, seed: u64) -> Result<SampleReport> {
    let meta = phi.meta();
    meta.require_stage(Stage::Pfgmpp)?;
    let counter = CountingDenoiser::new(phi);
    let mut rng = derived_rng(seed, &[stream::SAMPLE]);
    let x = sample_prior(sched.sigma_max(), meta.d, y.n(), &mut rng)?;
    let out = heun_trajectory(&counter, y, x, sched)?.pop().unwrap();
    Ok(SampleReport::new(
        out,
        counter.count(),
        SamplerKind::Heun,
        serde_json::json!({ "seed": seed, "n_steps": sched.n_steps(), "d": meta.d }),
    ))
}

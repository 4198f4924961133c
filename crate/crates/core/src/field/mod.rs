//! Denoiser networks, the boundary-condition wrapper `f`, drift functions
//! and closed-form single-point oracles.
//!
//! Both the PFGM++ teacher and the consistency student are parameterized
//! as denoisers `f(x, sigma, y)`. The probability-flow drift with respect to
//! `sigma` is then `(x - f(x, sigma, y)) / sigma` for every `D`, because the
//! alignment `r = sigma * sqrt(D)` turns the field ratio `E_x / E_r` scaled
//! by `sqrt(D)` into exactly this expression.

pub mod checkpoint;
pub mod net;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;
use crate::rng::{derived_rng, stream};
use crate::schedule::NoiseSchedule;

pub use net::{Arch, Dropout, NetInput, Tape, UNetConfig};

/// The only conditioning mode: `y` is stacked with `c_in * x` as a second
/// input channel.
pub const CONDITIONING: &str = "concat";

/// Preconditioning coefficients for one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64, sigma_min: f64) -> Result<Preconditioning> {
    if !(sigma >= sigma_min) || !(sigma_data > 0.0) || !(sigma_min > 0.0) {
        return Err(invalid(format!(
            "preconditioning needs sigma >= sigma_min > 0 and sigma_data > 0 (sigma = {sigma}, sigma_min = {sigma_min})"
        )));
    }
    let sd2 = sigma_data * sigma_data;
    let shifted = sigma - sigma_min;
    Ok(Preconditioning {
        c_skip: sd2 / (shifted * shifted + sd2),
        c_out: sigma_data * shifted / (sd2 + sigma * sigma).sqrt(),
        c_in: 1.0 / (sigma * sigma + sd2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Pretrained PFGM++ (or Gaussian-limit) teacher.
    Pfgmpp,
    /// Distilled consistency model.
    Pfcm,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pfgmpp => "pfgmpp",
            Stage::Pfcm => "pfcm",
        })
    }
}

/// Metadata every model carries; compared at load time and at call sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub d: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub sigma_data: f64,
    pub conditioning: String,
    pub stage: Stage,
    pub schedule_hash: String,
}

impl ModelMeta {
    pub fn from_config(cfg: &RunConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelMeta {
            d: cfg.d,
            sigma_min: cfg.sigma_min,
            sigma_max: cfg.sigma_max,
            rho: cfg.rho,
            n_steps: cfg.n_steps,
            sigma_data: cfg.sigma_data,
            conditioning: CONDITIONING.to_string(),
            stage,
            schedule_hash: cfg.schedule()?.hash(),
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.sigma_min, self.sigma_max, self.rho, self.n_steps)
    }

    pub fn with_stage(&self, stage: Stage) -> Self {
        ModelMeta {
            stage,
            ..self.clone()
        }
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::MetadataMismatch(format!(
                "expected a {stage} model, found stage {}",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn require_d(&self, d: f64) -> Result<()> {
        if self.d != d {
            return Err(Error::MetadataMismatch(format!(
                "model was built for D = {}, call uses D = {d}",
                self.d
            )));
        }
        Ok(())
    }

    /// Checks that two models share `D`, `sigma_data`, conditioning and
    /// schedule (stage may differ).
    pub fn require_compatible(&self, other: &ModelMeta) -> Result<()> {
        self.require_d(other.d)?;
        if self.sigma_data != other.sigma_data
            || self.conditioning != other.conditioning
            || self.schedule_hash != other.schedule_hash
        {
            return Err(Error::MetadataMismatch(format!(
                "schedule or preconditioning differs ({} vs {})",
                self.schedule_hash, other.schedule_hash
            )));
        }
        Ok(())
    }

    /// Rejects noise levels outside `[sigma_min, sigma_max]`.
    pub fn check_sigma(&self, sigma: f64) -> Result<()> {
        if !(sigma >= self.sigma_min && sigma <= self.sigma_max) {
            return Err(invalid(format!(
                "sigma {sigma} outside [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn precondition(&self, sigma: f64) -> Result<Preconditioning> {
        precondition(sigma, self.sigma_data, self.sigma_min)
    }
}

/// Anything that maps `(x_sigma, sigma, y)` to a clean-image estimate.
pub trait Denoiser: Send + Sync {
    fn meta(&self) -> &ModelMeta;
    fn denoise(&self, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn meta(&self) -> &ModelMeta {
        (**self).meta()
    }
    fn denoise(&self, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
        (**self).denoise(x_sigma, sigma, y)
    }
}

/// Network weights plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub meta: ModelMeta,
    pub arch: Arch,
    pub weights: Vec<f64>,
}

/// Activations of one `f` evaluation, needed for its gradient.
pub struct ForwardTape {
    tape: Tape,
    c_out: f64,
}

impl DenoiserParams {
    pub fn init(arch: Arch, meta: ModelMeta, seed: u64) -> Result<Self> {
        arch.validate()?;
        let weights = arch.init(&mut derived_rng(seed, &[stream::INIT]));
        Ok(DenoiserParams { meta, arch, weights })
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn check_inputs(&self, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<()> {
        x_sigma.ensure_same_shape(y)?;
        if x_sigma.n() < self.arch.min_side() {
            return Err(invalid(format!(
                "images must be at least {0}x{0} for this architecture",
                self.arch.min_side()
            )));
        }
        self.meta.check_sigma(sigma)
    }

    /// `f(x, sigma, y)` with the network evaluated on `weights`, which must
    /// have this model's layout, together with the tape for `backward_with`.
    pub fn forward_with(
        &self,
        weights: &[f64],
        x_sigma: &ImageTensor,
        sigma: f64,
        y: &ImageTensor,
        dropout: Option<Dropout>,
    ) -> Result<(ImageTensor, ForwardTape)> {
        self.check_inputs(x_sigma, sigma, y)?;
        let pc = self.meta.precondition(sigma)?;
        let scaled: Vec<f64> = x_sigma.data().iter().map(|v| v * pc.c_in).collect();
        let input = NetInput {
            n: x_sigma.n(),
            x: &scaled,
            y: y.data(),
            c_noise: pc.c_noise,
        };
        let (raw, tape) = self.arch.forward(weights, &input, dropout);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("network output at sigma = {sigma}")));
        }
        let out: Vec<f64> = x_sigma
            .data()
            .iter()
            .zip(&raw)
            .map(|(x, f)| pc.c_skip * x + pc.c_out * f)
            .collect();
        Ok((ImageTensor::new(x_sigma.n(), out)?, ForwardTape { tape, c_out: pc.c_out }))
    }

    /// Accumulates `d loss / d weights` given `d loss / d f`.
    pub fn backward_with(&self, weights: &[f64], tape: &ForwardTape, grad_f: &[f64], grad: &mut [f64]) {
        let g: Vec<f64> = grad_f.iter().map(|v| v * tape.c_out).collect();
        self.arch.backward(weights, &tape.tape, &g, grad);
    }

    /// `c_skip * x + c_out * F(c_in * x, c_noise, y)`.
    pub fn f_apply(&self, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.forward_with(&self.weights, x_sigma, sigma, y, None)?.0)
    }

    /// Short content hash of metadata, architecture and weights.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta).unwrap_or_default());
        h.update(serde_json::to_vec(&self.arch).unwrap_or_default());
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

impl Denoiser for DenoiserParams {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }
    fn denoise(&self, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
        self.f_apply(x_sigma, sigma, y)
    }
}

/// `f_apply` on a checked model, refusing `D` mismatches.
pub fn f_apply(theta: &DenoiserParams, d: f64, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
    theta.meta.require_d(d)?;
    theta.f_apply(x_sigma, sigma, y)
}

fn drift(model: &dyn Denoiser, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
    let denoised = model.denoise(x_sigma, sigma, y)?;
    x_sigma.zip_map(&denoised, |x, f| (x - f) / sigma)
}

/// PFGM++ drift `dx/dsigma` for a finite-`D` teacher.
pub fn phi_pfgmpp(phi: &dyn Denoiser, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
    drift(phi, x_sigma, sigma, y)
}

/// Probability-flow drift `-sigma * grad log p_sigma` of the Gaussian limit.
pub fn phi_edm(phi: &dyn Denoiser, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
    drift(phi, x_sigma, sigma, y)
}

/// Exact field of a single charge at `x0`, expressed as `dx/dsigma`.
pub fn ideal_field_single_point(x_sigma: &ImageTensor, sigma: f64, x0: &ImageTensor) -> Result<ImageTensor> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    x_sigma.zip_map(x0, |x, c| (x - c) / sigma)
}

/// Ideal teacher for a one-image dataset: always predicts `x0`.
#[derive(Clone, Debug)]
pub struct IdealSinglePoint {
    pub meta: ModelMeta,
    pub x0: ImageTensor,
}

impl Denoiser for IdealSinglePoint {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }
    fn denoise(&self, x_sigma: &ImageTensor, sigma: f64, _y: &ImageTensor) -> Result<ImageTensor> {
        x_sigma.ensure_same_shape(&self.x0)?;
        self.meta.check_sigma(sigma)?;
        Ok(self.x0.clone())
    }
}

/// Exact consistency function of the single-point flow: trajectories are
/// straight lines into `x0`, so `f(x, sigma) = x0 + (sigma_min / sigma)(x - x0)`.
#[derive(Clone, Debug)]
pub struct IdealConsistency {
    pub meta: ModelMeta,
    pub x0: ImageTensor,
}

impl Denoiser for IdealConsistency {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }
    fn denoise(&self, x_sigma: &ImageTensor, sigma: f64, _y: &ImageTensor) -> Result<ImageTensor> {
        self.meta.check_sigma(sigma)?;
        let t = self.meta.sigma_min / sigma;
        x_sigma.zip_map(&self.x0, |x, c| c + t * (x - c))
    }
}

/// Wraps a denoiser and counts its evaluations.
pub struct CountingDenoiser<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M: Denoiser> CountingDenoiser<M> {
    pub fn new(inner: M) -> Self {
        CountingDenoiser {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: Denoiser> Denoiser for CountingDenoiser<M> {
    fn meta(&self) -> &ModelMeta {
        self.inner.meta()
    }
    fn denoise(&self, x_sigma: &ImageTensor, sigma: f64, y: &ImageTensor) -> Result<ImageTensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.denoise(x_sigma, sigma, y)
    }
}

//! Stage one: fit the PFGM++ denoiser.
//!
//! Each example draws `sigma` from a log-normal, perturbs the clean image
//! with the heavy-tailed kernel at `r = sigma * sqrt(D)` and regresses the
//! network drift `(x_sigma - f) / sigma` onto the target `(x_sigma - x) / sigma`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{run_loop, BatchPolicy, LoopOptions, LossTrace, Optimizer, OptimizerConfig, OptimizerKind, TrainOutcome, TrainState};
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::field::{Arch, DenoiserParams, Dropout, ModelMeta, Stage};
use crate::pfkernel::{apply_draw, draw, AugmentedNoiseDraw};
use crate::phantoms::PairedSample;
use crate::rng::{derived_rng, stream, Rng};

/// Per-example loss weight as a function of `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// Plain squared drift residual.
    Unit,
    /// Extra factor `1 + sigma^2 / sigma_data^2`, which turns the residual
    /// into a unit-variance denoiser loss at every noise level.
    Edm,
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(LossWeighting::Unit),
            "edm" => Ok(LossWeighting::Edm),
            other => Err(invalid(format!("unknown loss weighting `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub run: RunConfig,
    pub optimizer: OptimizerConfig,
    pub policy: BatchPolicy,
    pub weighting: LossWeighting,
    /// Mean and standard deviation of `ln(sigma)`.
    pub p_mean: f64,
    pub p_std: f64,
}

impl PretrainConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        PretrainConfig {
            run: run.clone(),
            optimizer: OptimizerConfig::new(OptimizerKind::Radam, run.lr),
            policy: BatchPolicy::default(),
            weighting: LossWeighting::Unit,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.optimizer.validate()?;
        if !(self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(invalid("sigma distribution needs finite mean and positive spread"));
        }
        Ok(())
    }
}

/// Log-normal draw clamped to `[sigma_min, sigma_max]`.
pub fn sample_training_sigma(rng: &mut Rng, p_mean: f64, p_std: f64, sigma_min: f64, sigma_max: f64) -> f64 {
    let z: f64 = Normal::new(p_mean, p_std).unwrap().sample(rng);
    z.exp().clamp(sigma_min, sigma_max)
}

fn weight(weighting: LossWeighting, sigma: f64, sigma_data: f64) -> f64 {
    match weighting {
        LossWeighting::Unit => 1.0,
        LossWeighting::Edm => 1.0 + (sigma * sigma) / (sigma_data * sigma_data),
    }
}

/// Loss of one example under an explicit noise draw, optionally adding its
/// gradient (scaled by `scale`) into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn pfgmpp_example_loss(
    phi: &DenoiserParams,
    weights: &[f64],
    sample: &PairedSample,
    sigma: f64,
    noise: &AugmentedNoiseDraw,
    weighting: LossWeighting,
    dropout: Option<Dropout>,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let x = &sample.clean;
    let x_sigma = apply_draw(x, noise)?;
    let (f, tape) = phi.forward_with(weights, &x_sigma, sigma, &sample.noisy, dropout)?;
    let w = weight(weighting, sigma, phi.meta.sigma_data);
    let p = x.len() as f64;
    let inv2 = 1.0 / (sigma * sigma);
    let resid: Vec<f64> = f.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let loss = w * inv2 * resid.iter().map(|r| r * r).sum::<f64>() / p;
    if let Some((grad, scale)) = grad {
        let g: Vec<f64> = resid.iter().map(|r| scale * w * inv2 * 2.0 * r / p).collect();
        phi.backward_with(weights, &tape, &g, grad);
    }
    Ok(loss)
}

/// Options of a batch loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub d: f64,
    pub weighting: LossWeighting,
    pub dropout: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl LossOptions {
    pub fn new(d: f64) -> Self {
        LossOptions {
            d,
            weighting: LossWeighting::Unit,
            dropout: 0.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// Mean loss over `batch` and its gradient with respect to `weights`.
/// Noise levels, kernel draws and dropout masks come from `seed`.
pub fn pfgmpp_loss_grad(
    phi: &DenoiserParams,
    weights: &[f64],
    batch: &[PairedSample],
    opts: &LossOptions,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if !(opts.d > 2.0) {
        return Err(invalid(format!("D must exceed 2, got {}", opts.d)));
    }
    phi.meta.require_d(opts.d)?;
    let mut rng = derived_rng(seed, &[stream::PRETRAIN]);
    let mut drop_rng = derived_rng(seed, &[stream::DROPOUT]);
    let mut grad = vec![0.0; weights.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let sigma = sample_training_sigma(&mut rng, opts.p_mean, opts.p_std, phi.meta.sigma_min, phi.meta.sigma_max);
        let noise = draw(s.clean.len(), sigma, opts.d, &mut rng)?;
        let dropout = (opts.dropout > 0.0).then(|| Dropout {
            rate: opts.dropout,
            rng: &mut drop_rng,
        });
        total += scale
            * pfgmpp_example_loss(phi, weights, s, sigma, &noise, opts.weighting, dropout, Some((&mut grad, scale)))?;
    }
    Ok((total, grad))
}

/// Batch loss and gradient at the model's own weights, without dropout.
pub fn pfgmpp_loss(phi: &DenoiserParams, batch: &[PairedSample], d: f64, seed: u64) -> Result<(f64, Vec<f64>)> {
    pfgmpp_loss_grad(phi, &phi.weights, batch, &LossOptions::new(d), seed)
}

/// Trains a fresh (or resumed) PFGM++ denoiser on `dataset`.
pub fn pretrain(dataset: &[PairedSample], cfg: &PretrainConfig, arch: Arch, opts: &LoopOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("pretraining needs a non-empty dataset"));
    }
    let run = &cfg.run;
    let meta = ModelMeta::from_config(run, Stage::Pfgmpp)?;
    let mut state = match &opts.resume {
        Some(path) => {
            let s = TrainState::load(path)?;
            if s.meta != meta || s.arch != arch || s.seed != run.seed || s.target.is_some() {
                return Err(Error::MetadataMismatch("resume state belongs to a different pretraining run".into()));
            }
            s
        }
        None => {
            let model = DenoiserParams::init(arch, meta, run.seed)?;
            let n = model.num_params();
            TrainState {
                meta: model.meta,
                arch: model.arch,
                seed: run.seed,
                step: 0,
                weights: model.weights,
                target: None,
                optimizer: Optimizer::new(cfg.optimizer, n)?,
                trace: LossTrace::default(),
            }
        }
    };
    let loss_opts = LossOptions {
        d: run.d,
        weighting: cfg.weighting,
        dropout: run.dropout,
        p_mean: cfg.p_mean,
        p_std: cfg.p_std,
    };
    let proto = state.model();
    run_loop(&mut state, run.iters, opts, "pretrain", |st, step| {
        let mut rng = derived_rng(run.seed, &[stream::PATCH, step as u64]);
        let batch = (0..run.batch)
            .map(|_| cfg.policy.draw(dataset, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let step_seed = rng.random();
        let (loss, mut grad) = pfgmpp_loss_grad(&proto, &st.weights, &batch, &loss_opts, step_seed)?;
        super::ensure_finite(loss, step)?;
        st.optimizer.step(&mut st.weights, &mut grad);
        Ok(loss)
    })?;
    let model = state.model();
    Ok(TrainOutcome {
        model,
        trace: state.trace.clone(),
        state,
    })
}

//! Stage two: consistency distillation of a frozen teacher.
//!
//! For `i` drawn uniformly from `1..n_steps` on the ascending grid, a clean
//! image is perturbed to `sigma_{i+1}`, the teacher takes one Euler step of
//! the probability-flow ODE down to `sigma_i`, and the student is trained so
//! that `f_theta(x_{i+1}, sigma_{i+1})` matches the target network's
//! `f_{theta-}(x_i, sigma_i)`. The target network tracks the student by EMA
//! and never receives gradients.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metric::{Metric, MetricKind};
use super::{run_loop, BatchPolicy, LoopOptions, LossTrace, Optimizer, OptimizerConfig, OptimizerKind, TrainOutcome, TrainState};
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::field::{phi_pfgmpp, Denoiser, DenoiserParams, Dropout, Stage};
use crate::image::ImageTensor;
use crate::pfkernel::{perturb, sample_prior};
use crate::phantoms::PairedSample;
use crate::rng::{derived_rng, stream, Rng};
use crate::sample::heun_trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// EMA decay of the target network.
    pub mu: f64,
    pub metric: MetricKind,
    /// Weighting `lambda(sigma_i)`; only the constant weighting exists.
    pub lambda: String,
    pub n_steps: usize,
    pub d: f64,
    pub optimizer: OptimizerConfig,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub dropout: f64,
    pub policy: BatchPolicy,
}

impl DistillConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        DistillConfig {
            mu: 0.95,
            metric: MetricKind::PseudoHuber,
            lambda: "constant".to_string(),
            n_steps: run.n_steps,
            d: run.d,
            optimizer: OptimizerConfig::new(OptimizerKind::Radam, run.lr),
            iters: run.iters,
            batch: run.batch,
            seed: run.seed,
            dropout: 0.0,
            policy: BatchPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(invalid(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        if self.lambda != "constant" {
            return Err(invalid(format!("unknown weighting `{}`", self.lambda)));
        }
        if self.n_steps < 2 || self.batch == 0 || !(self.d > 2.0) {
            return Err(invalid("distillation needs n_steps >= 2, batch >= 1 and D > 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        self.optimizer.validate()
    }
}

/// `target <- mu * target + (1 - mu) * online`, exact at `mu` = 0 and 1.
pub fn ema_update(target: &mut [f64], online: &[f64], mu: f64) {
    if mu == 1.0 {
        return;
    }
    if mu == 0.0 {
        target.copy_from_slice(online);
        return;
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = mu * *t + (1.0 - mu) * o;
    }
}

/// `d(f_online(x_a, sigma_a, y), f_target(x_b, sigma_b, y))` and its
/// gradient with respect to the online weights only; the target branch is
/// evaluated as a constant.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss(
    theta: &DenoiserParams,
    online: &[f64],
    target: &[f64],
    x_a: &ImageTensor,
    sigma_a: f64,
    x_b: &ImageTensor,
    sigma_b: f64,
    y: &ImageTensor,
    metric: &Metric,
    dropout: Option<Dropout>,
) -> Result<(f64, Vec<f64>)> {
    let (goal, _) = theta.forward_with(target, x_b, sigma_b, y, None)?;
    let (pred, tape) = theta.forward_with(online, x_a, sigma_a, y, dropout)?;
    let (loss, g_pred) = metric.distance_grad(&pred, &goal)?;
    let mut grad = vec![0.0; online.len()];
    theta.backward_with(online, &tape, &g_pred, &mut grad);
    Ok((loss, grad))
}

/// Loss and student gradient for one example at ascending index `i`.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_grad(
    theta: &DenoiserParams,
    online: &[f64],
    target: &[f64],
    phi: &dyn Denoiser,
    sample: &PairedSample,
    i: usize,
    metric: &Metric,
    rng: &mut Rng,
    dropout: Option<Dropout>,
) -> Result<(f64, Vec<f64>)> {
    let sched = theta.meta.schedule()?;
    let (lo, hi) = (sched.ascending(i)?, sched.ascending(i + 1)?);
    let x_hi = perturb(&sample.clean, hi, theta.meta.d, rng)?;
    let drift = phi_pfgmpp(phi, &x_hi, hi, &sample.noisy)?;
    let x_lo = x_hi.add_scaled(lo - hi, &drift)?;
    consistency_loss(theta, online, target, &x_hi, hi, &x_lo, lo, &sample.noisy, metric, dropout)
}

/// One optimizer step on `state.weights` over `batch` followed by the EMA
/// update of `state.target`. Each batch entry carries its ascending index.
/// The state is left unchanged when the loss is not finite.
pub fn distill_step(
    state: &mut TrainState,
    phi: &dyn Denoiser,
    batch: &[(PairedSample, usize)],
    cfg: &DistillConfig,
    metric: &Metric,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let theta = DenoiserParams {
        meta: state.meta.clone(),
        arch: state.arch.clone(),
        weights: Vec::new(),
    };
    let target = state
        .target
        .as_ref()
        .ok_or_else(|| invalid("distillation state has no target network"))?;
    let mut rng = derived_rng(seed, &[stream::DISTILL]);
    let mut drop_rng = derived_rng(seed, &[stream::DROPOUT]);
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; state.weights.len()];
    let mut loss = 0.0;
    for (sample, i) in batch {
        let dropout = (cfg.dropout > 0.0).then(|| Dropout {
            rate: cfg.dropout,
            rng: &mut drop_rng,
        });
        let (l, g) = distill_loss_grad(&theta, &state.weights, target, phi, sample, *i, metric, &mut rng, dropout)?;
        loss += scale * l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += scale * b;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("distillation loss is {loss}")));
    }
    state.optimizer.step(&mut state.weights, &mut grad);
    let online = &state.weights;
    ema_update(state.target.as_mut().unwrap(), online, cfg.mu);
    Ok(loss)
}

/// Distills `phi` into a consistency model initialized from `init`.
pub fn distill(
    phi: &dyn Denoiser,
    init: &DenoiserParams,
    dataset: &[PairedSample],
    cfg: &DistillConfig,
    metric: &Metric,
    opts: &LoopOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("distillation needs a non-empty dataset"));
    }
    let teacher = phi.meta();
    teacher.require_stage(Stage::Pfgmpp)?;
    teacher.require_d(cfg.d)?;
    if teacher.n_steps != cfg.n_steps {
        return Err(Error::MetadataMismatch(format!(
            "teacher schedule has {} steps, config asks for {}",
            teacher.n_steps, cfg.n_steps
        )));
    }
    let meta = init.meta.with_stage(Stage::Pfcm);
    meta.require_compatible(teacher)?;
    let mut state = match &opts.resume {
        Some(path) => {
            let s = TrainState::load(path)?;
            if s.meta != meta || s.arch != init.arch || s.seed != cfg.seed || s.target.is_none() {
                return Err(Error::MetadataMismatch("resume state belongs to a different distillation run".into()));
            }
            s
        }
        None => TrainState {
            meta,
            arch: init.arch.clone(),
            seed: cfg.seed,
            step: 0,
            weights: init.weights.clone(),
            target: Some(init.weights.clone()),
            optimizer: Optimizer::new(cfg.optimizer, init.weights.len())?,
            trace: LossTrace::default(),
        },
    };
    run_loop(&mut state, cfg.iters, opts, "distill", |st, step| {
        let mut rng = derived_rng(cfg.seed, &[stream::PATCH, stream::DISTILL, step as u64]);
        let batch = (0..cfg.batch)
            .map(|_| Ok((cfg.policy.draw(dataset, &mut rng)?, rng.random_range(1..cfg.n_steps))))
            .collect::<Result<Vec<_>>>()?;
        let step_seed = rng.random();
        distill_step(st, phi, &batch, cfg, metric, step_seed)
    })?;
    let model = state.model();
    Ok(TrainOutcome {
        model,
        trace: state.trace.clone(),
        state,
    })
}

/// Mean RMS difference between consistency outputs at adjacent states of
/// teacher Heun trajectories. Zero for a perfectly self-consistent model.
pub fn consistency_self_error(
    theta: &dyn Denoiser,
    phi: &dyn Denoiser,
    samples: &[PairedSample],
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let sched = theta.meta().schedule()?;
    let sigmas = sched.sigmas();
    let mut total = 0.0;
    let mut count = 0.0;
    for (k, s) in samples.iter().enumerate() {
        let mut rng = derived_rng(seed, &[stream::SAMPLE, k as u64]);
        let start = sample_prior(sched.sigma_max(), theta.meta().d, s.n(), &mut rng)?;
        let states = heun_trajectory(phi, &s.noisy, start, &sched)?;
        let outputs = sigmas
            .iter()
            .zip(&states)
            .map(|(&sigma, x)| theta.denoise(x, sigma, &s.noisy))
            .collect::<Result<Vec<_>>>()?;
        for pair in outputs.windows(2) {
            total += pair[0].distance(&pair[1])? / (s.clean.len() as f64).sqrt();
            count += 1.0;
        }
    }
    Ok(total / count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Arch, IdealSinglePoint, ModelMeta, UNetConfig};
    use crate::phantoms::{generate_pair, DoseModel, PhantomSpec};
    use crate::rng::rng_from_seed;

    fn run(n_steps: usize) -> RunConfig {
        RunConfig {
            n_steps,
            seed: 5,
            ..RunConfig::default()
        }
    }

    fn pixel_student(n_steps: usize) -> DenoiserParams {
        let meta = ModelMeta::from_config(&run(n_steps), Stage::Pfcm).unwrap();
        let mut m = DenoiserParams::init(Arch::Pixel { hidden: 2 }, meta, 1).unwrap();
        m.weights.iter_mut().enumerate().for_each(|(k, w)| *w += 0.05 * k as f64);
        m
    }

    fn pair(n: usize, seed: u64) -> PairedSample {
        generate_pair(&PhantomSpec::new(n), &DoseModel::default(), seed).unwrap()
    }

    fn teacher(x0: &ImageTensor, n_steps: usize) -> IdealSinglePoint {
        IdealSinglePoint {
            meta: ModelMeta::from_config(&run(n_steps), Stage::Pfgmpp).unwrap(),
            x0: x0.clone(),
        }
    }

    #[test]
    fn identical_branches_give_zero_loss() {
        let m = pixel_student(40);
        let s = pair(8, 1);
        let (loss, grad) = consistency_loss(
            &m, &m.weights, &m.weights, &s.noisy, 0.7, &s.noisy, 0.7, &s.noisy, &Metric::PseudoHuber, None,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_ignores_the_target_branch() {
        let m = pixel_student(40);
        let target: Vec<f64> = m.weights.iter().map(|w| w * 0.8 - 0.1).collect();
        let s = pair(8, 2);
        let t = teacher(&s.clean, 40);
        for metric in [Metric::L2, Metric::PseudoHuber] {
            let eval = |online: &[f64]| {
                distill_loss_grad(&m, online, &target, &t, &s, 20, &metric, &mut rng_from_seed(4), None).unwrap()
            };
            let (_, grad) = eval(&m.weights);
            for k in 0..m.num_params() {
                let h = 1e-6;
                let mut w = m.weights.clone();
                w[k] += h;
                let up = eval(&w).0;
                w[k] -= 2.0 * h;
                let down = eval(&w).0;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
                assert!(rel < 1e-3, "param {k}: fd {fd} vs {}", grad[k]);
            }
            // The target weights still enter the loss value.
            let moved: Vec<f64> = target.iter().map(|w| w + 0.3).collect();
            let (l2, _) =
                distill_loss_grad(&m, &m.weights, &moved, &t, &s, 20, &metric, &mut rng_from_seed(4), None).unwrap();
            assert_ne!(l2, eval(&m.weights).0);
        }
    }

    fn state(m: &DenoiserParams) -> TrainState {
        TrainState {
            meta: m.meta.clone(),
            arch: m.arch.clone(),
            seed: 0,
            step: 0,
            weights: m.weights.clone(),
            target: Some(m.weights.iter().map(|w| w - 0.2).collect()),
            optimizer: Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam, 1e-2), m.num_params()).unwrap(),
            trace: LossTrace::default(),
        }
    }

    #[test]
    fn ema_extremes() {
        let m = pixel_student(40);
        let s = pair(8, 3);
        let t = teacher(&s.clean, 40);
        let batch = vec![(s.clone(), 10)];
        let mut cfg = DistillConfig::from_run(&run(40));

        cfg.mu = 1.0;
        let mut st = state(&m);
        let frozen = st.target.clone();
        for k in 0..3 {
            distill_step(&mut st, &t, &batch, &cfg, &Metric::L2, k).unwrap();
            assert_eq!(st.target, frozen);
        }

        cfg.mu = 0.0;
        let mut st = state(&m);
        for k in 0..3 {
            distill_step(&mut st, &t, &batch, &cfg, &Metric::L2, k).unwrap();
            assert_eq!(st.target.as_ref().unwrap(), &st.weights);
        }
    }

    #[test]
    fn ema_gap_contracts() {
        let m = pixel_student(40);
        let s = pair(8, 3);
        let t = teacher(&s.clean, 40);
        let cfg = DistillConfig { mu: 0.9, ..DistillConfig::from_run(&run(40)) };
        let mut st = state(&m);
        let gap = |st: &TrainState| {
            st.weights.iter().zip(st.target.as_ref().unwrap()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        for k in 0..20 {
            let before = gap(&st);
            let prev = st.weights.clone();
            distill_step(&mut st, &t, &[(s.clone(), 1 + k as usize)], &cfg, &Metric::PseudoHuber, k).unwrap();
            let moved = st.weights.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(gap(&st) <= before + moved + 1e-12);
        }
    }

    #[test]
    fn teacher_is_never_modified() {
        let s = pair(8, 4);
        let meta = ModelMeta::from_config(&run(10), Stage::Pfgmpp).unwrap();
        let arch = Arch::UNet(UNetConfig { base_width: 2, mults: vec![1, 2], emb_dim: 3, freqs: 1 });
        let phi = DenoiserParams::init(arch, meta, 2).unwrap();
        let before = phi.hash();
        let mut cfg = DistillConfig::from_run(&run(10));
        cfg.iters = 3;
        let out = distill(&phi, &phi, &[s], &cfg, &Metric::PseudoHuber, &LoopOptions::default()).unwrap();
        assert_eq!(phi.hash(), before);
        assert_eq!(out.model.meta.stage, Stage::Pfcm);
        assert_ne!(out.model.weights, phi.weights);
    }

    #[test]
    fn metadata_mismatch_is_an_error() {
        let s = pair(8, 4);
        let t = teacher(&s.clean, 40);
        let student = pixel_student(40);
        let mut cfg = DistillConfig::from_run(&run(40));
        cfg.d = 2048.0;
        assert!(matches!(
            distill(&t, &student, std::slice::from_ref(&s), &cfg, &Metric::L2, &LoopOptions::default()),
            Err(Error::MetadataMismatch(_))
        ));
        let cfg = DistillConfig::from_run(&run(40));
        let wrong = pixel_student(20);
        assert!(distill(&t, &wrong, &[s], &cfg, &Metric::L2, &LoopOptions::default()).is_err());
    }

    #[test]
    fn deterministic_trace() {
        let s = pair(8, 4);
        let t = teacher(&s.clean, 40);
        let student = pixel_student(40);
        let mut cfg = DistillConfig::from_run(&run(40));
        cfg.iters = 5;
        let a = distill(&t, &student, std::slice::from_ref(&s), &cfg, &Metric::PseudoHuber, &LoopOptions::default()).unwrap();
        let b = distill(&t, &student, &[s], &cfg, &Metric::PseudoHuber, &LoopOptions::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }
}

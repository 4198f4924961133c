//! Poisson flow consistency models for paired image denoising.
//!
//! The crate covers the whole pipeline on synthetic data: phantom and
//! low-dose pair generation, the PFGM++ perturbation kernel, denoiser
//! networks with hand-written gradients, PFGM++ pretraining, consistency
//! distillation, the single-step and task-specific samplers, a multi-step
//! Heun baseline, and PSNR/SSIM evaluation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod image;
pub mod pfkernel;
pub mod phantoms;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod stats;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{Criterion, MetricsReport};
pub use field::{Arch, Denoiser, DenoiserParams, ModelMeta, Stage, UNetConfig};
pub use image::ImageTensor;
pub use phantoms::{DoseModel, PairedSample, PhantomSpec};
pub use schedule::NoiseSchedule;

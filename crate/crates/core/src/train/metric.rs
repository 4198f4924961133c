//! Distances `d(a, b)` for consistency matching, each with its gradient in
//! the first argument.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ImageTensor;

/// Pluggable feature-space distance, for example a perceptual network.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    /// Returns `d(a, b)` and `d d / d a`.
    fn distance_grad(&self, a: &ImageTensor, b: &ImageTensor) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// Mean squared difference.
    L2,
    /// `sqrt(|a - b|^2 + c^2) - c` with `c = 0.00054 * sqrt(N)`.
    PseudoHuber,
    External,
}

impl std::str::FromStr for MetricKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(MetricKind::L2),
            "pseudo-huber" => Ok(MetricKind::PseudoHuber),
            "external" => Ok(MetricKind::External),
            other => Err(invalid(format!("unknown metric `{other}`"))),
        }
    }
}

/// A resolved metric, ready to evaluate.
#[derive(Clone)]
pub enum Metric {
    L2,
    PseudoHuber,
    External(Arc<dyn PerceptualDistance>),
}

impl Metric {
    pub fn resolve(kind: MetricKind, external: Option<Arc<dyn PerceptualDistance>>) -> Result<Self> {
        match (kind, external) {
            (MetricKind::L2, _) => Ok(Metric::L2),
            (MetricKind::PseudoHuber, _) => Ok(Metric::PseudoHuber),
            (MetricKind::External, Some(e)) => Ok(Metric::External(e)),
            (MetricKind::External, None) => Err(invalid("external metric selected but no adapter supplied")),
        }
    }

    pub fn distance_grad(&self, a: &ImageTensor, b: &ImageTensor) -> Result<(f64, Vec<f64>)> {
        a.ensure_same_shape(b)?;
        let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let len = diff.len() as f64;
        match self {
            Metric::L2 => {
                let value = diff.iter().map(|d| d * d).sum::<f64>() / len;
                Ok((value, diff.iter().map(|d| 2.0 * d / len).collect()))
            }
            Metric::PseudoHuber => {
                let c = pseudo_huber_c(diff.len());
                let root = (diff.iter().map(|d| d * d).sum::<f64>() + c * c).sqrt();
                Ok((root - c, diff.iter().map(|d| d / root).collect()))
            }
            Metric::External(e) => e.distance_grad(a, b),
        }
    }
}

pub fn pseudo_huber_c(n_pixels: usize) -> f64 {
    0.00054 * (n_pixels as f64).sqrt()
}

//! Evaluation: metrics, per-image reports, the task-sampler grid search and
//! the four-way sampler ablation.

pub mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::field::{Denoiser, Stage};
use crate::image::ImageTensor;
use crate::phantoms::PairedSample;
use crate::rng::derive_seed;
use crate::sample::{hijack_only, mix, pfcm_sample, regularize_only, task_specific_sample, TaskSamplerConfig};
use crate::train::PerceptualDistance;

pub use metrics::{psnr, ssim};

/// Reports serialize non-finite numbers as the strings `"inf"`, `"-inf"`
/// and `"nan"`, since JSON has no literal for them.
mod float_text {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

mod opt_float_text {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => float_text::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "float_text")] f64);
        Ok(Option::<W>::deserialize(d)?.map(|W(v)| v))
    }
}

fn text(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.17e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    #[serde(with = "float_text")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, with = "opt_float_text", skip_serializing_if = "Option::is_none")]
    pub external: Option<f64>,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "float_text")]
    pub mean: f64,
    #[serde(with = "float_text")]
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        Aggregate {
            mean: crate::stats::mean(values),
            std: crate::stats::std_dev(values),
        }
    }

    fn close_to(&self, other: &Aggregate, tol: f64) -> bool {
        let same = |a: f64, b: f64| a == b || (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
        same(self.mean, other.mean) && (same(self.std, other.std) || (self.std.is_nan() && other.std.is_nan()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub nfe: usize,
    pub config: serde_json::Value,
    pub rows: Vec<ImageMetrics>,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<Aggregate>,
}

impl MetricsReport {
    pub fn from_rows(label: &str, nfe: usize, config: serde_json::Value, rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("a report needs at least one image"));
        }
        let (psnr, ssim, external) = aggregates(&rows)?;
        Ok(MetricsReport {
            label: label.to_string(),
            nfe,
            config,
            rows,
            psnr,
            ssim,
            external,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a report and checks its aggregates against its rows.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        let (psnr, ssim, external) = aggregates(&r.rows)?;
        let ext_ok = match (&external, &r.external) {
            (Some(a), Some(b)) => a.close_to(b, 1e-9),
            (None, None) => true,
            _ => false,
        };
        if !psnr.close_to(&r.psnr, 1e-9) || !ssim.close_to(&r.ssim, 1e-9) || !ext_ok {
            return Err(Error::Format(format!("report `{}`: aggregates disagree with rows", r.label)));
        }
        Ok(r)
    }

    /// `label,index,psnr,ssim,external,nfe` rows without a header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.label,
                row.index,
                text(row.psnr),
                text(row.ssim),
                row.external.map(text).unwrap_or_default(),
                self.nfe
            );
        }
        s
    }
}

pub const CSV_HEADER: &str = "label,index,psnr,ssim,external,nfe\n";

/// One CSV with a row per image per report.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    s
}

fn aggregates(rows: &[ImageMetrics]) -> Result<(Aggregate, Aggregate, Option<Aggregate>)> {
    if rows.is_empty() {
        return Err(Error::Format("report has no rows".into()));
    }
    let p: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
    let e: Option<Vec<f64>> = rows.iter().map(|r| r.external).collect();
    Ok((Aggregate::of(&p), Aggregate::of(&s), e.map(|e| Aggregate::of(&e))))
}

/// Scores `outputs` against `references` image by image.
pub fn score_images(
    outputs: &[ImageTensor],
    references: &[ImageTensor],
    external: Option<&dyn PerceptualDistance>,
) -> Result<Vec<ImageMetrics>> {
    if outputs.len() != references.len() {
        return Err(invalid("outputs and references differ in count"));
    }
    outputs
        .iter()
        .zip(references)
        .enumerate()
        .map(|(index, (o, r))| {
            Ok(ImageMetrics {
                index,
                psnr: psnr(o, r, 1.0)?,
                ssim: ssim(o, r)?,
                external: external.map(|e| e.distance_grad(o, r).map(|(d, _)| d)).transpose()?,
            })
        })
        .collect()
}

/// Grid-search selection rule; lower score wins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Psnr,
    Ssim,
    External,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(Criterion::Psnr),
            "ssim" => Ok(Criterion::Ssim),
            "external" => Ok(Criterion::External),
            other => Err(invalid(format!("unknown criterion `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub i: usize,
    pub sigma_hat: f64,
    pub w: f64,
    #[serde(with = "float_text")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, with = "opt_float_text", skip_serializing_if = "Option::is_none")]
    pub external: Option<f64>,
    #[serde(with = "float_text")]
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub criterion: Criterion,
    pub best_i: usize,
    pub best: TaskSamplerConfig,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,sigma_hat,w,psnr,ssim,external,score\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.i,
                text(c.sigma_hat),
                c.w,
                text(c.psnr),
                text(c.ssim),
                c.external.map(text).unwrap_or_default(),
                text(c.score)
            );
        }
        s
    }
}

/// Exhaustive search over hijack indices (1-based, descending schedule)
/// and mixing weights. Ties go to the smaller index, then the larger weight.
pub fn grid_search(
    theta: &dyn Denoiser,
    valset: &[PairedSample],
    i_grid: &[usize],
    w_grid: &[f64],
    criterion: Criterion,
    external: Option<&dyn PerceptualDistance>,
) -> Result<GridResult> {
    if valset.is_empty() {
        return Err(invalid("empty validation set"));
    }
    if i_grid.is_empty() || w_grid.is_empty() {
        return Err(invalid("empty search grid"));
    }
    if criterion == Criterion::External && external.is_none() {
        return Err(invalid("external criterion selected but no adapter supplied"));
    }
    theta.meta().require_stage(Stage::Pfcm)?;
    let sched = theta.meta().schedule()?;
    let refs: Vec<ImageTensor> = valset.iter().map(|s| s.clean.clone()).collect();
    let mut cells = Vec::with_capacity(i_grid.len() * w_grid.len());
    for &i in i_grid {
        // One network call per image; every weight reuses it.
        let sigma_hat = sched.index_to_sigma(i)?;
        TaskSamplerConfig::new(&sched, sigma_hat, 1.0)?;
        let denoised = valset
            .iter()
            .map(|s| theta.denoise(&s.noisy, sigma_hat, &s.noisy))
            .collect::<Result<Vec<_>>>()?;
        for &w in w_grid {
            TaskSamplerConfig::new(&sched, sigma_hat, w)?;
            let outs = denoised
                .iter()
                .zip(valset)
                .map(|(d, s)| mix(d, &s.noisy, w))
                .collect::<Result<Vec<_>>>()?;
            let rows = score_images(&outs, &refs, external)?;
            let (p, s, e) = aggregates(&rows)?;
            let score = match criterion {
                Criterion::Psnr => -p.mean,
                Criterion::Ssim => -s.mean,
                Criterion::External => e.map(|e| e.mean).unwrap_or(f64::NAN),
            };
            cells.push(GridCell {
                i,
                sigma_hat,
                w,
                psnr: p.mean,
                ssim: s.mean,
                external: e.map(|e| e.mean),
                score,
            });
        }
    }
    let better = |a: &GridCell, b: &GridCell| {
        a.score < b.score || (a.score == b.score && (a.i < b.i || (a.i == b.i && a.w > b.w)))
    };
    let best = cells
        .iter()
        .filter(|c| !c.score.is_nan())
        .fold(None::<&GridCell>, |acc, c| match acc {
            Some(b) if !better(c, b) => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::NonFinite("every grid cell scored NaN".into()))?;
    Ok(GridResult {
        criterion,
        best_i: best.i,
        best: TaskSamplerConfig {
            sigma_hat: best.sigma_hat,
            w: best.w,
        },
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub sigma_hat: f64,
    pub w: f64,
    pub seed: u64,
}

pub const ABLATION_LABELS: [&str; 4] = ["vanilla", "hijack", "regularization", "hijack+regularization"];

/// Runs vanilla, hijack-only, regularize-only and the full task-specific
/// sampler over `valset`. Image `k` uses the same prior seed in the two
/// rows that draw one.
pub fn ablation(
    theta: &dyn Denoiser,
    valset: &[PairedSample],
    cfg: &AblationConfig,
    external: Option<&dyn PerceptualDistance>,
) -> Result<Vec<MetricsReport>> {
    if valset.is_empty() {
        return Err(invalid("empty validation set"));
    }
    theta.meta().require_stage(Stage::Pfcm)?;
    let sched = theta.meta().schedule()?;
    let task = TaskSamplerConfig::new(&sched, cfg.sigma_hat, cfg.w)?;
    let refs: Vec<ImageTensor> = valset.iter().map(|s| s.clean.clone()).collect();
    let seed_of = |k: usize| derive_seed(cfg.seed, &[k as u64]);
    let mut reports = Vec::with_capacity(4);
    for label in ABLATION_LABELS {
        let mut nfe = 0;
        let mut outs = Vec::with_capacity(valset.len());
        for (k, s) in valset.iter().enumerate() {
            let r = match label {
                "vanilla" => pfcm_sample(theta, &s.noisy, seed_of(k))?,
                "hijack" => hijack_only(theta, &s.noisy, cfg.sigma_hat)?,
                "regularization" => regularize_only(theta, &s.noisy, cfg.w, seed_of(k))?,
                _ => task_specific_sample(theta, &s.noisy, &task)?,
            };
            nfe = nfe.max(r.nfe);
            outs.push(r.output.expect("samplers return an image"));
        }
        let rows = score_images(&outs, &refs, external)?;
        let config = serde_json::json!({
            "sigma_hat": cfg.sigma_hat,
            "w": cfg.w,
            "seed": cfg.seed,
            "d": theta.meta().d,
        });
        reports.push(MetricsReport::from_rows(label, nfe, config, rows)?);
    }
    Ok(reports)
}

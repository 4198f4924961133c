use std::path::{Path, PathBuf};
use std::time::Instant;

use pfcm_core::dataset::{load_pairs, read_image, write_image, write_pairs, Sidecar};
use pfcm_core::eval::{
    ablation, grid_search, reports_csv, score_images, AblationConfig, Criterion, GridResult, MetricsReport,
};
use pfcm_core::field::checkpoint::load_checkpoint;
use pfcm_core::phantoms::generate_pair;
use pfcm_core::rng::derive_seed;
use pfcm_core::sample::{heun_sample, SampleReport, hijack_only, pfcm_sample, regularize_only, task_specific_sample, TaskSamplerConfig};
use pfcm_core::train::{
    distill, pretrain, DistillConfig, LoopOptions, LossWeighting, Metric, MetricKind, PretrainConfig,
};
use pfcm_core::{Arch, DenoiserParams, DoseModel, ImageTensor, ModelMeta, PairedSample, PhantomSpec, RunConfig, Stage, UNetConfig};

use crate::args::*;
use crate::manifest::Recorder;
use crate::Failure;

type Outcome = Result<(), Failure>;

pub(crate) fn dispatch(command: Command, argv: &[String]) -> Outcome {
    let (out, name) = match &command {
        Command::PhantomGen(a) => (&a.common.out, "phantom-gen"),
        Command::Pretrain(a) => (&a.common.out, "pretrain"),
        Command::Distill(a) => (&a.common.out, "distill"),
        Command::Denoise(a) => (&a.common.out, "denoise"),
        Command::Gridsearch(a) => (&a.common.out, "gridsearch"),
        Command::Evaluate(a) => (&a.common.out, "evaluate"),
        Command::Ablate(a) => (&a.common.out, "ablate"),
    };
    let mut rec = Recorder::new(out, name);
    let start = Instant::now();
    let result = std::fs::create_dir_all(out).map_err(Failure::from).and_then(|_| match &command {
        Command::PhantomGen(a) => phantom_gen(a, &mut rec),
        Command::Pretrain(a) => run_pretrain(a, &mut rec),
        Command::Distill(a) => run_distill(a, &mut rec),
        Command::Denoise(a) => denoise(a, &mut rec),
        Command::Gridsearch(a) => gridsearch(a, &mut rec),
        Command::Evaluate(a) => evaluate(a, &mut rec),
        Command::Ablate(a) => ablate(a, &mut rec),
    });
    rec.finish(argv, &result, start.elapsed().as_secs_f64())?;
    result
}

/// Resolves the run configuration: built-in defaults, then `base` (model
/// metadata when a checkpoint is involved), then the config file, then flags.
fn resolve_config(common: &Common, base: Option<&ModelMeta>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(m) = base {
        cfg.d = m.d;
        cfg.sigma_min = m.sigma_min;
        cfg.sigma_max = m.sigma_max;
        cfg.rho = m.rho;
        cfg.n_steps = m.n_steps;
        cfg.sigma_data = m.sigma_data;
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::from(e).with_context(&format!("config file {}", path.display())))?;
        cfg.apply_str(&text)
            .map_err(|e| Failure::config(format!("config file {}: {e}", path.display())))?;
    }
    macro_rules! flag {
        ($($field:ident),*) => {$(
            if let Some(v) = common.$field {
                cfg.$field = v;
            }
        )*};
    }
    flag!(seed, d, sigma_min, sigma_max, rho, n_steps, sigma_data, lr, iters, batch, dropout);
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

impl Failure {
    fn with_context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

fn config_echo(cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).unwrap_or_default();
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

fn load_model(path: &Path, stage: Option<Stage>, rec: &mut Recorder, role: &str) -> Result<DenoiserParams, Failure> {
    let model = load_checkpoint(path, stage).map_err(|e| Failure::from(e).with_context(&path.display().to_string()))?;
    rec.input(path);
    rec.checkpoints.insert(role.to_string(), model.hash());
    Ok(model)
}

fn load_data(dir: &Path, rec: &mut Recorder) -> Result<Vec<PairedSample>, Failure> {
    let pairs = load_pairs(dir).map_err(|e| Failure::from(e).with_context(&dir.display().to_string()))?;
    rec.input(&dir.join("manifest.json"));
    Ok(pairs)
}

fn write_json(path: PathBuf, value: &impl serde::Serialize, rec: &mut Recorder) -> Outcome {
    std::fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    rec.output(path);
    Ok(())
}

fn write_text(path: PathBuf, text: &str, rec: &mut Recorder) -> Outcome {
    std::fs::write(&path, text)?;
    rec.output(path);
    Ok(())
}

fn phantom_gen(a: &PhantomGenArgs, rec: &mut Recorder) -> Outcome {
    let cfg = resolve_config(&a.common, None)?;
    let spec = PhantomSpec::new(a.n);
    let dose = DoseModel {
        dose_factor: a.dose,
        kernel_width: a.kernel_width,
        full_dose_std: a.full_dose_std,
    };
    rec.seed = Some(cfg.seed);
    rec.config = serde_json::json!({ "count": a.count, "spec": spec, "dose": dose, "seed": cfg.seed });
    let pairs = (0..a.count as u64)
        .map(|k| generate_pair(&spec, &dose, derive_seed(cfg.seed, &[k])))
        .collect::<pfcm_core::Result<Vec<_>>>()?;
    write_pairs(&a.common.out, &pairs)?;
    rec.outputs_with_prefix("pair_")?;
    rec.output(a.common.out.join("manifest.json"));
    println!("wrote {} pairs to {}", pairs.len(), a.common.out.display());
    Ok(())
}

fn build_arch(a: &ArchArgs) -> Result<Arch, Failure> {
    let arch = match a.arch {
        ArchKind::Unet => Arch::UNet(UNetConfig {
            base_width: a.width,
            mults: a.mults.clone(),
            emb_dim: a.emb_dim,
            freqs: a.freqs,
        }),
        ArchKind::Pixel => Arch::Pixel { hidden: a.hidden },
    };
    arch.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(arch)
}

fn loop_options(out: &Path, l: &LoopArgs) -> LoopOptions {
    LoopOptions {
        out_dir: Some(out.to_path_buf()),
        checkpoint_every: l.checkpoint_every,
        resume: l.resume.clone(),
        record_wallclock: l.record_wallclock,
    }
}

fn run_pretrain(a: &PretrainArgs, rec: &mut Recorder) -> Outcome {
    let run = resolve_config(&a.common, None)?;
    let arch = build_arch(&a.arch)?;
    let data = load_data(&a.data, rec)?;
    let mut cfg = PretrainConfig::from_run(&run);
    cfg.policy.patch = a.train.patch;
    cfg.policy.augment = !a.train.no_augment;
    cfg.weighting = match a.weighting {
        WeightingArg::Unit => LossWeighting::Unit,
        WeightingArg::Edm => LossWeighting::Edm,
    };
    cfg.p_mean = a.p_mean;
    cfg.p_std = a.p_std;
    rec.seed = Some(run.seed);
    rec.config = config_echo(
        &run,
        serde_json::json!({ "arch": arch, "policy": cfg.policy, "weighting": cfg.weighting,
            "p_mean": cfg.p_mean, "p_std": cfg.p_std, "optimizer": cfg.optimizer }),
    );
    if let Some(r) = &a.train.resume {
        rec.input(r);
    }
    let result = pretrain(&data, &cfg, arch, &loop_options(&a.common.out, &a.train));
    rec.outputs_with_prefix("pretrain")?;
    let outcome = result?;
    rec.checkpoints.insert("model".into(), outcome.model.hash());
    println!(
        "pretrained {} iterations; checkpoint {}",
        outcome.state.step,
        a.common.out.join("pretrain.ckpt").display()
    );
    Ok(())
}

fn run_distill(a: &DistillArgs, rec: &mut Recorder) -> Outcome {
    let teacher = load_model(&a.teacher, Some(Stage::Pfgmpp), rec, "teacher")?;
    let init = match &a.init {
        Some(p) => load_model(p, None, rec, "init")?,
        None => teacher.clone(),
    };
    let run = resolve_config(&a.common, Some(&teacher.meta))?;
    let data = load_data(&a.data, rec)?;
    let mut cfg = DistillConfig::from_run(&run);
    cfg.mu = a.mu;
    cfg.dropout = a.common.dropout.unwrap_or(0.0);
    cfg.metric = match a.metric {
        MetricArg::L2 => MetricKind::L2,
        MetricArg::PseudoHuber => MetricKind::PseudoHuber,
    };
    cfg.policy.patch = a.train.patch;
    cfg.policy.augment = !a.train.no_augment;
    let metric = Metric::resolve(cfg.metric, None)?;
    rec.seed = Some(run.seed);
    rec.config = config_echo(&run, serde_json::json!({ "distill": cfg }));
    if let Some(r) = &a.train.resume {
        rec.input(r);
    }
    let result = distill(&teacher, &init, &data, &cfg, &metric, &loop_options(&a.common.out, &a.train));
    rec.outputs_with_prefix("distill")?;
    let outcome = result?;
    rec.checkpoints.insert("model".into(), outcome.model.hash());
    println!(
        "distilled {} iterations; checkpoint {}",
        outcome.state.step,
        a.common.out.join("distill.ckpt").display()
    );
    Ok(())
}

/// Sampler settings after validation against the model.
#[derive(Clone, Copy, Debug)]
struct SamplerPlan {
    kind: SamplerArg,
    task: Option<TaskSamplerConfig>,
    w: Option<f64>,
    seed: u64,
}

impl SamplerPlan {
    fn new(kind: SamplerArg, t: &TaskArgs, grid: Option<&GridResult>, model: &DenoiserParams, seed: u64) -> Result<Self, Failure> {
        let sched = model.meta.schedule()?;
        let sigma_hat = match (grid, t.i, t.sigma_hat) {
            (Some(g), _, _) => Some(g.best.sigma_hat),
            (None, Some(i), _) => Some(sched.index_to_sigma(i).map_err(|e| Failure::config(e.to_string()))?),
            (None, None, s) => s,
        };
        let w = grid.map(|g| g.best.w).or(t.w);
        let need = |what: &str| Failure::usage(format!("sampler `{}` needs {what}", sampler_name(kind)));
        let task = match kind {
            SamplerArg::Task => {
                let s = sigma_hat.ok_or_else(|| need("--i or --sigma-hat"))?;
                let w = w.ok_or_else(|| need("--w"))?;
                Some(TaskSamplerConfig::new(&sched, s, w)?)
            }
            SamplerArg::Hijack => {
                let s = sigma_hat.ok_or_else(|| need("--i or --sigma-hat"))?;
                Some(TaskSamplerConfig::new(&sched, s, 1.0)?)
            }
            _ => None,
        };
        if kind == SamplerArg::Reg && w.is_none() {
            return Err(need("--w"));
        }
        Ok(SamplerPlan { kind, task, w, seed })
    }

    /// Runs the sampler on the `k`-th image.
    fn report(&self, model: &DenoiserParams, y: &ImageTensor, k: usize) -> Result<SampleReport, Failure> {
        let seed = derive_seed(self.seed, &[k as u64]);
        let report = match self.kind {
            SamplerArg::Vanilla => pfcm_sample(model, y, seed)?,
            SamplerArg::Task => task_specific_sample(model, y, self.task.as_ref().expect("validated"))?,
            SamplerArg::Hijack => hijack_only(model, y, self.task.expect("validated").sigma_hat)?,
            SamplerArg::Reg => regularize_only(model, y, self.w.expect("validated"), seed)?,
            SamplerArg::Heun => heun_sample(model, y, &model.meta.schedule()?, seed)?,
        };
        Ok(report)
    }

    /// Output image and NFE of the `k`-th image.
    fn apply(&self, model: &DenoiserParams, y: &ImageTensor, k: usize) -> Result<(ImageTensor, usize), Failure> {
        let report = self.report(model, y, k)?;
        let nfe = report.nfe;
        Ok((report.output.expect("samplers return an image"), nfe))
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "sampler": sampler_name(self.kind),
            "sigma_hat": self.task.map(|t| t.sigma_hat),
            "w": self.task.map(|t| t.w).or(self.w),
            "seed": self.seed,
        })
    }
}

fn sampler_name(kind: SamplerArg) -> &'static str {
    match kind {
        SamplerArg::Vanilla => "vanilla",
        SamplerArg::Task => "task",
        SamplerArg::Hijack => "hijack",
        SamplerArg::Reg => "reg",
        SamplerArg::Heun => "heun",
    }
}

fn image_sidecar(img: &ImageTensor, role: &str, seed: u64) -> Sidecar {
    Sidecar {
        n: img.n(),
        role: role.to_string(),
        seed,
        dose_factor: None,
        transform: 0,
    }
}

fn denoise(a: &DenoiseArgs, rec: &mut Recorder) -> Outcome {
    let model = load_model(&a.model, None, rec, "model")?;
    let cfg = resolve_config(&a.common, Some(&model.meta))?;
    let plan = SamplerPlan::new(a.sampler, &a.task, None, &model, cfg.seed)?;
    rec.seed = Some(cfg.seed);
    rec.config = plan.echo();
    let inputs: Vec<(String, ImageTensor)> = if a.input.is_dir() {
        load_data(&a.input, rec)?
            .into_iter()
            .enumerate()
            .map(|(k, p)| (format!("pair_{k:05}_denoised"), p.noisy))
            .collect()
    } else {
        let (img, _) = read_image(&a.input).map_err(|e| Failure::from(e).with_context(&a.input.display().to_string()))?;
        rec.input(&a.input.with_extension("f32"));
        let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(format!("{stem}_denoised"), img)]
    };
    let mut total_nfe = 0;
    for (k, (stem, y)) in inputs.iter().enumerate() {
        let report = plan.report(&model, y, k)?;
        total_nfe += report.nfe;
        let out = report.image();
        let path = write_image(&a.common.out, stem, out, &image_sidecar(out, "denoised", cfg.seed))?;
        rec.output(path.clone());
        rec.output(path.with_extension("json"));
        write_json(a.common.out.join(format!("{stem}_report.json")), &report, rec)?;
    }
    println!(
        "denoised {} image(s) with the {} sampler ({} network evaluations)",
        inputs.len(),
        sampler_name(a.sampler),
        total_nfe
    );
    Ok(())
}

fn criterion(c: CriterionArg) -> Result<Criterion, Failure> {
    match c {
        CriterionArg::Psnr => Ok(Criterion::Psnr),
        CriterionArg::Ssim => Ok(Criterion::Ssim),
        CriterionArg::External => Err(Failure::usage(
            "the external criterion needs a perceptual adapter, which the command line cannot supply",
        )),
    }
}

/// Parses `a..b` (inclusive) or a comma-separated list.
fn parse_index_grid(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::usage(format!("cannot parse index grid `{s}`"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn gridsearch(a: &GridArgs, rec: &mut Recorder) -> Outcome {
    let crit = criterion(a.criterion)?;
    let i_grid = parse_index_grid(&a.i_grid)?;
    let model = load_model(&a.model, Some(Stage::Pfcm), rec, "model")?;
    let cfg = resolve_config(&a.common, Some(&model.meta))?;
    let val = load_data(&a.data, rec)?;
    rec.seed = Some(cfg.seed);
    rec.config = serde_json::json!({ "i_grid": i_grid, "w_grid": a.w_grid, "criterion": crit });
    let result = grid_search(&model, &val, &i_grid, &a.w_grid, crit, None)?;
    write_text(a.common.out.join("grid.csv"), &result.to_csv(), rec)?;
    write_json(a.common.out.join("grid.json"), &result, rec)?;
    println!(
        "best: i = {}, sigma_hat = {}, w = {}",
        result.best_i, result.best.sigma_hat, result.best.w
    );
    Ok(())
}

fn read_grid(path: &Path, rec: &mut Recorder) -> Result<GridResult, Failure> {
    let g: GridResult = serde_json::from_slice(&std::fs::read(path)?)?;
    rec.input(path);
    Ok(g)
}

fn evaluate(a: &EvaluateArgs, rec: &mut Recorder) -> Outcome {
    let crit = criterion(a.criterion)?;
    let model = load_model(&a.model, None, rec, "model")?;
    let cfg = resolve_config(&a.common, Some(&model.meta))?;
    let grid = a.grid.as_ref().map(|p| read_grid(p, rec)).transpose()?;
    let plan = SamplerPlan::new(a.sampler, &a.task, grid.as_ref(), &model, cfg.seed)?;
    let val = load_data(&a.data, rec)?;
    rec.seed = Some(cfg.seed);
    let mut outs = Vec::with_capacity(val.len());
    let mut nfe = 0;
    for (k, s) in val.iter().enumerate() {
        let (o, n) = plan.apply(&model, &s.noisy, k)?;
        nfe = nfe.max(n);
        outs.push(o);
    }
    let refs: Vec<ImageTensor> = val.iter().map(|s| s.clean.clone()).collect();
    let mut echo = plan.echo();
    echo["criterion"] = serde_json::to_value(crit)?;
    echo["d"] = serde_json::json!(model.meta.d);
    rec.config = echo.clone();
    let report = MetricsReport::from_rows(sampler_name(a.sampler), nfe, echo, score_images(&outs, &refs, None)?)?;
    write_text(a.common.out.join("report.json"), &report.to_json()?, rec)?;
    write_text(a.common.out.join("report.csv"), &reports_csv(std::slice::from_ref(&report)), rec)?;
    if a.dump_diff {
        for (k, (o, r)) in outs.iter().zip(&refs).enumerate() {
            let diff = o.zip_map(r, |x, y| (x - y).abs())?;
            let path = write_image(&a.common.out, &format!("diff_{k:05}"), &diff, &image_sidecar(&diff, "diff", cfg.seed))?;
            rec.output(path.clone());
            rec.output(path.with_extension("json"));
        }
    }
    let (label, agg) = match crit {
        Criterion::Ssim => ("SSIM", report.ssim),
        _ => ("PSNR", report.psnr),
    };
    println!(
        "{}: {label} {:.4} ± {:.4} over {} images (NFE {})",
        report.label,
        agg.mean,
        agg.std,
        report.rows.len(),
        report.nfe
    );
    Ok(())
}

fn ablate(a: &AblateArgs, rec: &mut Recorder) -> Outcome {
    let model = load_model(&a.model, Some(Stage::Pfcm), rec, "model")?;
    let cfg = resolve_config(&a.common, Some(&model.meta))?;
    let grid = a.grid.as_ref().map(|p| read_grid(p, rec)).transpose()?;
    let plan = SamplerPlan::new(SamplerArg::Task, &a.task, grid.as_ref(), &model, cfg.seed)?;
    let task = plan.task.expect("task plan");
    let val = load_data(&a.data, rec)?;
    let acfg = AblationConfig {
        sigma_hat: task.sigma_hat,
        w: task.w,
        seed: cfg.seed,
    };
    rec.seed = Some(cfg.seed);
    rec.config = serde_json::to_value(acfg)?;
    let reports = ablation(&model, &val, &acfg, None)?;
    write_json(a.common.out.join("ablation.json"), &reports, rec)?;
    write_text(a.common.out.join("ablation.csv"), &reports_csv(&reports), rec)?;
    for r in &reports {
        println!(
            "{:<24} PSNR {:.3} ± {:.3}  SSIM {:.4} ± {:.4}  NFE {}",
            r.label, r.psnr.mean, r.psnr.std, r.ssim.mean, r.ssim.std, r.nfe
        );
    }
    Ok(())
}

//! `srpose`: low-resolution dataset generation, super-resolution, COCO
//! evaluation, subgroup analysis and threshold-routed pose runs.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use srpose::coco::{parse_dataset, read_detections, read_keypoint_results, scale_annotations, write_keypoint_results, Dataset};
use srpose::metrics::{evaluate, render_table, EvalConfig, EvalMode, MetricReport, Predictions};
use srpose::pipeline::{
    run_gtbox_eval, run_pipeline, write_decisions, BackendError, Backends, BuiltinBicubic,
    DirectorySource, PipelineError, PipelineOutput, ProcessBackend, RouterConfig, SrBackend,
    BUILTIN_BICUBIC,
};
use srpose::resample::{
    build_lr_dataset, resample, ManifestEntry, RasterImage, ResampleSpec,
    ANNOTATIONS_FILE, IMAGES_DIR, MANIFEST_FILE,
};
use srpose::subgroup::{assign_subgroups, per_subgroup_metrics, write_subgroup_csv, SubgroupMetric, SubgroupSpec};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "srpose", version, about = "Super-resolution pose estimation evaluation toolkit")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON config file; command-line flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed handed to external backends as SRPOSE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a bicubic low-resolution copy of a dataset.
    Downsample {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upscale a directory of images with the built-in bicubic or an external backend.
    Upscale {
        #[arg(long)]
        images: PathBuf,
        /// Also write annotations rescaled to the upscaled frame.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        scale: Option<u32>,
        /// `bicubic` or the path of a backend executable.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate detection or keypoint results against annotations.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Dataset whose areas pin size and subgroup labels.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Evaluated coordinates are the reference's times this factor.
        #[arg(long)]
        reference_scale: Option<f64>,
        /// Also compute per-subgroup metrics.
        #[arg(long)]
        subgroups: bool,
        #[arg(long)]
        bin_width: Option<f64>,
        #[arg(long)]
        bin_count: Option<u32>,
        /// Row label in the text table.
        #[arg(long, default_value = "results")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Threshold-routed end-to-end keypoint run.
    Route {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        scale: Option<u32>,
        /// Initial-area threshold in original pixels² (`inf` for SR only).
        #[arg(long)]
        threshold: Option<f64>,
        /// `bicubic` or the path of a backend executable.
        #[arg(long)]
        sr_backend: Option<String>,
        #[arg(long)]
        detector: Option<String>,
        #[arg(long)]
        keypoints: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keypoint run from ground-truth boxes.
    Gtbox {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        keypoints: Option<String>,
        /// Run on images upscaled by `--scale` with this backend.
        #[arg(long)]
        sr_backend: Option<String>,
        #[arg(long)]
        scale: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-subgroup comparison CSV of two `eval --subgroups` reports.
    Subgroups {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        treated: PathBuf,
        #[arg(long, value_enum, default_value = "ap")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aligned table of several reports, given as `NAME=report.json`.
    Report {
        #[arg(required = true)]
        reports: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Detection,
    Keypoints,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Detection => EvalMode::Detection,
            Mode::Keypoints => EvalMode::Keypoints,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Ap,
    Ar,
    DetectionRate,
}

impl From<Metric> for SubgroupMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Ap => SubgroupMetric::Ap,
            Metric::Ar => SubgroupMetric::Ar,
            Metric::DetectionRate => SubgroupMetric::DetectionRate,
        }
    }
}

/// Contents of `--config`; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    eval: Option<EvalConfig>,
    router: Option<RouterConfig>,
    subgroups: Option<BinConfig>,
    workers: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct BinConfig {
    bin_width: Option<f64>,
    bin_count: Option<u32>,
    reference_scale: Option<f64>,
}

/// Bad invocation (exit code 1).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage, 3 backend failure, 2 any other (data) error.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<BackendError>() {
            return 3;
        }
        if let Some(PipelineError::TooManyFailures { .. }) = cause.downcast_ref::<PipelineError>() {
            return 3;
        }
    }
    2
}

struct Ctx {
    file: FileConfig,
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(n) = cli.workers.or(file.workers) {
        if n == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx {
        seed: cli.seed.or(file.seed),
        file,
    };
    match cli.command {
        Command::Downsample { annotations, images, factor, out } => downsample(&annotations, &images, factor, &out),
        Command::Upscale { images, annotations, scale, backend, out } => {
            upscale(&ctx, &images, annotations.as_deref(), scale, backend, &out)
        }
        Command::Eval {
            annotations,
            results,
            mode,
            reference,
            reference_scale,
            subgroups,
            bin_width,
            bin_count,
            name,
            out,
        } => {
            let bins = BinConfig {
                bin_width,
                bin_count,
                reference_scale,
            };
            eval(&ctx, &annotations, &results, mode, reference.as_deref(), bins, subgroups, &name, out.as_deref())
        }
        Command::Route {
            annotations,
            images,
            scale,
            threshold,
            sr_backend,
            detector,
            keypoints,
            out,
        } => {
            let mut rc = ctx.file.router.clone().unwrap_or_default();
            if let Some(s) = scale {
                rc.scale = s;
            }
            if let Some(t) = threshold {
                rc.threshold = t;
            }
            if let Some(b) = sr_backend {
                rc.sr_backend = b;
            }
            if let Some(d) = detector {
                rc.detector = d;
            }
            if let Some(k) = keypoints {
                rc.keypoint_estimator = k;
            }
            route(&ctx, &annotations, &images, rc, &out)
        }
        Command::Gtbox { annotations, images, keypoints, sr_backend, scale, out } => {
            gtbox(&ctx, &annotations, &images, keypoints, sr_backend, scale, &out)
        }
        Command::Subgroups { baseline, treated, metric, out } => compare_subgroups(&baseline, &treated, metric, &out),
        Command::Report { reports, out } => report(&reports, out.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn downsample(annotations: &Path, images: &Path, factor: f64, out: &Path) -> Result<()> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(usage(format!("--factor must lie in (0, 1], got {factor}")));
    }
    let dataset = parse_dataset(annotations)?;
    create_dir(out)?;
    let lr = build_lr_dataset(&dataset, images, factor, out)?;
    let mut m = RunManifest::new(
        "downsample",
        serde_json::json!({ "factor": factor, "kernel_a": ResampleSpec::new(factor).a }),
        &[annotations, images],
    )?;
    m.builtin("resample", BUILTIN_BICUBIC);
    m.output(ANNOTATIONS_FILE);
    m.output(MANIFEST_FILE);
    for entry in lr.manifest.values() {
        m.output(Path::new(IMAGES_DIR).join(&entry.path));
    }
    for f in &lr.failures {
        eprintln!("image {}: {}", f.image_id, f.error);
        m.failures.push(serde_json::json!({ "image_id": f.image_id, "error": f.error.to_string() }));
    }
    m.write(out)?;
    println!(
        "wrote {} of {} images at factor {factor} to {}",
        lr.manifest.len(),
        dataset.images().len(),
        out.display()
    );
    Ok(())
}

enum Sr {
    Builtin(BuiltinBicubic),
    Process(ProcessBackend),
}

impl Sr {
    fn as_dyn(&self) -> &dyn SrBackend {
        match self {
            Self::Builtin(b) => b,
            Self::Process(p) => p,
        }
    }

    fn record(&self, m: &mut RunManifest, role: &str) -> Result<()> {
        match self {
            Self::Builtin(_) => {
                m.builtin(role, BUILTIN_BICUBIC);
                Ok(())
            }
            Self::Process(p) => m.external(role, p.exe()),
        }
    }
}

fn process(ctx: &Ctx, exe: &str, role: &str) -> Result<ProcessBackend> {
    if exe.is_empty() {
        return Err(usage(format!("no {role} backend given")));
    }
    let mut b = ProcessBackend::new(exe);
    if let Some(seed) = ctx.seed {
        b = b.with_env("SRPOSE_SEED", seed.to_string());
    }
    Ok(b)
}

fn sr_backend(ctx: &Ctx, spec: &str) -> Result<Sr> {
    if spec == BUILTIN_BICUBIC {
        Ok(Sr::Builtin(BuiltinBicubic))
    } else {
        Ok(Sr::Process(process(ctx, spec, "super-resolution")?))
    }
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn upscale(
    ctx: &Ctx,
    images: &Path,
    annotations: Option<&Path>,
    scale: Option<u32>,
    backend: Option<String>,
    out: &Path,
) -> Result<()> {
    let router = ctx.file.router.clone().unwrap_or_default();
    let scale = scale.unwrap_or(router.scale);
    if scale == 0 {
        return Err(usage("--scale must be at least 1"));
    }
    let backend = backend.unwrap_or(router.sr_backend);
    let sr = sr_backend(ctx, &backend)?;
    let dataset = annotations.map(parse_dataset).transpose()?;

    // (key, relative input name)
    let files: Vec<(String, String)> = match &dataset {
        Some(d) => d.images().iter().map(|im| (im.id.to_string(), im.file_name.clone())).collect(),
        None => {
            let mut names: Vec<String> = fs::read_dir(images)
                .with_context(|| format!("listing {}", images.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|p| is_image(p))
                .map(|p| p.file_name().expect("file").to_string_lossy().into_owned())
                .collect();
            names.sort();
            names.into_iter().map(|n| (n.clone(), n)).collect()
        }
    };

    let images_out = out.join(IMAGES_DIR);
    create_dir(&images_out)?;
    let renamed = |name: &str| -> String {
        if scale == 1 || matches!(sr, Sr::Process(_)) {
            name.to_string()
        } else {
            Path::new(name).with_extension("png").to_string_lossy().into_owned()
        }
    };
    if let Sr::Process(p) = &sr {
        if scale != 1 {
            p.upscale_dir(images, &images_out, scale)?;
        }
    }
    let spec = ResampleSpec::new(f64::from(scale));
    let outcomes: Vec<(String, Result<ManifestEntry>)> = files
        .par_iter()
        .map(|(key, name)| {
            let src = images.join(name);
            let rel = renamed(name);
            let dst = images_out.join(&rel);
            let result = (|| -> Result<ManifestEntry> {
                if let Some(parent) = dst.parent() {
                    create_dir(parent)?;
                }
                let img = if scale == 1 {
                    fs::copy(&src, &dst).with_context(|| format!("copying {}", src.display()))?;
                    RasterImage::load(&dst)?
                } else if matches!(sr, Sr::Builtin(_)) {
                    let up = resample(&RasterImage::load(&src)?, &spec)?;
                    up.save_png(&dst)?;
                    up
                } else {
                    RasterImage::load(&dst)?
                };
                Ok(ManifestEntry {
                    path: rel.clone(),
                    width: img.width(),
                    height: img.height(),
                    factor: f64::from(scale),
                })
            })();
            (key.clone(), result)
        })
        .collect();

    let mut m = RunManifest::new(
        "upscale",
        serde_json::json!({ "scale": scale, "backend": backend }),
        &[Some(images), annotations].into_iter().flatten().collect::<Vec<_>>(),
    )?;
    sr.record(&mut m, "super-resolution")?;
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    for (key, outcome) in outcomes {
        match outcome {
            Ok(entry) => {
                m.output(Path::new(IMAGES_DIR).join(&entry.path));
                manifest.insert(key, entry);
            }
            Err(e) => {
                eprintln!("{key}: {e:#}");
                m.failures.push(serde_json::json!({ "image": key, "error": format!("{e:#}") }));
            }
        }
    }
    if let Some(d) = &dataset {
        let scaled = scale_annotations(d, f64::from(scale))?.with_file_names(|im| renamed(&im.file_name));
        scaled.write(&out.join(ANNOTATIONS_FILE))?;
        m.output(ANNOTATIONS_FILE);
    }
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    m.output(MANIFEST_FILE);
    m.write(out)?;
    println!("upscaled {} of {} images by {scale} into {}", manifest.len(), files.len(), out.display());
    Ok(())
}

fn eval_config(ctx: &Ctx, mode: Option<Mode>) -> Result<EvalConfig> {
    let mut config = match (&ctx.file.eval, mode) {
        (Some(c), _) => c.clone(),
        (None, Some(m)) => EvalConfig::for_mode(m.into()),
        (None, None) => return Err(usage("--mode is required without an eval config")),
    };
    if let Some(m) = mode {
        config = config.with_mode(m.into());
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ctx: &Ctx,
    annotations: &Path,
    results: &Path,
    mode: Option<Mode>,
    reference: Option<&Path>,
    bins: BinConfig,
    subgroups: bool,
    name: &str,
    out: Option<&Path>,
) -> Result<()> {
    let config = eval_config(ctx, mode)?;
    let file_bins = ctx.file.subgroups.clone().unwrap_or_default();
    let bins = BinConfig {
        bin_width: bins.bin_width.or(file_bins.bin_width).or(Some(500.0)),
        bin_count: bins.bin_count.or(file_bins.bin_count).or(Some(24)),
        reference_scale: bins.reference_scale.or(file_bins.reference_scale),
    };
    if reference.is_none() && bins.reference_scale.is_some() {
        return Err(usage("--reference-scale needs --reference"));
    }
    let gt = parse_dataset(annotations)?;
    let labels = if reference.is_some() || subgroups {
        let ref_ds = reference.map(parse_dataset).transpose()?;
        let ref_name = reference.map_or_else(|| annotations.display().to_string(), |p| p.display().to_string());
        let spec = SubgroupSpec::new(bins.bin_width.unwrap_or(500.0), bins.bin_count.unwrap_or(24), ref_name)
            .map_err(|e| usage(e.to_string()))?;
        let labels = assign_subgroups(ref_ds.as_ref().unwrap_or(&gt), &spec, &config.area_ranges);
        Some(labels.for_frame(bins.reference_scale.unwrap_or(1.0)))
    } else {
        None
    };

    let detections;
    let keypoints;
    let preds = match config.mode {
        EvalMode::Detection => {
            detections = read_detections(results, Some(&gt))?;
            Predictions::Detections(&detections)
        }
        EvalMode::Keypoints => {
            keypoints = read_keypoint_results(results, Some(&gt))?;
            Predictions::Keypoints(&keypoints)
        }
    };
    let mut report = evaluate(&gt, preds, &config, labels.as_ref())?;
    if subgroups {
        let labels = labels.as_ref().expect("labels are built for subgroups");
        report.subgroups = per_subgroup_metrics(&gt, preds, &config, labels)?;
    }
    let table = render_table(&[(name, &report)]);
    print!("{table}");

    if let Some(out) = out {
        create_dir(out)?;
        let mut m = RunManifest::new(
            "eval",
            serde_json::json!({
                "eval": config,
                "subgroups": subgroups,
                "bins": bins,
                "pinned": reference.is_some(),
                "name": name,
            }),
            &[Some(annotations), Some(results), reference].into_iter().flatten().collect::<Vec<_>>(),
        )?;
        write_json(&out.join("report.json"), &report)?;
        m.output("report.json");
        fs::write(out.join("report.txt"), &table)?;
        m.output("report.txt");
        if subgroups {
            let file = fs::File::create(out.join("subgroups.csv"))?;
            srpose::subgroup::write_scores_csv(file, &report.subgroups)?;
            m.output("subgroups.csv");
        }
        m.write(out)?;
    }
    Ok(())
}

fn keypoint_report(ctx: &Ctx, gt: &Dataset, output: &PipelineOutput, name: &str, out: &Path, m: &mut RunManifest) -> Result<()> {
    let config = ctx.file.eval.clone().map_or_else(EvalConfig::keypoints, |c| c.with_mode(EvalMode::Keypoints));
    config.validate().map_err(|e| usage(e.to_string()))?;
    let report = evaluate(gt, Predictions::Keypoints(&output.keypoints), &config, None)?;
    let table = render_table(&[(name, &report)]);
    print!("{table}");
    write_keypoint_results(&out.join("keypoints.json"), &output.keypoints)?;
    m.output("keypoints.json");
    write_json(&out.join("report.json"), &report)?;
    m.output("report.json");
    fs::write(out.join("report.txt"), &table)?;
    m.output("report.txt");
    for f in &output.failures {
        eprintln!("image {}: {}", f.image_id, f.error);
        m.failures.push(serde_json::to_value(f)?);
    }
    Ok(())
}

fn route(ctx: &Ctx, annotations: &Path, images: &Path, rc: RouterConfig, out: &Path) -> Result<()> {
    rc.validate().map_err(|e| usage(e.to_string()))?;
    let gt = parse_dataset(annotations)?;
    let sr = sr_backend(ctx, &rc.sr_backend)?;
    let detector = process(ctx, &rc.detector, "detector")?;
    let estimator = process(ctx, &rc.keypoint_estimator, "keypoint")?;
    create_dir(out)?;
    let mut m = RunManifest::new(
        "route",
        serde_json::json!({ "router": rc, "seed": ctx.seed, "eval": ctx.file.eval }),
        &[annotations, images],
    )?;
    sr.record(&mut m, "super-resolution")?;
    m.external("detector", detector.exe())?;
    m.external("keypoints", estimator.exe())?;

    let backends = Backends {
        sr: sr.as_dyn(),
        detector: &detector,
        keypoints: &estimator,
    };
    let output = run_pipeline(gt.images(), &DirectorySource::new(images), &rc, backends, None)?;
    write_decisions(&out.join("decisions.jsonl"), &output.decisions)?;
    m.output("decisions.jsonl");
    let name = if rc.threshold.is_infinite() {
        "threshold=inf".to_string()
    } else {
        format!("threshold={}", rc.threshold)
    };
    keypoint_report(ctx, &gt, &output, &name, out, &mut m)?;
    m.write(out)?;
    Ok(())
}

fn gtbox(
    ctx: &Ctx,
    annotations: &Path,
    images: &Path,
    keypoints: Option<String>,
    sr_spec: Option<String>,
    scale: Option<u32>,
    out: &Path,
) -> Result<()> {
    let router = ctx.file.router.clone().unwrap_or_default();
    let estimator_exe = keypoints.unwrap_or(router.keypoint_estimator.clone());
    let estimator = process(ctx, &estimator_exe, "keypoint")?;
    let upscaled = sr_spec.is_some() || scale.is_some();
    let scale = scale.unwrap_or(router.scale);
    if scale == 0 {
        return Err(usage("--scale must be at least 1"));
    }
    let sr_spec = sr_spec.unwrap_or(router.sr_backend.clone());
    let sr = upscaled.then(|| sr_backend(ctx, &sr_spec)).transpose()?;
    let gt = parse_dataset(annotations)?;
    create_dir(out)?;
    let mut m = RunManifest::new(
        "gtbox",
        serde_json::json!({
            "scale": upscaled.then_some(scale),
            "sr_backend": upscaled.then_some(&sr_spec),
            "keypoints": estimator_exe,
            "seed": ctx.seed,
            "eval": ctx.file.eval,
        }),
        &[annotations, images],
    )?;
    if let Some(sr) = &sr {
        sr.record(&mut m, "super-resolution")?;
    }
    m.external("keypoints", estimator.exe())?;
    let output = run_gtbox_eval(
        &gt,
        &DirectorySource::new(images),
        sr.as_ref().map(|s| (s.as_dyn(), scale)),
        &estimator,
        None,
    )?;
    let name = if upscaled { format!("gt boxes, x{scale}") } else { "gt boxes".to_string() };
    keypoint_report(ctx, &gt, &output, &name, out, &mut m)?;
    m.write(out)?;
    Ok(())
}

fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn compare_subgroups(baseline: &Path, treated: &Path, metric: Metric, out: &Path) -> Result<()> {
    let b = read_report(baseline)?;
    let t = read_report(treated)?;
    if b.subgroups.is_empty() || t.subgroups.is_empty() {
        bail!("both reports need per-subgroup scores (run eval with --subgroups)");
    }
    let bins = |r: &MetricReport| r.subgroups.iter().map(|s| (s.index, s.area_lo, s.area_hi)).collect::<Vec<_>>();
    if bins(&b) != bins(&t) {
        bail!("baseline and treated reports use different subgroup bins");
    }
    create_dir(out)?;
    let metric: SubgroupMetric = metric.into();
    let name = format!("subgroups_{}.csv", serde_json::to_value(metric)?.as_str().unwrap_or("metric"));
    let file = fs::File::create(out.join(&name))?;
    write_subgroup_csv(file, &b.subgroups, &t.subgroups, metric)?;
    let mut m = RunManifest::new("subgroups", serde_json::json!({ "metric": metric }), &[baseline, treated])?;
    m.output(&name);
    m.write(out)?;
    println!("wrote {}", out.join(name).display());
    Ok(())
}

fn report(specs: &[String], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for spec in specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let n = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map_or_else(|| spec.clone(), |d| d.to_string_lossy().into_owned());
                (n, p)
            }
        };
        rows.push((name, read_report(&path)?, path));
    }
    if rows.iter().any(|(_, r, _)| r.mode != rows[0].1.mode) {
        return Err(usage("cannot tabulate detection and keypoint reports together"));
    }
    let table = render_table(&rows.iter().map(|(n, r, _)| (n.as_str(), r)).collect::<Vec<_>>());
    print!("{table}");
    if let Some(out) = out {
        create_dir(out)?;
        fs::write(out.join("table.txt"), &table)?;
        let inputs: Vec<&Path> = rows.iter().map(|(_, _, p)| p.as_path()).collect();
        let names: Vec<&str> = rows.iter().map(|(n, _, _)| n.as_str()).collect();
        let mut m = RunManifest::new("report", serde_json::json!({ "rows": names }), &inputs)?;
        m.output("table.txt");
        m.write(out)?;
    }
    Ok(())
}

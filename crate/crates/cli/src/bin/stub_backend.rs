//! Scripted backend speaking the srpose subprocess protocol, for tests and
//! dry runs without real models.
//!
//! Answers come from a COCO annotation file in the original image frame
//! (`SRPOSE_STUB_SCRIPT`). The frame of each incoming image is inferred from
//! its width relative to the scripted image.
//!
//! * `upscale`: built-in cubic resampling of every file in the input dir.
//! * `detect`: every non-crowd person's box and area, scaled to the frame.
//! * `keypoints`: for each box, the keypoints of the best-overlapping person.
//!
//! Optional environment:
//! * `SRPOSE_STUB_LOG`: append one JSON line per call.
//! * `SRPOSE_STUB_NOISE=<T>`: displace keypoints by a relative error that
//!   shrinks with person area natively and is flattened by upscaling; both
//!   error curves cross at initial area `T`.
//! * `SRPOSE_SEED`: seed for the displacement directions.
//! * `SRPOSE_STUB_FAIL=<id,id,…>`: fail on these image ids.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use srpose::coco::{
    parse_dataset, read_detections, write_detections, write_keypoint_results, BBox, Dataset,
    DetectionRecord, KeypointRecord, PersonAnnotation, ScoredKeypoint, NUM_KEYPOINTS,
};
use srpose::metrics::iou;
use srpose::resample::{resample, RasterImage, ResampleSpec};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    task: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    scale: u32,
    #[arg(long)]
    boxes: Option<PathBuf>,
}

/// Relative error at the crossover; see the module docs.
const CROSSOVER_ERROR: f64 = 0.1;

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stub backend: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: &Args) -> Result<()> {
    match args.task.as_str() {
        "upscale" => upscale(args),
        "detect" => detect(args),
        "keypoints" => keypoints(args),
        other => bail!("unknown task {other}"),
    }
}

fn log_call(task: &str, image_id: Option<u64>, image: Option<&RasterImage>, boxes: &[BBox]) -> Result<()> {
    let Ok(path) = std::env::var("SRPOSE_STUB_LOG") else {
        return Ok(());
    };
    let line = serde_json::json!({
        "task": task,
        "image_id": image_id,
        "width": image.map(RasterImage::width),
        "height": image.map(RasterImage::height),
        "boxes": boxes,
    });
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    f.write_all(format!("{line}\n").as_bytes())?;
    Ok(())
}

fn image_id(path: &Path) -> Result<u64> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let id = stem.parse().with_context(|| format!("{} is not named <image_id>.png", path.display()))?;
    if let Ok(list) = std::env::var("SRPOSE_STUB_FAIL") {
        if list.split(',').any(|s| s.trim().parse() == Ok(id)) {
            bail!("scripted failure on image {id}");
        }
    }
    Ok(id)
}

fn script() -> Result<Dataset> {
    let path = std::env::var("SRPOSE_STUB_SCRIPT").context("SRPOSE_STUB_SCRIPT is not set")?;
    Ok(parse_dataset(Path::new(&path))?)
}

/// Frame scale of `image` relative to the scripted image.
fn frame(script: &Dataset, id: u64, image: &RasterImage) -> Result<f64> {
    let record = script.image(id).ok_or_else(|| anyhow!("image {id} is not scripted"))?;
    Ok(f64::from(image.width()) / f64::from(record.width))
}

fn score(person: &PersonAnnotation) -> f64 {
    1.0 - (person.id.wrapping_mul(7919) % 1000) as f64 / 2000.0
}

fn upscale(args: &Args) -> Result<()> {
    log_call("upscale", None, None, &[])?;
    fs::create_dir_all(&args.output)?;
    let spec = ResampleSpec::new(f64::from(args.scale));
    let mut entries: Vec<PathBuf> = fs::read_dir(&args.input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries.iter().filter(|p| p.is_file()) {
        if std::env::var("SRPOSE_STUB_FAIL").is_ok() {
            image_id(path)?;
        }
        let img = RasterImage::load(path)?;
        let out = resample(&img, &spec)?;
        out.save_png(&args.output.join(path.file_name().expect("file has a name")))?;
    }
    Ok(())
}

fn detect(args: &Args) -> Result<()> {
    let id = image_id(&args.input)?;
    let image = RasterImage::load(&args.input)?;
    log_call("detect", Some(id), Some(&image), &[])?;
    let script = script()?;
    let s = frame(&script, id, &image)?;
    let dets: Vec<DetectionRecord> = script
        .annotations_for_image(id)
        .filter(|a| !a.iscrowd)
        .map(|a| DetectionRecord {
            image_id: id,
            bbox: a.bbox.scaled(s),
            score: score(a),
            area: Some(a.area * s * s),
        })
        .collect();
    write_detections(&args.output, &dets)?;
    Ok(())
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Relative keypoint error (displacement / √area) in a frame `s` times
/// the original, for a person of original area `area`.
fn relative_error(crossover: f64, area: f64, s: f64) -> f64 {
    if area <= 0.0 {
        return 0.0;
    }
    let native = CROSSOVER_ERROR * crossover / area;
    native / (s * s) + CROSSOVER_ERROR * (1.0 - 1.0 / (s * s))
}

fn pose(person: &PersonAnnotation, s: f64, noise: Option<f64>, seed: u64) -> KeypointRecord {
    let displacement = noise.map_or(0.0, |t| relative_error(t, person.area, s) * person.area.sqrt());
    let mut keypoints = [ScoredKeypoint::default(); NUM_KEYPOINTS];
    for (i, (out, gt)) in keypoints.iter_mut().zip(&person.keypoints).enumerate() {
        let h = splitmix(seed ^ splitmix(person.id.wrapping_mul(31).wrapping_add(i as u64)));
        let angle = (h >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
        *out = ScoredKeypoint {
            x: (gt.x + displacement * angle.cos()) * s,
            y: (gt.y + displacement * angle.sin()) * s,
            confidence: if gt.is_labeled() { 1.0 } else { 0.0 },
        };
    }
    KeypointRecord {
        image_id: person.image_id,
        keypoints,
        score: score(person),
    }
}

fn keypoints(args: &Args) -> Result<()> {
    let id = image_id(&args.input)?;
    let image = RasterImage::load(&args.input)?;
    let boxes_path = args.boxes.as_ref().context("--boxes is required for keypoints")?;
    let boxes: Vec<BBox> = read_detections(boxes_path, None)?.iter().map(|d| d.bbox).collect();
    log_call("keypoints", Some(id), Some(&image), &boxes)?;
    let script = script()?;
    let s = frame(&script, id, &image)?;
    let noise = std::env::var("SRPOSE_STUB_NOISE")
        .ok()
        .map(|v| v.parse::<f64>())
        .transpose()
        .context("SRPOSE_STUB_NOISE must be a number")?;
    let seed = std::env::var("SRPOSE_SEED")
        .ok()
        .map(|v| v.parse::<u64>())
        .transpose()
        .context("SRPOSE_SEED must be an integer")?
        .unwrap_or(0);
    let persons: Vec<&PersonAnnotation> = script.annotations_for_image(id).filter(|a| !a.iscrowd).collect();
    let poses: Vec<KeypointRecord> = boxes
        .iter()
        .map(|b| {
            let original = b.divided(s);
            let best = persons
                .iter()
                .map(|p| (iou(&original, &p.bbox), p))
                .filter(|(o, _)| *o > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((_, p)) => pose(p, s, noise, seed),
                None => KeypointRecord {
                    image_id: id,
                    keypoints: [ScoredKeypoint::default(); NUM_KEYPOINTS],
                    score: 0.0,
                },
            }
        })
        .collect();
    write_keypoint_results(&args.output, &poses)?;
    Ok(())
}

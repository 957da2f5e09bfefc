mod common;

use std::collections::BTreeMap;

use common::{by_image, image, person, synthetic_dataset, NearestSr, Oracle};
use srpose::coco::{
    scale_annotations, BBox, Dataset, DetectionRecord, KeypointRecord, PersonAnnotation,
    ScoredKeypoint, NUM_KEYPOINTS,
};
use srpose::metrics::{evaluate, EvalConfig, Predictions};
use srpose::pipeline::{
    route, run_gtbox_eval, run_pipeline, run_topdown, write_decisions, AreaSource, BackendError,
    Backends, Branch, Detector, KeypointEstimator, MemorySource, PipelineError, ProcessBackend,
    RouteDecision, RouterConfig,
};
use srpose::resample::RasterImage;

fn det(area: Option<f64>) -> DetectionRecord {
    DetectionRecord {
        image_id: 1,
        bbox: BBox::new(40.0, 80.0, 160.0, 360.0),
        score: 0.9,
        area,
    }
}

fn config(threshold: f64) -> RouterConfig {
    RouterConfig {
        threshold,
        ..RouterConfig::default()
    }
}

#[test]
fn routing_boundary_is_inclusive() {
    let cfg = config(3500.0);
    let dets = [det(Some(54_400.0)), det(Some(57_600.0)), det(Some(56_000.0)), det(None)];
    let d = route(&dets, &cfg);
    assert_eq!(d[0].initial_area, 3400.0);
    assert_eq!(d[0].branch, Branch::Sr);
    assert_eq!(d[0].bbox, dets[0].bbox);
    assert_eq!(d[1].initial_area, 3600.0);
    assert_eq!(d[1].branch, Branch::Original);
    assert_eq!(d[1].bbox, BBox::new(10.0, 20.0, 40.0, 90.0));
    assert_eq!(d[2].initial_area, 3500.0);
    assert_eq!(d[2].branch, Branch::Sr);
    // Box fallback: 160·360/16 = 3600.
    assert_eq!((d[3].area_source, d[3].branch), (AreaSource::BoxFallback, Branch::Original));
    assert_eq!(d.iter().map(|x| x.detection_id).collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert_eq!(route(&dets, &cfg), d);
}

#[test]
fn sr_branch_grows_with_the_threshold() {
    let areas: Vec<f64> = (0..200).map(|i| 1600.0 * f64::from(i)).collect();
    let dets: Vec<_> = areas.iter().map(|&a| det(Some(a))).collect();
    let mut previous: Option<Vec<Branch>> = None;
    for t in (0..=25).map(|i| 1000.0 * f64::from(i)).chain([f64::INFINITY]) {
        let branches: Vec<Branch> = route(&dets, &config(t)).iter().map(|d| d.branch).collect();
        if let Some(prev) = &previous {
            for (a, b) in prev.iter().zip(&branches) {
                assert!(!(*a == Branch::Sr && *b == Branch::Original), "T={t} dropped a person from SR");
            }
        }
        previous = Some(branches);
    }
    assert!(previous.unwrap().iter().all(|b| *b == Branch::Sr));
}

fn backends<'a>(oracle: &'a Oracle, sr: &'a NearestSr) -> Backends<'a> {
    Backends {
        sr,
        detector: oracle,
        keypoints: oracle,
    }
}

#[test]
fn degenerate_thresholds_equal_plain_runs() {
    let (ds, source) = synthetic_dataset(12, 5);
    let oracle = Oracle::new(ds.clone()).with_noise(2000.0, 9);
    let b = backends(&oracle, &NearestSr);
    let sr_only = run_topdown(ds.images(), &source, b, Some(4), Some(2)).unwrap();
    let lr_only = run_topdown(ds.images(), &source, b, None, Some(2)).unwrap();
    let at_inf = run_pipeline(ds.images(), &source, &config(f64::INFINITY), b, Some(2)).unwrap();
    let at_zero = run_pipeline(ds.images(), &source, &config(0.0), b, Some(2)).unwrap();
    assert_eq!(at_inf.keypoints, sr_only.keypoints);
    assert_eq!(at_zero.keypoints, lr_only.keypoints);
    assert_ne!(sr_only.keypoints, lr_only.keypoints);
    assert!(at_inf.decisions.iter().all(|d| d.branch == Branch::Sr));
    assert!(at_zero.decisions.iter().all(|d| d.branch == Branch::Original));
}

#[test]
fn original_branch_runs_on_the_original_image_with_divided_boxes() {
    let (ds, source) = synthetic_dataset(20, 6);
    let oracle = Oracle::new(ds.clone());
    let out = run_pipeline(ds.images(), &source, &config(2000.0), backends(&oracle, &NearestSr), Some(3)).unwrap();
    let calls = oracle.calls();

    let mut routed_original = 0;
    for p in ds.annotations() {
        let d: &RouteDecision = out
            .decisions
            .iter()
            .find(|d| d.image_id == p.image_id && d.bbox.divided(if d.branch == Branch::Sr { 4.0 } else { 1.0 }) == p.bbox)
            .expect("every person detected and routed");
        assert_eq!(d.initial_area, p.area);
        let want = if p.area > 2000.0 { Branch::Original } else { Branch::Sr };
        assert_eq!(d.branch, want);
        let (w, h) = if want == Branch::Original { (160, 120) } else { (640, 480) };
        let hit = calls
            .iter()
            .any(|c| c.image_id == p.image_id && (c.width, c.height) == (w, h) && c.boxes.contains(&d.bbox));
        assert!(hit, "person {} not estimated on the {w}x{h} image", p.id);
        if want == Branch::Original {
            routed_original += 1;
            assert_eq!(d.bbox, (p.bbox.scaled(4.0)).divided(4.0));
        }
    }
    assert!(routed_original > 5);
    // One call per non-empty branch and image.
    let mut per_image: BTreeMap<(u64, u32), usize> = BTreeMap::new();
    for c in &calls {
        *per_image.entry((c.image_id, c.width)).or_default() += 1;
    }
    assert!(per_image.values().all(|&n| n == 1));

    // Noise-free stub: every output lands exactly on ground truth.
    let r = evaluate(&ds, Predictions::Keypoints(&out.keypoints), &EvalConfig::keypoints(), None).unwrap();
    assert_eq!((r.ap, r.ar), (1.0, 1.0));
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let (ds, source) = synthetic_dataset(10, 8);
    let oracle = Oracle::new(ds.clone()).with_noise(3500.0, 1);
    let b = backends(&oracle, &NearestSr);
    let one = run_pipeline(ds.images(), &source, &config(3500.0), b, Some(1)).unwrap();
    let four = run_pipeline(ds.images(), &source, &config(3500.0), b, Some(4)).unwrap();
    assert_eq!(one, four);
    assert_eq!(by_image(&one.keypoints).len(), 10);
}

#[test]
fn failure_budget() {
    let (ds, source) = synthetic_dataset(20, 2);
    let mut oracle = Oracle::new(ds.clone());
    oracle.fail = vec![4];
    let out = run_pipeline(ds.images(), &source, &config(3500.0), backends(&oracle, &NearestSr), None).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].image_id, 4);
    assert!(out.keypoints.iter().all(|k| k.image_id != 4));

    // 2 of 20 sits exactly on the 10% budget.
    oracle.fail = vec![4, 9];
    assert!(run_pipeline(ds.images(), &source, &config(3500.0), backends(&oracle, &NearestSr), None).is_ok());
    oracle.fail = vec![4, 9, 17];
    let err = run_pipeline(ds.images(), &source, &config(3500.0), backends(&oracle, &NearestSr), None).unwrap_err();
    assert!(matches!(err, PipelineError::TooManyFailures { failed: 3, total: 20 }), "{err}");

    // Missing pixels count as failures too.
    let mut partial = MemorySource::default();
    for im in ds.images().iter().filter(|im| im.id != 7) {
        partial.insert(im.id, common::gradient(160, 120));
    }
    oracle.fail.clear();
    let out = run_pipeline(ds.images(), &partial, &config(3500.0), backends(&oracle, &NearestSr), None).unwrap();
    assert_eq!(out.failures.iter().map(|f| f.image_id).collect::<Vec<_>>(), [7]);
}

/// Ground-truth keypoints displaced by a fixed number of pixels in whatever
/// frame the estimator sees.
struct FixedError {
    script: Dataset,
    px: f64,
}

impl KeypointEstimator for FixedError {
    fn id(&self) -> String {
        "fixed-error".into()
    }

    fn estimate(&self, image_id: u64, image: &RasterImage, boxes: &[BBox]) -> Result<Vec<KeypointRecord>, BackendError> {
        let s = f64::from(image.width()) / f64::from(self.script.image(image_id).unwrap().width);
        let persons: Vec<&PersonAnnotation> = self.script.annotations_for_image(image_id).collect();
        Ok(boxes
            .iter()
            .map(|b| {
                let p = persons.iter().find(|p| p.bbox.scaled(s) == *b).expect("gt box");
                let mut keypoints = [ScoredKeypoint::default(); NUM_KEYPOINTS];
                for (out, k) in keypoints.iter_mut().zip(&p.keypoints) {
                    *out = ScoredKeypoint {
                        x: k.x * s + self.px,
                        y: k.y * s,
                        confidence: 1.0,
                    };
                }
                KeypointRecord {
                    image_id,
                    keypoints,
                    score: Oracle::score(p),
                }
            })
            .collect())
    }
}

#[test]
fn gtbox_evaluation() {
    // Full-size persons, then the half-scale copy the low-resolution runs see.
    let images = vec![image(1, 200, 160), image(2, 200, 160), image(3, 200, 160)];
    let persons = vec![
        person(1, 1, BBox::new(10.0, 10.0, 40.0, 60.0)),
        person(2, 1, BBox::new(100.0, 20.0, 50.0, 70.0)),
        person(3, 3, BBox::new(30.0, 40.0, 44.0, 56.0)),
    ];
    let full = Dataset::new(images, persons).unwrap();
    let half = scale_annotations(&full, 0.5).unwrap();
    let mut source = MemorySource::default();
    for id in 1..=3 {
        source.insert(id, common::gradient(100, 80));
    }

    let oracle = Oracle::new(half.clone());
    let out = run_gtbox_eval(&half, &source, None, &oracle, None).unwrap();
    let calls = oracle.calls();
    assert_eq!(calls.len(), 2);
    assert!(calls.iter().all(|c| c.image_id != 2), "image without persons was sent");
    let r = evaluate(&half, Predictions::Keypoints(&out.keypoints), &EvalConfig::keypoints(), None).unwrap();
    assert_eq!(r.ap, 1.0);

    // 2 px in the native frame against 2 px at ×4, i.e. 0.5 px back in the
    // original frame.
    let est = FixedError { script: half.clone(), px: 2.0 };
    let cfg = EvalConfig::keypoints();
    let native = run_gtbox_eval(&half, &source, None, &est, None).unwrap();
    let sr = run_gtbox_eval(&half, &source, Some((&NearestSr, 4)), &est, None).unwrap();
    let dx = sr.keypoints[0].keypoints[0].x - half.annotations()[0].keypoints[0].x;
    assert!((dx - 0.5).abs() < 1e-9);
    let a = evaluate(&half, Predictions::Keypoints(&native.keypoints), &cfg, None).unwrap();
    let b = evaluate(&half, Predictions::Keypoints(&sr.keypoints), &cfg, None).unwrap();
    assert!(b.ap > a.ap, "SR {} vs native {}", b.ap, a.ap);
}

fn sh(script: &str) -> ProcessBackend {
    // `sh -c script sh --task T --input I --output O …`: $2 is the task,
    // $4 the input and $6 the output.
    ProcessBackend::new("sh").with_args(vec!["-c".into(), script.into(), "sh".into()])
}

#[test]
fn process_backend_protocol_and_errors() {
    let img = common::gradient(8, 6);

    let ok = sh(r#"id=$(basename "$4" .png); echo "[{\"image_id\":$id,\"category_id\":1,\"bbox\":[1,2,3,4],\"score\":0.5,\"area\":7}]" > "$6""#);
    let dets = ok.detect(42, &img).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!((dets[0].image_id, dets[0].bbox, dets[0].area), (42, BBox::new(1.0, 2.0, 3.0, 4.0), Some(7.0)));

    let failing = sh("echo boom >&2; exit 3");
    match failing.detect(1, &img).unwrap_err() {
        BackendError::Failed { task, stderr, .. } => assert_eq!((task, stderr.as_str()), ("detect", "boom")),
        e => panic!("unexpected {e}"),
    }

    let foreign = sh(r#"echo '[{"image_id":5,"category_id":1,"bbox":[0,0,1,1],"score":1}]' > "$6""#);
    assert!(matches!(foreign.detect(1, &img).unwrap_err(), BackendError::Output(_)));

    let missing = ProcessBackend::new("/nonexistent/backend");
    assert!(matches!(missing.detect(1, &img).unwrap_err(), BackendError::Spawn { .. }));

    let env = sh(r#"test "$SRPOSE_SEED" = 11 && echo '[]' > "$6""#).with_env("SRPOSE_SEED", "11");
    assert!(env.detect(1, &img).unwrap().is_empty());

    // Fewer poses than boxes fails the image.
    let (ds, source) = synthetic_dataset(1, 3);
    let short = sh(r#"echo '[]' > "$6""#);
    let err = run_gtbox_eval(&ds, &source, None, &short, None).unwrap_err();
    assert!(matches!(err, PipelineError::TooManyFailures { failed: 1, total: 1 }));
}

#[test]
fn decisions_round_trip_as_json_lines() {
    let dets = [det(Some(54_400.0)), det(None)];
    let decisions = route(&dets, &config(f64::INFINITY));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decisions.jsonl");
    write_decisions(&path, &decisions).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("\"threshold\":null") && lines[0].contains("\"branch\":\"SR\""));
    assert!(lines[1].contains("\"area_source\":\"box_fallback\""));
    let back: Vec<RouteDecision> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, decisions);
}

//! Brute-force re-implementation of COCO matching and AP, written with
//! explicit loops over plain arrays and sharing no code with the crate.

use rand::Rng;

use srpose::coco::{
    BBox, Dataset, DetectionRecord, ImageRecord, KeypointRecord, LabeledKeypoint,
    PersonAnnotation, ScoredKeypoint, NUM_KEYPOINTS,
};
use srpose::metrics::{AreaRange, EvalConfig, EvalMode, Predictions, Slice};

/// One randomized evaluation problem.
pub struct Instance {
    pub dataset: Dataset,
    pub detections: Vec<DetectionRecord>,
    pub keypoints: Vec<KeypointRecord>,
    pub config: EvalConfig,
    pub slice: Slice,
}

impl Instance {
    pub fn predictions(&self) -> Predictions<'_> {
        match self.config.mode {
            EvalMode::Detection => Predictions::Detections(&self.detections),
            EvalMode::Keypoints => Predictions::Keypoints(&self.keypoints),
        }
    }
}

const SIDE: f64 = 48.0;

fn random_box(rng: &mut impl Rng) -> BBox {
    // Integer lattice so that exact IoU ties and duplicates occur.
    let w = f64::from(rng.gen_range(1..=24u32));
    let h = f64::from(rng.gen_range(1..=24u32));
    let x = f64::from(rng.gen_range(0..=(SIDE - w) as u32));
    let y = f64::from(rng.gen_range(0..=(SIDE - h) as u32));
    BBox::new(x, y, w, h)
}

/// Up to 20 images with at most 10 ground truths and 10 predictions each.
pub fn random_instance(rng: &mut impl Rng, mode: EvalMode) -> Instance {
    let n_images = rng.gen_range(1..=20u64);
    let mut images = Vec::new();
    let mut gts: Vec<PersonAnnotation> = Vec::new();
    let mut detections = Vec::new();
    let mut keypoints = Vec::new();
    let scores = [0.2, 0.4, 0.5, 0.6, 0.8, 0.9];
    let mut next_id = 1u64;
    for image_id in 1..=n_images {
        images.push(ImageRecord {
            id: image_id,
            width: SIDE as u32,
            height: SIDE as u32,
            file_name: format!("{image_id}.png"),
        });
        let first = gts.len();
        for _ in 0..rng.gen_range(0..=10) {
            let bbox = random_box(rng);
            let mut kps = [LabeledKeypoint::default(); NUM_KEYPOINTS];
            let unlabeled = mode == EvalMode::Keypoints && rng.gen_bool(0.15);
            for k in &mut kps {
                if !unlabeled && rng.gen_bool(0.7) {
                    *k = LabeledKeypoint {
                        x: bbox.x + rng.gen_range(0.0..=bbox.w),
                        y: bbox.y + rng.gen_range(0.0..=bbox.h),
                        visibility: rng.gen_range(1..=2),
                    };
                }
            }
            gts.push(PersonAnnotation {
                id: next_id,
                image_id,
                keypoints: kps,
                segmentation: None,
                area: (bbox.area() * rng.gen_range(0.5..1.0)).round().max(1.0),
                bbox,
                iscrowd: rng.gen_bool(0.12),
            });
            // Ids are not in image-position order, to exercise the id tie rule.
            next_id += rng.gen_range(1..4);
        }
        let image_gts = &gts[first..];
        for _ in 0..rng.gen_range(0..=10) {
            let score = if rng.gen_bool(0.5) {
                scores[rng.gen_range(0..scores.len())]
            } else {
                rng.gen_range(0.0..1.0)
            };
            let near = (!image_gts.is_empty() && rng.gen_bool(0.7))
                .then(|| &image_gts[rng.gen_range(0..image_gts.len())]);
            let bbox = match near {
                Some(g) if rng.gen_bool(0.4) => g.bbox,
                Some(g) => BBox::new(
                    (g.bbox.x + f64::from(rng.gen_range(-3..=3i32))).max(0.0),
                    (g.bbox.y + f64::from(rng.gen_range(-3..=3i32))).max(0.0),
                    (g.bbox.w + f64::from(rng.gen_range(-3..=3i32))).max(1.0),
                    (g.bbox.h + f64::from(rng.gen_range(-3..=3i32))).max(1.0),
                ),
                None => random_box(rng),
            };
            detections.push(DetectionRecord {
                image_id,
                bbox,
                score,
                area: None,
            });
            let mut kps = [ScoredKeypoint::default(); NUM_KEYPOINTS];
            for (i, k) in kps.iter_mut().enumerate() {
                let (cx, cy) = match near {
                    Some(g) if g.keypoints[i].is_labeled() => (g.keypoints[i].x, g.keypoints[i].y),
                    Some(g) => (g.bbox.x + g.bbox.w / 2.0, g.bbox.y + g.bbox.h / 2.0),
                    None => (rng.gen_range(0.0..SIDE), rng.gen_range(0.0..SIDE)),
                };
                let spread = if rng.gen_bool(0.5) { 0.5 } else { 3.0 };
                *k = ScoredKeypoint {
                    x: cx + rng.gen_range(-spread..=spread),
                    y: cy + rng.gen_range(-spread..=spread),
                    confidence: 1.0,
                };
            }
            keypoints.push(KeypointRecord {
                image_id,
                keypoints: kps,
                score,
            });
        }
    }

    let mut config = EvalConfig::for_mode(mode);
    config.area_ranges = vec![
        AreaRange::new("small", 1.0, 100.0),
        AreaRange::new("medium", 100.0, 300.0),
        AreaRange::new("large", 300.0, f64::INFINITY),
    ];
    config.max_detections = rng.gen_range(3..=20);
    let slice = match rng.gen_range(0..4) {
        0 => Slice::All,
        i => Slice::Area(i - 1),
    };
    Instance {
        dataset: Dataset::new(images, gts).unwrap(),
        detections,
        keypoints,
        config,
        slice,
    }
}

// ---------------------------------------------------------------------------
// Oracle

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

fn box_similarity(d: &BBox, g: &BBox, crowd: bool) -> f64 {
    let inter = overlap(d.x, d.x + d.w, g.x, g.x + g.w) * overlap(d.y, d.y + d.h, g.y, g.y + g.h);
    let union = if crowd {
        d.w * d.h
    } else {
        d.w * d.h + g.w * g.h - inter
    };
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn pose_similarity(p: &KeypointRecord, g: &PersonAnnotation, k: &[f64]) -> f64 {
    let area = if g.area > f64::EPSILON { g.area } else { f64::EPSILON };
    let mut labeled = 0;
    for kp in &g.keypoints {
        if kp.visibility > 0 {
            labeled += 1;
        }
    }
    let mut sum = 0.0;
    for i in 0..NUM_KEYPOINTS {
        let (dx, dy);
        if labeled > 0 {
            if g.keypoints[i].visibility == 0 {
                continue;
            }
            dx = p.keypoints[i].x - g.keypoints[i].x;
            dy = p.keypoints[i].y - g.keypoints[i].y;
        } else {
            // Distance to a box twice the gt box.
            let b = &g.bbox;
            let x = p.keypoints[i].x;
            let y = p.keypoints[i].y;
            let (lx, hx, ly, hy) = (b.x - b.w, b.x + 2.0 * b.w, b.y - b.h, b.y + 2.0 * b.h);
            dx = if x < lx { lx - x } else if x > hx { x - hx } else { 0.0 };
            dy = if y < ly { ly - y } else if y > hy { y - hy } else { 0.0 };
        }
        let e = (dx * dx + dy * dy) / (2.0 * area * k[i] * k[i]);
        sum += (-e).exp();
    }
    let n = if labeled > 0 { labeled } else { NUM_KEYPOINTS };
    sum / n as f64
}

fn in_range(config: &EvalConfig, slice: Slice, area: f64) -> bool {
    match slice {
        Slice::Area(i) => {
            let r = &config.area_ranges[i];
            !(area < r.min) && area < r.max
        }
        _ => true,
    }
}

/// `(prediction index, matched gt id, ignored)` for one threshold.
pub type OracleMatch = (usize, Option<u64>, bool);

pub struct OracleImage {
    pub image_id: u64,
    pub num_gt: usize,
    /// Per threshold, in processing order.
    pub matches: Vec<Vec<OracleMatch>>,
    pub scores: Vec<f64>,
}

pub fn oracle_match(inst: &Instance) -> Vec<OracleImage> {
    let config = &inst.config;
    let mode = config.mode;
    let mut out = Vec::new();
    for im in inst.dataset.images() {
        let gts: Vec<&PersonAnnotation> = inst
            .dataset
            .annotations()
            .iter()
            .filter(|a| a.image_id == im.id)
            .collect();
        let mut ignore = Vec::new();
        for g in &gts {
            let mut labeled = 0;
            for k in &g.keypoints {
                if k.visibility > 0 {
                    labeled += 1;
                }
            }
            ignore.push(
                g.iscrowd
                    || !in_range(config, inst.slice, g.area)
                    || (mode == EvalMode::Keypoints && labeled == 0),
            );
        }
        let num_gt = ignore.iter().filter(|i| !**i).count();

        // Prediction indices on this image, selection-sorted by score with
        // the earlier index first on ties.
        let mut pending: Vec<usize> = Vec::new();
        let n_preds = match mode {
            EvalMode::Detection => inst.detections.len(),
            EvalMode::Keypoints => inst.keypoints.len(),
        };
        let score = |i: usize| match mode {
            EvalMode::Detection => inst.detections[i].score,
            EvalMode::Keypoints => inst.keypoints[i].score,
        };
        let image_of = |i: usize| match mode {
            EvalMode::Detection => inst.detections[i].image_id,
            EvalMode::Keypoints => inst.keypoints[i].image_id,
        };
        for i in 0..n_preds {
            if image_of(i) == im.id {
                pending.push(i);
            }
        }
        let mut order = Vec::new();
        while !pending.is_empty() && order.len() < config.max_detections {
            let mut best = 0;
            for j in 1..pending.len() {
                if score(pending[j]) > score(pending[best]) {
                    best = j;
                }
            }
            order.push(pending.remove(best));
        }

        let sim = |p: usize, g: &PersonAnnotation| match mode {
            EvalMode::Detection => box_similarity(&inst.detections[p].bbox, &g.bbox, g.iscrowd),
            EvalMode::Keypoints => pose_similarity(&inst.keypoints[p], g, &config.falloff),
        };
        let pred_area = |p: usize| match mode {
            EvalMode::Detection => inst.detections[p].bbox.w * inst.detections[p].bbox.h,
            EvalMode::Keypoints => {
                let k = &inst.keypoints[p].keypoints;
                let xs = k.iter().map(|k| k.x);
                let ys = k.iter().map(|k| k.y);
                (xs.clone().fold(f64::MIN, f64::max) - xs.fold(f64::MAX, f64::min))
                    * (ys.clone().fold(f64::MIN, f64::max) - ys.fold(f64::MAX, f64::min))
            }
        };

        let mut per_threshold = Vec::new();
        for &t in &config.thresholds {
            let mut used = vec![false; gts.len()];
            let mut matches = Vec::new();
            for &p in &order {
                // Best available gt in a class: highest similarity ≥ t,
                // lowest id among equals.
                let pick = |want_ignored: bool, used: &[bool]| {
                    let mut best: Option<usize> = None;
                    for g in 0..gts.len() {
                        if ignore[g] != want_ignored || (used[g] && !gts[g].iscrowd) {
                            continue;
                        }
                        let s = sim(p, gts[g]);
                        if s < t {
                            continue;
                        }
                        best = match best {
                            None => Some(g),
                            Some(b) => {
                                let sb = sim(p, gts[b]);
                                if s > sb || (s == sb && gts[g].id < gts[b].id) {
                                    Some(g)
                                } else {
                                    Some(b)
                                }
                            }
                        };
                    }
                    best
                };
                let chosen = pick(false, &used).or_else(|| pick(true, &used));
                match chosen {
                    Some(g) => {
                        used[g] = true;
                        matches.push((p, Some(gts[g].id), ignore[g]));
                    }
                    None => matches.push((p, None, !in_range(config, inst.slice, pred_area(p)))),
                }
            }
            per_threshold.push(matches);
        }
        out.push(OracleImage {
            image_id: im.id,
            num_gt,
            matches: per_threshold,
            scores: order.iter().map(|&p| score(p)).collect(),
        });
    }
    out
}

/// `(ap, ar)` per threshold, straight from the definition: interpolated
/// precision at recall r is the best precision at any rank reaching r.
pub fn oracle_ap(images: &[OracleImage], n_thresholds: usize) -> Vec<(f64, f64)> {
    let num_gt: usize = images.iter().map(|i| i.num_gt).sum();
    let mut out = Vec::new();
    for t in 0..n_thresholds {
        if num_gt == 0 {
            out.push((-1.0, -1.0));
            continue;
        }
        // (score, image position, rank in image, hit)
        let mut rows: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (ip, im) in images.iter().enumerate() {
            for (rank, m) in im.matches[t].iter().enumerate() {
                if !m.2 {
                    rows.push((im.scores[rank], ip, rank, m.1.is_some()));
                }
            }
        }
        rows.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut recall = Vec::new();
        let mut precision = Vec::new();
        let mut tp = 0usize;
        for (i, row) in rows.iter().enumerate() {
            if row.3 {
                tp += 1;
            }
            recall.push(tp as f64 / num_gt as f64);
            precision.push(tp as f64 / (i + 1) as f64);
        }
        let mut total = 0.0;
        for i in 0..101 {
            // numpy.linspace(0, 1, 101)
            let r = if i == 100 { 1.0 } else { i as f64 * 0.01 };
            let mut best = 0.0;
            for j in 0..recall.len() {
                if recall[j] >= r && precision[j] > best {
                    best = precision[j];
                }
            }
            total += best;
        }
        let ar = recall.last().copied().unwrap_or(0.0);
        out.push((total / 101.0, ar));
    }
    out
}

pub fn mean_valid(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| *x > -1.0).collect();
    if v.is_empty() {
        -1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

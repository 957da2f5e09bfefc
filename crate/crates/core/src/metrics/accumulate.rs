use serde::{Deserialize, Serialize};

use super::matching::MatchTable;
use super::report::NO_DATA;
use super::MetricsError;

/// Number of recall samples in interpolated AP: `0, 0.01, …, 1`.
pub const RECALL_POINTS: usize = 101;

// Same values as numpy's linspace(0, 1, 101), which the reference
// evaluator searches against; `i / 100` differs in the last bit for some i.
fn recall_point(i: usize) -> f64 {
    if i + 1 == RECALL_POINTS {
        1.0
    } else {
        i as f64 * 0.01
    }
}

/// AP/AR of one match table; `NO_DATA` when it has no ground truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ap: f64,
    pub ar: f64,
    /// `(ap, ar)` per threshold of the table.
    pub per_threshold: Vec<(f64, f64)>,
}

/// 101-point interpolated AP and final recall, averaged over thresholds.
pub fn average_precision(table: &MatchTable) -> Score {
    let num_gt = table.num_gt();
    let per_threshold: Vec<(f64, f64)> = (0..table.thresholds.len())
        .map(|t| {
            if num_gt == 0 {
                (NO_DATA, NO_DATA)
            } else {
                curve_score(table, t, num_gt)
            }
        })
        .collect();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        let valid: Vec<f64> = per_threshold.iter().map(f).filter(|v| *v > NO_DATA).collect();
        if valid.is_empty() {
            NO_DATA
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        }
    };
    Score {
        ap: mean(|s| s.0),
        ar: mean(|s| s.1),
        per_threshold,
    }
}

fn curve_score(table: &MatchTable, t: usize, num_gt: usize) -> (f64, f64) {
    // Image order, then a stable sort on score: ties keep image-id order.
    let mut entries: Vec<(f64, bool)> = table
        .images
        .iter()
        .flat_map(|im| im.matches[t].iter())
        .filter(|e| !e.ignored)
        .map(|e| (e.score, e.gt.is_some()))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n = num_gt as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(entries.len());
    let mut precision = Vec::with_capacity(entries.len());
    for &(_, hit) in &entries {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let target = recall_point(r);
        while idx < recall.len() && recall[idx] < target {
            idx += 1;
        }
        if idx == recall.len() {
            break;
        }
        sum += precision[idx];
    }
    let ar = recall.last().copied().unwrap_or(0.0);
    (sum / RECALL_POINTS as f64, ar)
}

/// Fraction of non-ignored ground truths matched at `threshold`, regardless
/// of score rank. `NO_DATA` when there are none.
pub fn detection_rate(table: &MatchTable, threshold: f64) -> Result<f64, MetricsError> {
    let t = table
        .thresholds
        .iter()
        .position(|v| (v - threshold).abs() < 1e-9)
        .ok_or(MetricsError::UnknownThreshold(threshold))?;
    let num_gt = table.num_gt();
    if num_gt == 0 {
        return Ok(NO_DATA);
    }
    let matched = table
        .images
        .iter()
        .flat_map(|im| im.matches[t].iter())
        .filter(|e| e.gt.is_some() && !e.ignored)
        .count();
    Ok(matched as f64 / num_gt as f64)
}

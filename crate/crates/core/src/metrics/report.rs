use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EvalMode;

/// Sentinel for cells without ground truths.
pub const NO_DATA: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeScore {
    pub label: String,
    pub ap: f64,
    pub ar: f64,
    pub num_ground_truths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupScore {
    /// 1-based bin index.
    pub index: u32,
    pub area_lo: f64,
    pub area_hi: f64,
    pub ap: f64,
    pub ar: f64,
    /// Only in detection mode.
    pub detection_rate: Option<f64>,
    pub num_persons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub ap: f64,
    pub ar: f64,
    pub per_threshold: Vec<ThresholdScore>,
    pub ranges: Vec<RangeScore>,
    #[serde(default)]
    pub subgroups: Vec<SubgroupScore>,
    pub detection_rate: Option<f64>,
    pub num_ground_truths: usize,
    pub num_predictions: usize,
}

impl MetricReport {
    /// `AP_S`-style column suffix from a range label.
    fn short(label: &str) -> String {
        label
            .chars()
            .next()
            .map(|c| c.to_ascii_uppercase().to_string())
            .unwrap_or_default()
    }

    fn columns(&self) -> Vec<(String, f64)> {
        let mut cols = vec![("AP".to_string(), self.ap)];
        for r in &self.ranges {
            cols.push((format!("AP_{}", Self::short(&r.label)), r.ap));
        }
        cols.push(("AR".to_string(), self.ar));
        for r in &self.ranges {
            cols.push((format!("AR_{}", Self::short(&r.label)), r.ar));
        }
        cols
    }
}

fn cell(v: f64) -> String {
    if v == NO_DATA {
        "-".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// Aligned text table, one row per named report: `AP, AP_<range>…, AR,
/// AR_<range>…`. Columns come from the first report.
pub fn render_table(rows: &[(&str, &MetricReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let headers: Vec<String> = first.columns().into_iter().map(|(h, _)| h).collect();
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(name, r)| {
            let cells = r.columns().into_iter().map(|(_, v)| cell(v)).collect();
            (name.to_string(), cells)
        })
        .collect();

    let name_w = body
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(["Dataset".len()])
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| {
            body.iter()
                .filter_map(|(_, c)| c.get(i).map(String::len))
                .chain([h.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();

    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Dataset");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (name, cells) in &body {
        let _ = write!(out, "{name:<name_w$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

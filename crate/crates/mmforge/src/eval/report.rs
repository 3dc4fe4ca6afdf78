//! Evaluation report assembly and rendering.
//!
//! Reports follow the familiar table layouts: counting as
//! Dataset/Model/MAE/MSE, VQA as Clip-Score/WUP, segmentation as a per-class
//! table with an mIoU footer and an improved/degraded/unchanged tally.
//! Counting and VQA numbers display with 2 decimals, mIoU with 4.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingSection {
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaSection {
    pub mean_embed_score: f64,
    pub mean_wup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReportRow {
    pub class_name: String,
    pub baseline_iou: f64,
    pub ours_iou: f64,
    pub delta: f64,
}

/// Per-class comparison plus the whole-set footer. `rows` may be a
/// representative subset of the classes behind the footer numbers, which is
/// how published tables usually present large class sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSection {
    pub rows: Vec<SegReportRow>,
    pub miou_baseline: f64,
    pub miou_ours: f64,
    pub improved: usize,
    pub degraded: usize,
    pub unchanged: usize,
}

/// The evaluation results for one dataset/model pair. Sections are optional;
/// absent sections are omitted from rendered reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counting: Option<CountingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vqa: Option<VqaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationSection>,
}

impl EvalReport {
    pub fn new(dataset: &str, model: &str) -> Self {
        EvalReport {
            dataset: dataset.to_string(),
            model: model.to_string(),
            counting: None,
            vqa: None,
            segmentation: None,
        }
    }
}

/// Compare per-class IoU maps. Classes must match exactly; deltas are exact
/// differences, the footer mIoU is the unweighted class mean, and each class
/// is classified as improved/degraded/unchanged against `epsilon`.
pub fn seg_report(
    baseline: &BTreeMap<String, f64>,
    ours: &BTreeMap<String, f64>,
    epsilon: f64,
) -> Result<SegmentationSection, EvalError> {
    if baseline.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if baseline.len() != ours.len() || !baseline.keys().eq(ours.keys()) {
        let missing: Vec<&str> = baseline
            .keys()
            .filter(|k| !ours.contains_key(*k))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = ours
            .keys()
            .filter(|k| !baseline.contains_key(*k))
            .map(String::as_str)
            .collect();
        return Err(EvalError::ClassSetMismatch(format!(
            "missing from ours: {missing:?}; not in baseline: {extra:?}"
        )));
    }

    let mut rows = Vec::with_capacity(baseline.len());
    let mut improved = 0;
    let mut degraded = 0;
    let mut unchanged = 0;
    for (class, &base) in baseline {
        let theirs = ours[class];
        let delta = theirs - base;
        if delta > epsilon {
            improved += 1;
        } else if delta < -epsilon {
            degraded += 1;
        } else {
            unchanged += 1;
        }
        rows.push(SegReportRow {
            class_name: class.clone(),
            baseline_iou: base,
            ours_iou: theirs,
            delta,
        });
    }

    let n = rows.len() as f64;
    Ok(SegmentationSection {
        miou_baseline: rows.iter().map(|r| r.baseline_iou).sum::<f64>() / n,
        miou_ours: rows.iter().map(|r| r.ours_iou).sum::<f64>() / n,
        rows,
        improved,
        degraded,
        unchanged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}; use markdown or csv")),
        }
    }
}

/// Render a report as deterministic table text.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
    }
}

fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "# Evaluation: {} / {}", report.dataset, report.model).unwrap();

    if let Some(counting) = &report.counting {
        writeln!(out).unwrap();
        writeln!(out, "## Counting").unwrap();
        writeln!(out).unwrap();
        writeln!(out, "| Dataset | Model | MAE | MSE |").unwrap();
        writeln!(out, "|---|---|---|---|").unwrap();
        writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} |",
            report.dataset, report.model, counting.mae, counting.mse
        )
        .unwrap();
    }

    if let Some(vqa) = &report.vqa {
        writeln!(out).unwrap();
        writeln!(out, "## VQA").unwrap();
        writeln!(out).unwrap();
        writeln!(out, "| Dataset | Model | Clip-Score | WUP |").unwrap();
        writeln!(out, "|---|---|---|---|").unwrap();
        writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} |",
            report.dataset, report.model, vqa.mean_embed_score, vqa.mean_wup
        )
        .unwrap();
    }

    if let Some(seg) = &report.segmentation {
        writeln!(out).unwrap();
        writeln!(out, "## Segmentation").unwrap();
        writeln!(out).unwrap();
        writeln!(out, "| Class | Baseline | Ours | Delta |").unwrap();
        writeln!(out, "|---|---|---|---|").unwrap();
        for row in &seg.rows {
            writeln!(
                out,
                "| {} | {:.2} | {:.2} | {:+.2} |",
                row.class_name, row.baseline_iou, row.ours_iou, row.delta
            )
            .unwrap();
        }
        writeln!(
            out,
            "| **mIoU** | {:.4} | {:.4} | {:+.4} |",
            seg.miou_baseline,
            seg.miou_ours,
            seg.miou_ours - seg.miou_baseline
        )
        .unwrap();
        writeln!(out).unwrap();
        writeln!(
            out,
            "Improved: {}    Degraded: {}    Unchanged: {}",
            seg.improved, seg.degraded, seg.unchanged
        )
        .unwrap();
    }

    out
}

fn render_csv(report: &EvalReport) -> String {
    let mut out = String::new();

    if let Some(counting) = &report.counting {
        writeln!(out, "counting").unwrap();
        writeln!(out, "dataset,model,mae,mse").unwrap();
        writeln!(
            out,
            "{},{},{:.2},{:.2}",
            report.dataset, report.model, counting.mae, counting.mse
        )
        .unwrap();
        writeln!(out).unwrap();
    }

    if let Some(vqa) = &report.vqa {
        writeln!(out, "vqa").unwrap();
        writeln!(out, "dataset,model,clip_score,wup").unwrap();
        writeln!(
            out,
            "{},{},{:.2},{:.2}",
            report.dataset, report.model, vqa.mean_embed_score, vqa.mean_wup
        )
        .unwrap();
        writeln!(out).unwrap();
    }

    if let Some(seg) = &report.segmentation {
        writeln!(out, "segmentation").unwrap();
        writeln!(out, "class,baseline,ours,delta").unwrap();
        for row in &seg.rows {
            writeln!(
                out,
                "{},{:.2},{:.2},{:+.2}",
                row.class_name, row.baseline_iou, row.ours_iou, row.delta
            )
            .unwrap();
        }
        writeln!(
            out,
            "miou,{:.4},{:.4},{:+.4}",
            seg.miou_baseline,
            seg.miou_ours,
            seg.miou_ours - seg.miou_baseline
        )
        .unwrap();
        writeln!(out, "improved,{}", seg.improved).unwrap();
        writeln!(out, "degraded,{}", seg.degraded).unwrap();
        writeln!(out, "unchanged,{}", seg.unchanged).unwrap();
    }

    out
}

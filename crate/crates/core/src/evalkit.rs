//! Classification metrics over generated labels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;
use crate::diagnose::{Diagnosis, ParseStatus};
use crate::synth::FaultType;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions but {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("truth label {0:?} is not in the label set")]
    UnknownTruth(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    pub non_defective: GroupMetrics,
    pub defective: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub label_set: String,
    /// Only exact matches count as predictions when set.
    pub strict: bool,
    pub samples: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub n_unparseable: usize,
    pub per_class: Vec<ClassMetrics>,
    pub groups: Groups,
    /// Rows are truths, columns predictions; the last column collects unparseable outputs.
    pub confusion: Vec<Vec<usize>>,
}

/// Class index each prediction maps to, or `None` when it counts as unparseable.
pub fn predicted_class(d: &Diagnosis, labels: &LabelSet, strict: bool) -> Option<usize> {
    if strict && d.parse_status != ParseStatus::Exact {
        return None;
    }
    d.parsed_label.as_deref().and_then(|l| labels.index_of(l))
}

pub fn evaluate(
    predictions: &[Diagnosis],
    truths: &[String],
    labels: &LabelSet,
    strict: bool,
) -> Result<MetricsReport, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let pred: Vec<Option<usize>> = predictions.iter().map(|d| predicted_class(d, labels, strict)).collect();
    let truth = truths
        .iter()
        .map(|t| labels.index_of(t).ok_or_else(|| EvalError::UnknownTruth(t.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_indices(&pred, &truth, labels, strict))
}

/// Core of [`evaluate`] on class indices.
pub fn evaluate_indices(pred: &[Option<usize>], truth: &[usize], labels: &LabelSet, strict: bool) -> MetricsReport {
    let c = labels.len();
    let mut confusion = vec![vec![0usize; c + 1]; c];
    for (&t, p) in truth.iter().zip(pred) {
        confusion[t][p.unwrap_or(c)] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|i| {
            let tp = confusion[i][i] as f64;
            let predicted: usize = (0..c).map(|r| confusion[r][i]).sum();
            let support: usize = confusion[i].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: labels.entries[i].label.clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let healthy: Vec<usize> = (0..c)
        .filter(|&i| labels.entries[i].fault_type == FaultType::Healthy)
        .collect();
    let faulty: Vec<usize> = (0..c)
        .filter(|&i| labels.entries[i].fault_type != FaultType::Healthy)
        .collect();
    let all: Vec<usize> = (0..c).collect();
    let (macro_precision, macro_f1) = macro_over(&per_class, &all);
    MetricsReport {
        version: REPORT_VERSION,
        label_set: labels.name.clone(),
        strict,
        samples: n,
        accuracy: correct as f64 / n as f64,
        macro_precision,
        macro_f1,
        n_unparseable: pred.iter().filter(|p| p.is_none()).count(),
        groups: Groups {
            non_defective: group(&per_class, &confusion, &healthy),
            defective: group(&per_class, &confusion, &faulty),
        },
        per_class,
        confusion,
    }
}

/// Macro precision and F1 over the classes in `idx` that occur in the truths.
fn macro_over(per_class: &[ClassMetrics], idx: &[usize]) -> (f64, f64) {
    let present: Vec<&ClassMetrics> = idx.iter().map(|&i| &per_class[i]).filter(|m| m.support > 0).collect();
    if present.is_empty() {
        return (0.0, 0.0);
    }
    let k = present.len() as f64;
    (
        present.iter().map(|m| m.precision).sum::<f64>() / k,
        present.iter().map(|m| m.f1).sum::<f64>() / k,
    )
}

fn group(per_class: &[ClassMetrics], confusion: &[Vec<usize>], idx: &[usize]) -> GroupMetrics {
    let support: usize = idx.iter().map(|&i| per_class[i].support).sum();
    let correct: usize = idx.iter().map(|&i| confusion[i][i]).sum();
    let (macro_precision, macro_f1) = macro_over(per_class, idx);
    GroupMetrics {
        classes: idx.iter().map(|&i| per_class[i].label.clone()).collect(),
        accuracy: if support == 0 { 0.0 } else { correct as f64 / support as f64 },
        macro_precision,
        macro_f1,
        support,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "text" | "table" => Ok(Self::Text),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn report_render(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => render_text(report),
    }
}

fn render_text(r: &MetricsReport) -> String {
    let width = r
        .per_class
        .iter()
        .map(|m| m.label.len())
        .chain([13])
        .max()
        .unwrap_or(13);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support");
    for m in &r.per_class {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            m.label,
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            m.support
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}", "group", "accuracy", "precision", "f1", "support");
    for (name, g) in [("non-defective", &r.groups.non_defective), ("defective", &r.groups.defective)] {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            name,
            pct(g.accuracy),
            pct(g.macro_precision),
            pct(g.macro_f1),
            g.support
        );
    }
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
        "total",
        pct(r.accuracy),
        pct(r.macro_precision),
        pct(r.macro_f1),
        r.samples
    );
    let _ = writeln!(s, "unparseable: {}", r.n_unparseable);
    s
}

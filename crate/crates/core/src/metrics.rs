//! Overlap metrics between binary masks and their across-slice aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        ensure!(
            pred.shape() == gt.shape(),
            Validation,
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        );
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }
}

/// Dice, Jaccard, sensitivity, specificity and precision of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub jac: f64,
    pub se: f64,
    pub sp: f64,
    pub pre: f64,
}

impl SegMetrics {
    pub const NAMES: [&'static str; 5] = ["DSC", "JAC", "SE", "SP", "PRE"];

    pub fn from_counts(c: ConfusionCounts) -> Self {
        let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        let sp = ratio(tn, tn + fp);
        if c.tp + c.fp + c.fn_ == 0 {
            return Self {
                dsc: 1.0,
                jac: 1.0,
                se: 1.0,
                sp,
                pre: 1.0,
            };
        }
        Self {
            dsc: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            jac: ratio(tp, tp + fp + fn_),
            se: ratio(tp, tp + fn_),
            sp,
            pre: ratio(tp, tp + fp),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.dsc, self.jac, self.se, self.sp, self.pre]
    }
}

/// Both masks empty gives DSC = JAC = SE = PRE = 1; otherwise a zero
/// denominator yields 0 for that metric.
pub fn confusion_metrics(pred: &Mask, gt: &Mask) -> Result<SegMetrics> {
    Ok(SegMetrics::from_counts(ConfusionCounts::from_masks(pred, gt)?))
}

/// Dice coefficient alone, with the same empty-mask convention.
pub fn dice_coefficient(a: &Mask, b: &Mask) -> Result<f64> {
    Ok(confusion_metrics(a, b)?.dsc)
}

/// Mean and population standard deviation.
pub fn aggregate_mean_std(values: &[f64]) -> Result<(f64, f64)> {
    ensure!(!values.is_empty(), Validation, "cannot aggregate an empty list");
    let n = values.len() as f64;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let mean = (values.iter().sum::<f64>() / n).clamp(lo, hi);
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: SegMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dsc: MeanStd,
    pub jac: MeanStd,
    pub se: MeanStd,
    pub sp: MeanStd,
    pub pre: MeanStd,
}

impl MetricSummary {
    pub fn cells(&self) -> [MeanStd; 5] {
        [self.dsc, self.jac, self.se, self.sp, self.pre]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub per_slice: Vec<SliceMetrics>,
    pub summary: MetricSummary,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, per_slice: Vec<SliceMetrics>) -> Result<Self> {
        let column = |f: fn(&SegMetrics) -> f64| -> Result<MeanStd> {
            let vals: Vec<f64> = per_slice.iter().map(|s| f(&s.metrics)).collect();
            let (mean, std) = aggregate_mean_std(&vals)?;
            Ok(MeanStd { mean, std })
        };
        let summary = MetricSummary {
            dsc: column(|m| m.dsc)?,
            jac: column(|m| m.jac)?,
            se: column(|m| m.se)?,
            sp: column(|m| m.sp)?,
            pre: column(|m| m.pre)?,
        };
        Ok(Self {
            method: method.into(),
            per_slice,
            summary,
        })
    }

    /// Scores `(id, prediction, ground truth)` triples.
    pub fn evaluate<'a, I>(method: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
    {
        let per_slice = pairs
            .into_iter()
            .map(|(id, pred, gt)| {
                Ok(SliceMetrics {
                    id: id.to_string(),
                    metrics: confusion_metrics(pred, gt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(method, per_slice)
    }
}

/// One `mean±std` cell: DSC, SE, SP and PRE means in percent, JAC mean as a
/// fraction; std always as a fraction.
pub fn format_cell(column: usize, cell: MeanStd) -> String {
    let mean = if column == 1 { cell.mean } else { cell.mean * 100.0 };
    format!("{mean:.2}±{:.2}", cell.std)
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(SegMetrics::NAMES.iter().map(|s| s.to_string()))
        .collect();
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.method.clone()];
        row.extend(r.summary.cells().iter().enumerate().map(|(i, c)| format_cell(i, *c)));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (j, cell) in row.iter().enumerate() {
            let pad = widths[j] - cell.chars().count();
            if j == 0 {
                let _ = write!(line, "{cell}{}", " ".repeat(pad));
            } else {
                let _ = write!(line, "  {}{cell}", " ".repeat(pad));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

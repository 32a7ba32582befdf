//! Binary classification metrics at a fixed threshold, rank-based ROC AUC,
//! and report formatting.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamReport;

pub const DEFAULT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not binary")]
    Label(u8),
    #[error("score {0} is not a probability")]
    Score(f64),
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("baseline {0} must be positive")]
    Baseline(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::Label(l));
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricsError::Score(s));
    }
    Ok(())
}

/// Tallies predictions where a sample is called defective iff its score is
/// at least `threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::Threshold(threshold));
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Rates derived from a confusion matrix. `None` marks a rate whose
/// denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub slip_through: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn quality(cm: &ConfusionMatrix) -> Quality {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    Quality {
        precision,
        recall,
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
        slip_through: recall.map(|r| 1.0 - r),
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, so tied (half-integer) ranks stay integral.
    let mut pos_rank2: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end+1 share their average
        let rank2 = (start + 1 + end + 1) as u64;
        let pos = order[start..=end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count() as u64;
        pos_rank2 += pos * rank2;
        start = end + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Relative change of a run against a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Baseline dense conv weights over the run's stored conv weights.
    pub compression_ratio: f64,
    /// Percentage reduction of training time.
    pub time_improvement: Option<f64>,
}

impl Comparison {
    pub fn new(
        run: &ParamReport,
        baseline: &ParamReport,
        run_seconds: Option<f64>,
        baseline_seconds: Option<f64>,
    ) -> Result<Self> {
        let time_improvement = match (run_seconds, baseline_seconds) {
            (Some(r), Some(b)) => Some(time_improvement(b, r)?),
            _ => None,
        };
        Ok(Self {
            compression_ratio: baseline.n_c as f64 / run.n_c_f.max(1) as f64,
            time_improvement,
        })
    }
}

/// `(t_cnn - t_tcnn) / t_cnn * 100`.
pub fn time_improvement(t_cnn: f64, t_tcnn: f64) -> Result<f64> {
    if !(t_cnn > 0.0) {
        return Err(MetricsError::Baseline(t_cnn));
    }
    Ok((t_cnn - t_tcnn) / t_cnn * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub slip_through: Option<f64>,
    /// Missing when the evaluated split holds a single class.
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Assembles all metrics for one evaluated split.
pub fn report(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    comparison: Option<Comparison>,
) -> Result<EvalReport> {
    let cm = confusion(scores, labels, threshold)?;
    let q = quality(&cm);
    let auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(MetricsError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        threshold,
        samples: cm.total(),
        confusion: cm,
        precision: q.precision,
        recall: q.recall,
        f1: q.f1,
        slip_through: q.slip_through,
        auc,
        comparison,
    })
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{v:.3}"))
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{:.1}%", v * 100.0))
}

impl EvalReport {
    /// One aligned row per report, columns in the order of the paper-style
    /// single-run table.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let mut out = format!(
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>12} {:>6} {:>6} {:>6} {:>6}\n",
            "model", "precision", "recall", "f1", "auc", "slip-through", "TN", "FP", "FN", "TP"
        );
        for (name, r) in rows {
            out += &format!(
                "{:<14} {:>9} {:>9} {:>9} {:>9} {:>12} {:>6} {:>6} {:>6} {:>6}\n",
                name,
                fmt_rate(r.precision),
                fmt_rate(r.recall),
                fmt_rate(r.f1),
                fmt_rate(r.auc),
                fmt_pct(r.slip_through),
                r.confusion.tn,
                r.confusion.fp,
                r.confusion.fn_,
                r.confusion.tp
            );
        }
        out
    }
}

/// Mean and sample standard deviation (n - 1 denominator) over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// `None` for an empty input; a single value has std 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// One rank configuration (or the dense baseline) summarized over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub ranks: String,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub compression_ratio: f64,
    pub time_improvement: Option<f64>,
}

impl SummaryRow {
    /// Summarizes per-seed reports; undefined rates are left out of the mean.
    pub fn from_reports(
        ranks: impl Into<String>,
        reports: &[EvalReport],
        compression_ratio: f64,
        time_improvement: Option<f64>,
    ) -> Self {
        let collect = |f: fn(&EvalReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            MeanStd::of(&v)
        };
        Self {
            ranks: ranks.into(),
            precision: collect(|r| r.precision),
            recall: collect(|r| r.recall),
            f1: collect(|r| r.f1),
            compression_ratio,
            time_improvement,
        }
    }
}

/// Multi-seed comparison table: ranks, precision, recall, F1, compression,
/// training-time improvement.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cell = |m: &Option<MeanStd>| m.map_or_else(|| "undef".to_string(), |m| m.to_string());
    let mut out = format!(
        "{:<18} {:>15} {:>15} {:>15} {:>11} {:>24}\n",
        "ranks", "precision", "recall", "F1", "compression", "training-time improvement"
    );
    for r in rows {
        out += &format!(
            "{:<18} {:>15} {:>15} {:>15} {:>11} {:>24}\n",
            r.ranks,
            cell(&r.precision),
            cell(&r.recall),
            cell(&r.f1),
            format!("x{:.1}", r.compression_ratio),
            r.time_improvement
                .map_or_else(|| "-".to_string(), |t| format!("{t:.0}%"))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_case() {
        assert_eq!(
            confusion(&[0.9, 0.1], &[1, 0], 0.2).unwrap(),
            ConfusionMatrix::new(1, 0, 1, 0)
        );
    }

    #[test]
    fn zero_scores_predict_nothing() {
        let cm = confusion(&[0.0; 4], &[1, 0, 1, 0], 0.2).unwrap();
        assert_eq!((cm.tp, cm.fp), (0, 0));
        let q = quality(&cm);
        assert_eq!(q.precision, None);
        assert_eq!(q.recall, Some(0.0));
        assert_eq!(q.f1, Some(0.0));
    }

    #[test]
    fn threshold_semantics() {
        assert_eq!(confusion(&[0.3], &[1], 0.2).unwrap().tp, 1);
        assert_eq!(confusion(&[0.3], &[1], 0.5).unwrap().fn_, 1);
        assert_eq!(confusion(&[0.2], &[1], 0.2).unwrap().tp, 1);
    }

    #[test]
    fn no_positives_leaves_recall_undefined() {
        let q = quality(&ConfusionMatrix::new(0, 2, 5, 0));
        assert_eq!(q.recall, None);
        assert_eq!(q.slip_through, None);
        assert_eq!(q.precision, Some(0.0));
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            confusion(&[0.5], &[1, 0], 0.2),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[1.5], &[1], 0.2),
            Err(MetricsError::Score(_))
        ));
        assert!(matches!(
            confusion(&[0.5], &[2], 0.2),
            Err(MetricsError::Label(2))
        ));
        assert!(matches!(
            confusion(&[0.5], &[1], 1.0),
            Err(MetricsError::Threshold(_))
        ));
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn time_improvement_values() {
        assert!((time_improvement(100.0, 84.0).unwrap() - 16.0).abs() < 1e-12);
        assert_eq!(time_improvement(100.0, 100.0).unwrap(), 0.0);
        assert!(time_improvement(100.0, 120.0).unwrap() < 0.0);
        assert!(time_improvement(0.0, 1.0).is_err());
    }

    #[test]
    fn mean_std_format() {
        let m = MeanStd::of(&[0.952, 0.962, 0.972]).unwrap();
        assert_eq!(m.to_string(), "0.962 ± 0.010");
        assert_eq!(MeanStd::of(&[0.5]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn single_run_has_no_comparison() {
        let r = report(&[0.9, 0.1, 0.6], &[1, 0, 0], 0.2, None).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("comparison"));
        assert!(json.contains("\"fn\":0"));
        assert!(EvalReport::table(&[("cnn", &r)]).contains("cnn"));
    }

    #[test]
    fn self_comparison() {
        let p = ParamReport::closed_form(&crate::model::ModelSpec::reference(64));
        let c = Comparison::new(&p, &p, Some(12.5), Some(12.5)).unwrap();
        assert_eq!(c.compression_ratio, 1.0);
        assert_eq!(c.time_improvement, Some(0.0));
    }
}

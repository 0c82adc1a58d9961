//! Pair-classification metrics: AUC, macro/weighted F1, precision, recall.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: need at least one pair of each label")]
    UndefinedMetric,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Same,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub score: f64,
    pub label: PairLabel,
}

impl ScoredPair {
    pub fn new(score: f64, label: PairLabel) -> Self {
        Self { score, label }
    }
}

fn check(pairs: &[ScoredPair]) -> Result<(usize, usize), MetricError> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(MetricError::NonFiniteScore(p.score));
    }
    let same = pairs.iter().filter(|p| p.label == PairLabel::Same).count();
    let different = pairs.len() - same;
    if same == 0 || different == 0 {
        return Err(MetricError::UndefinedMetric);
    }
    Ok((same, different))
}

/// Mann–Whitney AUC with midranks, so ties count one half.
pub fn auc(pairs: &[ScoredPair]) -> Result<f64, MetricError> {
    let (n_same, n_diff) = check(pairs)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].score.total_cmp(&pairs[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].score == pairs[order[i]].score {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| pairs[k].label == PairLabel::Same).count() as f64;
        i = j + 1;
    }
    let (ns, nd) = (n_same as f64, n_diff as f64);
    Ok((rank_sum - ns * (ns + 1.0) / 2.0) / (ns * nd))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// same predicted same
    pub tp: usize,
    /// different predicted same
    pub fp: usize,
    /// same predicted different
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// different predicted different
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClassMetrics { precision, recall, f1, support: tp + fn_ }
}

fn serialize_threshold<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
    if t.is_finite() {
        s.serialize_f64(*t)
    } else if *t > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// Threshold metrics with JSON keys matching the usual model-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    #[serde(serialize_with = "serialize_threshold")]
    pub threshold: f64,
    #[serde(rename = "Macro-F1")]
    pub macro_f1: f64,
    #[serde(rename = "Macro precision")]
    pub macro_precision: f64,
    #[serde(rename = "Macro recall")]
    pub macro_recall: f64,
    #[serde(rename = "Weighted F1")]
    pub weighted_f1: f64,
    pub same: ClassMetrics,
    pub different: ClassMetrics,
    pub confusion: Confusion,
}

/// Predicts "same" iff score ≥ threshold and scores both classes.
pub fn classification_report(pairs: &[ScoredPair], threshold: f64) -> Result<ClassificationReport, MetricError> {
    check(pairs)?;
    let mut c = Confusion::default();
    for p in pairs {
        match (p.label, p.score >= threshold) {
            (PairLabel::Same, true) => c.tp += 1,
            (PairLabel::Same, false) => c.fn_ += 1,
            (PairLabel::Different, true) => c.fp += 1,
            (PairLabel::Different, false) => c.tn += 1,
        }
    }
    Ok(report_from_confusion(c, threshold))
}

fn report_from_confusion(c: Confusion, threshold: f64) -> ClassificationReport {
    let same = class_metrics(c.tp, c.fp, c.fn_);
    let different = class_metrics(c.tn, c.fn_, c.fp);
    let total = (same.support + different.support) as f64;
    ClassificationReport {
        threshold,
        macro_f1: (same.f1 + different.f1) / 2.0,
        macro_precision: (same.precision + different.precision) / 2.0,
        macro_recall: (same.recall + different.recall) / 2.0,
        weighted_f1: (same.f1 * same.support as f64 + different.f1 * different.support as f64) / total,
        same,
        different,
        confusion: c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MacroF1,
    WeightedF1,
}

impl Objective {
    fn value(self, r: &ClassificationReport) -> f64 {
        match self {
            Objective::MacroF1 => r.macro_f1,
            Objective::WeightedF1 => r.weighted_f1,
        }
    }
}

/// Candidate thresholds: −∞, midpoints between adjacent distinct scores, +∞.
pub fn candidate_thresholds(pairs: &[ScoredPair]) -> Vec<f64> {
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    out.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Scans all candidate thresholds and keeps the best by `objective`; the
/// lowest threshold wins ties.
pub fn best_threshold(pairs: &[ScoredPair], objective: Objective) -> Result<ClassificationReport, MetricError> {
    check(pairs)?;
    let mut best: Option<ClassificationReport> = None;
    for t in candidate_thresholds(pairs) {
        let r = classification_report(pairs, t)?;
        if best.as_ref().is_none_or(|b| objective.value(&r) > objective.value(b)) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least two candidates"))
}

/// AUC plus the threshold report, serialized under the table's column names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(flatten)]
    pub report: ClassificationReport,
    pub pairs: usize,
}

pub fn evaluate(pairs: &[ScoredPair], threshold: Option<f64>) -> Result<EvaluationReport, MetricError> {
    let report = match threshold {
        Some(t) => classification_report(pairs, t)?,
        None => best_threshold(pairs, Objective::MacroF1)?,
    };
    Ok(EvaluationReport { auc: auc(pairs)?, report, pairs: pairs.len() })
}

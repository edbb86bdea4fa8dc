use crate::label::Label;

use super::{EvaluationError, Result};

/// Confusion counts and derived rates; `Positive` is the disease class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    BalancedAccuracy,
    Auc,
    Accuracy,
    Sensitivity,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::BalancedAccuracy, Metric::Auc, Metric::Accuracy, Metric::Sensitivity, Metric::Specificity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BalancedAccuracy => "balanced_accuracy",
            Metric::Auc => "auc",
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
        }
    }

    pub fn of(self, m: &MetricsRecord) -> f64 {
        match self {
            Metric::BalancedAccuracy => m.balanced_accuracy,
            Metric::Auc => m.auc,
            Metric::Accuracy => m.accuracy,
            Metric::Sensitivity => m.sensitivity,
            Metric::Specificity => m.specificity,
        }
    }
}

pub fn compute_metrics(truth: &[Label], predicted: &[Label], scores: &[f64]) -> Result<MetricsRecord> {
    if truth.len() != predicted.len() || truth.len() != scores.len() {
        return Err(EvaluationError::LengthMismatch(format!(
            "{} truths, {} predictions, {} scores",
            truth.len(),
            predicted.len(),
            scores.len()
        )));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for (t, p) in truth.iter().zip(predicted) {
        match (t.is_positive(), p.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(EvaluationError::SingleClassTruth);
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok(MetricsRecord {
        tp,
        fn_,
        tn,
        fp,
        accuracy: (tp + tn) as f64 / truth.len() as f64,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        sensitivity,
        specificity,
        auc: auc(truth, scores)?,
    })
}

/// Balanced accuracy alone, for inner-loop selection.
pub(crate) fn balanced_accuracy(truth: &[Label], predicted: &[Label]) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (t, y) in truth.iter().zip(predicted) {
        if t.is_positive() {
            p += 1;
            tp += usize::from(y.is_positive());
        } else {
            n += 1;
            tn += usize::from(!y.is_positive());
        }
    }
    (tp as f64 / p as f64 + tn as f64 / n as f64) / 2.0
}

/// Mann-Whitney statistic with midranks for tied scores, divided by the
/// number of positive/negative pairs.
pub fn auc(truth: &[Label], scores: &[f64]) -> Result<f64> {
    let n = truth.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if truth[k].is_positive() {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos = truth.iter().filter(|l| l.is_positive()).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvaluationError::SingleClassTruth);
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    /// Divides by the number of splits (no Bessel correction).
    pub sd: f64,
}

pub fn mean_sd(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary { mean, sd: var.sqrt() }
}

/// Mean and empirical SD of every metric over splits, in [`Metric::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub n_splits: usize,
    pub metrics: Vec<(Metric, MetricSummary)>,
}

impl Summary {
    pub fn from_records(records: &[MetricsRecord]) -> Summary {
        let metrics = Metric::ALL
            .iter()
            .map(|&m| (m, mean_sd(&records.iter().map(|r| m.of(r)).collect::<Vec<_>>())))
            .collect();
        Summary { n_splits: records.len(), metrics }
    }

    pub fn get(&self, metric: Metric) -> MetricSummary {
        self.metrics.iter().find(|(m, _)| *m == metric).map(|(_, s)| *s).expect("all metrics summarized")
    }
}

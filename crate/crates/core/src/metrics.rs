//! Performance metrics for binary and regression tasks.

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};

/// Predictions are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Auc,
    Accuracy,
    Logloss,
    Rmse,
    Mae,
    R2,
}

impl MetricName {
    pub fn label(&self) -> &'static str {
        match self {
            MetricName::Auc => "auc",
            MetricName::Accuracy => "accuracy",
            MetricName::Logloss => "logloss",
            MetricName::Rmse => "rmse",
            MetricName::Mae => "mae",
            MetricName::R2 => "r2",
        }
    }

    pub fn parse(s: &str) -> Result<MetricName> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "auc" | "roc_auc" => MetricName::Auc,
            "accuracy" | "acc" => MetricName::Accuracy,
            "logloss" | "log_loss" => MetricName::Logloss,
            "rmse" => MetricName::Rmse,
            "mae" => MetricName::Mae,
            "r2" | "rsq" => MetricName::R2,
            other => return Err(Error::invalid(format!("unknown metric `{other}`"))),
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<MetricName>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(MetricName::parse)
            .collect()
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(
            self,
            MetricName::Auc | MetricName::Accuracy | MetricName::R2
        )
    }

    /// Closed range of attainable values.
    pub fn range(&self) -> (f64, f64) {
        match self {
            MetricName::Auc | MetricName::Accuracy => (0.0, 1.0),
            MetricName::Logloss | MetricName::Rmse | MetricName::Mae => (0.0, f64::INFINITY),
            MetricName::R2 => (f64::NEG_INFINITY, 1.0),
        }
    }

    pub fn valid_for(&self, task: TaskKind) -> bool {
        match self {
            MetricName::Auc | MetricName::Accuracy | MetricName::Logloss => {
                task == TaskKind::BinaryClassification
            }
            MetricName::Rmse | MetricName::Mae | MetricName::R2 => task == TaskKind::Regression,
        }
    }

    pub fn defaults(task: TaskKind) -> Vec<MetricName> {
        match task {
            TaskKind::BinaryClassification => {
                vec![MetricName::Auc, MetricName::Accuracy, MetricName::Logloss]
            }
            TaskKind::Regression => vec![MetricName::Rmse, MetricName::Mae, MetricName::R2],
        }
    }
}

impl std::fmt::Display for MetricName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
    pub n_test: usize,
}

/// Area under the ROC curve from the rank-sum statistic, counting ties as
/// one half. `labels` are 1 for positives and 0 for negatives. `None` when a
/// class is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of twice the midranks of the positives keeps everything integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank*2 = i + j + 2
        let twice_mid = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            if labels[k] == 1.0 {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u64;
    let twice_u = twice_rank_sum - np * (np + 1);
    Some(twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy(probs: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p >= threshold) == (**l == 1.0))
        .count();
    hits as f64 / probs.len() as f64
}

pub fn logloss(probs: &[f64], labels: &[f64]) -> f64 {
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            if *l == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    s / probs.len() as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    (s / pred.len() as f64).sqrt()
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Coefficient of determination; `None` when the truth is constant.
pub fn r2(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let m = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    if sst == 0.0 {
        return None;
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Some(1.0 - sse / sst)
}

/// One metric; `None` when undefined for this sample (for example AUC with a
/// single class present).
pub fn compute_metric(
    name: MetricName,
    pred: &[f64],
    truth: &[f64],
    threshold: f64,
) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    match name {
        MetricName::Auc => auc(pred, truth),
        MetricName::Accuracy => Some(accuracy(pred, truth, threshold)),
        MetricName::Logloss => Some(logloss(pred, truth)),
        MetricName::Rmse => Some(rmse(pred, truth)),
        MetricName::Mae => Some(mae(pred, truth)),
        MetricName::R2 => r2(pred, truth),
    }
}

/// Compute the requested metrics. Undefined metrics are left out of the
/// result so callers can mark them skipped.
pub fn metric_suite(
    task: TaskKind,
    names: &[MetricName],
    pred: &[f64],
    truth: &[f64],
    threshold: Option<f64>,
) -> Result<Vec<MetricValue>> {
    if pred.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} outcomes",
            pred.len(),
            truth.len()
        )));
    }
    let mut out = Vec::with_capacity(names.len());
    for &name in names {
        if !name.valid_for(task) {
            return Err(Error::invalid(format!(
                "metric `{name}` is not available for {} tasks",
                task.label()
            )));
        }
        if let Some(value) = compute_metric(name, pred, truth, threshold.unwrap_or(0.5)) {
            out.push(MetricValue {
                name,
                value,
                n_test: pred.len(),
            });
        }
    }
    Ok(out)
}

//! Evaluation metrics for 5-category ordinal scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::ClassProbs;
use crate::error::{Error, Result};
use crate::score::{Score, SCALE_SIZE};

/// Rank-based (Mann-Whitney) AUC with midranks for ties.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc("labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged (unweighted) over the classes present in `labels`.
pub fn ovr_auc(probs: &[ClassProbs], labels: &[Score]) -> Result<(f64, BTreeMap<u8, f64>)> {
    check_lengths(probs.len(), labels.len())?;
    let mut present: Vec<Score> = labels.to_vec();
    present.sort();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedAuc("fewer than two score classes present".into()));
    }
    let mut per_class = BTreeMap::new();
    for c in present {
        let scores: Vec<f64> = probs.iter().map(|p| p.get(c)).collect();
        let target: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        per_class.insert(c.value(), binary_auc(&scores, &target)?);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// Predicted score is the expectation under the class distribution.
    #[default]
    Expected,
    /// Predicted score is the most probable class (ties to the lower class).
    Argmax,
}

pub fn rmse(probs: &[ClassProbs], labels: &[Score], mode: RmseMode) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::Empty("rmse input"));
    }
    let sse: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let yhat = match mode {
                RmseMode::Expected => p.expected_score(),
                RmseMode::Argmax => p.argmax().value() as f64,
            };
            (yhat - y.value() as f64).powi(2)
        })
        .sum();
    Ok((sse / probs.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaWeighting {
    #[default]
    None,
    Linear,
    Quadratic,
}

impl KappaWeighting {
    fn weight(self, i: usize, j: usize) -> f64 {
        let d = i.abs_diff(j) as f64 / (SCALE_SIZE - 1) as f64;
        match self {
            KappaWeighting::None => (i != j) as u8 as f64,
            KappaWeighting::Linear => d,
            KappaWeighting::Quadratic => d * d,
        }
    }
}

/// Cohen's kappa as 1 - (weighted observed disagreement / weighted chance
/// disagreement). With unit weights this equals (p_o - p_e) / (1 - p_e).
/// When chance disagreement is zero (both raters constant and equal) the
/// value is defined as 1.
pub fn cohen_kappa(preds: &[Score], labels: &[Score], weighting: KappaWeighting) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::Empty("kappa input"));
    }
    let n = preds.len() as f64;
    let mut observed = [[0.0; SCALE_SIZE]; SCALE_SIZE];
    let mut row = [0.0; SCALE_SIZE];
    let mut col = [0.0; SCALE_SIZE];
    for (p, y) in preds.iter().zip(labels) {
        observed[p.index()][y.index()] += 1.0 / n;
        row[p.index()] += 1.0 / n;
        col[y.index()] += 1.0 / n;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..SCALE_SIZE {
        for j in 0..SCALE_SIZE {
            let w = weighting.weight(i, j);
            num += w * observed[i][j];
            den += w * row[i] * col[j];
        }
    }
    if den <= f64::EPSILON {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub rmse_mode: RmseMode,
    pub kappa_weighting: KappaWeighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when fewer than two classes are present.
    pub auc: Option<f64>,
    pub rmse: f64,
    pub kappa: f64,
    pub n_items: usize,
    pub per_class_auc: BTreeMap<u8, f64>,
    pub config: MetricConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn report(probs: &[ClassProbs], labels: &[Score], config: MetricConfig) -> Result<MetricReport> {
    check_lengths(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::Empty("metric report input"));
    }
    let preds: Vec<Score> = probs.iter().map(ClassProbs::argmax).collect();
    let rmse = rmse(probs, labels, config.rmse_mode)?;
    let kappa = cohen_kappa(&preds, labels, config.kappa_weighting)?;
    let (auc, per_class_auc, note) = match ovr_auc(probs, labels) {
        Ok((a, per)) => (Some(a), per, None),
        Err(Error::UndefinedAuc(msg)) => (None, BTreeMap::new(), Some(format!("AUC undefined: {msg}"))),
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        auc,
        rmse,
        kappa,
        n_items: probs.len(),
        per_class_auc,
        config,
        note,
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std, count: n }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Per-metric mean ± std over several reports (folds, seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: MeanStd,
    pub rmse: MeanStd,
    pub kappa: MeanStd,
    pub runs: usize,
}

impl MetricSummary {
    pub fn of(reports: &[MetricReport]) -> Self {
        let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
        let rmses: Vec<f64> = reports.iter().map(|r| r.rmse).collect();
        let kappas: Vec<f64> = reports.iter().map(|r| r.kappa).collect();
        MetricSummary {
            auc: MeanStd::of(&aucs),
            rmse: MeanStd::of(&rmses),
            kappa: MeanStd::of(&kappas),
            runs: reports.len(),
        }
    }
}

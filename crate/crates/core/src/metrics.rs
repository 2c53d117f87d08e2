//! Classification and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub depressed: ClassMetrics,
    pub control: ClassMetrics,
    pub macro_f1: f64,
    /// F0.5 of the depressed class.
    pub f05: f64,
    /// Absent when only one class is present.
    pub pr_auc: Option<f64>,
    pub threshold: f64,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F-beta with the 0/0 → 0 convention.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassMetrics {
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
    }
}

fn check_inputs(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Data("metrics need at least one prediction".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Data(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Data("probabilities must be finite".into()));
    }
    Ok(())
}

pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Predictions are positive when `prob >= threshold`.
pub fn classification_report(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationReport> {
    check_inputs(probs, labels)?;
    let c = confusion(probs, labels, threshold);
    let depressed = class_metrics(c.tp, c.fp, c.fn_);
    let control = class_metrics(c.tn, c.fn_, c.fp);
    Ok(ClassificationReport {
        depressed,
        control,
        macro_f1: (depressed.f1 + control.f1) / 2.0,
        f05: f_beta(depressed.precision, depressed.recall, 0.5),
        pr_auc: pr_auc(probs, labels).ok(),
        threshold,
        confusion: c,
    })
}

/// Step-wise average precision of the positive class. Tied scores enter the
/// sweep together as one step.
pub fn pr_auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Data("PR-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let score = probs[order[i]];
        while i < order.len() && probs[order[i]] == score {
            tp += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    #[serde(rename = "hit@1")]
    pub hit1: f64,
    #[serde(rename = "hit@3")]
    pub hit3: f64,
    #[serde(rename = "hit@5")]
    pub hit5: f64,
    pub mrr: f64,
    pub instances: usize,
}

/// 1-based rank of the first true candidate in an already-ranked list.
pub fn first_true_rank(ranked: &[bool]) -> Option<usize> {
    ranked.iter().position(|&y| y).map(|i| i + 1)
}

/// Hit@{1,3,5} and MRR from per-instance candidate labels in ranked order.
pub fn ranking_metrics(ranked: &[Vec<bool>]) -> Result<RankingReport> {
    let mut ranks = Vec::with_capacity(ranked.len());
    for (i, inst) in ranked.iter().enumerate() {
        if inst.is_empty() {
            return Err(Error::Data(format!("ranking instance {i} has no candidates")));
        }
        ranks.push(
            first_true_rank(inst).ok_or_else(|| Error::Data(format!("ranking instance {i} has no true candidate")))?,
        );
    }
    Ok(report_from_ranks(&ranks))
}

pub fn report_from_ranks(ranks: &[usize]) -> RankingReport {
    let n = ranks.len();
    if n == 0 {
        return RankingReport::default();
    }
    let hit = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    RankingReport {
        hit1: hit(1),
        hit3: hit(3),
        hit5: hit(5),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64,
        instances: n,
    }
}

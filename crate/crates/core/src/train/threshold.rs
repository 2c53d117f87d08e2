//! Decision-threshold search on validation probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{confusion, f_beta};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdObjective {
    #[default]
    F1,
    #[serde(rename = "f0.5")]
    F05,
    /// Maximize recall among thresholds reaching the configured precision.
    RecallAtMinPrecision,
}

impl ThresholdObjective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Self::F1),
            "f0.5" => Ok(Self::F05),
            "recall_at_min_precision" => Ok(Self::RecallAtMinPrecision),
            other => Err(Error::Config(format!("unknown threshold objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub value: f64,
    /// The precision floor was unreachable and max-F1 was used instead.
    pub fell_back: bool,
}

/// 0, 1 and the midpoints between consecutive distinct probabilities.
pub fn candidate_thresholds(probs: &[f64]) -> Vec<f64> {
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut c = vec![0.0];
    c.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    c.push(1.0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

fn precision_recall(probs: &[f64], labels: &[u8], t: f64) -> (f64, f64) {
    let c = confusion(probs, labels, t);
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    (p, r)
}

/// Scans the candidate thresholds in increasing order and keeps the first
/// strict maximum, so ties resolve to the lowest threshold.
pub fn select_threshold(
    probs: &[f64],
    labels: &[u8],
    objective: ThresholdObjective,
    min_precision: f64,
) -> Result<ThresholdChoice> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Data(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data("threshold search needs both classes in validation".into()));
    }
    let cands = candidate_thresholds(probs);
    let best_by = |score: &dyn Fn(f64, f64) -> Option<f64>| {
        let mut best: Option<(f64, f64)> = None;
        for &t in &cands {
            let (p, r) = precision_recall(probs, labels, t);
            if let Some(v) = score(p, r) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
        }
        best
    };
    let f1 = |p: f64, r: f64| Some(f_beta(p, r, 1.0));
    let (found, fell_back) = match objective {
        ThresholdObjective::F1 => (best_by(&f1), false),
        ThresholdObjective::F05 => (best_by(&|p, r| Some(f_beta(p, r, 0.5))), false),
        ThresholdObjective::RecallAtMinPrecision => {
            match best_by(&|p, r| (p >= min_precision).then_some(r)) {
                Some(b) => (Some(b), false),
                None => (best_by(&f1), true),
            }
        }
    };
    let (threshold, value) = found.expect("candidate list is never empty");
    Ok(ThresholdChoice {
        threshold,
        value,
        fell_back,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separable_pair_picks_midpoint() {
        let c = select_threshold(&[0.1, 0.9], &[0, 1], ThresholdObjective::F1, 0.75).unwrap();
        assert_eq!((c.threshold, c.value), (0.5, 1.0));
    }

    #[test]
    fn precision_floor_six_points() {
        // Cut after the fourth-ranked point: 3 of 4 selected are positive and
        // all positives are recovered.
        let probs = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let labels = [1, 1, 0, 1, 0, 0];
        let c = select_threshold(&probs, &labels, ThresholdObjective::RecallAtMinPrecision, 0.75).unwrap();
        assert!((c.threshold - 0.55).abs() < 1e-12);
        assert_eq!((c.value, c.fell_back), (1.0, false));
    }

    #[test]
    fn infeasible_floor_falls_back_to_f1() {
        let probs = [0.9, 0.8, 0.7, 0.6];
        let labels = [0, 1, 0, 1];
        let c = select_threshold(&probs, &labels, ThresholdObjective::RecallAtMinPrecision, 0.75).unwrap();
        let f1 = select_threshold(&probs, &labels, ThresholdObjective::F1, 0.75).unwrap();
        assert!(c.fell_back);
        assert_eq!(c.threshold, f1.threshold);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            select_threshold(&[0.2, 0.4], &[1, 1], ThresholdObjective::F1, 0.75),
            Err(Error::Data(_))
        ));
    }

    /// Every distinct cutoff a threshold can induce, taken directly.
    fn brute(probs: &[f64], labels: &[u8], score: impl Fn(f64, f64) -> Option<f64>) -> Option<f64> {
        let mut cuts: Vec<f64> = probs.to_vec();
        cuts.push(f64::INFINITY);
        cuts.into_iter()
            .filter_map(|t| {
                let (p, r) = precision_recall(probs, labels, t);
                score(p, r)
            })
            .reduce(f64::max)
    }

    fn labeled_set() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=64)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec((0u32..20).prop_map(|k| k as f64 / 19.0), n),
                    proptest::collection::vec(0u8..=1, n),
                )
            })
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn matches_brute_force((probs, labels) in labeled_set(), floor in 0.3f64..0.95) {
            let objectives: [(ThresholdObjective, Box<dyn Fn(f64, f64) -> Option<f64>>); 2] = [
                (ThresholdObjective::F1, Box::new(|p, r| Some(f_beta(p, r, 1.0)))),
                (ThresholdObjective::F05, Box::new(|p, r| Some(f_beta(p, r, 0.5)))),
            ];
            for (obj, score) in objectives {
                let c = select_threshold(&probs, &labels, obj, floor).unwrap();
                prop_assert_eq!(Some(c.value), brute(&probs, &labels, &score));
                let (p, r) = precision_recall(&probs, &labels, c.threshold);
                prop_assert_eq!(score(p, r), Some(c.value));
            }
            let c = select_threshold(&probs, &labels, ThresholdObjective::RecallAtMinPrecision, floor).unwrap();
            match brute(&probs, &labels, |p, r| (p >= floor).then_some(r)) {
                Some(best) => prop_assert_eq!((c.value, c.fell_back), (best, false)),
                None => prop_assert!(c.fell_back),
            }
        }

        #[test]
        fn ties_resolve_to_lowest((probs, labels) in labeled_set()) {
            let c = select_threshold(&probs, &labels, ThresholdObjective::F1, 0.75).unwrap();
            for t in candidate_thresholds(&probs).into_iter().filter(|&t| t < c.threshold) {
                let (p, r) = precision_recall(&probs, &labels, t);
                prop_assert!(f_beta(p, r, 1.0) < c.value);
            }
        }
    }
}

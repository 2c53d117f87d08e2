//! Optimization: losses, AdamW, plateau scheduling, early stopping, gradient
//! clipping, seed ensembles and threshold selection.

mod loss;
mod optim;
mod threshold;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape};
use crate::embed::splitmix64;
use crate::error::{Error, Result};
use crate::graph::SessionGraph;
use crate::metrics::pr_auc;
use crate::model::{forward_batch, predict, ModelConfig, ModelParams, Mode};

pub use loss::{bce_loss, focal_loss, info_nce, LossKind};
pub use optim::{clip_grad_norm, global_norm, AdamW, Plateau};
pub use threshold::{candidate_thresholds, select_threshold, ThresholdChoice, ThresholdObjective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub enabled: bool,
    pub weight: f64,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            weight: 0.1,
            temperature: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub clip_norm: f64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub contrastive: ContrastiveConfig,
    pub seeds: Vec<u64>,
    pub threshold_objective: ThresholdObjective,
    pub min_precision: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 2e-4,
            max_epochs: 50,
            early_stop_patience: 8,
            plateau_factor: 0.5,
            plateau_patience: 2,
            clip_norm: 1.0,
            loss: LossKind::Focal,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            contrastive: ContrastiveConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            threshold_objective: ThresholdObjective::F1,
            min_precision: 0.75,
            batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be non-negative");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("train.max_epochs and train.batch_size must be positive");
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("train.plateau_factor must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be positive");
        }
        if self.focal_gamma < 0.0 || !(self.focal_alpha > 0.0) {
            return bad("focal loss needs gamma >= 0 and alpha > 0");
        }
        if !(self.contrastive.temperature > 0.0) || self.contrastive.weight < 0.0 {
            return bad("contrastive temperature must be positive and weight non-negative");
        }
        if self.seeds.is_empty() {
            return bad("train.seeds must list at least one seed");
        }
        if !(0.0..=1.0).contains(&self.min_precision) {
            return bad("train.min_precision must lie in [0, 1]");
        }
        Ok(())
    }
}

/// The best-validation snapshot of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub best_val_pr_auc: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pr_auc: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Epoch after which training stopped (1-based).
    pub stopped_at: usize,
    pub warnings: Vec<String>,
}

fn labels_of(graphs: &[SessionGraph]) -> Result<Vec<u8>> {
    graphs
        .iter()
        .map(|g| {
            g.label
                .ok_or_else(|| Error::Data(format!("session {} has no label", g.session_id)))
        })
        .collect()
}

/// Eval-mode probabilities under each graph's own persona label.
pub fn predict_probs(params: &ModelParams<f32>, graphs: &[SessionGraph]) -> Result<Vec<f64>> {
    graphs
        .iter()
        .map(|g| predict(params, g, g.persona).map(|o| f64::from(o.prob)))
        .collect()
}

fn batch_loss(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    batch: &[&SessionGraph],
    labels: &[u8],
    mode: Mode,
) -> Result<(f64, Vec<Vec<f32>>, bool)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let personas: Vec<usize> = batch.iter().map(|g| g.persona).collect();
    let out = forward_batch(params, &vars, &mut tape, batch, &personas, mode)?;
    let mut loss = match cfg.loss {
        LossKind::Focal => tape.focal_loss(out.logits, labels, cfg.focal_gamma, cfg.focal_alpha)?,
        LossKind::Bce => tape.bce_loss(out.logits, labels)?,
    };
    let mut degenerate = false;
    if cfg.contrastive.enabled {
        let (c, warn) = info_nce(&mut tape, out.session_rep, labels, cfg.contrastive.temperature)?;
        degenerate = warn;
        let c = tape.scale(c, cfg.contrastive.weight as f32);
        loss = tape.add(loss, c)?;
    }
    let value = f64::from(tape.scalar(loss));
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss became {value}")));
    }
    tape.backward(loss)?;
    Ok((value, params.grads(&tape, &vars), degenerate))
}

/// Trains one model from `seed`, keeping the parameters of the epoch with the
/// highest validation PR-AUC, and picks its decision threshold on the
/// validation set.
pub fn fit(
    train: &[SessionGraph],
    val: &[SessionGraph],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    if let Some(g) = train.iter().find(|g| val.iter().any(|v| v.session_id == g.session_id)) {
        return Err(Error::Data(format!("session {} appears in both train and validation", g.session_id)));
    }
    let train_labels = labels_of(train)?;
    let val_labels = labels_of(val)?;
    let mut params = ModelParams::<f32>::init(model, seed)?;
    let mut opt = AdamW::new(&params.params, cfg.weight_decay);
    let mut sched = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(ModelParams<f32>, usize, f64)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut step: u64 = 0;
    let mut stopped_at = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut max_norm) = (0.0, 0.0f64);
        let mut degenerate_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&SessionGraph> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mode = Mode::train(splitmix64(seed.wrapping_mul(0x9e37_79b9) ^ step));
            let (loss, mut grads, degenerate) = batch_loss(&params, cfg, &batch, &labels, mode)?;
            degenerate_batches += usize::from(degenerate);
            max_norm = max_norm.max(clip_grad_norm(&mut grads, cfg.clip_norm));
            opt.step(&mut params.params, &grads, sched.lr)?;
            total += loss * chunk.len() as f64;
        }
        if degenerate_batches > 0 {
            warnings.push(format!(
                "epoch {epoch}: contrastive term skipped in {degenerate_batches} single-session batch(es)"
            ));
        }
        let val_probs = predict_probs(&params, val)?;
        let ap = pr_auc(&val_probs, &val_labels)?;
        history.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_pr_auc: ap,
            lr: sched.lr,
            max_grad_norm: max_norm,
        });
        stopped_at = epoch;
        if best.as_ref().is_none_or(|b| ap > b.2) {
            best = Some((params.clone(), epoch, ap));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
        sched.observe(ap);
    }

    let (best_params, epoch, best_ap) = best.expect("at least one epoch ran");
    let val_probs = predict_probs(&best_params, val)?;
    let choice = select_threshold(&val_probs, &val_labels, cfg.threshold_objective, cfg.min_precision)?;
    if choice.fell_back {
        warnings.push(format!(
            "no threshold reaches precision {}; fell back to max-F1",
            cfg.min_precision
        ));
    }
    Ok(FitResult {
        checkpoint: Checkpoint {
            params: best_params,
            train: cfg.clone(),
            seed,
            epoch,
            best_val_pr_auc: best_ap,
            threshold: choice.threshold,
        },
        history,
        stopped_at,
        warnings,
    })
}

/// Seed ensemble with a threshold chosen on the averaged validation
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Checkpoint>,
    pub threshold: f64,
}

pub struct EnsembleFit {
    pub ensemble: Ensemble,
    pub runs: Vec<FitResult>,
    pub warnings: Vec<String>,
}

/// Trains one member per configured seed, in parallel.
pub fn fit_ensemble(
    train: &[SessionGraph],
    val: &[SessionGraph],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<EnsembleFit> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| fit(train, val, model, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let members: Vec<Checkpoint> = runs.iter().map(|r| r.checkpoint.clone()).collect();
    let val_labels = labels_of(val)?;
    let probs = ensemble_probs(&members, val)?;
    let choice = select_threshold(&probs, &val_labels, cfg.threshold_objective, cfg.min_precision)?;
    let mut warnings: Vec<String> = runs.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
    if choice.fell_back {
        warnings.push("ensemble threshold fell back to max-F1".into());
    }
    Ok(EnsembleFit {
        ensemble: Ensemble {
            members,
            threshold: choice.threshold,
        },
        runs,
        warnings,
    })
}

fn check_members(members: &[Checkpoint]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one checkpoint".into()))?;
    if let Some(m) = members.iter().find(|m| !m.params.same_architecture(&first.params)) {
        return Err(Error::Config(format!(
            "checkpoint for seed {} does not match the ensemble architecture",
            m.seed
        )));
    }
    Ok(())
}

/// Mean member probability for one graph under `persona`.
pub fn ensemble_predict(members: &[Checkpoint], graph: &SessionGraph, persona: usize) -> Result<f64> {
    check_members(members)?;
    let mut total = 0.0;
    for m in members {
        total += f64::from(sigmoid(predict(&m.params, graph, persona)?.logit));
    }
    Ok(total / members.len() as f64)
}

pub fn ensemble_probs(members: &[Checkpoint], graphs: &[SessionGraph]) -> Result<Vec<f64>> {
    check_members(members)?;
    graphs
        .par_iter()
        .map(|g| ensemble_predict(members, g, g.persona))
        .collect()
}

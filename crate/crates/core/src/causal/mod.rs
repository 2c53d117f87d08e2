//! Causal-PsyGAT: ranks in-window antecedent utterances for each expressed
//! PEU with an edge scorer over frozen session-model node representations.


use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Scalar, Tape, Var};
use crate::embed::splitmix64;
use crate::error::{Error, Result};
use crate::graph::SessionGraph;
use crate::metrics::{ranking_metrics, RankingReport};
use crate::model::{predict, ModelParams, Param};
use crate::peu::{build_peu_tensor, PeuCategory, PeuTensor, NUM_CATEGORIES};
use crate::session::Session;
use crate::train::{clip_grad_norm, AdamW};

/// One expressed PEU and its in-window candidate antecedents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalInstance {
    pub session_id: String,
    pub target: usize,
    pub category: PeuCategory,
    /// Sign of the expressed value on `category`.
    pub value: i8,
    pub candidates: Vec<usize>,
    pub labels: Vec<u8>,
}

impl CausalInstance {
    pub fn has_cause(&self) -> bool {
        self.labels.contains(&1)
    }
}

/// Window `[t−w, t+w] \ {t}` clipped to `[0, len)`.
pub fn window(t: usize, w: usize, len: usize, past_only: bool) -> Vec<usize> {
    let hi = if past_only { t } else { (t + w + 1).min(len) };
    (t.saturating_sub(w)..hi).filter(|&j| j != t).collect()
}

pub fn extract_instances(session: &Session, peus: &PeuTensor, w: usize, past_only: bool) -> Result<Vec<CausalInstance>> {
    if w == 0 {
        return Err(Error::Config("causal window must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (t, row) in peus.rows.iter().enumerate() {
        for cat in row.active_categories() {
            let candidates = window(t, w, peus.len(), past_only);
            let sources: &[usize] = session
                .causes
                .iter()
                .find(|c| c.target == t && c.category == cat)
                .map_or(&[], |c| &c.sources);
            let labels = candidates.iter().map(|j| sources.contains(j) as u8).collect();
            out.push(CausalInstance {
                session_id: session.id.clone(),
                target: t,
                category: cat,
                value: row.get(cat),
                candidates,
                labels,
            });
        }
    }
    Ok(out)
}

/// Instances for every session, reading PEUs from the annotations.
pub fn extract_corpus<'a>(
    sessions: impl IntoIterator<Item = &'a Session>,
    w: usize,
    past_only: bool,
) -> Result<Vec<CausalInstance>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(extract_instances(s, &build_peu_tensor(s)?, w, past_only)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalConfig {
    pub window: usize,
    pub past_only: bool,
    pub mlp_hidden: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_instances: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            window: 3,
            past_only: false,
            mlp_hidden: 64,
            alpha: 0.75,
            gamma: 2.0,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 100,
            batch_instances: 32,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.mlp_hidden == 0 || self.epochs == 0 || self.batch_instances == 0 {
            return Err(Error::Config("causal window, mlp_hidden, epochs and batch_instances must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.alpha > 0.0) || self.gamma < 0.0 || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config("causal lr, alpha and clip_norm must be positive; gamma and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Node representations of a frozen session model, keyed by session id.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenReps {
    pub hidden: usize,
    by_session: HashMap<String, Vec<f32>>,
}

impl FrozenReps {
    pub fn compute(params: &ModelParams<f32>, graphs: &[SessionGraph]) -> Result<Self> {
        let reps = graphs
            .par_iter()
            .map(|g| Ok((g.session_id.clone(), predict(params, g, g.persona)?.node_reps)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { hidden: params.config.hidden, by_session: reps })
    }

    pub fn from_map(hidden: usize, by_session: HashMap<String, Vec<f32>>) -> Self {
        Self { hidden, by_session }
    }

    pub fn get(&self, session: &str) -> Result<&[f32]> {
        self.by_session
            .get(session)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no node representations for session {session}")))
    }
}

/// Pairwise MLP over `[h_t ‖ h_j ‖ target PEU ‖ onehot(j − t)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalScorer<F> {
    pub window: usize,
    pub hidden: usize,
    pub params: Vec<Param<F>>,
}

impl<F: Scalar> CausalScorer<F> {
    pub fn input_dim(hidden: usize, window: usize) -> usize {
        2 * hidden + NUM_CATEGORIES + 2 * window + 1
    }

    pub fn init(hidden: usize, window: usize, mlp_hidden: usize, seed: u64) -> Self {
        let d = Self::input_dim(hidden, window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |r: usize, c: usize| -> Vec<F> {
            let a = (6.0 / (r + c) as f64).sqrt();
            (0..r * c).map(|_| F::of(rng.random_range(-a..a))).collect()
        };
        let params = vec![
            Param { name: "scorer.0.weight".into(), shape: vec![d, mlp_hidden], data: xavier(d, mlp_hidden) },
            Param { name: "scorer.0.bias".into(), shape: vec![mlp_hidden], data: vec![F::zero(); mlp_hidden] },
            Param { name: "scorer.1.weight".into(), shape: vec![mlp_hidden, 1], data: xavier(mlp_hidden, 1) },
            Param { name: "scorer.1.bias".into(), shape: vec![1], data: vec![F::zero()] },
        ];
        Self { window, hidden, params }
    }

    pub fn validate(&self) -> Result<()> {
        let d = Self::input_dim(self.hidden, self.window);
        let shapes: Vec<&[usize]> = self.params.iter().map(|p| p.shape.as_slice()).collect();
        let ok = shapes.len() == 4
            && shapes[0].len() == 2
            && shapes[0][0] == d
            && shapes[1] == [shapes[0][1]]
            && shapes[2] == [shapes[0][1], 1]
            && shapes[3] == [1]
            && self.params.iter().all(|p| p.data.len() == p.shape.iter().product::<usize>());
        if !ok {
            return Err(Error::Config(format!(
                "scorer parameters do not match window {} and hidden size {}",
                self.window, self.hidden
            )));
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> CausalScorer<G> {
        CausalScorer {
            window: self.window,
            hidden: self.hidden,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&x| G::of(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Candidate-major feature matrix for one instance.
    pub fn features(&self, inst: &CausalInstance, reps: &[f32]) -> Result<Vec<F>> {
        let h = self.hidden;
        let need = inst.candidates.iter().copied().chain([inst.target]).max().unwrap_or(0) + 1;
        if reps.len() < need * h {
            return Err(Error::Data(format!(
                "session {}: node representations cover {} utterances, instance needs {need}",
                inst.session_id,
                reps.len() / h.max(1)
            )));
        }
        let w = self.window as isize;
        let d = Self::input_dim(h, self.window);
        let mut peu = [F::zero(); NUM_CATEGORIES];
        peu[inst.category.index()] = F::of(inst.value as f64);
        let row = |k: usize| reps[k * h..(k + 1) * h].iter().map(|&x| F::of(x as f64));
        let mut out = Vec::with_capacity(inst.candidates.len() * d);
        for &j in &inst.candidates {
            let rel = j as isize - inst.target as isize;
            if rel.abs() > w {
                return Err(Error::Config(format!("candidate {j} lies outside window {w} of {}", inst.target)));
            }
            out.extend(row(inst.target));
            out.extend(row(j));
            out.extend(peu);
            out.extend((-w..=w).map(|r| if r == rel { F::one() } else { F::zero() }));
        }
        Ok(out)
    }

    /// Logits for a stacked `n × input_dim` feature matrix.
    pub fn logits(&self, tape: &mut Tape<F>, vars: &[Var], x: Var) -> Result<Var> {
        let z = tape.matmul(x, vars[0])?;
        let z = tape.add_bias(z, vars[1])?;
        let z = tape.elu(z);
        let z = tape.matmul(z, vars[2])?;
        tape.add_bias(z, vars[3])
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(&p.shape, p.data.clone())).collect()
    }

    /// Independent sigmoid probability per candidate edge.
    pub fn score_edges(&self, inst: &CausalInstance, reps: &[f32]) -> Result<Vec<f64>> {
        if inst.candidates.is_empty() {
            return Ok(Vec::new());
        }
        let feats = self.features(inst, reps)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let x = tape.constant(&[inst.candidates.len(), Self::input_dim(self.hidden, self.window)], feats)?;
        let z = self.logits(&mut tape, &vars, x)?;
        Ok(tape.value(z).iter().map(|&v| sigmoid(v).as_f64()).collect())
    }
}

/// Mean per-edge focal loss, α(1−p_t)^γ·(−ln p_t), from probabilities.
pub fn causal_loss(probs: &[f64], labels: &[u8], alpha: f64, gamma: f64) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let pt = if y == 1 { p } else { 1.0 - p };
            if pt >= 1.0 {
                0.0
            } else {
                alpha * (1.0 - pt).powf(gamma) * -pt.max(1e-300).ln()
            }
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerFit {
    pub scorer: CausalScorer<f32>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

pub fn train_scorer(instances: &[CausalInstance], reps: &FrozenReps, cfg: &CausalConfig) -> Result<ScorerFit> {
    cfg.validate()?;
    let usable: Vec<&CausalInstance> = instances.iter().filter(|i| !i.candidates.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Data("no causal instances with candidates to train on".into()));
    }
    let mut scorer = CausalScorer::<f32>::init(reps.hidden, cfg.window, cfg.mlp_hidden, cfg.seed);
    let d = CausalScorer::<f32>::input_dim(reps.hidden, cfg.window);
    let prepared = usable
        .iter()
        .map(|i| Ok((scorer.features(i, reps.get(&i.session_id)?)?, i.labels.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(&scorer.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xca05a1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_instances) {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for &k in chunk {
                x.extend_from_slice(&prepared[k].0);
                y.extend_from_slice(&prepared[k].1);
            }
            let mut tape = Tape::new();
            let vars = scorer.bind(&mut tape)?;
            let xv = tape.constant(&[y.len(), d], x)?;
            let z = scorer.logits(&mut tape, &vars, xv)?;
            let loss = tape.focal_loss(z, &y, cfg.gamma, cfg.alpha)?;
            total += tape.scalar(loss) as f64;
            batches += 1;
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = scorer
                .params
                .iter()
                .zip(&vars)
                .map(|(p, &v)| tape.grad(v).map_or_else(|| vec![0.0; p.data.len()], <[f32]>::to_vec))
                .collect();
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut scorer.params, &grads, cfg.lr)?;
        }
        losses.push(total / batches as f64);
    }
    Ok(ScorerFit { scorer, losses })
}

/// Candidate positions sorted by descending probability, ties to the earlier
/// utterance.
pub fn rank(probs: &[f64], candidates: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(candidates[a].cmp(&candidates[b])));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub utt: usize,
    pub prob: f64,
    pub is_cause: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub session_id: String,
    pub target: usize,
    pub category: PeuCategory,
    pub ranked: Vec<RankedCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalReport {
    pub ranking: RankingReport,
    /// Instances without any annotated cause in the window.
    pub excluded: usize,
}

/// Ranks every instance with `score` and reports metrics over those that
/// have at least one annotated cause.
pub fn rank_and_evaluate<S>(instances: &[CausalInstance], mut score: S) -> Result<(CausalReport, Vec<Explanation>)>
where
    S: FnMut(&CausalInstance) -> Result<Vec<f64>>,
{
    let mut ranked_flags = Vec::new();
    let mut explanations = Vec::with_capacity(instances.len());
    let mut excluded = 0;
    for inst in instances {
        let probs = score(inst)?;
        let order = rank(&probs, &inst.candidates);
        let ranked: Vec<RankedCandidate> = order
            .iter()
            .map(|&k| RankedCandidate { utt: inst.candidates[k], prob: probs[k], is_cause: inst.labels[k] == 1 })
            .collect();
        if inst.has_cause() {
            ranked_flags.push(ranked.iter().map(|r| r.is_cause).collect());
        } else {
            excluded += 1;
        }
        explanations.push(Explanation {
            session_id: inst.session_id.clone(),
            target: inst.target,
            category: inst.category,
            ranked,
        });
    }
    if ranked_flags.is_empty() {
        return Err(Error::Data("no instance has an annotated cause; generate a corpus with datagen".into()));
    }
    Ok((CausalReport { ranking: ranking_metrics(&ranked_flags)?, excluded }, explanations))
}

pub fn evaluate_scorer(
    scorer: &CausalScorer<f32>,
    instances: &[CausalInstance],
    reps: &FrozenReps,
) -> Result<(CausalReport, Vec<Explanation>)> {
    scorer.validate()?;
    rank_and_evaluate(instances, |i| scorer.score_edges(i, reps.get(&i.session_id)?))
}

/// Expected reciprocal first-true rank under a uniformly random ordering of
/// `n` candidates of which `k` are true.
pub fn expected_random_mrr(n: usize, k: usize) -> f64 {
    if k == 0 || k > n {
        return 0.0;
    }
    // P(first true at r) = C(n−r, k−1) / C(n, k), built as a running product.
    let mut p = k as f64 / n as f64;
    let mut total = 0.0;
    for r in 1..=n - k + 1 {
        total += p / r as f64;
        if r < n {
            p *= (n - r + 1 - k) as f64 / (n - r) as f64;
        }
    }
    total
}

/// Mean MRR of a uniform random ranker over the causal instances, averaged
/// over `repeats` independent shuffles.
pub fn random_ranker_mrr(instances: &[CausalInstance], seed: u64, repeats: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..repeats.max(1) {
        let (report, _) = rank_and_evaluate(instances, |i| Ok((0..i.candidates.len()).map(|_| rng.random::<f64>()).collect()))?;
        total += report.ranking.mrr;
    }
    Ok(total / repeats.max(1) as f64)
}

/// Analytic counterpart of [`random_ranker_mrr`].
pub fn expected_random_mrr_over(instances: &[CausalInstance]) -> f64 {
    let with_cause: Vec<&CausalInstance> = instances.iter().filter(|i| i.has_cause()).collect();
    let sum: f64 = with_cause
        .iter()
        .map(|i| expected_random_mrr(i.candidates.len(), i.labels.iter().filter(|&&l| l == 1).count()))
        .sum();
    sum / with_cause.len().max(1) as f64
}

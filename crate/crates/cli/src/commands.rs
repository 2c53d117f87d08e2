use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use psygat::autodiff::OpTag;
use psygat::causal::{
    evaluate_scorer, expected_random_mrr_over, extract_corpus, random_ranker_mrr, train_scorer, CausalReport,
    FrozenReps,
};
use psygat::datagen::generate_corpus;
use psygat::graph::{build_graphs, SessionGraph};
use psygat::metrics::{classification_report, ClassificationReport};
use psygat::model::PersonaMode;
use psygat::session::{read_sessions, to_jsonl, write_atomic, write_sessions, Session, Source, Split};
use psygat::train::{ensemble_probs, fit_ensemble, ThresholdObjective};
use psygat::verification::{run_suite, GradcheckSummary};

use crate::checkpoint::{fingerprint, load_members, load_session, save_ensemble, save_scorer, save_session};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{finish, write_json};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CORPUS_MANIFEST_FILE: &str = "corpus_manifest.json";

fn to_value<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn create_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(())
}

pub fn generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let started = SystemTime::now();
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.generate.seed = s;
    }
    let corpus = generate_corpus(&cfg.generate)?;
    create_dir(out)?;
    write_sessions(&out.join(CORPUS_FILE), &corpus.sessions)?;
    write_json(&out.join(CORPUS_MANIFEST_FILE), &corpus.manifest())?;
    finish(
        out,
        "generate",
        to_value(&cfg.generate)?,
        Some(CORPUS_MANIFEST_FILE.into()),
        vec![cfg.generate.seed],
        vec![CORPUS_FILE.into(), CORPUS_MANIFEST_FILE.into()],
        started,
    )
}

/// Refuses corpora where augmented sessions reach evaluation splits or a
/// session id appears twice.
pub fn leakage_guard(sessions: &[Session]) -> CliResult<()> {
    let leaked: Vec<&str> = sessions
        .iter()
        .filter(|s| s.source == Source::Augmented && s.split != Split::Train)
        .map(|s| s.id.as_str())
        .collect();
    if !leaked.is_empty() {
        return Err(anyhow!(
            "leakage: augmented sessions outside the training split: {}",
            leaked.join(", ")
        )
        .into());
    }
    let mut seen = BTreeSet::new();
    let dups: BTreeSet<&str> = sessions.iter().map(|s| s.id.as_str()).filter(|id| !seen.insert(*id)).collect();
    if !dups.is_empty() {
        return Err(anyhow!("leakage: session ids appear more than once: {}", dups.into_iter().collect::<Vec<_>>().join(", ")).into());
    }
    Ok(())
}

fn split_of(sessions: &[Session], split: Split) -> Vec<&Session> {
    sessions.iter().filter(|s| s.split == split).collect()
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

struct Prepared {
    sessions: Vec<Session>,
    config: RunConfig,
}

impl Prepared {
    fn load(corpus: &Path, config: RunConfig) -> CliResult<Self> {
        let sessions = read_sessions(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
        leakage_guard(&sessions)?;
        Ok(Self { sessions, config })
    }

    fn graphs(&self, split: Option<Split>) -> CliResult<Vec<SessionGraph>> {
        let table = self.config.features.embed(&self.sessions)?;
        let chosen: Vec<&Session> = match split {
            Some(s) => split_of(&self.sessions, s),
            None => self.sessions.iter().collect(),
        };
        Ok(build_graphs(chosen, &table, self.config.features.edge_norm)?)
    }

    fn require(&self, split: Split) -> CliResult<()> {
        if split_of(&self.sessions, split).is_empty() {
            return Err(CliError::from(psygat::Error::Data(format!("corpus has no {} split", split_name(split)))));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub sessions: usize,
    pub members: usize,
    pub metrics: ClassificationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Option<u8>,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub seed: u64,
    pub checkpoint: String,
    pub best_epoch: usize,
    pub stopped_at: usize,
    pub best_val_pr_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub threshold: f64,
    pub threshold_objective: ThresholdObjective,
    pub val: EvalReport,
    pub test: Option<EvalReport>,
    pub members: Vec<MemberSummary>,
    pub warnings: Vec<String>,
}

fn evaluate_graphs(
    members: &[psygat::train::Checkpoint],
    graphs: &[SessionGraph],
    threshold: f64,
    split: Split,
) -> CliResult<(EvalReport, Vec<Prediction>)> {
    let probs = ensemble_probs(members, graphs)?;
    let labels: Vec<u8> = graphs
        .iter()
        .map(|g| g.label.ok_or_else(|| psygat::Error::Data(format!("session {} has no label", g.session_id))))
        .collect::<psygat::Result<_>>()?;
    let metrics = classification_report(&probs, &labels, threshold)?;
    let preds = graphs
        .iter()
        .zip(&probs)
        .map(|(g, &p)| Prediction { id: g.session_id.clone(), label: g.label, prob: p })
        .collect();
    Ok((EvalReport { split: split_name(split).into(), sessions: graphs.len(), members: members.len(), metrics }, preds))
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> CliResult<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

fn corpus_manifest_ref(corpus: &Path) -> Option<String> {
    let m = corpus.parent()?.join(CORPUS_MANIFEST_FILE);
    m.exists().then(|| m.display().to_string())
}

pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub persona_mode: Option<PersonaMode>,
    pub threshold_objective: Option<ThresholdObjective>,
}

pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const REPORT_FILE: &str = "report.json";

pub fn train(config: Option<&Path>, corpus: &Path, out: &Path, ov: &TrainOverrides) -> CliResult<TrainReport> {
    let started = SystemTime::now();
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = ov.seed {
        cfg.train.seeds = vec![s];
    }
    if let Some(m) = ov.persona_mode {
        cfg.model.persona_mode = m;
    }
    if let Some(o) = ov.threshold_objective {
        cfg.train.threshold_objective = o;
    }
    cfg.validate()?;
    let data = Prepared::load(corpus, cfg.clone())?;
    data.require(Split::Train)?;
    data.require(Split::Val)?;
    let train = data.graphs(Some(Split::Train))?;
    let val = data.graphs(Some(Split::Val))?;
    let fitted = fit_ensemble(&train, &val, &cfg.model, &cfg.train)?;

    create_dir(&out.join("checkpoints"))?;
    let mut outputs = Vec::new();
    let mut members = Vec::new();
    for run in &fitted.runs {
        let ck = &run.checkpoint;
        let rel = format!("checkpoints/member-{}.json", ck.seed);
        save_session(&out.join(&rel), ck)?;
        outputs.push(rel.clone());
        outputs.push(format!("checkpoints/member-{}.bin", ck.seed));
        members.push(MemberSummary {
            seed: ck.seed,
            checkpoint: rel,
            best_epoch: ck.epoch,
            stopped_at: run.stopped_at,
            best_val_pr_auc: ck.best_val_pr_auc,
        });
    }
    let threshold = fitted.ensemble.threshold;
    save_ensemble(&out.join(ENSEMBLE_FILE), threshold, members.iter().map(|m| m.checkpoint.clone()).collect())?;
    outputs.push(ENSEMBLE_FILE.into());

    let (val_report, val_preds) = evaluate_graphs(&fitted.ensemble.members, &val, threshold, Split::Val)?;
    write_predictions(&out.join("predictions-val.jsonl"), &val_preds)?;
    outputs.push("predictions-val.jsonl".into());
    let test = if split_of(&data.sessions, Split::Test).is_empty() {
        None
    } else {
        let graphs = data.graphs(Some(Split::Test))?;
        let (r, preds) = evaluate_graphs(&fitted.ensemble.members, &graphs, threshold, Split::Test)?;
        write_predictions(&out.join("predictions-test.jsonl"), &preds)?;
        outputs.push("predictions-test.jsonl".into());
        Some(r)
    };
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    let report = TrainReport {
        threshold,
        threshold_objective: cfg.train.threshold_objective,
        val: val_report,
        test,
        members,
        warnings: fitted.warnings.clone(),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    outputs.push(REPORT_FILE.into());
    finish(out, "train", to_value(&cfg)?, corpus_manifest_ref(corpus), cfg.train.seeds.clone(), outputs, started)?;
    Ok(report)
}

pub fn evaluate(
    config: Option<&Path>,
    checkpoint: &Path,
    corpus: &Path,
    split: Split,
    threshold: Option<f64>,
    out: &Path,
) -> CliResult<EvalReport> {
    let started = SystemTime::now();
    let cfg = RunConfig::load(config)?;
    let (members, stored) = load_members(checkpoint)?;
    let data = Prepared::load(corpus, cfg.clone())?;
    data.require(split)?;
    let graphs = data.graphs(Some(split))?;
    let t = threshold.unwrap_or(stored);
    let (report, preds) = evaluate_graphs(&members, &graphs, t, split)?;
    create_dir(out)?;
    let name = split_name(split);
    let (report_file, pred_file) = (format!("eval-{name}.json"), format!("predictions-{name}.jsonl"));
    write_json(&out.join(&report_file), &report)?;
    write_predictions(&out.join(&pred_file), &preds)?;
    let seeds = members.iter().map(|m| m.seed).collect();
    finish(out, "evaluate", to_value(&cfg)?, corpus_manifest_ref(corpus), seeds, vec![report_file, pred_file], started)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub split: String,
    pub window: usize,
    pub past_only: bool,
    pub train_instances: usize,
    pub instances: usize,
    pub causal: CausalReport,
    /// Mean MRR of a uniform random ranker on the same instances.
    pub random_mrr: f64,
    pub random_mrr_expected: f64,
    pub session_checkpoint_sha256: String,
}

pub const SCORER_FILE: &str = "scorer.json";
pub const EXPLAIN_REPORT_FILE: &str = "ranking.json";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";

pub fn explain(
    config: Option<&Path>,
    checkpoint: &Path,
    corpus: &Path,
    window: Option<usize>,
    split: Split,
    out: &Path,
) -> CliResult<ExplainReport> {
    let started = SystemTime::now();
    let mut cfg = RunConfig::load(config)?;
    if let Some(w) = window {
        cfg.causal.window = w;
    }
    cfg.validate()?;
    let member = member_path(checkpoint)?;
    let before = fingerprint(&member)?;
    let session_model = load_session(&member)?;
    let data = Prepared::load(corpus, cfg.clone())?;
    if data.sessions.iter().all(|s| s.causes.is_empty()) {
        return Err(CliError::from(psygat::Error::Data(
            "corpus has no causal annotations; generate one with `psygat generate`".into(),
        )));
    }
    data.require(Split::Train)?;
    data.require(split)?;
    let reps = FrozenReps::compute(&session_model.params, &data.graphs(None)?)?;
    let c = &cfg.causal;
    let train_inst = extract_corpus(split_of(&data.sessions, Split::Train), c.window, c.past_only)?;
    let eval_inst = extract_corpus(split_of(&data.sessions, split), c.window, c.past_only)?;
    let fit = train_scorer(&train_inst, &reps, c)?;
    let (causal, explanations) = evaluate_scorer(&fit.scorer, &eval_inst, &reps)?;
    let random_mrr = random_ranker_mrr(&eval_inst, c.seed, 200)?;

    create_dir(out)?;
    save_scorer(&out.join(SCORER_FILE), &fit.scorer, c)?;
    let mut lines = String::new();
    for e in &explanations {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    write_atomic(&out.join(EXPLANATIONS_FILE), lines.as_bytes())?;
    let after = fingerprint(&member)?;
    if before != after {
        return Err(anyhow!("session checkpoint {} changed while training the scorer", member.display()).into());
    }
    let report = ExplainReport {
        split: split_name(split).into(),
        window: c.window,
        past_only: c.past_only,
        train_instances: train_inst.len(),
        instances: eval_inst.len(),
        causal,
        random_mrr,
        random_mrr_expected: expected_random_mrr_over(&eval_inst),
        session_checkpoint_sha256: after,
    };
    write_json(&out.join(EXPLAIN_REPORT_FILE), &report)?;
    let outputs = vec![
        SCORER_FILE.into(),
        "scorer.bin".into(),
        EXPLANATIONS_FILE.into(),
        EXPLAIN_REPORT_FILE.into(),
    ];
    finish(out, "explain", to_value(&cfg)?, corpus_manifest_ref(corpus), vec![c.seed], outputs, started)?;
    Ok(report)
}

/// Resolves an ensemble index to its first member; member paths pass through.
fn member_path(path: &Path) -> CliResult<PathBuf> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    match value.get("members").and_then(|m| m.get(0)).and_then(|m| m.as_str()) {
        Some(first) => Ok(path.parent().unwrap_or(Path::new(".")).join(first)),
        None => Ok(path.to_path_buf()),
    }
}

pub fn gradcheck(fault: Option<&str>) -> CliResult<GradcheckSummary> {
    let tag = match fault {
        None => None,
        Some(name) => Some(
            OpTag::from_name(name).ok_or_else(|| CliError::usage(anyhow!("unknown op {name:?} for --inject-fault")))?,
        ),
    };
    Ok(run_suite(tag)?)
}

/// Serialises sessions exactly as `generate` writes them.
pub fn corpus_text(sessions: &[Session]) -> CliResult<String> {
    Ok(to_jsonl(sessions)?)
}

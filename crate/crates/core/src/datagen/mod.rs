//! Seeded generator of synthetic interview sessions with planted PEU
//! annotations, persona and depression labels, and causal ground truth.

mod persona;
mod text;

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use persona::{default_personas, extended_personas, with_spread, PersonaProfile};

use crate::embed::splitmix64;
use crate::error::{Error, Result};
use crate::peu::{emit_annotations, keyword_extract, Lexicon, PeuCategory, PeuVector, COPING, NUM_CATEGORIES};
use crate::session::{CausalAnnotation, Session, Source, Split, Utterance};

const HOPELESSNESS: usize = 1;

// Depressed sessions express at least `BASE + SLOPE·e` active turns per turn;
// controls at most `CONTROL_SLOPE·e` negative ones, less their coping. Within
// a persona the two never meet; across a wide expressiveness spread they do.
const DEPRESSED_BASE: f64 = 0.1;
const DEPRESSED_SLOPE: f64 = 0.5;
const CONTROL_SLOPE: f64 = 0.45;

/// Category mix the augmented sessions drift towards.
const STEREOTYPE: [f64; NUM_CATEGORIES] = [0.05, 0.35, 0.15, 0.05, 0.05, 0.3, 0.05, 0.0];

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Noise {
    /// Fraction of each class whose label is swapped, paired so balance holds.
    pub label_flip: f64,
    /// Probability that an annotated utterance loses its annotation; the
    /// text keeps the phrase.
    pub peu_dropout: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaSet {
    #[default]
    Default,
    Extended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Base (non-augmented) sessions across all splits.
    pub n_sessions: usize,
    pub class_balance: f64,
    pub utterances_per_session: Span,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Share of the training split made of augmented sessions.
    pub augmentation_ratio: f64,
    pub noise: Noise,
    pub causal_lag: Span,
    pub personas: PersonaSet,
    /// Number of model-side persona labels; a profile maps to `id % num_personas`.
    pub num_personas: usize,
    /// Overrides profile expressiveness with evenly spaced values.
    pub expressiveness_spread: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sessions: 180,
            class_balance: 0.5,
            utterances_per_session: Span { min: 12, max: 24 },
            val_fraction: 0.2,
            test_fraction: 0.2,
            augmentation_ratio: 0.0,
            noise: Noise::default(),
            causal_lag: Span { min: 1, max: 3 },
            personas: PersonaSet::Default,
            num_personas: 4,
            expressiveness_spread: None,
        }
    }
}

fn unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {x} is outside [0, 1]")))
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sessions < 10 {
            return Err(Error::Config(format!("n_sessions = {} is below 10", self.n_sessions)));
        }
        unit("class_balance", self.class_balance)?;
        unit("val_fraction", self.val_fraction)?;
        unit("test_fraction", self.test_fraction)?;
        unit("noise.label_flip", self.noise.label_flip)?;
        unit("noise.peu_dropout", self.noise.peu_dropout)?;
        unit("augmentation_ratio", self.augmentation_ratio)?;
        if self.augmentation_ratio >= 1.0 {
            return Err(Error::Config("augmentation_ratio must be below 1".into()));
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Config("val_fraction + test_fraction must leave room for training".into()));
        }
        let u = self.utterances_per_session;
        if u.min == 0 || u.min > u.max {
            return Err(Error::Config(format!("utterances_per_session {}..{} is empty", u.min, u.max)));
        }
        let lag = self.causal_lag;
        if lag.min == 0 || lag.min > lag.max {
            return Err(Error::Config(format!("causal_lag {}..{} is empty", lag.min, lag.max)));
        }
        if lag.min >= u.min {
            return Err(Error::Config("causal_lag.min must be shorter than the shortest session".into()));
        }
        if self.num_personas < 2 {
            return Err(Error::Config("num_personas must be at least 2".into()));
        }
        if let Some(s) = self.expressiveness_spread {
            unit("expressiveness_spread", s)?;
        }
        Ok(())
    }

    pub fn profiles(&self) -> Result<Vec<PersonaProfile>> {
        let base = match self.personas {
            PersonaSet::Default => default_personas(),
            PersonaSet::Extended => extended_personas(),
        };
        match self.expressiveness_spread {
            Some(s) => with_spread(base, s),
            None => Ok(base),
        }
    }
}

/// Per-session generation knobs that are not part of the persona.
#[derive(Clone, Copy, Debug)]
pub struct SessionSpec {
    pub utterances: Span,
    pub causal_lag: Span,
    pub num_personas: usize,
    pub augmented: bool,
}

impl Default for SessionSpec {
    fn default() -> Self {
        let c = GenConfig::default();
        Self {
            utterances: c.utterances_per_session,
            causal_lag: c.causal_lag,
            num_personas: c.num_personas,
            augmented: false,
        }
    }
}

fn planted_value(cat: usize) -> i8 {
    if cat == COPING {
        -1
    } else {
        1
    }
}

/// Generates one session with the default spec.
pub fn generate_session(seed: u64, persona: &PersonaProfile, label: u8) -> Result<Session> {
    generate_session_with(seed, persona, label, &SessionSpec::default(), &Lexicon::default())
}

pub fn generate_session_with(
    seed: u64,
    persona: &PersonaProfile,
    label: u8,
    spec: &SessionSpec,
    lexicon: &Lexicon,
) -> Result<Session> {
    persona.validate()?;
    if label > 1 {
        return Err(Error::Config(format!("label {label} is not 0 or 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.random_range(spec.utterances.min..=spec.utterances.max);
    let e = persona.expressiveness;
    let style = if spec.augmented { &text::AUGMENTED } else { &text::BASE };
    let prominence: [f64; NUM_CATEGORIES] = if spec.augmented {
        std::array::from_fn(|c| 0.5 * persona.prominence[c] + 0.5 * STEREOTYPE[c])
    } else {
        persona.prominence
    };

    let mut vals = vec![[0i8; NUM_CATEGORIES]; t_len];
    let mut causes = Vec::new();
    if label == 1 {
        // Symptoms and their antecedents share one activation budget, so the
        // expressed rate tracks expressiveness.
        let dist = WeightedIndex::new(prominence).expect("prominence validated");
        let mut rate = DEPRESSED_BASE + DEPRESSED_SLOPE * e;
        if spec.augmented {
            rate = (rate * 1.4).min(0.8);
        }
        let budget = (rate * t_len as f64).ceil() as usize;
        let lag_min = spec.causal_lag.min;
        let mut positions: Vec<usize> = (lag_min..t_len).collect();
        positions.shuffle(&mut rng);
        let mut active = 0;
        for &t in &positions {
            if active >= budget {
                break;
            }
            if vals[t].iter().any(|&v| v != 0) {
                continue;
            }
            let cat = dist.sample(&mut rng);
            vals[t][cat] = planted_value(cat);
            active += 1;
            let mut lags: Vec<usize> = (lag_min..=spec.causal_lag.max.min(t)).collect();
            lags.shuffle(&mut rng);
            let n_src = if rng.random_bool(0.5) { 1 } else { 2 }.min(lags.len());
            let mut sources: Vec<usize> = lags[..n_src].iter().map(|l| t - l).collect();
            sources.sort_unstable();
            for &s in &sources {
                if vals[s].iter().all(|&v| v == 0) {
                    let c = dist.sample(&mut rng);
                    vals[s][c] = planted_value(c);
                    active += 1;
                }
            }
            causes.push(CausalAnnotation {
                target: t,
                category: PeuCategory::from_index(cat).unwrap(),
                sources,
            });
        }
        causes.sort_by_key(|c| c.target);
    } else {
        let mut w = prominence;
        w[HOPELESSNESS] = 0.0;
        w[COPING] = 0.0;
        let dist = WeightedIndex::new(w).expect("non-coping prominence is positive");
        let n_neg = if spec.augmented { 0 } else { (CONTROL_SLOPE * e * t_len as f64).floor() as usize };
        let cope_rate = if spec.augmented { 0.3 } else { 0.1 + 0.05 * (1.0 + persona.coping_bias) };
        let n_cope = (cope_rate * t_len as f64).ceil() as usize;
        let mut positions: Vec<usize> = (0..t_len).collect();
        positions.shuffle(&mut rng);
        for &t in &positions[..n_neg] {
            vals[t][dist.sample(&mut rng)] = 1;
        }
        for &t in &positions[n_neg..(n_neg + n_cope).min(t_len)] {
            vals[t][COPING] = 1;
        }
    }

    let mut utterances = Vec::with_capacity(t_len);
    let mut peus = Vec::with_capacity(t_len);
    for (i, v) in vals.iter().enumerate() {
        let answer = match v.iter().position(|&x| x != 0) {
            Some(cat) => {
                let cat_enum = PeuCategory::from_index(cat).unwrap();
                let phrase = *lexicon
                    .phrases(cat_enum, v[cat])
                    .choose(&mut rng)
                    .ok_or_else(|| Error::Config(format!("lexicon has no phrase for {}", cat_enum.name())))?;
                style.expression(phrase, &mut rng)
            }
            None => style.neutral(&mut rng),
        };
        let extracted = keyword_extract(&answer, lexicon);
        if extracted.values() != *v {
            return Err(Error::Config(format!("lexicon phrases overlap: {answer:?} does not extract cleanly")));
        }
        peus.push(emit_annotations(i, &extracted));
        utterances.push(Utterance { i, q: style.question(&mut rng), a: answer });
    }

    Ok(Session {
        id: format!("g{seed:016x}"),
        persona: persona.id % spec.num_personas,
        label,
        split: Split::Train,
        source: if spec.augmented { Source::Augmented } else { Source::Base },
        utterances,
        peus,
        causes,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub sessions: usize,
    pub depressed: usize,
    pub augmented: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: GenConfig,
    pub splits: BTreeMap<String, SplitCounts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub sessions: Vec<Session>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Session> {
        self.sessions.iter().filter(|s| s.split == split).collect()
    }

    pub fn manifest(&self) -> CorpusManifest {
        let mut splits = BTreeMap::new();
        for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
            let mut c = SplitCounts::default();
            for s in self.split(split) {
                c.sessions += 1;
                c.depressed += s.label as usize;
                c.augmented += (s.source == Source::Augmented) as usize;
            }
            splits.insert(name.to_string(), c);
        }
        CorpusManifest { seed: self.config.seed, config: self.config.clone(), splits }
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

struct Job {
    profile: usize,
    label: u8,
    split: Split,
    augmented: bool,
}

/// Allots `m` sessions of one class to val, test and train.
/// Per-split (positives, negatives), each split rounded to the target balance.
fn allot(cfg: &GenConfig) -> Result<[(Split, usize, usize); 3]> {
    let n = cfg.n_sessions;
    let val = (n as f64 * cfg.val_fraction).round() as usize;
    let test = (n as f64 * cfg.test_fraction).round() as usize;
    let train = n.saturating_sub(val + test);
    let mut out = [(Split::Train, 0, 0), (Split::Val, 0, 0), (Split::Test, 0, 0)];
    for (slot, size) in out.iter_mut().zip([train, val, test]) {
        let pos = (size as f64 * cfg.class_balance).round() as usize;
        if pos == 0 || pos >= size {
            return Err(Error::Config(format!(
                "infeasible balance: {} split of {size} sessions cannot hold both classes",
                split_name(slot.0)
            )));
        }
        slot.1 = pos;
        slot.2 = size - pos;
    }
    Ok(out)
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let profiles = cfg.profiles()?;
    for p in &profiles {
        p.validate()?;
    }
    let lexicon = Lexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xc0a5_u64));
    let splits = allot(cfg)?;

    let mut jobs: Vec<Job> = Vec::new();
    let mut train_base = 0;
    for label in [1u8, 0u8] {
        for &(split, pos, neg) in &splits {
            let count = if label == 1 { pos } else { neg };
            let offset = rng.random_range(0..profiles.len());
            if split == Split::Train {
                train_base += count;
            }
            jobs.extend((0..count).map(|j| Job {
                profile: (j + offset) % profiles.len(),
                label,
                split,
                augmented: false,
            }));
        }
    }
    let r = cfg.augmentation_ratio;
    let n_aug = (train_base as f64 * r / (1.0 - r)).round() as usize;
    let n_aug_pos = (n_aug as f64 * cfg.class_balance).round() as usize;
    for (label, count) in [(1u8, n_aug_pos), (0u8, n_aug - n_aug_pos)] {
        let offset = rng.random_range(0..profiles.len());
        jobs.extend((0..count).map(|j| Job {
            profile: (j + offset) % profiles.len(),
            label,
            split: Split::Train,
            augmented: true,
        }));
    }
    jobs.shuffle(&mut rng);

    let mut sessions = jobs
        .par_iter()
        .enumerate()
        .map(|(k, job)| {
            let spec = SessionSpec {
                utterances: cfg.utterances_per_session,
                causal_lag: cfg.causal_lag,
                num_personas: cfg.num_personas,
                augmented: job.augmented,
            };
            let seed = splitmix64(cfg.seed ^ splitmix64(k as u64 + 1));
            let mut s = generate_session_with(seed, &profiles[job.profile], job.label, &spec, &lexicon)?;
            s.split = job.split;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &mut sessions {
        let tag = if s.source == Source::Augmented { "aug" } else { split_name(s.split) };
        let idx = counters.entry(tag).or_default();
        s.id = format!("s{}-{tag}-{idx:04}", cfg.seed);
        *idx += 1;
    }
    apply_noise(&mut sessions, &cfg.noise, &mut rng);
    sessions.sort_by_key(|s| (s.split as u8, s.source as u8, s.id.clone()));
    Ok(Corpus { config: cfg.clone(), sessions })
}

/// Corrupts the base sessions; augmented ones stay clean.
fn apply_noise(sessions: &mut [Session], noise: &Noise, rng: &mut ChaCha8Rng) {
    if noise.label_flip > 0.0 {
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (k, s) in sessions.iter().enumerate() {
                if s.split == split && s.source == Source::Base {
                    if s.label == 1 { pos.push(k) } else { neg.push(k) }
                }
            }
            let flips = ((pos.len().min(neg.len()) as f64) * noise.label_flip).round() as usize;
            pos.shuffle(rng);
            neg.shuffle(rng);
            for &k in pos[..flips].iter().chain(&neg[..flips]) {
                sessions[k].label = 1 - sessions[k].label;
            }
        }
    }
    if noise.peu_dropout > 0.0 {
        for s in sessions.iter_mut().filter(|s| s.source == Source::Base) {
            for rec in &mut s.peus {
                if !rec.peus.is_empty() && rng.random_bool(noise.peu_dropout) {
                    *rec = emit_annotations(rec.utt, &PeuVector::zero());
                }
            }
        }
    }
}

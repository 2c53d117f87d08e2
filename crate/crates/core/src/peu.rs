//! Psychological expression units: the eight-category taxonomy, per-utterance
//! vectors, session tensors, the annotation record format and a
//! deterministic lexicon-based extractor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::Session;

pub const NUM_CATEGORIES: usize = 8;

/// Index of the ternary coping dimension.
pub const COPING: usize = 7;

/// The taxonomy in its canonical order. The order is the tensor column
/// order and must never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeuCategory {
    CognitiveDistortions,
    HopelessnessHelplessness,
    SelfNegativity,
    StressorsInterpersonal,
    EmotionalBehavioralWithdrawal,
    SomaticFatigueSleep,
    RuminationAffectiveDysregulation,
    ProtectivePositiveCoping,
}

impl PeuCategory {
    pub const ALL: [PeuCategory; NUM_CATEGORIES] = [
        PeuCategory::CognitiveDistortions,
        PeuCategory::HopelessnessHelplessness,
        PeuCategory::SelfNegativity,
        PeuCategory::StressorsInterpersonal,
        PeuCategory::EmotionalBehavioralWithdrawal,
        PeuCategory::SomaticFatigueSleep,
        PeuCategory::RuminationAffectiveDysregulation,
        PeuCategory::ProtectivePositiveCoping,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PeuCategory::CognitiveDistortions => "cognitive_distortions",
            PeuCategory::HopelessnessHelplessness => "hopelessness_helplessness",
            PeuCategory::SelfNegativity => "self_negativity",
            PeuCategory::StressorsInterpersonal => "stressors_interpersonal",
            PeuCategory::EmotionalBehavioralWithdrawal => "emotional_behavioral_withdrawal",
            PeuCategory::SomaticFatigueSleep => "somatic_fatigue_sleep",
            PeuCategory::RuminationAffectiveDysregulation => "rumination_affective_dysregulation",
            PeuCategory::ProtectivePositiveCoping => "protective_positive_coping",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Schema(format!("unknown PEU category `{name}`")))
    }

    pub fn is_coping(self) -> bool {
        self.index() == COPING
    }
}

impl fmt::Display for PeuCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub category: PeuCategory,
    pub span: String,
}

/// Per-utterance evidence vector. Dims 0–6 are binary, the coping dim is
/// ternary: −1 mitigating, 0 absent, +1 positive coping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PeuVector {
    values: [i8; NUM_CATEGORIES],
    evidence: Vec<Evidence>,
}

fn check_value(cat: PeuCategory, value: i64) -> Result<i8> {
    let ok = if cat.is_coping() {
        (-1..=1).contains(&value)
    } else {
        (0..=1).contains(&value)
    };
    if ok {
        Ok(value as i8)
    } else {
        Err(Error::Schema(format!("value {value} out of range for category {cat}")))
    }
}

impl PeuVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_values(values: [i8; NUM_CATEGORIES]) -> Result<Self> {
        for (cat, &v) in PeuCategory::ALL.iter().zip(&values) {
            check_value(*cat, v as i64)?;
        }
        Ok(Self {
            values,
            evidence: Vec::new(),
        })
    }

    pub fn with_evidence(mut self, evidence: Vec<Evidence>) -> Result<Self> {
        self.evidence = evidence;
        self.validate()?;
        Ok(self)
    }

    /// When any evidence is attached, every active dim needs a span.
    pub fn validate(&self) -> Result<()> {
        if self.evidence.is_empty() {
            return Ok(());
        }
        for cat in self.active_categories() {
            if !self.evidence.iter().any(|e| e.category == cat) {
                return Err(Error::Schema(format!("category {cat} is active without an evidence span")));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> [i8; NUM_CATEGORIES] {
        self.values
    }

    pub fn get(&self, cat: PeuCategory) -> i8 {
        self.values[cat.index()]
    }

    pub fn set(&mut self, cat: PeuCategory, value: i8) -> Result<()> {
        self.values[cat.index()] = check_value(cat, value as i64)?;
        Ok(())
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    pub fn as_f32(&self) -> [f32; NUM_CATEGORIES] {
        self.values.map(f32::from)
    }

    pub fn active_categories(&self) -> impl Iterator<Item = PeuCategory> + '_ {
        PeuCategory::ALL.into_iter().filter(|c| self.values[c.index()] != 0)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }
}

/// One utterance's annotation, as stored in the session JSONL.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub utt: usize,
    pub peus: Vec<PeuItem>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeuItem {
    pub category: String,
    #[serde(default = "default_value")]
    pub value: i64,
    #[serde(default)]
    pub spans: Vec<String>,
}

fn default_value() -> i64 {
    1
}

/// Parses one annotation record. Repeated categories merge: spans are
/// concatenated and the first value wins.
pub fn parse_annotations(record: &AnnotationRecord) -> Result<PeuVector> {
    let mut v = PeuVector::zero();
    let mut seen = [false; NUM_CATEGORIES];
    for item in &record.peus {
        let cat = PeuCategory::from_name(&item.category)?;
        let value = check_value(cat, item.value)?;
        if !seen[cat.index()] {
            v.values[cat.index()] = value;
            seen[cat.index()] = true;
        }
        v.evidence.extend(item.spans.iter().map(|s| Evidence {
            category: cat,
            span: s.clone(),
        }));
    }
    v.validate()
        .map_err(|e| Error::Schema(format!("utterance {}: {e}", record.utt)))?;
    Ok(v)
}

pub fn emit_annotations(utt: usize, v: &PeuVector) -> AnnotationRecord {
    let peus = v
        .active_categories()
        .map(|cat| PeuItem {
            category: cat.name().to_string(),
            value: v.get(cat) as i64,
            spans: v
                .evidence
                .iter()
                .filter(|e| e.category == cat)
                .map(|e| e.span.clone())
                .collect(),
        })
        .collect();
    AnnotationRecord { utt, peus }
}

/// T×8 matrix of PEU vectors aligned with utterance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PeuTensor {
    pub rows: Vec<PeuVector>,
}

impl PeuTensor {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self) -> Vec<[i8; NUM_CATEGORIES]> {
        self.rows.iter().map(PeuVector::values).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.rows.iter().flat_map(|r| r.as_f32()).collect()
    }
}

/// Aligns a session's annotation records with its utterances.
pub fn build_peu_tensor(session: &Session) -> Result<PeuTensor> {
    let mut rows: Vec<Option<PeuVector>> = vec![None; session.utterances.len()];
    for record in &session.peus {
        let slot = rows.get_mut(record.utt).ok_or_else(|| {
            Error::Data(format!(
                "session {}: annotation for utterance {} beyond {} utterances",
                session.id,
                record.utt,
                session.utterances.len()
            ))
        })?;
        let parsed = parse_annotations(record)?;
        *slot = Some(match slot.take() {
            None => parsed,
            Some(mut prev) => {
                for cat in parsed.active_categories() {
                    if prev.get(cat) == 0 {
                        prev.values[cat.index()] = parsed.get(cat);
                    }
                }
                prev.evidence.extend(parsed.evidence);
                prev
            }
        });
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.ok_or_else(|| Error::Data(format!("session {}: utterance {i} has no PEU annotation", session.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PeuTensor { rows })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub category: PeuCategory,
    pub phrase: String,
    /// Value written to the category's dim on a match; only the coping
    /// category uses −1.
    pub value: i8,
}

/// Phrase lists per category for keyword extraction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
}

const DEFAULT_PHRASES: [(PeuCategory, i8, &[&str]); 9] = [
    (
        PeuCategory::CognitiveDistortions,
        1,
        &[
            "always my fault",
            "everyone hates me",
            "i ruin everything",
            "nothing ever goes right",
            "they all think i'm stupid",
            "it's all or nothing",
            "i should have known better",
            "if i fail once i fail forever",
            "people are always judging me",
            "one mistake means i'm done",
        ],
    ),
    (
        PeuCategory::HopelessnessHelplessness,
        1,
        &[
            "nothing will change",
            "there's no point",
            "i can't see a way out",
            "it's hopeless",
            "nothing i do matters",
            "i've given up",
            "no way forward",
            "i feel trapped",
            "it will never get better",
            "i can't fix anything",
        ],
    ),
    (
        PeuCategory::SelfNegativity,
        1,
        &[
            "i'm worthless",
            "i hate myself",
            "i'm a failure",
            "i'm not good enough",
            "i'm a burden",
            "i'm so useless",
            "i'm disgusted with myself",
            "i'm pathetic",
            "i don't deserve anything",
            "i'm ashamed of who i am",
        ],
    ),
    (
        PeuCategory::StressorsInterpersonal,
        1,
        &[
            "lost my job",
            "my boss yelled at me",
            "we broke up",
            "argument with my partner",
            "money is really tight",
            "my father got sick",
            "got evicted",
            "fight with my sister",
            "my friend betrayed me",
            "failed my exam",
        ],
    ),
    (
        PeuCategory::EmotionalBehavioralWithdrawal,
        1,
        &[
            "i stay in my room",
            "stopped seeing my friends",
            "i don't go out anymore",
            "i avoid everyone",
            "i cancel all my plans",
            "i stopped answering calls",
            "i keep to myself",
            "i lost interest in everything",
            "i don't enjoy anything",
            "i just isolate",
        ],
    ),
    (
        PeuCategory::SomaticFatigueSleep,
        1,
        &[
            "i feel exhausted",
            "i can't sleep",
            "i barely eat",
            "no energy at all",
            "i sleep all day",
            "my body aches",
            "i wake up at night",
            "always tired",
            "i have headaches",
            "i feel drained",
        ],
    ),
    (
        PeuCategory::RuminationAffectiveDysregulation,
        1,
        &[
            "i keep replaying it",
            "i can't stop thinking about it",
            "i cry for no reason",
            "i snap at people",
            "my mind keeps racing",
            "i overthink everything",
            "mood swings",
            "i get angry so fast",
            "i dwell on it",
            "i can't calm down",
        ],
    ),
    (
        PeuCategory::ProtectivePositiveCoping,
        1,
        &[
            "i go for a walk",
            "i talk to my friends",
            "i see a therapist",
            "i meditate",
            "i exercise regularly",
            "i write in my journal",
            "i keep a routine",
            "i ask for help",
            "i focus on the good things",
            "i take it one day at a time",
        ],
    ),
    (
        PeuCategory::ProtectivePositiveCoping,
        -1,
        &[
            "i try but it never helps",
            "i drink to forget",
            "i just sleep it off",
            "i distract myself but it comes back",
            "i pretend everything is fine",
            "i push it down",
        ],
    ),
];

impl Default for Lexicon {
    fn default() -> Self {
        let entries = DEFAULT_PHRASES
            .iter()
            .flat_map(|(cat, value, phrases)| {
                phrases.iter().map(move |p| LexiconEntry {
                    category: *cat,
                    phrase: p.to_string(),
                    value: *value,
                })
            })
            .collect();
        Self { entries }
    }
}

impl Lexicon {
    pub fn from_map(map: &[(PeuCategory, &[&str])]) -> Self {
        let entries = map
            .iter()
            .flat_map(|(cat, phrases)| {
                phrases.iter().map(move |p| LexiconEntry {
                    category: *cat,
                    phrase: p.to_string(),
                    value: 1,
                })
            })
            .collect();
        Self { entries }
    }

    pub fn phrases(&self, cat: PeuCategory, value: i8) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.category == cat && e.value == value)
            .map(|e| e.phrase.as_str())
            .collect()
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'\''
}

/// Byte offset of the first whole-phrase, ASCII case-insensitive match.
fn find_phrase(haystack_lower: &str, phrase_lower: &str) -> Option<usize> {
    if phrase_lower.is_empty() {
        return None;
    }
    let hay = haystack_lower.as_bytes();
    let mut from = 0;
    while let Some(pos) = haystack_lower[from..].find(phrase_lower) {
        let start = from + pos;
        let end = start + phrase_lower.len();
        let left_ok = start == 0 || !is_word_byte(hay[start - 1]);
        let right_ok = end == hay.len() || !is_word_byte(hay[end]);
        if left_ok && right_ok {
            return Some(start);
        }
        from = start + 1;
        while !haystack_lower.is_char_boundary(from) {
            from += 1;
        }
    }
    None
}

/// Sets a dim iff one of its phrases occurs in `text`. The coping dim takes
/// the value of the earliest matching coping phrase. Evidence spans are the
/// verbatim matched substrings.
pub fn keyword_extract(text: &str, lexicon: &Lexicon) -> PeuVector {
    let lower = text.to_ascii_lowercase();
    let mut hits: Vec<(usize, usize, &LexiconEntry)> = lexicon
        .entries
        .iter()
        .filter_map(|e| {
            let p = e.phrase.to_ascii_lowercase();
            find_phrase(&lower, &p).map(|start| (start, start + p.len(), e))
        })
        .collect();
    hits.sort_by_key(|&(start, _, e)| (e.category, start));
    let mut v = PeuVector::zero();
    for (start, end, e) in hits {
        let slot = &mut v.values[e.category.index()];
        if *slot == 0 {
            *slot = e.value;
        }
        v.evidence.push(Evidence {
            category: e.category,
            span: text[start..end].to_string(),
        });
    }
    v
}

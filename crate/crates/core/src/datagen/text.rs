use rand::seq::IndexedRandom;
use rand::Rng;

/// Phrase pools for one speaking style. No pool entry may contain a lexicon
/// phrase, so that extraction only ever sees the planted ones.
pub(crate) struct Style {
    questions: &'static [&'static str],
    openers: &'static [&'static str],
    tails: &'static [&'static str],
    subjects: &'static [&'static str],
    activities: &'static [&'static str],
    times: &'static [&'static str],
    remarks: &'static [&'static str],
}

pub(crate) const BASE: Style = Style {
    questions: &[
        "How have you been feeling lately?",
        "What has been on your mind this week?",
        "Can you tell me more about that?",
        "How are things at home?",
        "How has work been going?",
        "What do you usually do in the evenings?",
        "How do you get along with your family?",
        "What happened after that?",
        "Is there anything else you want to share?",
        "What was the last thing that made you laugh?",
        "Where did you grow up?",
        "How would a close friend describe you?",
    ],
    openers: &["", "Honestly, ", "Lately ", "To be honest, ", "Most days ", "Sometimes ", "These days "],
    tails: &[".", " and that is just how it is.", " most of the time.", ", if I'm honest.", " lately.", ", you know."],
    subjects: &["We", "My neighbour and I", "My cousin", "The kids", "A colleague", "My brother", "Our group"],
    activities: &[
        "watched a film",
        "cooked dinner together",
        "visited the market",
        "repaired the fence",
        "planted tomatoes",
        "walked the dog",
        "painted the kitchen",
        "drove to the coast",
        "played cards",
        "fixed the bike",
    ],
    times: &["last weekend", "on Saturday", "this morning", "yesterday", "a few days ago", "over the holidays"],
    remarks: &[
        "The bus was late again.",
        "Work has been busy.",
        "The weather turned cold.",
        "We moved the couch around.",
        "The garden needs water.",
        "Prices went up at the shop.",
        "I read a long article about trains.",
        "The neighbours got a new car.",
    ],
};

/// Wording of the augmented sessions: more formal prompts, stock phrasing.
pub(crate) const AUGMENTED: Style = Style {
    questions: &[
        "Could you describe your mood over the past two weeks?",
        "In what ways has your daily routine changed?",
        "Please walk me through a typical day.",
        "How would you rate your overall wellbeing?",
        "Could you elaborate on that experience?",
        "What thoughts come up when you are alone?",
    ],
    openers: &["In all honesty, ", "I would say ", "Overall, ", "Generally speaking, "],
    tails: &[".", " and it affects my daily life.", " on a regular basis."],
    subjects: &["My household", "My family"],
    activities: &["followed the usual schedule", "completed the weekly errands", "attended a community event"],
    times: &["recently", "during the past week"],
    remarks: &[
        "My schedule has remained fairly consistent.",
        "There have been no major changes at home.",
        "I have been keeping up with my responsibilities.",
    ],
};

/// Uppercases the first letter and the standalone pronoun "i".
pub(crate) fn sentence_case(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let bytes = s.as_bytes();
    for (k, ch) in s.char_indices() {
        let standalone = ch == 'i'
            && (k == 0 || !bytes[k - 1].is_ascii_alphanumeric())
            && bytes.get(k + 1).is_none_or(|b| !b.is_ascii_alphanumeric());
        if standalone || (k == 0 && ch.is_ascii_lowercase()) {
            out.push(ch.to_ascii_uppercase());
        } else {
            out.push(ch);
        }
    }
    out
}

impl Style {
    pub(crate) fn question<R: Rng>(&self, rng: &mut R) -> String {
        self.questions.choose(rng).unwrap().to_string()
    }

    pub(crate) fn filler<R: Rng>(&self, rng: &mut R) -> String {
        if rng.random_bool(0.5) {
            format!(
                "{} {} {}.",
                self.subjects.choose(rng).unwrap(),
                self.activities.choose(rng).unwrap(),
                self.times.choose(rng).unwrap()
            )
        } else {
            self.remarks.choose(rng).unwrap().to_string()
        }
    }

    /// A sentence voicing `phrase`, optionally after a neutral sentence.
    pub(crate) fn expression<R: Rng>(&self, phrase: &str, rng: &mut R) -> String {
        let opener = *self.openers.choose(rng).unwrap();
        let tail = *self.tails.choose(rng).unwrap();
        let sentence = sentence_case(&format!("{opener}{phrase}{tail}"));
        if rng.random_bool(0.3) {
            format!("{} {sentence}", self.filler(rng))
        } else {
            sentence
        }
    }

    pub(crate) fn neutral<R: Rng>(&self, rng: &mut R) -> String {
        if rng.random_bool(0.4) {
            format!("{} {}", self.filler(rng), self.filler(rng))
        } else {
            self.filler(rng)
        }
    }

    #[cfg(test)]
    pub(crate) fn all_fragments(&self) -> Vec<String> {
        let mut out: Vec<String> = [self.questions, self.openers, self.tails, self.remarks]
            .iter()
            .flat_map(|p| p.iter().map(|s| s.to_string()))
            .collect();
        for s in self.subjects {
            for a in self.activities {
                for t in self.times {
                    out.push(format!("{s} {a} {t}."));
                }
            }
        }
        out
    }
}

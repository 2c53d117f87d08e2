//! Interview sessions and their JSONL corpus format.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peu::{AnnotationRecord, PeuCategory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Base,
    Augmented,
}

/// One participant turn, with the interviewer prompt that preceded it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub i: usize,
    pub q: String,
    pub a: String,
}

impl Utterance {
    /// Text handed to the embedder.
    pub fn text(&self, with_question: bool) -> String {
        if with_question {
            format!("Q: {} A: {}", self.q, self.a)
        } else {
            self.a.clone()
        }
    }
}

/// Ground-truth antecedents of one expressed symptom.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalAnnotation {
    pub target: usize,
    pub category: PeuCategory,
    pub sources: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub persona: usize,
    pub label: u8,
    pub split: Split,
    pub source: Source,
    pub utterances: Vec<Utterance>,
    pub peus: Vec<AnnotationRecord>,
    #[serde(default)]
    pub causes: Vec<CausalAnnotation>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

pub fn parse_session(line: &str) -> Result<Session> {
    let s: Session = serde_json::from_str(line).map_err(|e| Error::Schema(e.to_string()))?;
    if s.label > 1 {
        return Err(Error::Schema(format!("session {}: label {} is not 0 or 1", s.id, s.label)));
    }
    for (k, u) in s.utterances.iter().enumerate() {
        if u.i != k {
            return Err(Error::Schema(format!("session {}: utterance {k} carries index {}", s.id, u.i)));
        }
    }
    for c in &s.causes {
        if c.target >= s.len() || c.sources.iter().any(|&src| src >= c.target) {
            return Err(Error::Schema(format!(
                "session {}: causal annotation for utterance {} points outside the preceding context",
                s.id, c.target
            )));
        }
    }
    Ok(s)
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_session(&line).map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

pub fn to_jsonl(sessions: &[Session]) -> Result<String> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    write_atomic(path, to_jsonl(sessions)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a","persona":1,"label":1,"split":"train","source":"base","utterances":[{"i":0,"q":"How are you?","a":"I lost my job."},{"i":1,"q":"And then?","a":"I can't sleep."}],"peus":[{"utt":0,"peus":[{"category":"stressors_interpersonal","value":1,"spans":["lost my job"]}]},{"utt":1,"peus":[{"category":"somatic_fatigue_sleep","value":1,"spans":["I can't sleep"]}]}],"causes":[{"target":1,"category":"somatic_fatigue_sleep","sources":[0]}]}"#;

    #[test]
    fn line_round_trips() {
        let s = parse_session(LINE).unwrap();
        assert_eq!(s.causes[0].category, PeuCategory::SomaticFatigueSleep);
        assert_eq!(to_jsonl(&[s]).unwrap().trim_end(), LINE);
    }

    #[test]
    fn question_prepending() {
        let s = parse_session(LINE).unwrap();
        assert_eq!(s.utterances[0].text(true), "Q: How are you? A: I lost my job.");
        assert_eq!(s.utterances[0].text(false), "I lost my job.");
    }

    #[test]
    fn rejects_bad_records() {
        assert!(matches!(parse_session(&LINE.replace("\"label\":1", "\"label\":3")), Err(Error::Schema(_))));
        assert!(matches!(parse_session(&LINE.replace("\"sources\":[0]", "\"sources\":[1]")), Err(Error::Schema(_))));
        assert!(matches!(
            parse_session(&LINE.replace("\"category\":\"somatic_fatigue_sleep\",\"sources\"", "\"category\":\"grief\",\"sources\"")),
            Err(Error::Schema(_))
        ));
        assert!(matches!(parse_session("{}"), Err(Error::Schema(_))));
    }

    #[test]
    fn atomic_write_then_read() {
        let dir = std::env::temp_dir().join(format!("psygat-session-{}", std::process::id()));
        let path = dir.join("c.jsonl");
        let s = parse_session(LINE).unwrap();
        write_sessions(&path, &[s.clone(), s.clone()]).unwrap();
        assert_eq!(read_sessions(&path).unwrap(), vec![s.clone(), s]);
        std::fs::remove_dir_all(dir).unwrap();
    }
}

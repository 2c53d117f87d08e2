//! Per-utterance semantic vectors: precomputed embedding files or a
//! deterministic feature-hashing fallback.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::session::Session;

pub const DEFAULT_DIM: usize = 384;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// The splitmix64 output function; also used to derive per-item seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Signed feature hashing of lowercase unigrams and bigrams, L2-normalized.
/// Text without tokens maps to the zero vector.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < 8 {
        return Err(Error::Config(format!("embedding dim {dim} is below the minimum of 8")));
    }
    let toks = tokens(text);
    let mut acc = vec![0.0f64; dim];
    let mut add = |feature: &str| {
        let h = splitmix64(fnv1a(seed, feature.as_bytes()));
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % dim as u64) as usize] += sign;
    };
    for t in &toks {
        add(&format!("u:{t}"));
    }
    for w in toks.windows(2) {
        add(&format!("b:{} {}", w[0], w[1]));
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Utterance vectors keyed by (session id, utterance index).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<(String, usize), Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, session: &str, utt: usize, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Format(format!(
                "vector for {session}/{utt} has length {}, table dim is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("vector for {session}/{utt} is not finite")));
        }
        self.vectors.insert((session.to_string(), utt), v);
        Ok(())
    }

    pub fn get(&self, session: &str, utt: usize) -> Result<&[f32]> {
        self.vectors
            .get(&(session.to_string(), utt))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no embedding for session {session} utterance {utt}")))
    }

    /// Fails on the first utterance of `sessions` without a vector.
    pub fn check_covers(&self, sessions: &[Session]) -> Result<()> {
        for s in sessions {
            for u in 0..s.len() {
                self.get(&s.id, u)?;
            }
        }
        Ok(())
    }

    pub fn hashed(sessions: &[Session], dim: usize, seed: u64, with_questions: bool) -> Result<Self> {
        let mut table = Self::new(dim);
        for s in sessions {
            for u in &s.utterances {
                table.insert(&s.id, u.i, hash_embed(&u.text(with_questions), dim, seed)?)?;
            }
        }
        Ok(table)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("embedding file is missing its `#dim=` header".into()))?;
        let dim: usize = header
            .trim()
            .strip_prefix("#dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad embedding header `{header}`")))?;
        let mut table = Self::new(dim);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 2;
            let mut fields = line.splitn(3, '\t');
            let (Some(id), Some(utt), Some(body)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Format(format!("line {lineno}: expected three tab-separated fields")));
            };
            let utt: usize = utt
                .parse()
                .map_err(|_| Error::Format(format!("line {lineno}: bad utterance index `{utt}`")))?;
            let v = body
                .split_whitespace()
                .map(str::parse::<f32>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
            if table.vectors.contains_key(&(id.to_string(), utt)) {
                return Err(Error::Format(format!("line {lineno}: duplicate key {id}/{utt}")));
            }
            table
                .insert(id, utt, v)
                .map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Rows sorted by key so output is deterministic.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.vectors.keys().collect();
        keys.sort();
        let mut out = format!("#dim={}\n", self.dim);
        for k in keys {
            let _ = write!(out, "{}\t{}\t", k.0, k.1);
            let v = &self.vectors[k];
            for (j, x) in v.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }
}

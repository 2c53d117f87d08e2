//! Two-file checkpoints: a JSON header with an ordered parameter index and a
//! raw little-endian f32 blob beside it.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use psygat::causal::{CausalConfig, CausalScorer};
use psygat::model::{ModelConfig, ModelParams, Param};
use psygat::session::write_atomic;
use psygat::train::{Checkpoint, TrainConfig};

use crate::error::CliResult;

pub const FORMAT: &str = "psygat-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in floats.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Body {
    Session {
        model: ModelConfig,
        train: TrainConfig,
        seed: u64,
        epoch: usize,
        best_val_pr_auc: f64,
        threshold: f64,
    },
    Scorer {
        causal: CausalConfig,
        window: usize,
        hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub body: Body,
    pub blob: String,
    pub blob_sha256: String,
    pub params: Vec<ParamEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

fn save(path: &Path, body: Body, params: &[Param<f32>]) -> CliResult<()> {
    let mut blob = Vec::new();
    let mut index = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in params {
        index.push(ParamEntry { name: p.name.clone(), shape: p.shape.clone(), offset });
        offset += p.data.len();
        for x in &p.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let bin = blob_path(path);
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        body,
        blob: bin.file_name().unwrap().to_string_lossy().into_owned(),
        blob_sha256: sha256_hex(&blob),
        params: index,
    };
    write_atomic(&bin, &blob)?;
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

fn load(path: &Path) -> CliResult<(Header, Vec<Param<f32>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let header: Header =
        serde_json::from_str(&text).with_context(|| format!("checkpoint header {} is malformed", path.display()))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(anyhow!("{} is not a version 1 {FORMAT} file", path.display()).into());
    }
    let bin = path.parent().unwrap_or(Path::new(".")).join(&header.blob);
    let blob = std::fs::read(&bin).with_context(|| format!("reading parameter blob {}", bin.display()))?;
    if sha256_hex(&blob) != header.blob_sha256 {
        return Err(anyhow!("parameter blob {} does not match its recorded hash", bin.display()).into());
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut params = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| anyhow!("parameter {} runs past the end of the blob", e.name))?;
        params.push(Param { name: e.name.clone(), shape: e.shape.clone(), data: data.to_vec() });
    }
    Ok((header, params))
}

pub fn save_session(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    let body = Body::Session {
        model: ck.params.config.clone(),
        train: ck.train.clone(),
        seed: ck.seed,
        epoch: ck.epoch,
        best_val_pr_auc: ck.best_val_pr_auc,
        threshold: ck.threshold,
    };
    save(path, body, &ck.params.params)
}

pub fn load_session(path: &Path) -> CliResult<Checkpoint> {
    let (header, params) = load(path)?;
    match header.body {
        Body::Session { model, train, seed, epoch, best_val_pr_auc, threshold } => Ok(Checkpoint {
            params: ModelParams::from_params(&model, params)?,
            train,
            seed,
            epoch,
            best_val_pr_auc,
            threshold,
        }),
        Body::Scorer { .. } => Err(anyhow!("{} holds a causal scorer, not a session model", path.display()).into()),
    }
}

pub fn save_scorer(path: &Path, scorer: &CausalScorer<f32>, causal: &CausalConfig) -> CliResult<()> {
    let body = Body::Scorer { causal: causal.clone(), window: scorer.window, hidden: scorer.hidden };
    save(path, body, &scorer.params)
}

pub fn load_scorer(path: &Path) -> CliResult<(CausalScorer<f32>, CausalConfig)> {
    let (header, params) = load(path)?;
    match header.body {
        Body::Scorer { causal, window, hidden } => {
            let scorer = CausalScorer { window, hidden, params };
            scorer.validate()?;
            Ok((scorer, causal))
        }
        Body::Session { .. } => Err(anyhow!("{} holds a session model, not a causal scorer", path.display()).into()),
    }
}

/// Ensemble index written next to the member checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub format: String,
    pub threshold: f64,
    /// Member header paths relative to this file.
    pub members: Vec<String>,
}

pub const ENSEMBLE_FORMAT: &str = "psygat-ensemble";

pub fn save_ensemble(path: &Path, threshold: f64, members: Vec<String>) -> CliResult<()> {
    let file = EnsembleFile { format: ENSEMBLE_FORMAT.into(), threshold, members };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

/// Loads either an ensemble index or a single member checkpoint; a single
/// member is its own ensemble with its own threshold.
pub fn load_members(path: &Path) -> CliResult<(Vec<Checkpoint>, f64)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(ENSEMBLE_FORMAT) => {
            let file: EnsembleFile = serde_json::from_value(value)?;
            if file.members.is_empty() {
                return Err(anyhow!("ensemble {} lists no members", path.display()).into());
            }
            let dir = path.parent().unwrap_or(Path::new("."));
            let members = file.members.iter().map(|m| load_session(&dir.join(m))).collect::<CliResult<Vec<_>>>()?;
            Ok((members, file.threshold))
        }
        Some(FORMAT) => {
            let ck = load_session(path)?;
            let t = ck.threshold;
            Ok((vec![ck], t))
        }
        _ => Err(anyhow!("{} is neither a checkpoint nor an ensemble index", path.display()).into()),
    }
}

/// Hash of a checkpoint header together with its blob.
pub fn fingerprint(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(path)?);
    if let Ok((header, _)) = load(path) {
        h.update(std::fs::read(path.parent().unwrap_or(Path::new(".")).join(header.blob))?);
    }
    Ok(hex::encode(h.finalize()))
}

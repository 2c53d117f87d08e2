//! Run configuration, read from a TOML file with one table per stage.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use psygat::causal::CausalConfig;
use psygat::datagen::GenConfig;
use psygat::embed::{EmbeddingTable, DEFAULT_DIM};
use psygat::graph::EdgeNorm;
use psygat::model::ModelConfig;
use psygat::session::Session;
use psygat::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    /// Prefix each answer with its interviewer prompt before embedding.
    pub with_questions: bool,
    pub edge_norm: EdgeNorm,
    /// Precomputed embeddings; hashed features are used when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            embedding_dim: DEFAULT_DIM,
            embedding_seed: 0,
            with_questions: true,
            edge_norm: EdgeNorm::Range,
            embeddings: None,
        }
    }
}

impl FeatureConfig {
    pub fn embed(&self, sessions: &[Session]) -> psygat::Result<EmbeddingTable> {
        match &self.embeddings {
            Some(path) => {
                let table = EmbeddingTable::load(path)?;
                table.check_covers(sessions)?;
                Ok(table)
            }
            None => EmbeddingTable::hashed(sessions, self.embedding_dim, self.embedding_seed, self.with_questions),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generate: GenConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub causal: CausalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::usage(anyhow!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(anyhow!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.generate.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.causal.validate()?;
        if self.features.embeddings.is_none() && self.features.embedding_dim != self.model.text_dim {
            return Err(CliError::usage(anyhow!(
                "features.embedding_dim = {} but model.text_dim = {}",
                self.features.embedding_dim,
                self.model.text_dim
            )));
        }
        Ok(())
    }
}

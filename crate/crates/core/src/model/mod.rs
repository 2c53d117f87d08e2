//! The PsyGAT network: dual input projections, edge-feature injection,
//! GATv2 layers with residuals, Set2Set readout, persona conditioning and an
//! MLP head.

mod forward;
mod params;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{forward_batch, predict, project_inputs, set2set_readout, BatchVars, ForwardOutput, Mode};
pub use params::{GatLayout, Layout, ModelParams, Param};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Set2Set,
    Mean,
}

/// Whether the persona embedding reaches the head. `Off` feeds a zero
/// vector of the same width so both modes share one head shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaMode {
    #[default]
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub persona_dim: usize,
    pub num_personas: usize,
    pub mlp_hidden: usize,
    pub set2set_iters: usize,
    pub readout: Readout,
    pub persona_mode: PersonaMode,
    pub dropout: f64,
    pub attention_dropout: bool,
    pub output_dropout: bool,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_dim: crate::embed::DEFAULT_DIM,
            hidden: 128,
            heads: 2,
            layers: 2,
            persona_dim: 16,
            num_personas: 4,
            mlp_hidden: 64,
            set2set_iters: 4,
            readout: Readout::Set2Set,
            persona_mode: PersonaMode::On,
            dropout: 0.2,
            attention_dropout: true,
            output_dropout: true,
            leaky_slope: 0.2,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn readout_dim(&self) -> usize {
        match self.readout {
            Readout::Set2Set => 2 * self.hidden,
            Readout::Mean => self.hidden,
        }
    }

    pub fn conditioned_dim(&self) -> usize {
        self.readout_dim() + self.persona_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text_dim", self.text_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("num_personas", self.num_personas),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.readout == Readout::Set2Set && self.set2set_iters == 0 {
            return Err(Error::Config("model.set2set_iters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        Ok(())
    }
}

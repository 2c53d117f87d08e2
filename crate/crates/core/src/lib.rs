//! Persona-conditioned graph attention over psychological expression units.
//!
//! Conversational sessions become directed temporal graphs whose nodes fuse
//! a semantic utterance embedding with an eight-dimensional psychological
//! expression vector, and whose edges carry the change in that vector between
//! consecutive turns. A two-layer GATv2 encoder with Set2Set readout and a
//! learned persona embedding classifies sessions; a post-hoc edge scorer then
//! ranks nearby utterances as likely antecedents of each expressed symptom.

pub mod autodiff;
pub mod causal;
pub mod datagen;
pub mod embed;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod peu;
pub mod session;
pub mod train;
pub mod verification;

pub use error::{Error, Result};

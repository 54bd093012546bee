//! Interaction-aware mixture of experts for multimodal prediction.
//!
//! Each of the `n + 2` interaction experts (one uniqueness expert per
//! modality, one synergy expert, one redundancy expert) is pushed toward its
//! interaction type by contrasting its clean output with outputs computed
//! after masking one modality embedding at a time. A reweighting network
//! mixes the experts per sample, which doubles as a local explanation.

pub mod diffcore;
pub mod rng;
pub mod error;
pub mod model;
pub mod interaction;
pub mod synthdata;
pub mod pidoracle;
pub mod trainer;
pub mod interpret;
pub mod cli;

pub use error::{Error, Result};

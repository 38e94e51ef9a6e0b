//! LLM-guided joint CTC/attention speech recognition on synthetic data.

pub mod asr;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod experiment;
pub mod guided;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod search;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{Token, Vocabulary, BLANK};

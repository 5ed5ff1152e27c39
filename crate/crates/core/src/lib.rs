//! Evaluation and meta-evaluation of LLM text generation.
//!
//! The crate is organised bottom-up: [`model`] holds the shared value
//! types, [`datasets`] loads samples, [`provider`] talks to LLM endpoints,
//! [`generation`] renders prompts and produces outputs, [`evaluators`]
//! scores them, [`analysis`] aggregates and meta-evaluates scores, and
//! [`orchestrator`] persists and schedules whole experiments. [`pipeline`]
//! ties them together behind the command functions used by the CLI.

pub mod analysis;
pub mod datasets;
pub mod error;
pub mod evaluators;
pub mod generation;
pub mod model;
pub mod orchestrator;
pub mod pipeline;
pub mod provider;

pub use error::{Error, Result};

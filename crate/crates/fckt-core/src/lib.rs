//! Joint aspect extraction and targeted sentiment classification with
//! fine-grained cross-task knowledge transfer.
//!
//! The pipeline encodes a sentence into contextual token embeddings, predicts
//! start/end boundary distributions over word positions, and classifies each
//! aspect span's sentiment. During training the sentiment classifier is fed a
//! seeded mixture of gold spans and the differentiable expectation of span
//! representations under the predicted boundary distributions, so sentiment
//! supervision reaches the extraction heads. A token-level contrastive loss
//! over boundary embeddings sharpens span quality.

pub mod boundary;
pub mod config;
pub mod contrast;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};

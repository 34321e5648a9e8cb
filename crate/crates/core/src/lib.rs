//! Metrics, corpus handling and batching for dimensional speech emotion
//! recognition (arousal, valence, dominance regression).
//!
//! This crate has no tensor dependencies; the neural pieces live in
//! `ser-model`.

pub mod corpus;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod plot;
pub mod types;

pub use error::{Error, Result};
pub use types::{Dimension, EmotionTriple, Partition};

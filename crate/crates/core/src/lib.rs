//! Federated recommendation with parameter-efficient item embeddings.
//!
//! The crate simulates a server and a population of clients in a single
//! process. Item embeddings are pre-trained on the server, refined for a few
//! warm-up rounds, then frozen while a compact adapter (low-rank, hashed, or
//! residual-quantized) is trained and exchanged instead. Every byte that a
//! client would upload is accounted for exactly.

pub mod backbones;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod embedding;
mod error;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod pretraining;
pub mod privacy;

pub use error::{Error, Result};

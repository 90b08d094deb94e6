//! Layer-dropout and early-exit training for decoder-only transformers, with
//! self-speculative decoding that reuses the early layers' cache.

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod schedules;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

//! Deterministic desk-scale simulator of cross-model federated knowledge
//! transfer between a server language model and client classifiers.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod filter;
pub mod gradcheck;
pub mod lm;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod training;
pub mod transfer;
pub mod vocab;

pub use error::{Error, Result};

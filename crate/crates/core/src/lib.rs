//! Influence-driven training-data mixture optimization: corpus handling,
//! probe construction, influence scoring, mixture weights, leave-one-out
//! ablations, data–model co-evolution and representation diagnostics,
//! exercised on a tiny language model.

pub mod coevolve;
pub mod corpus;
pub mod diagnostics;
mod error;
pub mod influence;
pub mod mixer;
pub mod pipeline;
pub mod probeset;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

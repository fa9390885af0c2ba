//! Benchmark harness for context-dependent image retrieval.

pub mod analysis;
pub mod dataset;
pub mod embed;
pub mod fixtures;
pub mod forge;
pub mod model;
pub mod prompt;
pub mod retrieval;
pub mod runner;

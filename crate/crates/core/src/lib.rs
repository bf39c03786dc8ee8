//! Invariant subgraph learning for graph classification under distribution
//! shift: a small reverse-mode autodiff engine, GIN encoders, an edge
//! selector trained against environment and label discriminators, synthetic
//! motif datasets, and evaluation diagnostics.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod gin;
pub mod graph;
pub mod jsonl;
pub mod metrics;
pub mod micro;
pub mod model;
pub mod motif;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod selector;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

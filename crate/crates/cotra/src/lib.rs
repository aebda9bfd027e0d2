//! An approximate nearest neighbor engine that runs one proximity graph
//! across a simulated cluster: graph construction and traversal, balanced
//! partitioning, a virtual-time network with one-sided reads and write
//! rings, collaborative cross-machine search, and shard/global baselines.

pub mod baselines;
pub mod bench;
pub mod engine;
pub mod error;
pub mod graph;
pub mod partition;
pub mod pgraph;
pub mod sim;
pub mod store;
pub mod vector;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

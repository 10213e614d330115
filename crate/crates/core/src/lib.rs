//! Trace-driven simulation of Mixture-of-Experts inference with predictive
//! expert prefetching and demand-proportional expert replication.
//!
//! The crate is organised along the inference data flow:
//!
//! - [`workload`] synthesises skewed routing traces and reads/writes them.
//! - [`router`] is a miniature top-1 MoE forward pass used as ground truth.
//! - [`predictor`] holds the SRU predictor, sparsemax and per-batch hash tables.
//! - [`planner`] caps replica demand to a per-layer slot capacity.
//! - [`placement`] loads, replicates and offloads experts for a batch.
//! - [`simulator`] turns placements into latency, throughput and utilization.
//! - [`pipeline`] overlaps hash building with inference through a bounded queue.
//! - [`report`] aggregates per-batch metrics into comparison tables.
//! - [`cli`] wires everything into the `moe-replica-sim` binary.

pub mod cli;
pub mod error;
pub mod pipeline;
pub mod placement;
pub mod planner;
pub mod predictor;
pub mod report;
pub mod router;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};

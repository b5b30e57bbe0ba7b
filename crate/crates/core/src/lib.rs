//! Distributed resource allocation over a graph with compressed neighbour
//! messages, plus the experiment harness that drives it.

pub mod compression;
pub mod graph;
pub mod problem;
pub mod engine;
pub mod experiments;

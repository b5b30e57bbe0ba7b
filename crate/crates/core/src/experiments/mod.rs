//! Configuration loading and the sweep harness that writes traces and index files.

mod config;
mod studies;

use thiserror::Error;

pub use config::{
    build_graph, build_problem, load_config, AlgorithmConfig, CompressorConfig, ExperimentConfig,
    GraphConfig, Instance, ProblemConfig, ScheduleConfig, Study, SweepConfig, TopologyKind,
    DEFAULT_ITERATIONS, DEFAULT_OUTPUT_DIR, DEFAULT_SEED, SWEEPABLE,
};
pub use studies::{
    check_invariants, run_single, run_study, study_communication_cost, study_constraint_violation,
    study_quantization_interval, study_scaling_factor, study_transmitted_bits, verify_index,
    write_atomic, SingleRun, SummaryRow, SweepEntry, SweepResult, CONSERVATION_TOLERANCE,
    INDEX_FILE, RESIDUAL_TARGET_FACTOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}\n  near: {context}")]
    Parse { line: usize, column: usize, message: String, context: String },
    #[error("unknown key at line {line}, column {column}: {message}\n  near: {context}")]
    UnknownKey { line: usize, column: usize, message: String, context: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("cannot read configuration: {0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("engine error: {0}")]
    Engine(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("I/O error: {0}")]
    Io(String),
}

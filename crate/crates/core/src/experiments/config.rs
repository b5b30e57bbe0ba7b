//! JSON experiment configuration: raw parsing, default substitution, checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ConfigError;
use crate::compression::{ChannelCodec, CompressorSpec, ScalingSchedule, MAX_Q2_BITS};
use crate::engine::{AlgorithmParams, Constants, Mode, Simulation};
use crate::graph::{build_weight_matrix, Topology, WeightMatrix, WeightScheme};
use crate::problem::{
    build_multi_commodity_instance, DispatchRow, ProblemSpec, DEFAULT_TOTAL_DEMAND, TABLE2_ROWS,
};

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_OUTPUT_DIR: &str = "out";

/// Parameters a sweep may vary.
pub const SWEEPABLE: [&str; 9] =
    ["xi", "h0", "r_min", "delta_p", "bits", "clamp_range", "gamma", "tau", "psi"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    ScalingFactor,
    QuantizationInterval,
    CommunicationCost,
    TransmittedBits,
    ConstraintViolation,
}

impl Study {
    /// Parameter swept by default; the constraint study iterates over quantizers instead.
    pub fn default_parameter(self) -> Option<&'static str> {
        match self {
            Study::ScalingFactor => Some("xi"),
            Study::QuantizationInterval | Study::CommunicationCost => Some("delta_p"),
            Study::TransmittedBits => Some("bits"),
            Study::ConstraintViolation => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Study::ScalingFactor => "scaling_factor",
            Study::QuantizationInterval => "quantization_interval",
            Study::CommunicationCost => "communication_cost",
            Study::TransmittedBits => "transmitted_bits",
            Study::ConstraintViolation => "constraint_violation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Complete,
    Path,
    Star,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Demand {
    Scalar(f64),
    PerCommodity(Vec<f64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: Option<RawProblem>,
    graph: Option<RawGraph>,
    algorithm: Option<RawAlgorithm>,
    compressor: Option<RawCompressor>,
    schedule: Option<RawSchedule>,
    sweep: Option<RawSweep>,
    seeds: Option<Vec<u64>>,
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    rows: Option<Vec<DispatchRow>>,
    total_demand: Option<Demand>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    topology: Option<TopologyKind>,
    m: Option<usize>,
    edges: Option<Vec<(usize, usize)>>,
    weights: Option<WeightScheme>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithm {
    gamma: Option<f64>,
    tau: Option<f64>,
    psi: Option<f64>,
    alpha: Option<f64>,
    iterations: Option<usize>,
    mode: Option<Mode>,
    skip_validation: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompressor {
    kind: Option<String>,
    delta_p: Option<u32>,
    bits: Option<u32>,
    clamp_range: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    h0: Option<f64>,
    xi: Option<f64>,
    r_min: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    study: Study,
    parameter: Option<String>,
    values: Option<Vec<f64>>,
    target_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemConfig {
    pub rows: Vec<DispatchRow>,
    /// One total per commodity.
    pub total_demand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphConfig {
    pub topology: TopologyKind,
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
    pub weights: WeightScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmConfig {
    pub gamma: f64,
    pub tau: f64,
    pub psi: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub mode: Mode,
    pub skip_validation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressorConfig {
    #[serde(flatten)]
    pub spec: CompressorSpec,
    pub clamp_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleConfig {
    pub h0: f64,
    pub xi: f64,
    pub r_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub study: Study,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    pub values: Vec<f64>,
    /// Absolute residual target; defaults to `1e-3 (1 + ||z*||)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_residual: Option<f64>,
}

/// Fully resolved configuration. Serializing it and loading the result
/// reproduces the same value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub graph: GraphConfig,
    pub algorithm: AlgorithmConfig,
    pub compressor: CompressorConfig,
    pub schedule: ScheduleConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// Objects built from a configuration.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: ProblemSpec,
    pub topology: Topology,
    pub weights: WeightMatrix,
    pub params: AlgorithmParams,
    pub codec: ChannelCodec,
    pub skip_validation: bool,
}

impl Instance {
    pub fn simulation(&self) -> Simulation<'_> {
        Simulation::new(&self.spec, &self.topology, &self.weights, self.params, self.codec)
            .expect("instance parts are built from one configuration")
            .skip_validation(self.skip_validation)
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue(msg.into())
}

fn map_json_error(err: serde_json::Error, text: &str) -> ConfigError {
    let line = err.line();
    let column = err.column();
    let context = text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim().to_string();
    let message = err.to_string();
    if message.contains("unknown field") {
        ConfigError::UnknownKey { line, column, message, context }
    } else if err.classify() == serde_json::error::Category::Data {
        ConfigError::InvalidValue(format!("line {line}, column {column}: {message} (near `{context}`)"))
    } else {
        ConfigError::Parse { line, column, message, context }
    }
}

fn compressor_from_raw(raw: RawCompressor) -> Result<CompressorConfig, ConfigError> {
    let kind = raw.kind.as_deref().unwrap_or("identity");
    let spec = match kind {
        "identity" => {
            if raw.delta_p.is_some() || raw.bits.is_some() {
                return Err(invalid("identity compressor takes no delta_p or bits"));
            }
            CompressorSpec::Identity
        }
        "q1" | "q1_probabilistic" | "q3" | "q3_truncation" => {
            if raw.bits.is_some() {
                return Err(invalid(format!("compressor {kind} takes delta_p, not bits")));
            }
            let delta_p = raw.delta_p.unwrap_or(1);
            if kind.starts_with("q1") {
                CompressorSpec::Q1 { delta_p }
            } else {
                CompressorSpec::Q3 { delta_p }
            }
        }
        "q2" | "q2_norm_bbit" => {
            if raw.delta_p.is_some() {
                return Err(invalid("compressor q2 takes bits, not delta_p"));
            }
            CompressorSpec::Q2 { bits: raw.bits.unwrap_or(2) }
        }
        other => return Err(invalid(format!("unknown compressor kind {other:?}"))),
    };
    spec.validate().map_err(|e| invalid(e.to_string()))?;
    let clamp_range = raw.clamp_range.unwrap_or(ChannelCodec::DEFAULT_CLAMP_RANGE);
    if !(clamp_range > 0.0 && clamp_range.is_finite()) {
        return Err(invalid(format!("clamp_range must be positive, got {clamp_range}")));
    }
    Ok(CompressorConfig { spec, clamp_range })
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| map_json_error(e, text))?;
        Self::resolve(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    fn resolve(raw: RawConfig) -> Result<Self, ConfigError> {
        let rp = raw.problem.unwrap_or_default();
        let rows = rp.rows.unwrap_or_else(|| TABLE2_ROWS.to_vec());
        let total_demand = match rp.total_demand {
            None => vec![DEFAULT_TOTAL_DEMAND],
            Some(Demand::Scalar(d)) => vec![d],
            Some(Demand::PerCommodity(v)) => v,
        };
        let problem = ProblemConfig { rows, total_demand };

        let rg = raw.graph.unwrap_or_default();
        let topology = rg.topology.unwrap_or(if rg.edges.is_some() {
            TopologyKind::Edges
        } else {
            TopologyKind::Ring
        });
        if topology != TopologyKind::Edges && rg.edges.is_some() {
            return Err(invalid("graph.edges is only allowed with topology \"edges\""));
        }
        if topology == TopologyKind::Edges && rg.edges.is_none() {
            return Err(invalid("topology \"edges\" needs graph.edges"));
        }
        let graph = GraphConfig {
            topology,
            m: rg.m.unwrap_or(problem.rows.len()),
            edges: rg.edges,
            weights: rg.weights.unwrap_or_default(),
        };

        let rs = raw.schedule.unwrap_or_default();
        let defaults = ScalingSchedule::default();
        let schedule = ScheduleConfig {
            h0: rs.h0.unwrap_or(defaults.h0()),
            xi: rs.xi.unwrap_or(defaults.xi()),
            r_min: rs.r_min.unwrap_or(defaults.r_min()),
        };

        let compressor = compressor_from_raw(raw.compressor.unwrap_or_default())?;

        let sweep = match raw.sweep {
            None => None,
            Some(s) => Some(SweepConfig {
                study: s.study,
                parameter: s.parameter,
                values: s.values.unwrap_or_default(),
                target_residual: s.target_residual,
            }),
        };

        // Step-size defaults depend on the built problem and graph.
        let spec = build_problem(&problem)?;
        let (_, weights) = build_graph(&graph)?;
        if spec.agent_count() != graph.m {
            return Err(invalid(format!(
                "graph has m = {} agents but the problem has {} rows",
                graph.m,
                spec.agent_count()
            )));
        }
        let constants = Constants::of(&spec, &weights);
        let ra = raw.algorithm.unwrap_or_default();
        let tau = ra.tau.unwrap_or(1.5 * constants.tau_threshold);
        let gamma = ra.gamma.unwrap_or_else(|| {
            0.9 * constants.theorem1_gamma_bounds(tau).into_iter().fold(f64::INFINITY, f64::min)
        });
        let algorithm = AlgorithmConfig {
            gamma,
            tau,
            psi: ra.psi.unwrap_or((0.9 / (3.0 * tau)).min(1.0)),
            alpha: ra.alpha.unwrap_or(0.5),
            iterations: ra.iterations.unwrap_or(DEFAULT_ITERATIONS),
            mode: ra.mode.unwrap_or_default(),
            skip_validation: ra.skip_validation.unwrap_or(false),
        };

        let config = ExperimentConfig {
            problem,
            graph,
            algorithm,
            compressor,
            schedule,
            sweep,
            seeds: raw.seeds.unwrap_or_else(|| vec![DEFAULT_SEED]),
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
        };
        config.check()?;
        Ok(config)
    }

    /// Range checks on every resolved field.
    pub fn check(&self) -> Result<(), ConfigError> {
        let a = &self.algorithm;
        self.schedule()?;
        self.params()?;
        if a.iterations == 0 {
            return Err(invalid("algorithm.iterations must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        self.compressor.spec.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(sweep) = &self.sweep {
            if let Some(p) = &sweep.parameter {
                if !SWEEPABLE.contains(&p.as_str()) {
                    return Err(invalid(format!(
                        "sweep parameter {p:?} is not one of {}",
                        SWEEPABLE.join(", ")
                    )));
                }
                if sweep.study.default_parameter().is_some_and(|d| d != p) {
                    return Err(invalid(format!(
                        "study {} sweeps {}, not {p}",
                        sweep.study.name(),
                        sweep.study.default_parameter().unwrap_or("")
                    )));
                }
            }
            if sweep.study.default_parameter().is_some() && sweep.values.is_empty() {
                return Err(invalid(format!("study {} needs sweep.values", sweep.study.name())));
            }
            if let Some(t) = sweep.target_residual {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(invalid(format!("target_residual must be positive, got {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScalingSchedule, ConfigError> {
        let s = &self.schedule;
        ScalingSchedule::new(s.h0, s.xi, s.r_min).map_err(|e| invalid(format!("schedule: {e}")))
    }

    pub fn params(&self) -> Result<AlgorithmParams, ConfigError> {
        let a = &self.algorithm;
        AlgorithmParams::new(a.gamma, a.tau, a.psi, a.alpha, self.schedule()?, a.mode)
            .map_err(|e| invalid(format!("algorithm: {e}")))
    }

    pub fn codec(&self) -> Result<ChannelCodec, ConfigError> {
        ChannelCodec::new(self.compressor.spec, self.compressor.clamp_range)
            .map_err(|e| invalid(e.to_string()))
    }

    pub fn build(&self) -> Result<Instance, ConfigError> {
        let spec = build_problem(&self.problem)?;
        let (topology, weights) = build_graph(&self.graph)?;
        Ok(Instance {
            spec,
            topology,
            weights,
            params: self.params()?,
            codec: self.codec()?,
            skip_validation: self.algorithm.skip_validation,
        })
    }

    /// Copy with one sweepable parameter replaced.
    pub fn with_parameter(&self, name: &str, value: f64) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        let as_u32 = |v: f64| -> Result<u32, ConfigError> {
            if v.fract() == 0.0 && v >= 1.0 && v <= f64::from(u32::MAX) {
                Ok(v as u32)
            } else {
                Err(invalid(format!("{name} must be a positive integer, got {value}")))
            }
        };
        match name {
            "xi" => c.schedule.xi = value,
            "h0" => c.schedule.h0 = value,
            "r_min" => c.schedule.r_min = value,
            "clamp_range" => c.compressor.clamp_range = value,
            "gamma" => c.algorithm.gamma = value,
            "tau" => c.algorithm.tau = value,
            "psi" => c.algorithm.psi = value,
            "delta_p" => {
                let delta_p = as_u32(value)?;
                c.compressor.spec = match c.compressor.spec {
                    CompressorSpec::Q1 { .. } => CompressorSpec::Q1 { delta_p },
                    CompressorSpec::Q3 { .. } => CompressorSpec::Q3 { delta_p },
                    other => {
                        return Err(invalid(format!("delta_p does not apply to {}", other.name())))
                    }
                }
            }
            "bits" => {
                let bits = as_u32(value)?;
                if bits > MAX_Q2_BITS {
                    return Err(invalid(format!("bits must be at most {MAX_Q2_BITS}")));
                }
                c.compressor.spec = match c.compressor.spec {
                    CompressorSpec::Q2 { .. } => CompressorSpec::Q2 { bits },
                    other => return Err(invalid(format!("bits does not apply to {}", other.name()))),
                }
            }
            other => return Err(invalid(format!("unknown sweep parameter {other:?}"))),
        }
        c.check()?;
        Ok(c)
    }
}

pub fn build_problem(p: &ProblemConfig) -> Result<ProblemSpec, ConfigError> {
    build_multi_commodity_instance(&p.rows, &p.total_demand).map_err(|e| invalid(format!("problem: {e}")))
}

pub fn build_graph(g: &GraphConfig) -> Result<(Topology, WeightMatrix), ConfigError> {
    let topology = match g.topology {
        TopologyKind::Ring => Topology::ring(g.m),
        TopologyKind::Complete => Topology::complete(g.m),
        TopologyKind::Path => Topology::path(g.m),
        TopologyKind::Star => Topology::star(g.m),
        TopologyKind::Edges => Topology::from_edges(g.m, g.edges.clone().unwrap_or_default()),
    }
    .map_err(|e| invalid(format!("graph: {e}")))?;
    let weights = build_weight_matrix(&topology, g.weights).map_err(|e| invalid(format!("graph: {e}")))?;
    Ok((topology, weights))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json_str(&text)
}

//! Synchronous multi-agent iteration with compressed neighbour exchange.
//!
//! One round, per agent `i`:
//!
//! 1. `x+ = x - psi sum_j w_ij (xh_i - xh_j) + tau (y - A z)` with the cached broadcasts;
//! 2. encode `xh+ = h + r Q((x+ - h) / r)` and broadcast it;
//! 3. `y+ = y - (psi / tau) sum_j w_ij (xh+_i - xh+_j)`;
//! 4. `h+ = (1 - alpha) h + alpha xh+`, mirrored by every receiver;
//! 5. `z+ = z - gamma grad f(z) + gamma A^T (2 x+ - x)`.

mod params;
mod state;
mod trace;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compression::{
    reference_update, ChannelCodec, CompressedMessage, CompressionError, CompressorSpec,
};
use crate::graph::{Topology, WeightMatrix};
use crate::problem::{
    constraint_violation, kkt_oracle, LocalCost, ProblemError, ProblemSpec, QuadraticCost,
};

pub use params::{
    q2_variance_constant, validate_params, AlgorithmParams, BoundCheck, Constants, Mode,
    ParamReport, Relation, Theorem,
};
pub use state::{fixed_point_residual, init_state, optimal_state, AgentState};
pub use trace::{parse_trace_csv, IterationRecord, Trace, TraceParseError, CSV_HEADER};

/// Any iterate whose norm exceeds this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub k: u64,
    pub reason: String,
    /// Records up to, not including, the offending round.
    pub trace: Trace,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameters fail the convergence hypotheses:\n{0}")]
    Validation(Box<ParamReport>),
    #[error("diverged at round {}: {}", .0.k, .0.reason)]
    Divergence(Box<Divergence>),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
}

/// Everything a run needs except the seed.
#[derive(Debug, Clone)]
pub struct Simulation<'a, C: LocalCost = QuadraticCost> {
    spec: &'a ProblemSpec<C>,
    topology: &'a Topology,
    weights: &'a WeightMatrix,
    params: AlgorithmParams,
    codec: ChannelCodec,
    skip_validation: bool,
}

impl<'a, C: LocalCost> Simulation<'a, C> {
    /// In baseline mode the codec is replaced by the identity.
    pub fn new(
        spec: &'a ProblemSpec<C>,
        topology: &'a Topology,
        weights: &'a WeightMatrix,
        params: AlgorithmParams,
        codec: ChannelCodec,
    ) -> Result<Self, EngineError> {
        let m = spec.agent_count();
        if topology.agent_count() != m || weights.agent_count() != m {
            return Err(EngineError::Config(format!(
                "agent counts disagree: problem {m}, graph {}, weights {}",
                topology.agent_count(),
                weights.agent_count()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && weights.weight(i, j) != 0.0 && !topology.has_edge(i, j) {
                    return Err(EngineError::Config(format!(
                        "weight ({i},{j}) is nonzero but agents {i} and {j} are not neighbours"
                    )));
                }
            }
        }
        let codec = match params.mode() {
            Mode::BaselineDuspa => ChannelCodec::identity(),
            Mode::Compressed => codec,
        };
        Ok(Simulation { spec, topology, weights, params, codec, skip_validation: false })
    }

    pub fn skip_validation(mut self, skip: bool) -> Self {
        self.skip_validation = skip;
        self
    }

    pub fn params(&self) -> &AlgorithmParams {
        &self.params
    }

    pub fn codec(&self) -> &ChannelCodec {
        &self.codec
    }

    pub fn validate(&self) -> ParamReport {
        validate_params(self.spec, self.weights, &self.params, self.codec.spec())
    }

    /// Bits on the wire per round: every agent sends one message to each neighbour.
    pub fn bits_per_round(&self) -> u64 {
        2 * self.topology.edge_count() as u64 * self.codec.bits_per_message(self.spec.constraint_dim())
    }

    /// Engine at the standard initial state.
    pub fn engine(&self, z_star: Vec<DVector<f64>>, seed: u64) -> Result<Engine<'_, 'a, C>, EngineError> {
        let states = init_state(self.spec, self.topology)?;
        self.engine_from(states, z_star, seed)
    }

    /// Engine at an arbitrary state.
    pub fn engine_from(
        &self,
        states: Vec<AgentState>,
        z_star: Vec<DVector<f64>>,
        seed: u64,
    ) -> Result<Engine<'_, 'a, C>, EngineError> {
        let m = self.spec.agent_count();
        if states.len() != m || z_star.len() != m {
            return Err(EngineError::Config(format!(
                "expected {m} agent states and optima, got {} and {}",
                states.len(),
                z_star.len()
            )));
        }
        let rngs = (0..m)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        Ok(Engine {
            sim: self,
            z_star,
            states,
            rngs,
            k: 0,
            bits_cumulative: 0,
            bits_per_round: self.bits_per_round(),
        })
    }

    fn default_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "params": self.params,
            "compressor": self.codec.spec(),
            "clamp_range": self.codec.clamp_range(),
        })
    }

    /// Runs `iterations` rounds against a known optimum.
    pub fn run_with_optimum(
        &self,
        z_star: Vec<DVector<f64>>,
        iterations: usize,
        seed: u64,
    ) -> Result<Trace, EngineError> {
        if !self.skip_validation {
            let report = self.validate();
            if !report.all_passed() {
                return Err(EngineError::Validation(Box::new(report)));
            }
        }
        let mut engine = self.engine(z_star, seed)?;
        let mut trace = Trace { records: Vec::with_capacity(iterations), config_echo: self.default_echo(), seed };
        for _ in 0..iterations {
            match engine.step() {
                Ok(record) => trace.records.push(record),
                Err(EngineError::Divergence(mut d)) => {
                    d.trace = trace;
                    return Err(EngineError::Divergence(d));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(trace)
    }
}

impl Simulation<'_, QuadraticCost> {
    /// Runs `iterations` rounds, measuring residuals against the exact optimum.
    pub fn run(&self, iterations: usize, seed: u64) -> Result<Trace, EngineError> {
        let solution = kkt_oracle(self.spec)?;
        self.run_with_optimum(solution.z_star, iterations, seed)
    }
}

/// Live state of one run.
pub struct Engine<'s, 'a, C: LocalCost = QuadraticCost> {
    sim: &'s Simulation<'a, C>,
    z_star: Vec<DVector<f64>>,
    states: Vec<AgentState>,
    rngs: Vec<ChaCha8Rng>,
    k: u64,
    bits_cumulative: u64,
    bits_per_round: u64,
}

impl<C: LocalCost> Engine<'_, '_, C> {
    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    /// Rounds completed so far.
    pub fn round(&self) -> u64 {
        self.k
    }

    pub fn bits_cumulative(&self) -> u64 {
        self.bits_cumulative
    }

    /// Executes one round and returns its metrics.
    pub fn step(&mut self) -> Result<IterationRecord, EngineError> {
        let sim = self.sim;
        let spec = sim.spec;
        let w = sim.weights.entries();
        let p = &sim.params;
        let (gamma, tau, psi, alpha) = (p.gamma(), p.tau(), p.psi(), p.alpha());
        let r = p.schedule().factor(self.k + 1);
        let m = self.states.len();

        // Phase A: local x-update and encoding.
        let mut x_next = Vec::with_capacity(m);
        let mut messages: Vec<CompressedMessage> = Vec::with_capacity(m);
        let mut saturations = 0u64;
        for (i, s) in self.states.iter_mut().enumerate() {
            let mut mix = DVector::zeros(s.x.len());
            for (&j, xh_j) in &s.x_hat_neighbors {
                mix += (&s.x_hat_self - xh_j) * w[(i, j)];
            }
            let a = spec.coupling(i);
            let xi = &s.x - mix * psi + (&s.y - a * &s.z) * tau;
            let (x_hat, msg) = sim.codec.encode(&xi, &s.h, r, &mut self.rngs[i])?;
            saturations += msg.saturations as u64;
            s.x_hat_self = x_hat;
            x_next.push(xi);
            messages.push(msg);
        }

        // Exchange: every receiver decodes against its mirror of the sender's reference.
        for (i, msg) in messages.iter().enumerate() {
            for j in sim.topology.neighbors(i) {
                let receiver = &mut self.states[j];
                let decoded = sim.codec.decode(&receiver.neighbor_refs[&i], r, msg);
                receiver.x_hat_neighbors.insert(i, decoded);
                self.bits_cumulative += msg.bits;
            }
        }

        // Phase B: y, h and z updates.
        for (i, s) in self.states.iter_mut().enumerate() {
            let mut mix = DVector::zeros(s.x.len());
            for (&j, xh_j) in &s.x_hat_neighbors {
                mix += (&s.x_hat_self - xh_j) * w[(i, j)];
            }
            s.y -= mix * (psi / tau);

            s.h = reference_update(&s.h, &s.x_hat_self, alpha)?;
            for (j, href) in s.neighbor_refs.iter_mut() {
                *href = reference_update(href, &s.x_hat_neighbors[j], alpha)?;
            }

            let a = spec.coupling(i);
            let extrapolated = &x_next[i] * 2.0 - &s.x;
            let grad = spec.cost(i).gradient(&s.z);
            s.z = &s.z - grad * gamma + a.transpose() * extrapolated * gamma;
            s.x = std::mem::replace(&mut x_next[i], DVector::zeros(0));
        }

        let k = self.k;
        self.k += 1;
        self.check_divergence(k)?;
        Ok(self.record(k, saturations))
    }

    fn check_divergence(&self, k: u64) -> Result<(), EngineError> {
        for (i, s) in self.states.iter().enumerate() {
            for (name, v) in [("x", &s.x), ("y", &s.y), ("z", &s.z)] {
                let norm = v.norm();
                if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
                    return Err(EngineError::Divergence(Box::new(Divergence {
                        k,
                        reason: format!("||{name}_{i}|| = {norm:e}"),
                        trace: Trace {
                            records: Vec::new(),
                            config_echo: serde_json::Value::Null,
                            seed: 0,
                        },
                    })));
                }
            }
        }
        Ok(())
    }

    fn record(&self, k: u64, saturations: u64) -> IterationRecord {
        let spec = self.sim.spec;
        let z: Vec<DVector<f64>> = self.states.iter().map(|s| s.z.clone()).collect();
        let x: Vec<DVector<f64>> = self.states.iter().map(|s| s.x.clone()).collect();
        let residual = z
            .iter()
            .zip(&self.z_star)
            .map(|(zi, zs)| (zi - zs).norm_squared())
            .sum::<f64>()
            .sqrt();
        let mut y_sum = -spec.total_demand();
        for s in &self.states {
            y_sum += &s.y;
        }
        IterationRecord {
            k,
            residual,
            constraint_violation: constraint_violation(&z, spec).unwrap_or(f64::NAN),
            dual_disagreement: state::stacked_norm(&state::laplacian_apply(self.sim.weights, &x)),
            bits_cumulative: self.bits_cumulative,
            fixed_point_residual: fixed_point_residual(&self.states, spec, self.sim.weights),
            saturations,
            conservation_error: y_sum.norm(),
        }
    }

    /// Per-round bits; constant for a fixed compressor and topology.
    pub fn bits_per_round(&self) -> u64 {
        self.bits_per_round
    }
}

/// Compressor kind shorthand used in reports and file names.
pub fn compressor_label(spec: CompressorSpec) -> String {
    match spec {
        CompressorSpec::Identity => "identity".into(),
        CompressorSpec::Q1 { delta_p } => format!("q1_dp{delta_p}"),
        CompressorSpec::Q2 { bits } => format!("q2_b{bits}"),
        CompressorSpec::Q3 { delta_p } => format!("q3_dp{delta_p}"),
    }
}

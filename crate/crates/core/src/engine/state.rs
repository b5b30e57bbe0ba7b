use std::collections::BTreeMap;

use nalgebra::DVector;

use super::EngineError;
use crate::graph::{Topology, WeightMatrix};
use crate::problem::{LocalCost, OptimalSolution, ProblemSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// Local copy of the constraint multiplier.
    pub x: DVector<f64>,
    /// Local share of the resource.
    pub y: DVector<f64>,
    /// Primal decision.
    pub z: DVector<f64>,
    /// Compression reference.
    pub h: DVector<f64>,
    /// Own last broadcast.
    pub x_hat_self: DVector<f64>,
    /// Last broadcast received from each neighbour.
    pub x_hat_neighbors: BTreeMap<usize, DVector<f64>>,
    /// Receiver-side mirror of each neighbour's reference `h`.
    pub neighbor_refs: BTreeMap<usize, DVector<f64>>,
}

impl AgentState {
    /// Reconstruction error `x_hat - x` of the agent's own broadcast.
    pub fn compression_error(&self) -> DVector<f64> {
        &self.x_hat_self - &self.x
    }
}

fn check_agents<C: LocalCost>(spec: &ProblemSpec<C>, topology: &Topology) -> Result<(), EngineError> {
    if spec.agent_count() != topology.agent_count() {
        return Err(EngineError::Config(format!(
            "problem has {} agents but the graph has {}",
            spec.agent_count(),
            topology.agent_count()
        )));
    }
    Ok(())
}

/// `y_i = d_i`; every other iterate, reference and cache starts at zero.
pub fn init_state<C: LocalCost>(
    spec: &ProblemSpec<C>,
    topology: &Topology,
) -> Result<Vec<AgentState>, EngineError> {
    check_agents(spec, topology)?;
    let n = spec.constraint_dim();
    let d = spec.primal_dim();
    let zero_n = DVector::zeros(n);
    Ok((0..spec.agent_count())
        .map(|i| {
            let cache: BTreeMap<usize, DVector<f64>> =
                topology.neighbors(i).into_iter().map(|j| (j, zero_n.clone())).collect();
            AgentState {
                x: zero_n.clone(),
                y: spec.demand(i).clone(),
                z: DVector::zeros(d),
                h: zero_n.clone(),
                x_hat_self: zero_n.clone(),
                x_hat_neighbors: cache.clone(),
                neighbor_refs: cache,
            }
        })
        .collect())
}

/// `x = h = x_hat = lambda*`, `y_i = A_i z_i*`, `z = z*`, caches filled consistently.
pub fn optimal_state<C: LocalCost>(
    spec: &ProblemSpec<C>,
    topology: &Topology,
    solution: &OptimalSolution,
) -> Result<Vec<AgentState>, EngineError> {
    check_agents(spec, topology)?;
    let lambda = &solution.lambda_star;
    Ok((0..spec.agent_count())
        .map(|i| {
            let cache: BTreeMap<usize, DVector<f64>> =
                topology.neighbors(i).into_iter().map(|j| (j, lambda.clone())).collect();
            AgentState {
                x: lambda.clone(),
                y: spec.coupling(i) * &solution.z_star[i],
                z: solution.z_star[i].clone(),
                h: lambda.clone(),
                x_hat_self: lambda.clone(),
                x_hat_neighbors: cache.clone(),
                neighbor_refs: cache,
            }
        })
        .collect())
}

/// `((I - W) v)_i` for per-agent vectors `v`.
pub(crate) fn laplacian_apply(weights: &WeightMatrix, v: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let w = weights.entries();
    (0..v.len())
        .map(|i| {
            let mut acc = &v[i] * (1.0 - w[(i, i)]);
            for (j, vj) in v.iter().enumerate() {
                if j != i && w[(i, j)] != 0.0 {
                    acc -= vj * w[(i, j)];
                }
            }
            acc
        })
        .collect()
}

pub(crate) fn stacked_norm<'a>(parts: impl IntoIterator<Item = &'a DVector<f64>>) -> f64 {
    parts.into_iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
}

/// `||grad f(z) - A^T x|| + ||(I - W) x|| + ||y - A z||`, zero exactly at a
/// fixed point of the iteration.
pub fn fixed_point_residual<C: LocalCost>(
    states: &[AgentState],
    spec: &ProblemSpec<C>,
    weights: &WeightMatrix,
) -> f64 {
    let mut stationarity = 0.0;
    let mut balance = 0.0;
    for (i, s) in states.iter().enumerate() {
        let a = spec.coupling(i);
        stationarity += (spec.cost(i).gradient(&s.z) - a.transpose() * &s.x).norm_squared();
        balance += (&s.y - a * &s.z).norm_squared();
    }
    let xs: Vec<DVector<f64>> = states.iter().map(|s| s.x.clone()).collect();
    let consensus = stacked_norm(&laplacian_apply(weights, &xs));
    stationarity.sqrt() + consensus + balance.sqrt()
}

#![allow(dead_code)]

use ccdo::graph::{build_weight_matrix, Topology, WeightMatrix, WeightScheme};
use ccdo::problem::{build_dispatch_instance, ProblemSpec, TABLE2_ROWS};
use nalgebra::DMatrix;

pub fn table2() -> (ProblemSpec, Topology, WeightMatrix) {
    let spec = build_dispatch_instance(&TABLE2_ROWS, 300.0).unwrap();
    let topo = Topology::ring(5).unwrap();
    let w = build_weight_matrix(&topo, WeightScheme::LazyMetropolis).unwrap();
    (spec, topo, w)
}

/// Uncompressed primal-dual loop transcribed agent by agent, without the engine:
/// `x+_i = sum_j w_ij x_j + tau (y_i - z_i)`,
/// `y+_i = y_i - (1/tau) sum_j w_ij (x+_i - x+_j)`,
/// `z+_i = z_i - gamma grad f_i(z_i) + gamma (2 x+_i - x_i)`.
pub fn duspa_reference(
    spec: &ProblemSpec,
    w: &DMatrix<f64>,
    gamma: f64,
    tau: f64,
    steps: usize,
) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let m = spec.agent_count();
    let mut x = vec![0.0; m];
    let mut y: Vec<f64> = (0..m).map(|i| spec.demand(i)[0]).collect();
    let mut z = vec![0.0; m];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x_next: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| w[(i, j)] * x[j]).sum::<f64>() + tau * (y[i] - z[i]))
            .collect();
        let y_next: Vec<f64> = (0..m)
            .map(|i| {
                let mix: f64 = (0..m).map(|j| w[(i, j)] * (x_next[i] - x_next[j])).sum();
                y[i] - mix / tau
            })
            .collect();
        let z_next: Vec<f64> = (0..m)
            .map(|i| {
                let row = &TABLE2_ROWS[i];
                let grad = 2.0 * row.a * z[i] + row.beta;
                z[i] - gamma * grad + gamma * (2.0 * x_next[i] - x[i])
            })
            .collect();
        x = x_next;
        y = y_next;
        z = z_next;
        out.push((x.clone(), y.clone(), z.clone()));
    }
    out
}

//! Communication topologies and mixing matrices.
//!
//! A [`WeightMatrix`] can only be obtained through validation, so every
//! instance handed to the engine is symmetric, positive definite, doubly
//! stochastic, and has `eta = rho(W - 11^T/m) < 1`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the symmetry and row-sum checks.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("topology is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("weight matrix rejected: {0}")]
    WeightsRejected(ValidationReport),
}

/// Undirected communication graph on `m` agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    /// Builds a topology from an edge list. Pairs are stored unordered; duplicates
    /// collapse. Self-loops and out-of-range agents are rejected, as are
    /// disconnected graphs.
    pub fn from_edges(
        m: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if m == 0 {
            return Err(GraphError::InvalidTopology("agent count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(GraphError::InvalidTopology(format!("self-loop on agent {i}")));
            }
            if i >= m || j >= m {
                return Err(GraphError::InvalidTopology(format!(
                    "edge ({i},{j}) references an agent outside 0..{m}"
                )));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let topology = Topology { m, edges: set };
        let components = topology.component_count();
        if components != 1 {
            return Err(GraphError::Disconnected { components });
        }
        Ok(topology)
    }

    /// Cycle graph. `m = 2` degenerates to a single edge.
    pub fn ring(m: usize) -> Result<Self, GraphError> {
        if m < 2 {
            return Err(GraphError::InvalidTopology(format!("ring needs m >= 2, got {m}")));
        }
        Self::from_edges(m, (0..m).map(|i| (i, (i + 1) % m)))
    }

    pub fn complete(m: usize) -> Result<Self, GraphError> {
        Self::from_edges(m, (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))))
    }

    pub fn path(m: usize) -> Result<Self, GraphError> {
        Self::from_edges(m, (1..m).map(|i| (i - 1, i)))
    }

    /// Star centred on agent 0.
    pub fn star(m: usize) -> Result<Self, GraphError> {
        Self::from_edges(m, (1..m).map(|i| (0, i)))
    }

    /// Random connected graph: a random spanning tree plus each remaining pair
    /// with probability `extra_edge_prob`.
    pub fn random_connected<R: Rng + ?Sized>(
        m: usize,
        extra_edge_prob: f64,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 1..m {
            edges.push((rng.random_range(0..i), i));
        }
        for i in 0..m {
            for j in i + 1..m {
                if rng.random::<f64>() < extra_edge_prob {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(m, edges)
    }

    pub fn agent_count(&self) -> usize {
        self.m
    }

    /// Unordered edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&j| j != i && self.has_edge(i, j)).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    fn component_count(&self) -> usize {
        let mut seen = vec![false; self.m];
        let mut components = 0;
        for start in 0..self.m {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                for j in self.neighbors(i) {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        components
    }
}

/// How edge weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `(I + M) / 2` with `M` the Metropolis-Hastings matrix.
    #[default]
    LazyMetropolis,
    /// Plain Metropolis-Hastings: `w_ij = 1 / (1 + max(d_i, d_j))`.
    Metropolis,
    /// Max-degree weights `w_ij = 1 / (1 + d_max)` on every edge.
    Uniform,
}

/// One pass/fail entry of a [`ValidationReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Clause {
    pub passed: bool,
    pub measured: f64,
}

impl Clause {
    fn new(passed: bool, measured: f64) -> Self {
        Clause { passed, measured }
    }
}

/// Clause-by-clause check of a candidate mixing matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub square: bool,
    /// Measured: `max |W - W^T|`.
    pub symmetry: Clause,
    /// Measured: smallest eigenvalue of the symmetric part of `W`.
    pub positive_definite: Clause,
    /// Measured: `max |W1 - 1|`.
    pub stochastic: Clause,
    /// Measured: `eta = rho(W - 11^T/m)`.
    pub connectivity: Clause,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.square
            && self.symmetry.passed
            && self.positive_definite.passed
            && self.stochastic.passed
            && self.connectivity.passed
    }

    pub fn lambda_min(&self) -> f64 {
        self.positive_definite.measured
    }

    pub fn eta(&self) -> f64 {
        self.connectivity.measured
    }

    pub fn row_sum_error(&self) -> f64 {
        self.stochastic.measured
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.square {
            return write!(f, "matrix is not square");
        }
        let mark = |c: &Clause| if c.passed { "pass" } else { "FAIL" };
        write!(
            f,
            "symmetry {} ({:.3e}), positive-definiteness {} (lambda_min {:.6}), \
             stochasticity {} ({:.3e}), connectivity {} (eta {:.6})",
            mark(&self.symmetry),
            self.symmetry.measured,
            mark(&self.positive_definite),
            self.positive_definite.measured,
            mark(&self.stochastic),
            self.stochastic.measured,
            mark(&self.connectivity),
            self.connectivity.measured,
        )
    }
}

/// Checks every mixing-matrix clause and reports the measured quantities.
pub fn validate_weights(w: &DMatrix<f64>) -> ValidationReport {
    let fail = Clause::new(false, f64::NAN);
    if !w.is_square() || w.nrows() == 0 {
        return ValidationReport {
            square: false,
            symmetry: fail,
            positive_definite: fail,
            stochastic: fail,
            connectivity: fail,
        };
    }
    let m = w.nrows();
    let asymmetry = (w - w.transpose()).amax();
    let symmetric_part = (w + w.transpose()) * 0.5;
    let lambda_min = SymmetricEigen::new(symmetric_part)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let row_sum_error = w
        .row_iter()
        .map(|row| (row.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let centred = w - DMatrix::from_element(m, m, 1.0 / m as f64);
    let eta = if asymmetry <= WEIGHT_TOLERANCE {
        let sym = (&centred + centred.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.amax()
    } else {
        centred
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    };

    ValidationReport {
        square: true,
        symmetry: Clause::new(asymmetry <= WEIGHT_TOLERANCE, asymmetry),
        positive_definite: Clause::new(lambda_min > 0.0, lambda_min),
        stochastic: Clause::new(row_sum_error <= WEIGHT_TOLERANCE, row_sum_error),
        connectivity: Clause::new(eta < 1.0, eta),
    }
}

/// Validated mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eta: f64,
    lambda_min: f64,
}

impl WeightMatrix {
    /// Accepts `entries` if every clause passes and the sparsity pattern
    /// matches `topology`.
    pub fn from_matrix(entries: DMatrix<f64>, topology: &Topology) -> Result<Self, GraphError> {
        let report = validate_weights(&entries);
        if !report.all_passed() {
            return Err(GraphError::WeightsRejected(report));
        }
        let m = entries.nrows();
        if m != topology.agent_count() {
            return Err(GraphError::InvalidTopology(format!(
                "weight matrix is {m}x{m} but topology has {} agents",
                topology.agent_count()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let expected = i == j || topology.has_edge(i, j);
                if (entries[(i, j)] > 0.0) != expected {
                    return Err(GraphError::InvalidTopology(format!(
                        "w[{i},{j}] = {} does not match the topology",
                        entries[(i, j)]
                    )));
                }
            }
        }
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(entries.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigenvalues.sort_by(f64::total_cmp);
        Ok(WeightMatrix {
            entries,
            eigenvalues,
            eta: report.eta(),
            lambda_min: report.lambda_min(),
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn agent_count(&self) -> usize {
        self.entries.nrows()
    }

    /// Spectral radius of `W - 11^T/m`.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// Eigenvalues of `W` in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Spectral norm `||I - W||`. All eigenvalues lie in `(0, 1]`, so this is
    /// `1 - lambda_min`.
    pub fn laplacian_norm(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| (1.0 - l).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major CSV with full float precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.entries.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Builds the mixing matrix for `topology` under `scheme` and validates it.
pub fn build_weight_matrix(
    topology: &Topology,
    scheme: WeightScheme,
) -> Result<WeightMatrix, GraphError> {
    let m = topology.agent_count();
    let degrees: Vec<usize> = (0..m).map(|i| topology.degree(i)).collect();
    let max_degree = degrees.iter().copied().max().unwrap_or(0);
    let mut w = DMatrix::zeros(m, m);
    for (i, j) in topology.edges() {
        let weight = match scheme {
            WeightScheme::LazyMetropolis | WeightScheme::Metropolis => {
                1.0 / (1 + degrees[i].max(degrees[j])) as f64
            }
            WeightScheme::Uniform => 1.0 / (1 + max_degree) as f64,
        };
        w[(i, j)] = weight;
        w[(j, i)] = weight;
    }
    for i in 0..m {
        let off_diagonal: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off_diagonal;
    }
    if scheme == WeightScheme::LazyMetropolis {
        w = (DMatrix::identity(m, m) + w) * 0.5;
    }
    WeightMatrix::from_matrix(w, topology)
}

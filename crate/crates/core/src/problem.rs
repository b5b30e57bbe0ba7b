//! Coupled-constraint problem data and the exact KKT optimum.
//!
//! Agents minimise `sum_i f_i(z_i)` subject to `sum_i A_i z_i = sum_i d_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Condition-number estimate above which the KKT system is treated as singular.
pub const KKT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid cost: {0}")]
    InvalidCost(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate problem: KKT system condition estimate {condition:.3e}")]
    Degenerate { condition: f64 },
}

/// A local objective the engine can run on: it only needs gradients and the
/// smoothness / strong-convexity constants.
pub trait LocalCost {
    fn dim(&self) -> usize;
    fn value(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Lipschitz constant of the gradient.
    fn smoothness(&self) -> f64;
    fn strong_convexity(&self) -> f64;
}

/// `f(z) = a z^T z + beta^T z + c` with `a > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    a: f64,
    beta: DVector<f64>,
    c: f64,
}

impl QuadraticCost {
    pub fn new(a: f64, beta: DVector<f64>, c: f64) -> Result<Self, ProblemError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(ProblemError::InvalidCost(format!(
                "quadratic coefficient must be positive and finite, got {a}"
            )));
        }
        if !c.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            return Err(ProblemError::InvalidCost("non-finite coefficient".into()));
        }
        Ok(QuadraticCost { a, beta, c })
    }

    /// One-dimensional cost `a z^2 + beta z + c`.
    pub fn scalar(a: f64, beta: f64, c: f64) -> Result<Self, ProblemError> {
        Self::new(a, DVector::from_element(1, beta), c)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

impl LocalCost for QuadraticCost {
    fn dim(&self) -> usize {
        self.beta.len()
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.a * z.dot(z) + self.beta.dot(z) + self.c
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        z * (2.0 * self.a) + &self.beta
    }

    fn smoothness(&self) -> f64 {
        2.0 * self.a
    }

    fn strong_convexity(&self) -> f64 {
        2.0 * self.a
    }
}

/// One generator row of a dispatch table: cost `a z^2 + beta z + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchRow {
    pub a: f64,
    pub beta: f64,
    #[serde(default)]
    pub c: f64,
}

/// The five-generator table used by the built-in experiments.
pub const TABLE2_ROWS: [DispatchRow; 5] = [
    DispatchRow { a: 0.04, beta: 2.0, c: 0.0 },
    DispatchRow { a: 0.03, beta: 3.0, c: 0.0 },
    DispatchRow { a: 0.035, beta: 4.0, c: 0.0 },
    DispatchRow { a: 0.03, beta: 4.0, c: 0.0 },
    DispatchRow { a: 0.04, beta: 2.5, c: 0.0 },
];

/// Default total load (MW) for the dispatch experiments.
pub const DEFAULT_TOTAL_DEMAND: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec<C = QuadraticCost> {
    costs: Vec<C>,
    coupling: Vec<DMatrix<f64>>,
    demand: Vec<DVector<f64>>,
    primal_dim: usize,
    constraint_dim: usize,
    smoothness: f64,
    strong_convexity: f64,
}

impl<C: LocalCost> ProblemSpec<C> {
    pub fn new(
        costs: Vec<C>,
        coupling: Vec<DMatrix<f64>>,
        demand: Vec<DVector<f64>>,
    ) -> Result<Self, ProblemError> {
        let m = costs.len();
        if m == 0 {
            return Err(ProblemError::Shape("at least one agent is required".into()));
        }
        if coupling.len() != m || demand.len() != m {
            return Err(ProblemError::Shape(format!(
                "{m} costs but {} coupling matrices and {} demand vectors",
                coupling.len(),
                demand.len()
            )));
        }
        let (n, d) = coupling[0].shape();
        if n > d {
            return Err(ProblemError::Shape(format!(
                "coupling matrices must satisfy n <= d, got {n}x{d}"
            )));
        }
        for i in 0..m {
            if coupling[i].shape() != (n, d) {
                return Err(ProblemError::Shape(format!(
                    "coupling matrix {i} is {:?}, expected {n}x{d}",
                    coupling[i].shape()
                )));
            }
            if costs[i].dim() != d {
                return Err(ProblemError::Shape(format!(
                    "cost {i} has dimension {}, expected {d}",
                    costs[i].dim()
                )));
            }
            if demand[i].len() != n {
                return Err(ProblemError::Shape(format!(
                    "demand {i} has length {}, expected {n}",
                    demand[i].len()
                )));
            }
        }
        let smoothness = costs.iter().map(C::smoothness).fold(f64::MIN, f64::max);
        let strong_convexity = costs.iter().map(C::strong_convexity).fold(f64::MAX, f64::min);
        if strong_convexity.is_nan() || strong_convexity <= 0.0 || smoothness < strong_convexity {
            return Err(ProblemError::InvalidCost(format!(
                "need L_f >= l_f > 0, got L_f = {smoothness}, l_f = {strong_convexity}"
            )));
        }
        Ok(ProblemSpec {
            costs,
            coupling,
            demand,
            primal_dim: d,
            constraint_dim: n,
            smoothness,
            strong_convexity,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.costs.len()
    }

    /// `d`: length of each agent's decision vector.
    pub fn primal_dim(&self) -> usize {
        self.primal_dim
    }

    /// `n`: number of coupled constraints.
    pub fn constraint_dim(&self) -> usize {
        self.constraint_dim
    }

    pub fn costs(&self) -> &[C] {
        &self.costs
    }

    pub fn cost(&self, i: usize) -> &C {
        &self.costs[i]
    }

    pub fn coupling(&self, i: usize) -> &DMatrix<f64> {
        &self.coupling[i]
    }

    pub fn demand(&self, i: usize) -> &DVector<f64> {
        &self.demand[i]
    }

    pub fn total_demand(&self) -> DVector<f64> {
        self.demand
            .iter()
            .fold(DVector::zeros(self.constraint_dim), |acc, d| acc + d)
    }

    /// `L_f = max_i L_i`.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// `l_f = min_i l_i`.
    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    /// `lambda_max(A^T A)` for the block-diagonal stacked coupling matrix.
    pub fn coupling_gram_norm(&self) -> f64 {
        self.coupling
            .iter()
            .map(|a| {
                nalgebra::SymmetricEigen::new(a.transpose() * a)
                    .eigenvalues
                    .max()
            })
            .fold(0.0, f64::max)
    }

    pub fn objective(&self, z: &[DVector<f64>]) -> f64 {
        self.costs.iter().zip(z).map(|(c, zi)| c.value(zi)).sum()
    }

    /// `true` when `d = n = 1` and every `A_i = [1]`.
    pub fn is_scalar_dispatch(&self) -> bool {
        self.primal_dim == 1
            && self.constraint_dim == 1
            && self.coupling.iter().all(|a| a[(0, 0)] == 1.0)
    }
}

/// `d = n = 1`, `A_i = [1]`, demand split evenly across agents.
pub fn build_dispatch_instance(
    rows: &[DispatchRow],
    total_demand: f64,
) -> Result<ProblemSpec, ProblemError> {
    build_multi_commodity_instance(rows, &[total_demand])
}

/// `d = n = demands.len()`, `A_i = I`. Each row's `beta` applies to every
/// commodity, and each commodity's total load is split evenly across agents.
pub fn build_multi_commodity_instance(
    rows: &[DispatchRow],
    demands: &[f64],
) -> Result<ProblemSpec, ProblemError> {
    if rows.is_empty() {
        return Err(ProblemError::Shape("dispatch table is empty".into()));
    }
    if demands.is_empty() {
        return Err(ProblemError::Shape("at least one demand is required".into()));
    }
    if let Some(bad) = demands.iter().find(|d| !d.is_finite()) {
        return Err(ProblemError::Shape(format!("total demand must be finite, got {bad}")));
    }
    let n = demands.len();
    let m = rows.len() as f64;
    let costs = rows
        .iter()
        .map(|r| QuadraticCost::new(r.a, DVector::from_element(n, r.beta), r.c))
        .collect::<Result<Vec<_>, _>>()?;
    let coupling = vec![DMatrix::identity(n, n); rows.len()];
    let share = DVector::from_iterator(n, demands.iter().map(|d| d / m));
    let demand = vec![share; rows.len()];
    ProblemSpec::new(costs, coupling, demand)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub z_star: Vec<DVector<f64>>,
    /// Constraint multipliers; the consensus value of the dual iterates.
    pub lambda_star: DVector<f64>,
    pub objective: f64,
}

impl OptimalSolution {
    /// Euclidean norm of the stacked optimum.
    pub fn z_norm(&self) -> f64 {
        self.z_star.iter().map(|z| z.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Exact optimum of a quadratic coupled-constraint problem.
///
/// The scalar dispatch case uses the equal-marginal-cost closed form; anything
/// else solves the full KKT system by LU with partial pivoting.
pub fn kkt_oracle(spec: &ProblemSpec<QuadraticCost>) -> Result<OptimalSolution, ProblemError> {
    let (z_star, lambda_star) = if spec.is_scalar_dispatch() {
        scalar_dispatch_optimum(spec)
    } else {
        solve_kkt_system(spec)?
    };
    let objective = spec.objective(&z_star);
    Ok(OptimalSolution { z_star, lambda_star, objective })
}

fn scalar_dispatch_optimum(spec: &ProblemSpec) -> (Vec<DVector<f64>>, DVector<f64>) {
    let demand = spec.total_demand()[0];
    let (num, den) = spec.costs().iter().fold((demand, 0.0), |(num, den), c| {
        let inv = 1.0 / (2.0 * c.a());
        (num + c.beta()[0] * inv, den + inv)
    });
    let lambda = num / den;
    let z_star = spec
        .costs()
        .iter()
        .map(|c| DVector::from_element(1, (lambda - c.beta()[0]) / (2.0 * c.a())))
        .collect();
    (z_star, DVector::from_element(1, lambda))
}

fn solve_kkt_system(
    spec: &ProblemSpec,
) -> Result<(Vec<DVector<f64>>, DVector<f64>), ProblemError> {
    let m = spec.agent_count();
    let d = spec.primal_dim();
    let n = spec.constraint_dim();
    let size = m * d + n;
    let mut kkt = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    for i in 0..m {
        let cost = spec.cost(i);
        let a = spec.coupling(i);
        let base = i * d;
        for r in 0..d {
            kkt[(base + r, base + r)] = 2.0 * cost.a();
            rhs[base + r] = -cost.beta()[r];
            for c in 0..n {
                // stationarity: 2a z_i + beta_i - A_i^T lambda = 0
                kkt[(base + r, m * d + c)] = -a[(c, r)];
                // feasibility: sum_i A_i z_i = sum_i d_i
                kkt[(m * d + c, base + r)] = a[(c, r)];
            }
        }
    }
    rhs.rows_mut(m * d, n).copy_from(&spec.total_demand());

    let singular = kkt.singular_values();
    let smax = singular.max();
    let smin = singular.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition.is_nan() || condition > KKT_CONDITION_LIMIT {
        return Err(ProblemError::Degenerate { condition });
    }
    let solution = kkt
        .lu()
        .solve(&rhs)
        .ok_or(ProblemError::Degenerate { condition: f64::INFINITY })?;
    let z_star = (0..m)
        .map(|i| solution.rows(i * d, d).into_owned())
        .collect();
    Ok((z_star, solution.rows(m * d, n).into_owned()))
}

/// `||sum_i A_i z_i - sum_i d_i||_2`.
pub fn constraint_violation<C: LocalCost>(
    z: &[DVector<f64>],
    spec: &ProblemSpec<C>,
) -> Result<f64, ProblemError> {
    if z.len() != spec.agent_count() {
        return Err(ProblemError::Shape(format!(
            "{} agent decisions for {} agents",
            z.len(),
            spec.agent_count()
        )));
    }
    let mut imbalance = -spec.total_demand();
    for (i, zi) in z.iter().enumerate() {
        if zi.len() != spec.primal_dim() {
            return Err(ProblemError::Shape(format!(
                "decision {i} has length {}, expected {}",
                zi.len(),
                spec.primal_dim()
            )));
        }
        imbalance += spec.coupling(i) * zi;
    }
    Ok(imbalance.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn central_difference(cost: &QuadraticCost, z: f64) -> f64 {
        let eps = 1e-6;
        (cost.value(&scalar(z + eps)) - cost.value(&scalar(z - eps))) / (2.0 * eps)
    }

    #[test]
    fn cost_values() {
        let pure = QuadraticCost::scalar(1.0, 0.0, 0.0).unwrap();
        assert_eq!(pure.value(&scalar(2.0)), 4.0);
        let bus1 = QuadraticCost::scalar(0.04, 2.0, 0.0).unwrap();
        assert!((bus1.value(&scalar(10.0)) - 24.0).abs() < 1e-12);
        let offset = QuadraticCost::scalar(1.0, 1.0, 5.0).unwrap();
        assert_eq!(offset.value(&scalar(0.0)), 5.0);
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        let bus1 = QuadraticCost::scalar(0.04, 2.0, 0.0).unwrap();
        assert_eq!(bus1.gradient(&scalar(0.0))[0], 2.0);
        // frozen from the central-difference oracle
        assert!((central_difference(&bus1, 25.0) - 4.0).abs() < 1e-6);
        assert!((bus1.gradient(&scalar(25.0))[0] - 4.0).abs() < 1e-12);

        let bus2 = QuadraticCost::scalar(0.03, 3.0, 0.0).unwrap();
        assert!((central_difference(&bus2, -10.0) - 2.4).abs() < 1e-6);
        assert!((bus2.gradient(&scalar(-10.0))[0] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_curvature() {
        assert!(matches!(
            QuadraticCost::scalar(0.0, 1.0, 0.0),
            Err(ProblemError::InvalidCost(_))
        ));
        let rows = [DispatchRow { a: -1.0, beta: 0.0, c: 0.0 }];
        assert!(matches!(
            build_dispatch_instance(&rows, 1.0),
            Err(ProblemError::InvalidCost(_))
        ));
    }

    #[test]
    fn table2_constants() {
        let spec = build_dispatch_instance(&TABLE2_ROWS, 300.0).unwrap();
        assert_eq!(spec.agent_count(), 5);
        assert!((spec.smoothness() - 0.08).abs() < 1e-15);
        assert!((spec.strong_convexity() - 0.06).abs() < 1e-15);
        assert!((spec.total_demand()[0] - 300.0).abs() < 1e-12);
        assert_eq!(spec.coupling_gram_norm(), 1.0);
    }

    #[test]
    fn oracle_small_cases() {
        let one = build_dispatch_instance(&[DispatchRow { a: 1.0, beta: 0.0, c: 0.0 }], 7.0)
            .unwrap();
        let sol = kkt_oracle(&one).unwrap();
        assert!((sol.z_star[0][0] - 7.0).abs() < 1e-12);
        assert!((sol.lambda_star[0] - 14.0).abs() < 1e-12);

        let pair = build_dispatch_instance(&[DispatchRow { a: 1.0, beta: 0.0, c: 0.0 }; 2], 2.0)
            .unwrap();
        let sol = kkt_oracle(&pair).unwrap();
        assert!((sol.z_star[0][0] - 1.0).abs() < 1e-12);
        assert!((sol.z_star[1][0] - 1.0).abs() < 1e-12);
        assert!((sol.lambda_star[0] - 2.0).abs() < 1e-12);
    }

    /// Projected gradient descent onto `sum z = D`, independent of the closed form.
    fn projected_gradient(rows: &[DispatchRow], demand: f64) -> Vec<f64> {
        let m = rows.len() as f64;
        let lmax = rows.iter().map(|r| 2.0 * r.a).fold(0.0, f64::max);
        let step = 1.0 / lmax;
        let mut z = vec![demand / m; rows.len()];
        for _ in 0..200_000 {
            let g: Vec<f64> = rows.iter().zip(&z).map(|(r, zi)| 2.0 * r.a * zi + r.beta).collect();
            let mut next: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - step * gi).collect();
            let shift = (next.iter().sum::<f64>() - demand) / m;
            next.iter_mut().for_each(|v| *v -= shift);
            z = next;
        }
        z
    }

    #[test]
    fn oracle_table2_matches_projected_gradient() {
        let spec = build_dispatch_instance(&TABLE2_ROWS, 300.0).unwrap();
        let sol = kkt_oracle(&spec).unwrap();
        // lambda* ~ 7.2992 from the projected-gradient oracle
        assert!((sol.lambda_star[0] - 7.2992).abs() < 1e-4);
        let reference = projected_gradient(&TABLE2_ROWS, 300.0);
        for (z, r) in sol.z_star.iter().zip(&reference) {
            assert!((z[0] - r).abs() < 1e-8, "{} vs {}", z[0], r);
        }
        for (row, z) in TABLE2_ROWS.iter().zip(&sol.z_star) {
            let marginal = 2.0 * row.a * z[0] + row.beta;
            assert!((marginal - sol.lambda_star[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn general_solver_agrees_with_closed_form() {
        let spec = build_dispatch_instance(&TABLE2_ROWS, 300.0).unwrap();
        let closed = kkt_oracle(&spec).unwrap();
        let (z, lambda) = solve_kkt_system(&spec).unwrap();
        assert!((lambda[0] - closed.lambda_star[0]).abs() < 1e-10);
        for (a, b) in z.iter().zip(&closed.z_star) {
            assert!((a[0] - b[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_commodity_separates_per_commodity() {
        let spec = build_multi_commodity_instance(&TABLE2_ROWS, &[300.0, 150.0]).unwrap();
        assert_eq!(spec.constraint_dim(), 2);
        let sol = kkt_oracle(&spec).unwrap();
        let first = kkt_oracle(&build_dispatch_instance(&TABLE2_ROWS, 300.0).unwrap()).unwrap();
        let second = kkt_oracle(&build_dispatch_instance(&TABLE2_ROWS, 150.0).unwrap()).unwrap();
        assert!((sol.lambda_star[0] - first.lambda_star[0]).abs() < 1e-9);
        assert!((sol.lambda_star[1] - second.lambda_star[0]).abs() < 1e-9);
        assert!(constraint_violation(&sol.z_star, &spec).unwrap() < 1e-9);
    }

    #[test]
    fn degenerate_coupling_is_reported() {
        // both agents couple only through the first coordinate; the second row of A is zero
        let costs = vec![
            QuadraticCost::new(1.0, DVector::zeros(2), 0.0).unwrap(),
            QuadraticCost::new(1.0, DVector::zeros(2), 0.0).unwrap(),
        ];
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let spec = ProblemSpec::new(
            costs,
            vec![a.clone(), a],
            vec![DVector::from_element(2, 1.0); 2],
        )
        .unwrap();
        assert!(matches!(kkt_oracle(&spec), Err(ProblemError::Degenerate { .. })));
    }

    #[test]
    fn violation_cases() {
        let spec = build_dispatch_instance(&TABLE2_ROWS, 300.0).unwrap();
        let sol = kkt_oracle(&spec).unwrap();
        assert!(constraint_violation(&sol.z_star, &spec).unwrap() < 1e-9);

        let zeros = vec![scalar(0.0); 5];
        assert!((constraint_violation(&zeros, &spec).unwrap() - 300.0).abs() < 1e-12);

        let mut shifted = sol.z_star.clone();
        shifted[0][0] += 1.0;
        shifted[1][0] -= 1.0;
        assert!(constraint_violation(&shifted, &spec).unwrap() < 1e-9);

        assert!(matches!(
            constraint_violation(&zeros[..3], &spec),
            Err(ProblemError::Shape(_))
        ));
    }

    #[test]
    fn shape_checks() {
        let costs = vec![QuadraticCost::scalar(1.0, 0.0, 0.0).unwrap()];
        let wide = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(
            ProblemSpec::new(costs, vec![wide], vec![DVector::zeros(2)]),
            Err(ProblemError::Shape(_))
        ));
    }
}

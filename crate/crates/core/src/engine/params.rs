use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::compression::{CompressorSpec, ScalingSchedule};
use crate::graph::WeightMatrix;
use crate::problem::{LocalCost, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Uncompressed primal-dual iteration; exchanges exact `x` with `psi = 1`.
    BaselineDuspa,
    #[default]
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlgorithmParams {
    gamma: f64,
    tau: f64,
    psi: f64,
    alpha: f64,
    schedule: ScalingSchedule,
    mode: Mode,
}

fn positive(name: &str, v: f64) -> Result<(), EngineError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(EngineError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl AlgorithmParams {
    pub fn new(
        gamma: f64,
        tau: f64,
        psi: f64,
        alpha: f64,
        schedule: ScalingSchedule,
        mode: Mode,
    ) -> Result<Self, EngineError> {
        positive("gamma", gamma)?;
        positive("tau", tau)?;
        positive("psi", psi)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(EngineError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(AlgorithmParams { gamma, tau, psi, alpha, schedule, mode })
    }

    /// Defaults that satisfy the linear-rate hypotheses with margin:
    /// `tau` at 1.5x its threshold, `gamma` at 0.9x the smallest step bound,
    /// `psi = min(1, 0.9 / (3 tau))`, `alpha = 0.5`.
    pub fn defaults<C: LocalCost>(
        spec: &ProblemSpec<C>,
        weights: &WeightMatrix,
        schedule: ScalingSchedule,
        mode: Mode,
    ) -> Self {
        let c = Constants::of(spec, weights);
        let tau = 1.5 * c.tau_threshold;
        let gamma = 0.9 * c.theorem1_gamma_bounds(tau).into_iter().fold(f64::INFINITY, f64::min);
        let psi = (0.9 / (3.0 * tau)).min(1.0);
        AlgorithmParams { gamma, tau, psi, alpha: 0.5, schedule, mode }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Mixing gain actually applied; the baseline always uses 1.
    pub fn psi(&self) -> f64 {
        match self.mode {
            Mode::BaselineDuspa => 1.0,
            Mode::Compressed => self.psi,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn schedule(&self) -> ScalingSchedule {
        self.schedule
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Problem and graph constants the step-size conditions are built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Constants {
    pub smoothness: f64,
    pub strong_convexity: f64,
    /// `L_f + l_f`.
    pub beta: f64,
    /// `lambda_max(A^T A)`.
    pub rho_b: f64,
    /// Smallest eigenvalue of W, used in place of the unnamed `lambda_2`.
    pub lambda2: f64,
    /// `||I - W||_2`.
    pub laplacian_norm: f64,
    /// `L_f l_f / (L_f + l_f)`.
    pub tau_threshold: f64,
}

impl Constants {
    pub fn of<C: LocalCost>(spec: &ProblemSpec<C>, weights: &WeightMatrix) -> Self {
        let lf = spec.smoothness();
        let sc = spec.strong_convexity();
        let beta = lf + sc;
        Constants {
            smoothness: lf,
            strong_convexity: sc,
            beta,
            rho_b: spec.coupling_gram_norm(),
            lambda2: weights.lambda_min(),
            laplacian_norm: weights.laplacian_norm(),
            tau_threshold: lf * sc / beta,
        }
    }

    /// The three step-size bounds of the unbiased-grid hypotheses at a given `tau`.
    pub fn theorem1_gamma_bounds(&self, tau: f64) -> [f64; 3] {
        let l2 = self.lambda2;
        [
            l2 / tau,
            l2 / (4.0 * l2 * self.beta + tau * (4.0 * self.rho_b + 1.0)),
            (2.0 / 3.0) / self.beta,
        ]
    }
}

/// Which convergence result's hypotheses apply to a compressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// Unbiased grid rounding and the uncompressed case.
    UnbiasedGrid,
    /// Unbiased norm-scaled quantizer.
    UnbiasedScaled,
    /// Biased truncation.
    Biased,
}

impl Theorem {
    pub fn for_compressor(spec: CompressorSpec, mode: Mode) -> Self {
        match (mode, spec) {
            (Mode::BaselineDuspa, _) => Theorem::UnbiasedGrid,
            (_, CompressorSpec::Identity | CompressorSpec::Q1 { .. }) => Theorem::UnbiasedGrid,
            (_, CompressorSpec::Q2 { .. }) => Theorem::UnbiasedScaled,
            (_, CompressorSpec::Q3 { .. }) => Theorem::Biased,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
}

impl BoundCheck {
    fn new(name: &str, value: f64, relation: Relation, threshold: f64) -> Self {
        let passed = match relation {
            Relation::Below => value < threshold,
            Relation::Above => value > threshold,
        };
        BoundCheck { name: name.to_string(), value, relation, threshold, passed }
    }
}

/// Advisory check of the step-size hypotheses; it never blocks a run that
/// was started with validation skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub theorem: Theorem,
    pub constants: Constants,
    pub checks: Vec<BoundCheck>,
}

impl ParamReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.constants;
        writeln!(f, "hypotheses: {:?}", self.theorem)?;
        writeln!(
            f,
            "L_f = {:.6}  l_f = {:.6}  beta = {:.6}  rho_B = {:.6}  lambda_min(W) = {:.6}  ||I-W|| = {:.6}",
            c.smoothness, c.strong_convexity, c.beta, c.rho_b, c.lambda2, c.laplacian_norm
        )?;
        writeln!(f, "{:<32} {:>14}   {:>14}  result", "clause", "value", "threshold")?;
        for check in &self.checks {
            let rel = match check.relation {
                Relation::Below => "<",
                Relation::Above => ">",
            };
            writeln!(
                f,
                "{:<32} {:>14.8} {} {:>14.8}  {}",
                check.name,
                check.value,
                rel,
                check.threshold,
                if check.passed { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.all_passed() { "pass" } else { "FAIL" })
    }
}

/// Compressor constant `C` of the norm-scaled quantizer, `E||Q(x)-x||^2 <= C ||x||^2`.
pub fn q2_variance_constant(n: usize, bits: u32) -> f64 {
    n as f64 / 4f64.powi(bits as i32)
}

pub fn validate_params<C: LocalCost>(
    spec: &ProblemSpec<C>,
    weights: &WeightMatrix,
    params: &AlgorithmParams,
    compressor: CompressorSpec,
) -> ParamReport {
    let c = Constants::of(spec, weights);
    let theorem = Theorem::for_compressor(compressor, params.mode());
    let (gamma, tau, psi) = (params.gamma(), params.tau(), params.psi());
    let step_cap = (2.0 / 3.0) / c.beta;
    let mut checks = Vec::new();

    match theorem {
        Theorem::UnbiasedGrid | Theorem::Biased => {
            let [b1, b2, b3] = c.theorem1_gamma_bounds(tau);
            if theorem == Theorem::Biased {
                checks.push(BoundCheck::new("gamma > 2", gamma, Relation::Above, 2.0));
            }
            checks.push(BoundCheck::new("gamma < lambda2/tau", gamma, Relation::Below, b1));
            checks.push(BoundCheck::new("gamma < lambda2/(4l2b+t(4rB+1))", gamma, Relation::Below, b2));
            checks.push(BoundCheck::new("gamma < (2/3)/beta", gamma, Relation::Below, b3));
            checks.push(BoundCheck::new("tau > L_f l_f/beta", tau, Relation::Above, c.tau_threshold));
            if theorem == Theorem::Biased {
                checks.push(BoundCheck::new("psi < 1/(3 tau)", psi, Relation::Below, 1.0 / (3.0 * tau)));
            }
        }
        Theorem::UnbiasedScaled => {
            let bits = match compressor {
                CompressorSpec::Q2 { bits } => bits,
                _ => unreachable!("scaled hypotheses only apply to q2"),
            };
            // tau' = 2, eps = gamma tau, tau_x = 2, a = 1.01 c1 C
            let tau_prime = 2.0;
            let eps = gamma * tau;
            let c1 = (3.0 * psi + 4.0 * eps * tau_prime * psi * psi / (tau_prime - 1.0))
                * c.laplacian_norm.powi(2);
            let cc = q2_variance_constant(spec.constraint_dim(), bits);
            let a = 1.01 * c1 * cc;
            let tau_x = 2.0;
            let rho = a * tau_x / (tau_x - 1.0);
            let kappa = 4.0 * (c.lambda2 - rho) * c.beta + tau * (4.0 * c.rho_b + 1.0);
            checks.push(BoundCheck::new("a < 1 (a = 1.01 c1 C)", a, Relation::Below, 1.0));
            checks.push(BoundCheck::new("gamma < (1-rho)/tau", gamma, Relation::Below, (1.0 - rho) / tau));
            checks.push(BoundCheck::new("gamma < lambda2/tau", gamma, Relation::Below, c.lambda2 / tau));
            let third = if kappa > 0.0 { (c.lambda2 - rho) / kappa } else { f64::NEG_INFINITY };
            checks.push(BoundCheck::new("gamma < (lambda2-rho)/kappa", gamma, Relation::Below, third));
            checks.push(BoundCheck::new("gamma < (2/3)/beta", gamma, Relation::Below, step_cap));
            checks.push(BoundCheck::new("tau > L_f l_f/beta", tau, Relation::Above, c.tau_threshold));
        }
    }
    ParamReport { theorem, constants: c, checks }
}

//! Sweep studies and single runs, with their on-disk artifacts.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Study};
use super::{ConfigError, HarnessError};
use crate::compression::CompressorSpec;
use crate::engine::{parse_trace_csv, EngineError, Mode, Trace};
use crate::problem::kkt_oracle;

/// Residual target factor: `target = RESIDUAL_TARGET_FACTOR (1 + ||z*||)`.
pub const RESIDUAL_TARGET_FACTOR: f64 = 1e-3;
/// Relative tolerance on the resource sum, scaled by `1 + ||sum_i d_i||`.
pub const CONSERVATION_TOLERANCE: f64 = 1e-9;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub label: String,
    pub value: f64,
    pub seed: u64,
    /// Trace file name, relative to the index.
    pub csv: String,
    pub sidecar: String,
    pub rows: usize,
    pub diverged_at: Option<u64>,
    pub final_residual: f64,
    pub final_constraint_violation: f64,
    /// Cumulative bits when the residual first drops below the target.
    pub bits_to_target: Option<u64>,
    pub iterations_to_target: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub value: f64,
    pub mean_final_residual: f64,
    pub mean_final_constraint_violation: f64,
    pub reached_target: usize,
    pub mean_bits_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub study: Study,
    pub parameter: String,
    pub iterations: usize,
    pub target_residual: f64,
    pub expected_trend: String,
    pub entries: Vec<SweepEntry>,
    /// Uncompressed reference runs (communication-cost study only).
    pub baseline: Vec<SweepEntry>,
    pub summary: Vec<SummaryRow>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl SweepResult {
    /// `(value, mean final residual)` per sweep value, in sweep order.
    pub fn mean_final_residuals(&self) -> Vec<(f64, f64)> {
        self.summary.iter().map(|r| (r.value, r.mean_final_residual)).collect()
    }

    pub fn index_path(&self) -> PathBuf {
        self.dir.join(INDEX_FILE)
    }
}

/// Writes through a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn file_stem(label: &str, seed: u64) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}_seed-{seed}")
}

/// Re-checks the engine invariants on a finished trace: the resource sum is
/// conserved and every round costs the same number of bits.
pub fn check_invariants(trace: &Trace, bits_per_round: u64, total_demand_norm: f64) -> Result<(), HarnessError> {
    let tol = CONSERVATION_TOLERANCE * (1.0 + total_demand_norm);
    let mut prev_bits = 0;
    for r in &trace.records {
        if r.conservation_error.is_nan() || r.conservation_error > tol {
            return Err(HarnessError::Invariant(format!(
                "resource sum drifted by {:e} at k = {}",
                r.conservation_error, r.k
            )));
        }
        if r.bits_cumulative != prev_bits + bits_per_round {
            return Err(HarnessError::Invariant(format!(
                "bits went from {prev_bits} to {} at k = {}, expected +{bits_per_round}",
                r.bits_cumulative, r.k
            )));
        }
        prev_bits = r.bits_cumulative;
    }
    Ok(())
}

/// One executed point before it is written out.
struct PointRun {
    trace: Trace,
    diverged_at: Option<u64>,
    target: f64,
}

fn execute(config: &ExperimentConfig, seed: u64, target: Option<f64>) -> Result<PointRun, HarnessError> {
    let inst = config.build()?;
    let sim = inst.simulation();
    let solution = kkt_oracle(&inst.spec).map_err(|e| ConfigError::InvalidValue(e.to_string()))?;
    let target = target.unwrap_or(RESIDUAL_TARGET_FACTOR * (1.0 + solution.z_norm()));
    let iterations = config.algorithm.iterations;
    let (mut trace, diverged_at) = match sim.run_with_optimum(solution.z_star, iterations, seed) {
        Ok(t) => (t, None),
        Err(EngineError::Divergence(d)) => {
            let k = d.k;
            (d.trace, Some(k))
        }
        Err(EngineError::Validation(report)) => {
            return Err(ConfigError::InvalidValue(format!(
                "parameters fail the convergence hypotheses (set algorithm.skip_validation to run anyway)\n{report}"
            ))
            .into())
        }
        Err(e) => return Err(HarnessError::Engine(e.to_string())),
    };
    trace.config_echo = serde_json::to_value(config).expect("configuration serializes");
    check_invariants(&trace, sim.bits_per_round(), inst.spec.total_demand().norm())?;
    Ok(PointRun { trace, diverged_at, target })
}

fn write_trace(dir: &Path, stem: &str, trace: &Trace) -> Result<(String, String), HarnessError> {
    let csv = format!("{stem}.csv");
    let sidecar = format!("{stem}.json");
    write_atomic(&dir.join(&csv), trace.to_csv().as_bytes())?;
    let side = serde_json::to_string_pretty(&trace.sidecar()).expect("sidecar serializes");
    write_atomic(&dir.join(&sidecar), side.as_bytes())?;
    Ok((csv, sidecar))
}

fn entry(label: &str, value: f64, seed: u64, run: &PointRun, files: (String, String)) -> SweepEntry {
    let hit = run.trace.records.iter().find(|r| r.residual < run.target);
    let last = run.trace.last();
    SweepEntry {
        label: label.to_string(),
        value,
        seed,
        csv: files.0,
        sidecar: files.1,
        rows: run.trace.len(),
        diverged_at: run.diverged_at,
        final_residual: last.map_or(f64::NAN, |r| r.residual),
        final_constraint_violation: last.map_or(f64::NAN, |r| r.constraint_violation),
        bits_to_target: hit.map(|r| r.bits_cumulative),
        iterations_to_target: hit.map(|r| r.k + 1),
    }
}

struct Point {
    config: ExperimentConfig,
    label: String,
    value: f64,
    seed: u64,
}

fn run_points(points: &[Point], dir: &Path, target: Option<f64>) -> Result<Vec<SweepEntry>, HarnessError> {
    points
        .par_iter()
        .map(|p| {
            let run = execute(&p.config, p.seed, target)?;
            let files = write_trace(dir, &file_stem(&p.label, p.seed), &run.trace)?;
            Ok(entry(&p.label, p.value, p.seed, &run, files))
        })
        .collect()
}

fn summarize(entries: &[SweepEntry]) -> Vec<SummaryRow> {
    let mut labels: Vec<(String, f64)> = Vec::new();
    for e in entries {
        if !labels.iter().any(|(l, _)| l == &e.label) {
            labels.push((e.label.clone(), e.value));
        }
    }
    labels
        .into_iter()
        .map(|(label, value)| {
            let group: Vec<&SweepEntry> = entries.iter().filter(|e| e.label == label).collect();
            let n = group.len() as f64;
            let reached: Vec<u64> = group.iter().filter_map(|e| e.bits_to_target).collect();
            SummaryRow {
                mean_final_residual: group.iter().map(|e| e.final_residual).sum::<f64>() / n,
                mean_final_constraint_violation: group
                    .iter()
                    .map(|e| e.final_constraint_violation)
                    .sum::<f64>()
                    / n,
                reached_target: reached.len(),
                mean_bits_to_target: (!reached.is_empty())
                    .then(|| reached.iter().map(|&b| b as f64).sum::<f64>() / reached.len() as f64),
                label,
                value,
            }
        })
        .collect()
}

fn require_kind(base: &ExperimentConfig, study: Study, allowed: &[&str]) -> Result<(), HarnessError> {
    let kind = base.compressor.spec.name();
    if allowed.contains(&kind) {
        Ok(())
    } else {
        Err(ConfigError::InvalidValue(format!(
            "study {} needs compressor {}, config has {kind}",
            study.name(),
            allowed.join(" or ")
        ))
        .into())
    }
}

fn sweep_values(base: &ExperimentConfig) -> Vec<f64> {
    base.sweep.as_ref().map(|s| s.values.clone()).unwrap_or_default()
}

fn target_of(base: &ExperimentConfig) -> Option<f64> {
    base.sweep.as_ref().and_then(|s| s.target_residual)
}

fn parameter_points(base: &ExperimentConfig, parameter: &str) -> Result<Vec<Point>, HarnessError> {
    let mut points = Vec::new();
    for value in sweep_values(base) {
        let config = base.with_parameter(parameter, value)?;
        for &seed in &base.seeds {
            points.push(Point { config: config.clone(), label: format!("{parameter}-{value}"), value, seed });
        }
    }
    Ok(points)
}

fn study_dir(base: &ExperimentConfig, study: Study) -> PathBuf {
    base.output_dir.join(study.name())
}

fn finish(
    base: &ExperimentConfig,
    study: Study,
    parameter: &str,
    expected_trend: &str,
    entries: Vec<SweepEntry>,
    baseline: Vec<SweepEntry>,
) -> Result<SweepResult, HarnessError> {
    let dir = study_dir(base, study);
    let target = match target_of(base) {
        Some(t) => t,
        None => {
            let spec = super::config::build_problem(&base.problem)?;
            let z = kkt_oracle(&spec).map_err(|e| ConfigError::InvalidValue(e.to_string()))?;
            RESIDUAL_TARGET_FACTOR * (1.0 + z.z_norm())
        }
    };
    let result = SweepResult {
        study,
        parameter: parameter.to_string(),
        iterations: base.algorithm.iterations,
        target_residual: target,
        expected_trend: expected_trend.to_string(),
        summary: summarize(&entries),
        entries,
        baseline,
        dir,
    };
    let json = serde_json::to_string_pretty(&result).expect("index serializes");
    write_atomic(&result.index_path(), json.as_bytes())?;
    Ok(result)
}

/// Sweeps the schedule ratio `xi` for q1 or q3.
pub fn study_scaling_factor(base: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    let study = Study::ScalingFactor;
    require_kind(base, study, &["q1", "q3"])?;
    let points = parameter_points(base, "xi")?;
    let entries = run_points(&points, &study_dir(base, study), target_of(base))?;
    finish(base, study, "xi", "final residual increases with xi (slower-decaying r_k)", entries, Vec::new())
}

/// Sweeps the q1 grid density `delta_p`.
pub fn study_quantization_interval(base: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    let study = Study::QuantizationInterval;
    require_kind(base, study, &["q1"])?;
    let points = parameter_points(base, "delta_p")?;
    let entries = run_points(&points, &study_dir(base, study), target_of(base))?;
    finish(base, study, "delta_p", "final residual non-increasing in delta_p (finer grid)", entries, Vec::new())
}

/// Bits needed to reach the residual target per q1 grid density, against the
/// uncompressed 32-bit iteration with the same step sizes.
pub fn study_communication_cost(base: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    let study = Study::CommunicationCost;
    require_kind(base, study, &["q1"])?;
    let dir = study_dir(base, study);
    let target = target_of(base);
    let points = parameter_points(base, "delta_p")?;
    let entries = run_points(&points, &dir, target)?;
    let mut reference = base.clone();
    reference.algorithm.mode = Mode::BaselineDuspa;
    reference.compressor.spec = CompressorSpec::Identity;
    let baseline_points: Vec<Point> = base
        .seeds
        .iter()
        .map(|&seed| Point { config: reference.clone(), label: "baseline".into(), value: 32.0, seed })
        .collect();
    let baseline = run_points(&baseline_points, &dir, target)?;
    finish(base, study, "delta_p", "compressed bits-to-target below the uncompressed baseline", entries, baseline)
}

/// Sweeps the q2 bit width.
pub fn study_transmitted_bits(base: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    let study = Study::TransmittedBits;
    require_kind(base, study, &["q2"])?;
    let points = parameter_points(base, "bits")?;
    let entries = run_points(&points, &study_dir(base, study), target_of(base))?;
    finish(base, study, "bits", "final residual non-increasing in bits", entries, Vec::new())
}

/// One run per quantizer on the first seed. q2 takes its bit width from the
/// compressor section (default 2); q1 and q3 take `delta_p` from it when the
/// section names one of them, else 1.
pub fn study_constraint_violation(base: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    let study = Study::ConstraintViolation;
    let (delta_p, bits) = match base.compressor.spec {
        CompressorSpec::Q1 { delta_p } | CompressorSpec::Q3 { delta_p } => (delta_p, 2),
        CompressorSpec::Q2 { bits } => (1, bits),
        CompressorSpec::Identity => (1, 2),
    };
    let seed = base.seeds[0];
    let kinds = [
        (1.0, CompressorSpec::Q1 { delta_p }),
        (2.0, CompressorSpec::Q2 { bits }),
        (3.0, CompressorSpec::Q3 { delta_p }),
    ];
    let points: Vec<Point> = kinds
        .iter()
        .map(|&(value, spec)| {
            let mut config = base.clone();
            config.compressor.spec = spec;
            Point { config, label: spec.name().to_string(), value, seed }
        })
        .collect();
    let entries = run_points(&points, &study_dir(base, study), target_of(base))?;
    finish(base, study, "compressor", "constraint violation vanishes for q1, q2 and q3", entries, Vec::new())
}

/// Runs the study named in the sweep section.
pub fn run_study(base: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    let sweep = base
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError::InvalidValue("config has no sweep section".into()))?;
    match sweep.study {
        Study::ScalingFactor => study_scaling_factor(base),
        Study::QuantizationInterval => study_quantization_interval(base),
        Study::CommunicationCost => study_communication_cost(base),
        Study::TransmittedBits => study_transmitted_bits(base),
        Study::ConstraintViolation => study_constraint_violation(base),
    }
}

/// Outcome of a single configured run.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub trace: Trace,
    pub csv_path: PathBuf,
    pub diverged_at: Option<u64>,
}

/// One trace for `seed`, written to `<output_dir>/run_seed-<seed>.csv`.
pub fn run_single(config: &ExperimentConfig, seed: u64) -> Result<SingleRun, HarnessError> {
    let run = execute(config, seed, target_of(config))?;
    let stem = file_stem("run", seed);
    write_trace(&config.output_dir, &stem, &run.trace)?;
    Ok(SingleRun {
        csv_path: config.output_dir.join(format!("{stem}.csv")),
        diverged_at: run.diverged_at,
        trace: run.trace,
    })
}

/// Checks that every file an index references exists, parses, and has the
/// expected number of rows.
pub fn verify_index(dir: &Path) -> Result<usize, HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Io(format!("{}: {e}", p.display()));
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let index: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| HarnessError::Invariant(format!("index: {e}")))?;
    let iterations = index["iterations"].as_u64().unwrap_or(0);
    let mut checked = 0;
    for group in ["entries", "baseline"] {
        for e in index[group].as_array().into_iter().flatten() {
            let csv = dir.join(e["csv"].as_str().unwrap_or_default());
            let sidecar = dir.join(e["sidecar"].as_str().unwrap_or_default());
            let body = std::fs::read_to_string(&csv).map_err(|err| io(&csv, err))?;
            let records = parse_trace_csv(&body)
                .map_err(|err| HarnessError::Invariant(format!("{}: {err}", csv.display())))?;
            let expected = e["diverged_at"].as_u64().unwrap_or(iterations);
            if records.len() as u64 != expected {
                return Err(HarnessError::Invariant(format!(
                    "{} has {} rows, expected {expected}",
                    csv.display(),
                    records.len()
                )));
            }
            let side = std::fs::read_to_string(&sidecar).map_err(|err| io(&sidecar, err))?;
            serde_json::from_str::<serde_json::Value>(&side)
                .map_err(|err| HarnessError::Invariant(format!("{}: {err}", sidecar.display())))?;
            checked += 1;
        }
    }
    Ok(checked)
}

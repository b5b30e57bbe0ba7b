use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

pub const CSV_HEADER: &str =
    "k,residual,constraint_violation,dual_disagreement,bits_cumulative,fixed_point_residual,saturations";

/// Metrics after round `k` (which maps iterate `k` to `k + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: u64,
    /// `||z - z*||_2` over all agents.
    pub residual: f64,
    pub constraint_violation: f64,
    /// `||(I - W) x||_2`.
    pub dual_disagreement: f64,
    pub bits_cumulative: u64,
    pub fixed_point_residual: f64,
    /// Coordinates clamped by grid compressors this round.
    pub saturations: u64,
    /// `||sum_i y_i - sum_i d_i||_2`; kept in memory only.
    #[serde(skip)]
    pub conservation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<IterationRecord>,
    pub config_echo: serde_json::Value,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("trace CSV line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            // Debug formatting of f64 is the shortest string that parses back exactly.
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{},{:?},{}",
                r.k,
                r.residual,
                r.constraint_violation,
                r.dual_disagreement,
                r.bits_cumulative,
                r.fixed_point_residual,
                r.saturations
            );
        }
        out
    }

    /// JSON sidecar: the configuration echo and the seed.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "iterations": self.records.len(),
            "config": self.config_echo,
        })
    }
}

fn field<T: FromStr>(line: usize, name: &str, raw: &str) -> Result<T, TraceParseError> {
    raw.parse().map_err(|_| TraceParseError {
        line,
        message: format!("cannot parse {name} from {raw:?}"),
    })
}

/// Reads back the rows written by [`Trace::to_csv`]. The in-memory-only
/// conservation column comes back as NaN.
pub fn parse_trace_csv(text: &str) -> Result<Vec<IterationRecord>, TraceParseError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(TraceParseError { line: 1, message: "missing or unexpected header".into() })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let n = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(TraceParseError {
                line: n,
                message: format!("expected 7 columns, found {}", cols.len()),
            });
        }
        records.push(IterationRecord {
            k: field(n, "k", cols[0])?,
            residual: field(n, "residual", cols[1])?,
            constraint_violation: field(n, "constraint_violation", cols[2])?,
            dual_disagreement: field(n, "dual_disagreement", cols[3])?,
            bits_cumulative: field(n, "bits_cumulative", cols[4])?,
            fixed_point_residual: field(n, "fixed_point_residual", cols[5])?,
            saturations: field(n, "saturations", cols[6])?,
            conservation_error: f64::NAN,
        });
    }
    Ok(records)
}

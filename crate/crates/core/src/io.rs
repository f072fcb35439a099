//! CSV and binary output. Every float is written as `{:.16e}`, which
//! round-trips an `f64` exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::FormatError;
use crate::prox_match::{LossRecord, OracleErrorReport};
use crate::samplers::SamplerTrace;
use crate::theory::CheckRecord;

const TRACE_MAGIC: &[u8; 4] = b"PDMT";
const TRACE_VERSION: u32 = 1;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes a header and rows to `path`, quoting fields where needed.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<(), FormatError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> FormatError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FormatError::Io(io),
        other => FormatError::Malformed(format!("{other:?}")),
    }
}

fn coord_header(prefix: &[&str], d: usize) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|j| format!("x{j}")))
        .collect()
}

/// `x0, .., x{d-1}`, one row per sample.
pub fn write_samples_csv(path: &Path, samples: &Array2<f64>) -> Result<(), FormatError> {
    let header = coord_header(&[], samples.ncols());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        samples.rows().into_iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect()),
    )
}

/// `chain, step, x0, ..`; steps run from `N` down to 0, chains within a step.
pub fn write_trace_csv(path: &Path, trace: &SamplerTrace) -> Result<(), FormatError> {
    let header = coord_header(&["chain", "step"], trace.dim);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..=trace.steps).rev().flat_map(|k| {
        (0..trace.n_chains).map(move |c| {
            let mut row = vec![c.to_string(), k.to_string()];
            row.extend(trace.chain_state(k, c).iter().map(|v| fmt_f64(*v)));
            row
        })
    });
    write_csv(path, &header, rows)
}

/// Binary trace: `PDMT`, version, `N`, chains, `d` (u32 LE), then the
/// `(N + 1) * chains * d` states (state `k` major) and the `N` step sizes
/// as f64 LE.
pub fn write_trace_binary<W: Write>(trace: &SamplerTrace, w: W) -> Result<(), FormatError> {
    let mut w = BufWriter::new(w);
    w.write_all(TRACE_MAGIC)?;
    for v in [TRACE_VERSION, u32_of(trace.steps)?, u32_of(trace.n_chains)?, u32_of(trace.dim)?] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in trace.states.iter().chain(&trace.gammas) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn u32_of(n: usize) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Malformed(format!("{n} does not fit in u32")))
}

pub fn read_trace_binary<R: Read>(mut r: R) -> Result<SamplerTrace, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(FormatError::BadMagic { expected: "PDMT" });
    }
    let mut word = || -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != TRACE_VERSION {
        return Err(FormatError::Version(version));
    }
    let (steps, n_chains, dim) = (word()? as usize, word()? as usize, word()? as usize);
    let n_states = (steps + 1)
        .checked_mul(n_chains)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| FormatError::Malformed("trace too large".into()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() != 8 * (n_states + steps) {
        return Err(FormatError::Malformed(format!(
            "expected {} payload bytes, found {}",
            8 * (n_states + steps),
            rest.len()
        )));
    }
    let vals: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(SamplerTrace {
        steps,
        n_chains,
        dim,
        states: vals[..n_states].to_vec(),
        gammas: vals[n_states..].to_vec(),
        step_seconds: vec![0.0; steps],
    })
}

pub fn write_trace_binary_file(path: &Path, trace: &SamplerTrace) -> Result<(), FormatError> {
    write_trace_binary(trace, File::create(path)?)
}

/// One row of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub steps: usize,
    pub h: f64,
    pub metric: String,
    pub value: f64,
}

pub const RESULTS_HEADER: [&str; 5] = ["method", "N", "h", "metric", "value"];

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), FormatError> {
    write_csv(
        path,
        &RESULTS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.method.clone(),
                r.steps.to_string(),
                fmt_f64(r.h),
                r.metric.clone(),
                fmt_f64(r.value),
            ]
        }),
    )
}

/// A cell of a sweep that could not be run.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub method: String,
    pub steps: usize,
    pub error: String,
}

pub fn write_failures_csv(path: &Path, rows: &[FailureRow]) -> Result<(), FormatError> {
    write_csv(
        path,
        &["method", "N", "error"],
        rows.iter()
            .map(|r| vec![r.method.clone(), r.steps.to_string(), r.error.clone()]),
    )
}

/// `zeta` is empty for L1 phases.
pub fn write_loss_curve_csv(path: &Path, curve: &[LossRecord]) -> Result<(), FormatError> {
    write_csv(
        path,
        &["iteration", "phase", "zeta", "loss"],
        curve.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.phase.to_string(),
                fmt_opt(r.zeta),
                fmt_f64(r.loss),
            ]
        }),
    )
}

pub fn write_oracle_error_csv(
    path: &Path,
    rows: &[(&str, &OracleErrorReport)],
) -> Result<(), FormatError> {
    write_csv(
        path,
        &["model", "probes", "evaluated", "solver_failures", "mean_error", "max_error"],
        rows.iter().map(|(name, r)| {
            vec![
                name.to_string(),
                r.probes.to_string(),
                r.evaluated.to_string(),
                r.solver_failures.to_string(),
                fmt_opt(r.mean_error),
                fmt_opt(r.max_error),
            ]
        }),
    )
}

/// `margin` is empty when a check was not evaluated.
pub fn write_theory_csv(path: &Path, records: &[CheckRecord]) -> Result<(), FormatError> {
    write_csv(
        path,
        &["check", "fixture", "status", "margin", "evaluations", "pass"],
        records.iter().map(|r| {
            vec![
                r.check.to_string(),
                r.fixture.clone(),
                r.status.name().to_string(),
                if r.margin.is_nan() { String::new() } else { fmt_f64(r.margin) },
                r.evaluations.to_string(),
                r.passed().to_string(),
            ]
        }),
    )
}

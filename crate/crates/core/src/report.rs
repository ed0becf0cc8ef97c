//! Artifact writing: atomic file replacement, CSV formatting, JSON reports.
//!
//! Everything here is deterministic for identical inputs so repeated runs
//! with the same seed can be compared byte for byte; wall-clock readings
//! live in a single `timing` field that comparisons strip out.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::eval::EvalReport;
use crate::experiment::{Aggregate, EvalSettings, TrialResult};
use crate::fitting::StatsSnapshot;
use crate::mixture::MixtureSpec;
use crate::theory::ProbabilityEstimate;
use crate::trainer::{RunLog, SnapshotRecord, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Write `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so interrupted runs never leave truncated artifacts.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Pretty JSON bytes with a trailing newline, exactly as written to disk.
pub fn json_payload<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Serialize `value` as pretty JSON (trailing newline) and write atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let out = json_payload(value).map_err(std::io::Error::other)?;
    write_bytes_atomic(path, &out)
}

/// Locale-independent float formatting at 17 significant digits, enough to
/// round-trip any f64 exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Wall-clock measurements, deliberately fenced off from everything a
/// determinism check should compare.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

/// Drop the `timing` field from a JSON payload so two runs of the same seed
/// can be compared byte for byte.
pub fn without_timing(json: &[u8]) -> Result<Vec<u8>, serde_json::Error> {
    let mut value: serde_json::Value = serde_json::from_slice(json)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("timing");
    }
    let mut out = serde_json::to_vec_pretty(&value)?;
    out.push(b'\n');
    Ok(out)
}

/// Per-snapshot scalars as they appear in the run report (the sample dump
/// itself goes to CSV).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotScalars {
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub penalty: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl From<&SnapshotRecord> for SnapshotScalars {
    fn from(s: &SnapshotRecord) -> Self {
        Self {
            iteration: s.iteration,
            loss_d: s.loss_d,
            loss_g: s.loss_g,
            penalty: s.penalty,
            d_real_mean: s.d_real_mean,
            d_fake_mean: s.d_fake_mean,
        }
    }
}

/// Everything one seed's run leaves in JSON form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub mixture: MixtureSpec,
    pub snapshots: Vec<SnapshotScalars>,
    pub gdf_target: Option<StatsSnapshot>,
    pub ldf_stats: Option<StatsSnapshot>,
    pub eval: EvalReport,
    pub timing: Timing,
}

pub fn run_report(
    run: &RunLog,
    mixture: &MixtureSpec,
    eval: &EvalReport,
    timing: Timing,
) -> RunReport {
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: run.config.seed,
        config: run.config.clone(),
        mixture: mixture.clone(),
        snapshots: run.snapshots.iter().map(SnapshotScalars::from).collect(),
        gdf_target: run.gdf_target.clone(),
        ldf_stats: run.ldf_stats.clone(),
        eval: eval.clone(),
        timing,
    }
}

/// One row of the aggregate's per-seed table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub modes_covered: usize,
    pub kl_to_real: f64,
    pub high_quality_fraction: f64,
}

/// Cross-seed summary written once per experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub mixture: MixtureSpec,
    pub eval_settings: EvalSettings,
    pub per_seed: Vec<SeedSummary>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

pub fn aggregate_report(
    trials: &[TrialResult],
    mixture: &MixtureSpec,
    eval_settings: &EvalSettings,
    aggregate: Aggregate,
    timing: Timing,
) -> AggregateReport {
    let base = &trials[0].run.config;
    AggregateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: TrainConfig { seed: base.seed, ..base.clone() },
        mixture: mixture.clone(),
        eval_settings: *eval_settings,
        per_seed: trials
            .iter()
            .map(|t| SeedSummary {
                seed: t.seed,
                modes_covered: t.eval.modes_covered,
                kl_to_real: t.eval.kl_to_real,
                high_quality_fraction: t.eval.high_quality_fraction,
            })
            .collect(),
        aggregate,
        timing,
    }
}

/// Standalone evaluation artifact: the metrics plus the parameters and
/// mixture they were computed against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReportFile {
    pub schema_version: u32,
    pub mixture: MixtureSpec,
    pub quality_sigma: f64,
    pub kl_smoothing: f64,
    pub report: EvalReport,
    pub timing: Timing,
}

/// Snapshot dumps as CSV: header `iter,x,y`, one row per generated point.
pub fn samples_csv(snapshots: &[SnapshotRecord]) -> String {
    let mut out = String::from("iter,x,y\n");
    for snap in snapshots {
        for i in 0..snap.samples.rows() {
            let row = snap.samples.row(i);
            out.push_str(&format!(
                "{},{},{}\n",
                snap.iteration,
                format_float(row[0]),
                format_float(row[1])
            ));
        }
    }
    out
}

/// Read a samples CSV back into (iteration, x, y) triples.
pub fn parse_samples_csv(text: &str) -> Result<Vec<(u64, f64, f64)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,x,y") => {}
        other => return Err(format!("expected header 'iter,x,y', found {other:?}")),
    }
    let mut rows = Vec::new();
    for (number, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parsed = (|| {
            let iter = fields.next()?.parse::<u64>().ok()?;
            let x = fields.next()?.parse::<f64>().ok()?;
            let y = fields.next()?.parse::<f64>().ok()?;
            if fields.next().is_some() {
                return None;
            }
            Some((iter, x, y))
        })();
        match parsed {
            Some(row) => rows.push(row),
            None => return Err(format!("malformed row {} of samples CSV: {line:?}", number + 2)),
        }
    }
    Ok(rows)
}

/// Probability sweeps as CSV: header `param,estimate,std_error,exact`; the
/// exact column is left empty when no closed form applies.
pub fn sweep_csv(entries: &[(String, ProbabilityEstimate)]) -> String {
    let mut out = String::from("param,estimate,std_error,exact\n");
    for (param, est) in entries {
        let exact = est.exact.map(format_float).unwrap_or_default();
        out.push_str(&format!(
            "{param},{},{},{exact}\n",
            format_float(est.estimate),
            format_float(est.std_error)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.txt");
        write_bytes_atomic(&path, b"one").unwrap();
        write_bytes_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.0, -1.5, 1.0 / 3.0, 2.0_f64.powi(-40), 123456789.123456789] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn samples_csv_round_trips_exactly() {
        use crate::matrix::Matrix;
        let snap = SnapshotRecord {
            iteration: 500,
            loss_d: 0.0,
            loss_g: 0.0,
            penalty: 0.0,
            d_real_mean: 0.0,
            d_fake_mean: 0.0,
            samples: Matrix::from_vec(2, 2, vec![1.0 / 3.0, -2.5e-9, 0.0, 7.125]),
        };
        let text = samples_csv(&[snap]);
        let rows = parse_samples_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], (500, 1.0 / 3.0, -2.5e-9));
        assert_eq!(rows[1], (500, 0.0, 7.125));
    }

    #[test]
    fn malformed_samples_csv_is_reported_with_row() {
        assert!(parse_samples_csv("x,y\n").is_err());
        let err = parse_samples_csv("iter,x,y\n1,2.0,notafloat\n").unwrap_err();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn sweep_csv_leaves_exact_empty_when_absent() {
        let entries = vec![
            (
                "8".to_string(),
                ProbabilityEstimate {
                    estimate: 0.5,
                    std_error: 0.001,
                    trials: 1000,
                    exact: Some(0.4999),
                },
            ),
            (
                "16".to_string(),
                ProbabilityEstimate { estimate: 0.25, std_error: 0.001, trials: 1000, exact: None },
            ),
        ];
        let text = sweep_csv(&entries);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "param,estimate,std_error,exact");
        assert!(lines[1].ends_with(&format_float(0.4999)));
        assert!(lines[2].ends_with(','), "exact column should be empty: {}", lines[2]);
    }

    #[test]
    fn timing_strips_cleanly() {
        let json = br#"{"a": 1, "timing": {"wall_seconds": 5.0}}"#;
        let stripped = without_timing(json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&stripped).unwrap();
        assert!(v.get("timing").is_none());
        assert_eq!(v.get("a").unwrap(), 1);
    }
}

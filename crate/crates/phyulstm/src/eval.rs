//! Metrics and exports: per-record Pearson correlation, threshold
//! summaries, and CSV time-history / hysteresis exports for plotting.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RecordSet, Split};
use crate::dynamics::StateTrajectory;
use crate::error::EvalError;
use crate::model::Regime;
use crate::train::TrainedModel;

/// Sample Pearson correlation of two equal-length series.
///
/// Undefined (rejected) when either series is constant: a collapsed
/// prediction should surface as an error, not a silent zero.
pub fn pearson_r(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    if u.len() < 2 {
        return Err(EvalError::TooShort(u.len()));
    }
    let n = u.len() as f64;
    let mu: f64 = u.iter().sum::<f64>() / n;
    let mv: f64 = v.iter().sum::<f64>() / n;
    let mut suu = 0.0;
    let mut svv = 0.0;
    let mut suv = 0.0;
    for (a, b) in u.iter().zip(v.iter()) {
        let da = a - mu;
        let db = b - mv;
        suu += da * da;
        svv += db * db;
        suv += da * db;
    }
    if suu == 0.0 {
        return Err(EvalError::Degenerate("first"));
    }
    if svv == 0.0 {
        return Err(EvalError::Degenerate("second"));
    }
    Ok(suv / (suu * svv).sqrt())
}

/// Correlations of one evaluated record; `None` marks a channel whose
/// correlation is undefined (flagged in `flags`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEval {
    pub id: String,
    pub r_x: Option<f64>,
    pub r_v: Option<f64>,
    pub r_g: Option<f64>,
    pub flags: Vec<String>,
}

/// Aggregates of one channel across all records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub n: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub fraction_above_0_9: f64,
}

impl ChannelSummary {
    fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = values.iter().sum::<f64>() / n as f64;
        let fraction_above_0_9 =
            values.iter().filter(|r| **r > 0.9).count() as f64 / n as f64;
        Some(ChannelSummary {
            n,
            max,
            min,
            mean,
            fraction_above_0_9,
        })
    }
}

/// Machine-readable evaluation report (JSON schema version 1);
/// summaries are `None` for channels with no defined correlations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub regime: Regime,
    pub dataset: String,
    pub split: String,
    pub n_records: usize,
    pub n_flagged: usize,
    pub records: Vec<RecordEval>,
    pub x: Option<ChannelSummary>,
    pub v: Option<ChannelSummary>,
    pub g: Option<ChannelSummary>,
}

impl EvalReport {
    /// Recompute a channel summary from the per-record list; used by tests
    /// to confirm the stored aggregates are consistent.
    pub fn recompute_channel(&self, channel: usize) -> Option<ChannelSummary> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| match channel {
                0 => r.r_x,
                1 => r.r_v,
                _ => r.r_g,
            })
            .collect();
        ChannelSummary::from_values(&values)
    }
}

/// Predict every record of the requested split and correlate against the
/// stored reference channels. Per-record prediction failures are flagged
/// and evaluation continues with the remaining records.
pub fn evaluate_model(
    trained: &TrainedModel,
    dataset: &RecordSet,
    split: Split,
    dataset_label: &str,
) -> Result<EvalReport, EvalError> {
    let records = dataset.split_records(split);
    if records.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let regime = trained.config.regime;

    let evals: Vec<RecordEval> = records
        .par_iter()
        .map(|rec| {
            let mut flags = Vec::new();
            if (rec.dt - trained.dt).abs() > 1e-9 {
                log::warn!(
                    "record {} has dt = {} but the model was trained at dt = {}; rebuilding the differentiator",
                    rec.id,
                    rec.dt,
                    trained.dt
                );
            }
            let pred = match trained.model.predict(&rec.ag, rec.dt, regime) {
                Ok(p) => p,
                Err(e) => {
                    flags.push(format!("prediction failed: {e}"));
                    return RecordEval {
                        id: rec.id.clone(),
                        r_x: None,
                        r_v: None,
                        r_g: None,
                        flags,
                    };
                }
            };
            let mut corr = |name: &str, p: &[f64], m: Option<&Vec<f64>>| -> Option<f64> {
                let m = m?;
                match pearson_r(p, m) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        flags.push(format!("{name}: {e}"));
                        None
                    }
                }
            };
            let r_x = corr("x", &pred.x, rec.x.as_ref());
            let r_v = corr("v", &pred.v, rec.v.as_ref());
            let r_g = corr("g", &pred.g, rec.g.as_ref());
            RecordEval {
                id: rec.id.clone(),
                r_x,
                r_v,
                r_g,
                flags,
            }
        })
        .collect();

    let channel_values = |get: fn(&RecordEval) -> Option<f64>| -> Vec<f64> {
        evals.iter().filter_map(get).collect()
    };
    let x = ChannelSummary::from_values(&channel_values(|r| r.r_x));
    let v = ChannelSummary::from_values(&channel_values(|r| r.r_v));
    let g = ChannelSummary::from_values(&channel_values(|r| r.r_g));
    let n_flagged = evals.iter().filter(|r| !r.flags.is_empty()).count();

    Ok(EvalReport {
        schema_version: 1,
        regime,
        dataset: dataset_label.to_string(),
        split: split.to_string(),
        n_records: evals.len(),
        n_flagged,
        records: evals,
        x,
        v,
        g,
    })
}

/// Write the report as pretty JSON.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, body).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<(), EvalError> {
    let io_err = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    writeln!(f, "{header}").map_err(io_err)?;
    for row in rows {
        writeln!(f, "{row}").map_err(io_err)?;
    }
    Ok(())
}

/// Export plot-ready CSVs for one record: a time-history file
/// (`<stem>_history.csv`) and hysteresis pair files for restoring force
/// versus displacement and velocity (`<stem>_hysteresis_x.csv`,
/// `<stem>_hysteresis_v.csv`), each carrying both truth and prediction.
pub fn export_plot_data(
    pred: &StateTrajectory,
    truth: &StateTrajectory,
    dir: &Path,
    stem: &str,
) -> Result<(), EvalError> {
    assert_eq!(pred.len(), truth.len(), "aligned trajectories required");
    fs::create_dir_all(dir).map_err(|e| EvalError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let n = pred.len();

    write_csv(
        &dir.join(format!("{stem}_history.csv")),
        "t,ag,x_true,x_pred,v_true,v_pred,a_true,a_pred,g_true,g_pred",
        (0..n).map(|i| {
            format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                truth.t[i],
                truth.ag[i],
                truth.x[i],
                pred.x[i],
                truth.v[i],
                pred.v[i],
                truth.a[i],
                pred.a[i],
                truth.g[i],
                pred.g[i]
            )
        }),
    )?;
    write_csv(
        &dir.join(format!("{stem}_hysteresis_x.csv")),
        "x_true,g_true,x_pred,g_pred",
        (0..n).map(|i| {
            format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                truth.x[i], truth.g[i], pred.x[i], pred.g[i]
            )
        }),
    )?;
    write_csv(
        &dir.join(format!("{stem}_hysteresis_v.csv")),
        "v_true,g_true,v_pred,g_pred",
        (0..n).map(|i| {
            format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                truth.v[i], truth.g[i], pred.v[i], pred.g[i]
            )
        }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted_correlation() {
        let u = vec![1.0, 2.0, 3.0, 5.0];
        let r = pearson_r(&u, &u).unwrap();
        assert!((r - 1.0).abs() < 1e-14);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let r = pearson_r(&u, &neg).unwrap();
        assert!((r + 1.0).abs() < 1e-14);
    }

    #[test]
    fn hand_computed_value() {
        // u = [1,2,3], v = [1,2,4]: suv = 3, suu = 2, svv = 14/3, so
        // r = 3 / sqrt(2 * 14/3) ~ 0.98198.
        let r = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        let expect = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert!((r - expect).abs() < 1e-12, "r = {r}, expect = {expect}");
        assert!((r - 0.9819805060619657).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).is_err());
        assert!(pearson_r(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(pearson_r(&[1.0], &[2.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn export_writes_three_parseable_files() {
        let dir = tempfile::tempdir().unwrap();
        let tr = StateTrajectory {
            dt: 0.5,
            t: vec![0.0, 0.5, 1.0],
            x: vec![0.0, 1.0, 2.0],
            v: vec![0.0, 0.5, 1.0],
            a: vec![1.0, 1.0, 1.0],
            g: vec![0.0, -1.0, -2.0],
            ag: vec![0.0, 0.0, 0.0],
        };
        export_plot_data(&tr, &tr, dir.path(), "rec").unwrap();
        let hist = fs::read_to_string(dir.path().join("rec_history.csv")).unwrap();
        let lines: Vec<&str> = hist.lines().collect();
        assert_eq!(lines.len(), 4); // header + 3 rows
        // Round-trip parse reproduces the values exactly.
        let first: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(first[2], 0.0);
        let second: Vec<f64> = lines[2].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(second[2], 1.0);
        assert!(dir.path().join("rec_hysteresis_x.csv").exists());
        assert!(dir.path().join("rec_hysteresis_v.csv").exists());
    }

    #[test]
    fn zero_trajectory_hysteresis_is_all_zero_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let tr = StateTrajectory {
            dt: 0.5,
            t: vec![0.0, 0.5],
            x: vec![0.0, 0.0],
            v: vec![0.0, 0.0],
            a: vec![0.0, 0.0],
            g: vec![0.0, 0.0],
            ag: vec![0.0, 0.0],
        };
        export_plot_data(&tr, &tr, dir.path(), "zero").unwrap();
        let hx = fs::read_to_string(dir.path().join("zero_hysteresis_x.csv")).unwrap();
        for line in hx.lines().skip(1) {
            for field in line.split(',') {
                assert_eq!(field.parse::<f64>().unwrap(), 0.0);
            }
        }
    }
}

//! Metrics and machine-readable reports.
//!
//! Fault-parameter tracks are compared by time integrals on the simulation
//! grid (trapezoidal rule): `rmse = sqrt((1/T) integral ||e(t)||^2 dt)` and
//! `l2 = (1/T) integral ||e(t)|| dt`, so a constant error vector `e` gives
//! `||e||` under both. Classification runs aggregate into a confusion matrix
//! (rows = true class, columns = predicted class) from which accuracy, mean
//! precision, and mean false-alarm rate are derived. Reports carry every
//! section as optional data plus warnings for whatever is missing, and
//! serialize to versioned JSON and flat CSV.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

/// Schema tag embedded in every report.
pub const REPORT_SCHEMA: &str = "dfdi-report/1";

fn check_grid(truth: &Array2<f64>, pred: &Array2<f64>, times: &[f64]) -> Result<()> {
    if truth.dim() != pred.dim() {
        return Err(Error::Config(format!(
            "track shapes {:?} and {:?} differ",
            truth.dim(),
            pred.dim()
        )));
    }
    if truth.nrows() != times.len() {
        return Err(Error::Config(format!(
            "{} grid points but {} track rows",
            times.len(),
            truth.nrows()
        )));
    }
    if times.len() < 2 {
        return Err(Error::Config("grid needs at least two points".into()));
    }
    Ok(())
}

fn trapezoid(values: &[f64], times: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..values.len() - 1 {
        acc += 0.5 * (values[k] + values[k + 1]) * (times[k + 1] - times[k]);
    }
    acc
}

/// Root-mean-square tracking error: time-averaged squared norm of the
/// row-wise difference, square-rooted.
pub fn rmse(truth: &Array2<f64>, pred: &Array2<f64>, times: &[f64]) -> Result<f64> {
    check_grid(truth, pred, times)?;
    let sq: Vec<f64> = truth
        .rows()
        .into_iter()
        .zip(pred.rows())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();
    let duration = times[times.len() - 1] - times[0];
    Ok((trapezoid(&sq, times) / duration).sqrt())
}

/// Time-averaged norm of the row-wise difference (no squaring).
pub fn l2_error(truth: &Array2<f64>, pred: &Array2<f64>, times: &[f64]) -> Result<f64> {
    check_grid(truth, pred, times)?;
    let norms: Vec<f64> = truth
        .rows()
        .into_iter()
        .zip(pred.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let duration = times[times.len() - 1] - times[0];
    Ok(trapezoid(&norms, times) / duration)
}

/// Pools per-trial RMSE values: the RMSE of the concatenated trials (equal
/// durations) is the root of the mean of the squares.
pub fn aggregate_rmse(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Pools per-trial time-averaged L2 values (plain mean).
pub fn aggregate_l2(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Aggregate classification rates derived from a confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Fraction of trials classified correctly.
    pub accuracy: f64,
    /// Mean over predicted classes of diagonal/column-sum; classes never
    /// predicted are excluded from the mean.
    pub mean_precision: f64,
    /// Mean over classes of wrong predictions of that class divided by
    /// trials of other classes.
    pub mean_false_alarm_rate: f64,
}

/// Derives aggregate rates from a square count matrix with rows indexed by
/// true class and columns by predicted class.
pub fn classification_metrics(counts: &[Vec<u64>]) -> Result<ClassificationMetrics> {
    let n = counts.len();
    if n == 0 || counts.iter().any(|row| row.len() != n) {
        return Err(Error::Config("confusion matrix must be square".into()));
    }
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Config("confusion matrix has no trials".into()));
    }
    let row_sum: Vec<u64> = counts.iter().map(|row| row.iter().sum()).collect();
    let col_sum: Vec<u64> = (0..n)
        .map(|j| counts.iter().map(|row| row[j]).sum())
        .collect();
    let trace: u64 = (0..n).map(|i| counts[i][i]).sum();
    let accuracy = trace as f64 / total as f64;
    let mut precision_sum = 0.0;
    let mut precision_count = 0usize;
    for j in 0..n {
        if col_sum[j] > 0 {
            precision_sum += counts[j][j] as f64 / col_sum[j] as f64;
            precision_count += 1;
        }
    }
    let mean_precision = precision_sum / precision_count as f64;
    let mut far_sum = 0.0;
    let mut far_count = 0usize;
    for i in 0..n {
        let others = total - row_sum[i];
        if others > 0 {
            far_sum += (col_sum[i] - counts[i][i]) as f64 / others as f64;
            far_count += 1;
        }
    }
    let mean_false_alarm_rate = if far_count > 0 {
        far_sum / far_count as f64
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        accuracy,
        mean_precision,
        mean_false_alarm_rate,
    })
}

/// Tracking metrics for one fault profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetrics {
    pub profile: String,
    pub rmse: f64,
    pub l2: f64,
}

/// Complete evaluation record. Every section is optional so partial runs
/// still produce a report; `finalize` records what is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub schema: String,
    pub per_profile: Vec<ProfileMetrics>,
    pub overall_rmse: Option<f64>,
    pub overall_l2: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub classification: Option<ClassificationMetrics>,
    pub w2_empirical: Option<f64>,
    pub w2_bound: Option<f64>,
    pub kl: Option<f64>,
    pub config_snapshot: Option<serde_json::Value>,
    /// Wall-clock durations per pipeline stage [s].
    pub wall_times_s: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new() -> EvalReport {
        EvalReport {
            schema: REPORT_SCHEMA.to_string(),
            ..EvalReport::default()
        }
    }

    /// Flags missing sections as warnings (idempotent) and returns the
    /// report ready for emission.
    pub fn finalize(mut self) -> EvalReport {
        let mut missing = Vec::new();
        if self.per_profile.is_empty() {
            missing.push("per-profile metrics");
        }
        if self.confusion.is_none() {
            missing.push("confusion matrix");
        }
        if self.classification.is_none() {
            missing.push("classification metrics");
        }
        if self.w2_empirical.is_none() || self.w2_bound.is_none() {
            missing.push("distribution-distance comparison");
        }
        for m in missing {
            let w = format!("missing section: {m}");
            if !self.warnings.contains(&w) {
                self.warnings.push(w);
            }
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat `metric,profile,value` table covering every populated section.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,profile,value\n");
        let mut push = |metric: &str, profile: &str, value: f64| {
            out.push_str(&format!("{metric},{profile},{value}\n"));
        };
        for p in &self.per_profile {
            push("rmse", &p.profile, p.rmse);
            push("l2", &p.profile, p.l2);
        }
        if let Some(v) = self.overall_rmse {
            push("rmse", "overall", v);
        }
        if let Some(v) = self.overall_l2 {
            push("l2", "overall", v);
        }
        if let Some(c) = &self.classification {
            push("accuracy", "overall", c.accuracy);
            push("mean_precision", "overall", c.mean_precision);
            push("mean_false_alarm_rate", "overall", c.mean_false_alarm_rate);
        }
        if let Some(v) = self.w2_empirical {
            push("w2_empirical", "", v);
        }
        if let Some(v) = self.w2_bound {
            push("w2_bound", "", v);
        }
        if let Some(v) = self.kl {
            push("kl", "", v);
        }
        out
    }

    /// Writes the JSON report and the CSV table next to each other.
    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?)?;
        std::fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

//! Variance statistics of gradient estimates, rolling smoothing and the
//! report CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::format_f64;
use crate::model::GradientTable;

/// Below this second moment the normalized variance is reported as `inf`.
pub const SECOND_MOMENT_FLOOR: f64 = 1e-30;

/// Name of the second-moment estimator, recorded alongside reports.
pub const SECOND_MOMENT_METHOD: &str = "coordinate_mean_of_squared_mean_plus_population_variance";

/// Monte-Carlo summary of a set of estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceStats {
    /// Coordinate-wise sample mean.
    pub mean: Vec<f64>,
    /// Average over coordinates of the unbiased sample variance.
    pub avg_var: f64,
    /// Approximate standard error of `avg_var`.
    pub avg_var_se: f64,
    pub draws: usize,
}

fn check_estimates<V: AsRef<[f64]>>(estimates: &[V]) -> Result<usize> {
    if estimates.len() < 2 {
        return Err(Error::contract(format!(
            "variance needs at least 2 estimates, got {}",
            estimates.len()
        )));
    }
    let d = estimates[0].as_ref().len();
    if d == 0 || estimates.iter().any(|e| e.as_ref().len() != d) {
        return Err(Error::contract("estimates have unequal or zero length"));
    }
    Ok(d)
}

/// Sample mean, average variance and its standard error.
///
/// With `s_r = ||e_r - mean||^2 / d`, the average variance is
/// `sum_r s_r / (R - 1)`; its standard error is estimated from the spread
/// of the `s_r`.
pub fn variance_stats<V: AsRef<[f64]>>(estimates: &[V]) -> Result<VarianceStats> {
    let d = check_estimates(estimates)?;
    let r = estimates.len() as f64;
    // Work relative to the first estimate so identical draws give exactly 0.
    let origin = estimates[0].as_ref();
    let mut shift = vec![0.0; d];
    for e in estimates {
        for ((m, x), o) in shift.iter_mut().zip(e.as_ref()).zip(origin) {
            *m += x - o;
        }
    }
    shift.iter_mut().for_each(|m| *m /= r);
    let s: Vec<f64> = estimates
        .iter()
        .map(|e| {
            e.as_ref()
                .iter()
                .zip(origin)
                .zip(&shift)
                .map(|((x, o), m)| {
                    let dev = (x - o) - m;
                    dev * dev
                })
                .sum::<f64>()
                / d as f64
        })
        .collect();
    let mean: Vec<f64> = origin.iter().zip(&shift).map(|(o, m)| o + m).collect();
    let total: f64 = s.iter().sum();
    let avg_var = total / (r - 1.0);
    let s_mean = total / r;
    let s_var = s.iter().map(|x| (x - s_mean) * (x - s_mean)).sum::<f64>() / (r - 1.0);
    let avg_var_se = (r * s_var).sqrt() / (r - 1.0);
    Ok(VarianceStats {
        mean,
        avg_var,
        avg_var_se,
        draws: estimates.len(),
    })
}

/// Average over coordinates of the unbiased sample variance.
pub fn average_variance<V: AsRef<[f64]>>(estimates: &[V]) -> Result<f64> {
    Ok(variance_stats(estimates)?.avg_var)
}

/// Coordinate-averaged second non-central moment of a single uniformly drawn
/// per-example gradient: `(1/d) sum_c (mean_c^2 + popvar_c)`.
pub fn second_moment(table: &GradientTable) -> f64 {
    let mean = table.mean();
    let n = table.len() as f64;
    let mut popvar = vec![0.0; table.dim()];
    for i in 0..table.len() {
        for ((v, g), m) in popvar.iter_mut().zip(table.row(i)).zip(&mean) {
            *v += (g - m) * (g - m);
        }
    }
    let total: f64 = mean.iter().zip(&popvar).map(|(m, v)| m * m + v / n).sum();
    total / table.dim() as f64
}

/// `avg_var / e_g2`, or `+inf` when the second moment is degenerate.
pub fn normalized_variance(avg_var: f64, e_g2: f64) -> f64 {
    if e_g2 < SECOND_MOMENT_FLOOR {
        f64::INFINITY
    } else {
        avg_var / e_g2
    }
}

/// Trailing-window mean and unbiased standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedSeries {
    pub window: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Point `j` summarises `series[j+1-window ..= j]` (shorter at the start).
/// A single-point window has std 0.
pub fn rolling(series: &[f64], window: usize) -> Result<SmoothedSeries> {
    if window == 0 {
        return Err(Error::Config("rolling window must be >= 1".into()));
    }
    let mut mean = Vec::with_capacity(series.len());
    let mut std = Vec::with_capacity(series.len());
    for j in 0..series.len() {
        let w = &series[(j + 1).saturating_sub(window)..=j];
        let n = w.len() as f64;
        let m = w.iter().sum::<f64>() / n;
        mean.push(m);
        std.push(if w.len() < 2 {
            0.0
        } else {
            (w.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
        });
    }
    Ok(SmoothedSeries { window, mean, std })
}

/// One report row: one estimator at one snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub step: u64,
    pub estimator: String,
    pub avg_var: f64,
    pub e_g2: f64,
    pub norm_var: f64,
    pub draws: usize,
}

pub const REPORT_HEADER: &str = "step,estimator,avg_var,e_g2,norm_var,draws";

pub fn write_reports_csv(rows: &[VarianceRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.estimator,
            format_f64(r.avg_var),
            format_f64(r.e_g2),
            format_f64(r.norm_var),
            r.draws
        ));
    }
    out
}

/// Parses a report CSV; errors name the 1-based line.
pub fn parse_reports_csv(text: &str) -> Result<Vec<VarianceRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        _ => return Err(Error::Format(format!("line 1: expected header `{REPORT_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!("line {lineno}: expected 6 fields, got {}", fields.len())));
        }
        let bad = |what: &str| Error::Format(format!("line {lineno}: invalid {what}"));
        let float = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|_| bad(what));
        let row = VarianceRow {
            step: fields[0].trim().parse().map_err(|_| bad("step"))?,
            estimator: fields[1].trim().to_string(),
            avg_var: float(fields[2], "avg_var")?,
            e_g2: float(fields[3], "e_g2")?,
            norm_var: float(fields[4], "norm_var")?,
            draws: fields[5].trim().parse().map_err(|_| bad("draws"))?,
        };
        if row.estimator.is_empty() {
            return Err(bad("estimator"));
        }
        if row.avg_var.is_nan() || row.avg_var < 0.0 || row.e_g2.is_nan() || row.e_g2 < 0.0 || row.norm_var.is_nan() {
            return Err(Error::Format(format!("line {lineno}: negative or NaN statistic")));
        }
        rows.push(row);
    }
    Ok(rows)
}

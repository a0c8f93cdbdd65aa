//! Sweeps over overparametrization, learning rate and duplicate fraction,
//! aggregated over seeds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::io_util::{format_f64, write_atomic};

use super::config::{DataSource, DuplicateSpec, ExperimentConfig};
use super::trajectory::run_trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    /// Student width over training-set size; the width stays fixed and the
    /// training-set size follows. Empty keeps the base dataset.
    #[serde(default)]
    pub overparam: Vec<f64>,
    /// Empty keeps the base learning rate.
    #[serde(default)]
    pub lr: Vec<f64>,
    /// Empty keeps the base duplicate setting.
    #[serde(default)]
    pub dup_fraction: Vec<f64>,
    /// Distinct points used when a duplicate fraction is swept.
    #[serde(default = "d_dup_points")]
    pub dup_points: usize,
    pub seeds: Vec<u64>,
    /// Fraction of trailing measurements summarised per trajectory.
    #[serde(default = "d_tail")]
    pub tail_fraction: f64,
}

fn d_dup_points() -> usize {
    5
}

fn d_tail() -> f64 {
    0.7
}

/// One grid point (before seeds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub overparam: Option<f64>,
    pub lr: f64,
    pub dup_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Max,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Max => "max",
        }
    }
}

/// Tail statistics of one estimator in one trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailStats {
    pub avg_var_mean: f64,
    pub avg_var_max: f64,
    pub norm_var_mean: f64,
    pub norm_var_max: f64,
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub point: SweepPoint,
    pub seed: u64,
    /// `None` when the trajectory failed.
    pub stats: Option<Vec<(EstimatorKind, TailStats)>>,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn get(&self, kind: EstimatorKind) -> Option<TailStats> {
        self.stats.as_ref()?.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub estimator: EstimatorKind,
    pub statistic: Statistic,
    pub avg_var: f64,
    pub avg_var_std: f64,
    pub norm_var: f64,
    pub norm_var_std: f64,
    pub seeds: usize,
    pub failed: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub trials: Vec<TrialResult>,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str =
    "overparam,lr,dup_fraction,estimator,statistic,avg_var,avg_var_std,norm_var,norm_var_std,seeds,status";

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("sweep: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepSpec::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate_static()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::Config("tail_fraction must be in (0, 1]".into()));
        }
        if self.overparam.iter().any(|&o| !(o > 0.0 && o.is_finite())) {
            return Err(Error::Config("overparam values must be positive".into()));
        }
        if !self.overparam.is_empty() && !matches!(self.base.dataset.source, DataSource::Rf { .. }) {
            return Err(Error::Config("overparam sweeps need an rf data source".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let ops: Vec<Option<f64>> = if self.overparam.is_empty() {
            vec![None]
        } else {
            self.overparam.iter().copied().map(Some).collect()
        };
        let lrs = if self.lr.is_empty() { vec![self.base.trainer.lr] } else { self.lr.clone() };
        let dups: Vec<Option<f64>> = if self.dup_fraction.is_empty() {
            vec![None]
        } else {
            self.dup_fraction.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &overparam in &ops {
            for &lr in &lrs {
                for &dup_fraction in &dups {
                    out.push(SweepPoint {
                        overparam,
                        lr,
                        dup_fraction,
                    });
                }
            }
        }
        out
    }

    /// The concrete config of one trial.
    pub fn trial_config(&self, point: SweepPoint, seed: u64) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.trainer.lr = point.lr;
        if let (Some(o), DataSource::Rf {
            student_hidden, n_train, ..
        }) = (point.overparam, &mut cfg.dataset.source)
        {
            *n_train = ((*student_hidden as f64 / o).round() as usize).max(1);
        }
        if let Some(f) = point.dup_fraction {
            cfg.dataset.duplicates = Some(DuplicateSpec {
                n_distinct: self.dup_points,
                fraction: f,
            });
        }
        cfg
    }
}

fn tail_stats(values: &[(f64, f64)], tail_fraction: f64) -> TailStats {
    let m = values.len();
    let keep = ((m as f64 * tail_fraction).ceil() as usize).clamp(1, m.max(1));
    let tail = &values[m.saturating_sub(keep)..];
    let n = tail.len() as f64;
    let fold_max = |f: fn(&(f64, f64)) -> f64| tail.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    TailStats {
        avg_var_mean: tail.iter().map(|v| v.0).sum::<f64>() / n,
        avg_var_max: fold_max(|v| v.0),
        norm_var_mean: tail.iter().map(|v| v.1).sum::<f64>() / n,
        norm_var_max: fold_max(|v| v.1),
    }
}

fn run_trial(spec: &SweepSpec, point: SweepPoint, seed: u64) -> TrialResult {
    let cfg = spec.trial_config(point, seed);
    let outcome = run_trajectory(&cfg).and_then(|t| match t.failure {
        Some(f) => Err(Error::NonFinite(f)),
        None => Ok(t),
    });
    match outcome {
        Ok(t) => {
            let stats = cfg
                .estimators
                .iter()
                .map(|&k| {
                    let series: Vec<(f64, f64)> = t.series(k).iter().map(|m| (m.row.avg_var, m.row.norm_var)).collect();
                    (k, tail_stats(&series, spec.tail_fraction))
                })
                .collect();
            TrialResult {
                point,
                seed,
                stats: Some(stats),
                error: None,
            }
        }
        Err(e) => {
            log::warn!("sweep trial {point:?} seed {seed} failed: {e}");
            TrialResult {
                point,
                seed,
                stats: None,
                error: Some(e.to_string()),
            }
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let s = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (m, s)
}

/// Runs every (point, seed) trial, in parallel on the current rayon pool.
/// Failed trials are recorded and excluded from the aggregates.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let jobs: Vec<(SweepPoint, u64)> = spec
        .points()
        .into_iter()
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let trials: Vec<TrialResult> = jobs.par_iter().map(|&(p, s)| run_trial(spec, p, s)).collect();

    let mut rows = Vec::new();
    for point in spec.points() {
        let group: Vec<&TrialResult> = trials.iter().filter(|t| t.point == point).collect();
        let failed = group.iter().filter(|t| t.stats.is_none()).count();
        for &kind in &spec.base.estimators {
            for statistic in [Statistic::Mean, Statistic::Max] {
                let vals: Vec<TailStats> = group.iter().filter_map(|t| t.get(kind)).collect();
                let pick = |f: fn(&TailStats) -> f64| vals.iter().map(f).collect::<Vec<_>>();
                let (av, nv) = match statistic {
                    Statistic::Mean => (pick(|s| s.avg_var_mean), pick(|s| s.norm_var_mean)),
                    Statistic::Max => (pick(|s| s.avg_var_max), pick(|s| s.norm_var_max)),
                };
                let (avg_var, avg_var_std) = mean_std(&av);
                let (norm_var, norm_var_std) = mean_std(&nv);
                rows.push(SweepRow {
                    point,
                    estimator: kind,
                    statistic,
                    avg_var,
                    avg_var_std,
                    norm_var,
                    norm_var_std,
                    seeds: vals.len(),
                    failed,
                });
            }
        }
    }
    Ok(SweepResult { trials, rows })
}

fn opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let status = if r.failed == 0 {
                "ok".to_string()
            } else {
                format!("failed_{}", r.failed)
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                opt(r.point.overparam),
                format_f64(r.point.lr),
                opt(r.point.dup_fraction),
                r.estimator.name(),
                r.statistic.name(),
                format_f64(r.avg_var),
                format_f64(r.avg_var_std),
                format_f64(r.norm_var),
                format_f64(r.norm_var_std),
                r.seeds,
                status
            ));
        }
        out
    }

    /// Aggregated value of one estimator and statistic at a point.
    pub fn value(&self, point: SweepPoint, kind: EstimatorKind, statistic: Statistic) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.point == point && r.estimator == kind && r.statistic == statistic)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = self.to_csv();
        write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
        for (name, svg) in super::plot::sweep_plots(&csv)? {
            write_atomic(&dir.join("plots").join(name), svg.as_bytes())?;
        }
        Ok(())
    }
}

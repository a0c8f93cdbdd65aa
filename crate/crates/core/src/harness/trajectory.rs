//! One SGD trajectory with periodic variance measurements.
//!
//! Training always uses plain mini-batch SGD; the estimators are only
//! evaluated at snapshots, never used for updates.

use std::path::Path;

use serde::Serialize;

use crate::clustering::{gc_fit, gc_refine, ClusterState, GcFit, RankOneCenters};
use crate::error::{Error, Result};
use crate::estimators::{empirical_variance, Estimator, EstimatorKind, Snapshot, SvrgState};
use crate::io_util::write_atomic;
use crate::metrics::{write_reports_csv, VarianceRow, SECOND_MOMENT_METHOD};
use crate::model::{dataset_factors, sgd_step, ModelSnapshot, Sgd};
use crate::numerics::RngStream;

use super::config::{prepare, root_stream, ExperimentConfig};
use super::plot::report_plots;

/// A report row with the extra in-memory bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub row: VarianceRow,
    pub kind: EstimatorKind,
    pub avg_var_se: f64,
    /// First measurement after a clustering refit / anchor refresh.
    pub post_refit: bool,
}

/// Exported clustering of one refit.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterExport {
    pub step: u64,
    pub k: usize,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    pub objective: f64,
    pub initial_objective: f64,
    pub objective_trace: Vec<f64>,
    pub degenerate: bool,
    pub centers: RankOneCenters,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub config: ExperimentConfig,
    pub measurements: Vec<Measurement>,
    pub clusters: Vec<ClusterExport>,
    pub log: Vec<String>,
    pub final_model: ModelSnapshot,
    /// Set when training diverged; artifacts up to that point are kept.
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn rows(&self) -> Vec<VarianceRow> {
        self.measurements.iter().map(|m| m.row.clone()).collect()
    }

    pub fn reports_csv(&self) -> String {
        write_reports_csv(&self.rows())
    }

    /// Measurements of one estimator, in step order.
    pub fn series(&self, kind: EstimatorKind) -> Vec<&Measurement> {
        self.measurements.iter().filter(|m| m.kind == kind).collect()
    }

    /// Writes config.json, reports.csv, clusters/, plots/ and run.log into
    /// `dir`, plus a FAILED marker when training diverged.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("config.json"), self.config.to_json().as_bytes())?;
        let csv = self.reports_csv();
        write_atomic(&dir.join("reports.csv"), csv.as_bytes())?;
        let meta = serde_json::json!({
            "second_moment": SECOND_MOMENT_METHOD,
            "rows": self.measurements.len(),
            "final_step": self.final_model.step(),
        });
        write_atomic(&dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        for c in &self.clusters {
            let path = dir.join("clusters").join(format!("step_{:06}.json", c.step));
            write_atomic(&path, serde_json::to_string_pretty(c)?.as_bytes())?;
        }
        for (name, svg) in report_plots(&self.rows())? {
            write_atomic(&dir.join("plots").join(name), svg.as_bytes())?;
        }
        self.final_model.save(&dir.join("model.json"))?;
        let mut log = self.log.join("\n");
        log.push('\n');
        write_atomic(&dir.join("run.log"), log.as_bytes())?;
        if let Some(f) = &self.failure {
            write_atomic(&dir.join("FAILED"), format!("{f}\n").as_bytes())?;
        }
        Ok(())
    }
}

/// Mini-batches without replacement: reshuffle whenever fewer than `B`
/// unused examples remain.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: RngStream,
}

impl Batcher {
    fn new(n: usize, batch: usize, rng: RngStream) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            cursor: n,
            batch,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        let n = self.order.len();
        for j in (1..n).rev() {
            let k = self.rng.index(j + 1);
            self.order.swap(j, k);
        }
        self.cursor = 0;
    }

    fn next(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.reshuffle();
        }
        let s = self.cursor;
        self.cursor += self.batch;
        &self.order[s..s + self.batch]
    }
}

/// Runs the configured trajectory in memory. Divergence does not return an
/// error: the trajectory is cut short and `failure` is set.
pub fn run_trajectory(config: &ExperimentConfig) -> Result<Trajectory> {
    let prepared = prepare(config)?;
    let data = &prepared.train;
    let loss = &prepared.loss;
    let mut model = prepared.model.clone();
    let root = root_stream(config.seed);
    let mut optimizer = Sgd::new(config.trainer.sgd(), model.param_count())?;
    let mut batches = Batcher::new(data.len(), config.trainer.batch_size, root.derive("train"));
    let estimate_root = root.derive("estimate");
    let gc_root = root.derive("gc");

    let b = config.trainer.batch_size;
    let k = config.clusters();
    let sched = &config.schedule;
    let roster = &config.estimators;
    let want_gc = roster.contains(&EstimatorKind::Gc);
    let want_svrg = roster.contains(&EstimatorKind::Svrg);
    let gc_cfg = config.gc_config();

    let mut svrg: Option<SvrgState> = None;
    let mut clusters: Option<ClusterState> = None;
    let mut exports = Vec::new();
    let mut measurements = Vec::new();
    let mut log = vec![format!(
        "seed {} | N {} | params {} | steps {} | lr {} | B {} | K {}",
        config.seed,
        data.len(),
        model.param_count(),
        config.trainer.steps,
        config.trainer.lr,
        b,
        k
    )];
    let mut fresh_refit = false;
    let mut failure = None;
    let total = config.trainer.steps;

    for t in 0..=total {
        let refit = t % sched.update_interval == 0 && t < total;
        let measure = t > 0 && t % sched.log_interval == 0;
        if refit || measure {
            let snap = match Snapshot::new(&model, loss, data) {
                Ok(s) => s,
                Err(e) if e.is_numerical() => {
                    failure = Some(format!("step {t}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            if refit {
                if want_svrg {
                    svrg = Some(SvrgState { anchor: snap.clone() });
                }
                if want_gc {
                    let factors = dataset_factors(&model, loss, data)?;
                    let fit: GcFit = match (&clusters, sched.warm_start) {
                        (Some(prev), true) => gc_refine(&factors, prev.assignments.clone(), k, &gc_cfg)?,
                        _ => gc_fit(&factors, k, &mut gc_root.derive_index(t), &gc_cfg)?,
                    };
                    log.push(format!(
                        "step {t}: clusters refit, objective {:.6e} -> {:.6e}{}",
                        fit.initial_objective,
                        fit.state.objective,
                        if fit.degenerate { " (degenerate)" } else { "" }
                    ));
                    exports.push(ClusterExport {
                        step: t,
                        k,
                        assignments: fit.state.assignments.clone(),
                        sizes: fit.state.sizes.clone(),
                        objective: fit.state.objective,
                        initial_objective: fit.initial_objective,
                        objective_trace: fit.objective_trace.clone(),
                        degenerate: fit.degenerate,
                        centers: fit.centers.clone(),
                    });
                    clusters = Some(fit.state);
                }
                fresh_refit = true;
            }
            if measure {
                for &kind in roster {
                    let est = match kind {
                        EstimatorKind::Full => Estimator::Full,
                        EstimatorKind::Sgb => Estimator::MiniBatch { batch: b, kind },
                        EstimatorKind::Sg2b => Estimator::MiniBatch {
                            batch: (2 * b).min(data.len()),
                            kind,
                        },
                        EstimatorKind::Svrg => Estimator::Svrg {
                            batch: b,
                            state: svrg.as_ref().expect("anchor set at step 0"),
                        },
                        EstimatorKind::Gc => Estimator::Stratified {
                            clusters: clusters.as_ref().expect("clusters fit at step 0"),
                        },
                    };
                    let rng = estimate_root.derive(kind.name()).derive_index(t);
                    let e = empirical_variance(&est, &snap, sched.estimate_draws, &rng)?;
                    measurements.push(Measurement {
                        row: VarianceRow {
                            step: t,
                            estimator: kind.name().to_string(),
                            avg_var: e.avg_var,
                            e_g2: e.e_g2,
                            norm_var: e.norm_var,
                            draws: e.draws,
                        },
                        kind,
                        avg_var_se: e.avg_var_se,
                        post_refit: fresh_refit,
                    });
                }
                fresh_refit = false;
            }
        }
        if t == total {
            break;
        }
        let batch = batches.next().to_vec();
        match sgd_step(&model, loss, data, &batch, &mut optimizer) {
            Ok((next, batch_loss)) => {
                if (t + 1) % sched.log_interval == 0 {
                    log.push(format!("step {}: batch loss {batch_loss:.6e}", t + 1));
                }
                model = next;
            }
            Err(e) if e.is_numerical() => {
                failure = Some(format!("step {}: {e}", t + 1));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(f) = &failure {
        log::warn!("trajectory diverged: {f}");
        log.push(format!("FAILED: {f}"));
    }
    Ok(Trajectory {
        config: config.clone(),
        measurements,
        clusters: exports,
        log,
        final_model: model,
        failure,
    })
}

/// Runs a trajectory and writes its artifacts. Divergence is reported as a
/// numerical error after the partial artifacts are on disk.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<Trajectory> {
    let traj = run_trajectory(config)?;
    traj.write_artifacts(dir)?;
    if let Some(f) = &traj.failure {
        return Err(Error::NonFinite(f.clone()));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::rf_default(seed);
        if let super::super::config::DataSource::Rf {
            student_hidden, n_train, ..
        } = &mut cfg.dataset.source
        {
            *student_hidden = 20;
            *n_train = 40;
        }
        cfg.trainer.steps = 40;
        cfg.trainer.batch_size = 4;
        cfg.schedule.log_interval = 10;
        cfg.schedule.update_interval = 20;
        cfg.schedule.estimate_draws = 10;
        cfg
    }

    #[test]
    fn row_count_follows_schedule() {
        let t = run_trajectory(&small(1)).unwrap();
        assert_eq!(t.measurements.len(), 4 * 5);
        assert_eq!(t.clusters.len(), 2);
        let post: Vec<u64> = t
            .series(EstimatorKind::Gc)
            .iter()
            .filter(|m| m.post_refit)
            .map(|m| m.row.step)
            .collect();
        assert_eq!(post, vec![10, 20]);
    }

    #[test]
    fn full_only_roster_reports_zero_variance() {
        let mut cfg = small(2);
        cfg.estimators = vec![EstimatorKind::Full];
        let t = run_trajectory(&cfg).unwrap();
        assert!(t.measurements.iter().all(|m| m.row.avg_var == 0.0));
    }

    #[test]
    fn roster_changes_do_not_touch_other_estimators() {
        let all = run_trajectory(&small(3)).unwrap();
        let mut cfg = small(3);
        cfg.estimators = vec![EstimatorKind::Sgb];
        let one = run_trajectory(&cfg).unwrap();
        let a: Vec<_> = all.series(EstimatorKind::Sgb).iter().map(|m| m.row.clone()).collect();
        let b: Vec<_> = one.series(EstimatorKind::Sgb).iter().map(|m| m.row.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_sets_failure() {
        let mut cfg = small(4);
        cfg.model = super::super::config::ModelSpec::Linear { bias: true };
        cfg.trainer.lr = 1e308;
        let t = run_trajectory(&cfg).unwrap();
        assert!(t.failure.is_some());
    }

    #[test]
    fn batcher_covers_epoch_without_repeats() {
        let mut b = Batcher::new(10, 5, RngStream::new(1, 0));
        let mut seen: Vec<usize> = b.next().to_vec();
        seen.extend(b.next());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

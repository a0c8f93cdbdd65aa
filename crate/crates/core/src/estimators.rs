//! Gradient-mean estimators: full batch, uniform mini-batches, SVRG and the
//! stratified estimator over a clustering.
//!
//! All estimators read a [`Snapshot`], the per-example gradient table of
//! one model state. Sampling is with replacement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterState;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{normalized_variance, second_moment, variance_stats};
use crate::model::{per_example_gradients, GradientTable, LossSpec, ModelSnapshot};
use crate::numerics::{axpy, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Full,
    Sgb,
    Sg2b,
    Svrg,
    Gc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Full,
        EstimatorKind::Sgb,
        EstimatorKind::Sg2b,
        EstimatorKind::Svrg,
        EstimatorKind::Gc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Full => "full",
            EstimatorKind::Sgb => "sgb",
            EstimatorKind::Sg2b => "sg2b",
            EstimatorKind::Svrg => "svrg",
            EstimatorKind::Gc => "gc",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        EstimatorKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One draw of an estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    pub estimator: EstimatorKind,
    /// Sampled example indices (empty for the full gradient).
    pub indices: Vec<usize>,
    pub draw: u64,
}

impl AsRef<[f64]> for GradientEstimate {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

/// Per-example gradients of one model state on one dataset.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub table: GradientTable,
    pub full: Vec<f64>,
    pub dataset_fingerprint: u64,
    pub step: u64,
}

impl Snapshot {
    pub fn new(model: &ModelSnapshot, loss: &LossSpec, dataset: &Dataset) -> Result<Self> {
        let table = per_example_gradients(model, loss, dataset)?;
        Ok(Snapshot::from_table(table, dataset.fingerprint(), model.step()))
    }

    pub fn from_table(table: GradientTable, dataset_fingerprint: u64, step: u64) -> Self {
        let full = table.mean();
        Snapshot {
            table,
            full,
            dataset_fingerprint,
            step,
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }
}

/// Control-variate anchor: per-example gradients and full gradient at a
/// past state.
#[derive(Clone, Debug)]
pub struct SvrgState {
    pub anchor: Snapshot,
}

impl SvrgState {
    pub fn new(model: &ModelSnapshot, loss: &LossSpec, dataset: &Dataset) -> Result<Self> {
        Ok(SvrgState {
            anchor: Snapshot::new(model, loss, dataset)?,
        })
    }

    pub fn anchor_step(&self) -> u64 {
        self.anchor.step
    }

    pub fn anchor_gradient(&self) -> &[f64] {
        &self.anchor.full
    }
}

/// An estimator with its parameters.
#[derive(Clone, Copy, Debug)]
pub enum Estimator<'a> {
    Full,
    /// Mean of `batch` examples drawn with replacement.
    MiniBatch { batch: usize, kind: EstimatorKind },
    Svrg { batch: usize, state: &'a SvrgState },
    /// One example per cluster, weighted by cluster size.
    Stratified { clusters: &'a ClusterState },
}

impl Estimator<'_> {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Full => EstimatorKind::Full,
            Estimator::MiniBatch { kind, .. } => *kind,
            Estimator::Svrg { .. } => EstimatorKind::Svrg,
            Estimator::Stratified { .. } => EstimatorKind::Gc,
        }
    }

    fn validate(&self, snap: &Snapshot) -> Result<()> {
        let n = snap.len();
        match self {
            Estimator::Full => {}
            Estimator::MiniBatch { batch, .. } | Estimator::Svrg { batch, .. } if *batch == 0 || *batch > n => {
                return Err(Error::contract(format!("batch size {batch} outside 1..={n}")));
            }
            Estimator::MiniBatch { .. } => {}
            Estimator::Svrg { state, .. } => {
                if state.anchor.dataset_fingerprint != snap.dataset_fingerprint || state.anchor.len() != n {
                    return Err(Error::StaleAnchor);
                }
                if state.anchor.dim() != snap.dim() {
                    return Err(Error::contract("anchor parameter count differs from the snapshot"));
                }
            }
            Estimator::Stratified { clusters } => {
                if clusters.len() != n {
                    return Err(Error::contract(format!(
                        "clustering covers {} examples, snapshot has {n}",
                        clusters.len()
                    )));
                }
                if let Some(k) = clusters.first_empty() {
                    return Err(Error::EmptyCluster(k));
                }
            }
        }
        Ok(())
    }

    fn draw_unchecked(&self, snap: &Snapshot, rng: &mut RngStream, draw: u64, members: &[Vec<usize>]) -> GradientEstimate {
        let n = snap.len();
        let d = snap.dim();
        let (vector, indices) = match self {
            Estimator::Full => (snap.full.clone(), Vec::new()),
            Estimator::MiniBatch { batch, .. } => {
                let idx: Vec<usize> = (0..*batch).map(|_| rng.index(n)).collect();
                let mut v = vec![0.0; d];
                for &i in &idx {
                    axpy(1.0, snap.table.row(i), &mut v);
                }
                v.iter_mut().for_each(|x| *x /= *batch as f64);
                (v, idx)
            }
            Estimator::Svrg { batch, state } => {
                let idx: Vec<usize> = (0..*batch).map(|_| rng.index(n)).collect();
                let mut now = vec![0.0; d];
                let mut then = vec![0.0; d];
                for &i in &idx {
                    axpy(1.0, snap.table.row(i), &mut now);
                    axpy(1.0, state.anchor.table.row(i), &mut then);
                }
                let b = *batch as f64;
                let v = now
                    .iter()
                    .zip(&then)
                    .zip(&state.anchor.full)
                    .map(|((x, y), g)| (x - y) / b + g)
                    .collect();
                (v, idx)
            }
            Estimator::Stratified { clusters } => {
                let mut v = vec![0.0; d];
                let mut idx = Vec::with_capacity(members.len());
                for (k, m) in members.iter().enumerate() {
                    let i = m[rng.index(m.len())];
                    axpy(clusters.sizes[k] as f64, snap.table.row(i), &mut v);
                    idx.push(i);
                }
                v.iter_mut().for_each(|x| *x /= n as f64);
                (v, idx)
            }
        };
        GradientEstimate {
            vector,
            estimator: self.kind(),
            indices,
            draw,
        }
    }

    fn members(&self) -> Vec<Vec<usize>> {
        match self {
            Estimator::Stratified { clusters } => clusters.members(),
            _ => Vec::new(),
        }
    }

    /// A single draw.
    pub fn estimate(&self, snap: &Snapshot, rng: &mut RngStream) -> Result<GradientEstimate> {
        self.validate(snap)?;
        Ok(self.draw_unchecked(snap, rng, 0, &self.members()))
    }

    /// `draws` independent estimates; draw `r` uses `rng.derive_index(r)`,
    /// so results do not depend on scheduling.
    pub fn draw_many(&self, snap: &Snapshot, draws: usize, rng: &RngStream) -> Result<Vec<GradientEstimate>> {
        self.validate(snap)?;
        let members = self.members();
        Ok((0..draws as u64)
            .into_par_iter()
            .map(|r| self.draw_unchecked(snap, &mut rng.derive_index(r), r, &members))
            .collect())
    }
}

/// Full-batch gradient of the model on the dataset.
pub fn full_gradient(model: &ModelSnapshot, loss: &LossSpec, dataset: &Dataset) -> Result<GradientEstimate> {
    let snap = Snapshot::new(model, loss, dataset)?;
    Ok(GradientEstimate {
        vector: snap.full,
        estimator: EstimatorKind::Full,
        indices: Vec::new(),
        draw: 0,
    })
}

/// Variance measurement of one estimator at one snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceEntry {
    pub estimator: EstimatorKind,
    pub avg_var: f64,
    pub avg_var_se: f64,
    pub e_g2: f64,
    pub norm_var: f64,
    pub draws: usize,
    /// Monte-Carlo mean of the draws.
    pub mean: Vec<f64>,
}

/// Draws `draws` estimates and summarises their variance. The second
/// moment comes from the snapshot, so it is shared by every estimator.
pub fn empirical_variance(estimator: &Estimator<'_>, snap: &Snapshot, draws: usize, rng: &RngStream) -> Result<VarianceEntry> {
    if draws < 2 {
        return Err(Error::Config(format!("need at least 2 draws, got {draws}")));
    }
    let estimates = estimator.draw_many(snap, draws, rng)?;
    let stats = variance_stats(&estimates)?;
    let e_g2 = second_moment(&snap.table);
    Ok(VarianceEntry {
        estimator: estimator.kind(),
        avg_var: stats.avg_var,
        avg_var_se: stats.avg_var_se,
        e_g2,
        norm_var: normalized_variance(stats.avg_var, e_g2),
        draws,
        mean: stats.mean,
    })
}

/// Exact average variance of a with-replacement mini-batch mean:
/// population trace / (B d).
pub fn minibatch_variance(table: &GradientTable, batch: usize) -> f64 {
    let mean = table.mean();
    let total: f64 = (0..table.len())
        .map(|i| table.row(i).iter().zip(&mean).map(|(g, m)| (g - m) * (g - m)).sum::<f64>())
        .sum();
    total / table.len() as f64 / batch as f64 / table.dim() as f64
}

//! Size-weighted clustering of per-example gradients.
//!
//! The objective is `sum_i N_{a_i} ||C_{a_i} - g_i||^2`. With exact member
//! means as centers it equals `N^2` times the variance of the stratified
//! estimator, so minimising it picks the lowest-variance strata.
//!
//! Two implementations: an exact one over materialised gradients, used as
//! an oracle and on small problems, and one that keeps a rank-1 center
//! `c d^T` per parameter block and works entirely on the per-example
//! factors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorBlock, GradientTable, PerExampleFactors};
use crate::numerics::{axpy, dot, top_singular_pair, Matrix, RngStream};

/// Cluster assignment of every example (0-based cluster ids).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Weighted objective of this state; `inf` until evaluated.
    pub objective: f64,
    pub iterations: usize,
}

impl ClusterState {
    pub fn from_assignments(assignments: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::contract(format!("cluster id {bad} >= K = {k}")));
        }
        let sizes = cluster_sizes(&assignments, k);
        Ok(ClusterState {
            assignments,
            sizes,
            objective: f64::INFINITY,
            iterations: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Member indices of every cluster, in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            m[a].push(i);
        }
        m
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.sizes.iter().position(|&s| s == 0)
    }
}

pub fn cluster_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    sizes
}

/// Uniformly random partition into `k` clusters of size `floor(N/k)` or
/// `ceil(N/k)`.
pub fn balanced_random_assignment(n: usize, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for j in (1..n).rev() {
        perm.swap(j, rng.index(j + 1));
    }
    let mut assignments = vec![0; n];
    for (slot, &i) in perm.iter().enumerate() {
        assignments[i] = slot % k;
    }
    Ok(assignments)
}

/// Index of the smallest `sizes[k] * cost[k]`, ties to the lowest `k`.
fn weighted_argmin(costs: &[f64], sizes: &[usize]) -> usize {
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (k, (&c, &s)) in costs.iter().zip(sizes).enumerate() {
        let w = s as f64 * c;
        if w < best_cost {
            best = k;
            best_cost = w;
        }
    }
    best
}

/// Re-seeds every empty cluster with the highest-cost member of the current
/// largest cluster (ties: lowest cluster id). Members tied exactly at that
/// cost, as exact duplicates are, move together as long as the largest
/// cluster keeps at least one member; otherwise only the lowest-index one
/// moves. `own_cost[i]` is example `i`'s distance to its assigned center.
pub fn repair_empty_clusters(state: &mut ClusterState, own_cost: &[f64]) -> Result<usize> {
    let k = state.k();
    if k > state.len() {
        return Err(Error::contract(format!(
            "cannot fill {k} clusters with {} examples",
            state.len()
        )));
    }
    if own_cost.len() != state.len() {
        return Err(Error::contract("cost vector length != number of examples"));
    }
    let mut repaired = 0;
    while let Some(empty) = state.first_empty() {
        let largest = (0..k)
            .max_by(|&a, &b| state.sizes[a].cmp(&state.sizes[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        let worst = state
            .assignments
            .iter()
            .zip(own_cost)
            .filter(|(&a, _)| a == largest)
            .map(|(_, &c)| c)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut tied: Vec<usize> = (0..state.len())
            .filter(|&i| state.assignments[i] == largest && own_cost[i] == worst)
            .collect();
        if tied.is_empty() {
            // NaN costs: fall back to the first member.
            tied.push(state.assignments.iter().position(|&a| a == largest).expect("largest cluster has members"));
        }
        if tied.len() >= state.sizes[largest] {
            tied.truncate(1);
        }
        for &i in &tied {
            state.assignments[i] = empty;
        }
        state.sizes[largest] -= tied.len();
        state.sizes[empty] += tied.len();
        repaired += 1;
    }
    Ok(repaired)
}

// ---------------------------------------------------------------------------
// Exact clustering on materialised gradients.

/// Dense centers, one flat vector per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCenters {
    pub centers: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance of every example to every center, `N x K`.
pub fn exact_costs(table: &GradientTable, centers: &DenseCenters) -> Vec<Vec<f64>> {
    (0..table.len())
        .into_par_iter()
        .map(|i| centers.centers.iter().map(|c| sq_dist(table.row(i), c)).collect())
        .collect()
}

/// Assignment step with frozen sizes: `a_i = argmin_k N_k ||C_k - g_i||^2`.
pub fn exact_assign(table: &GradientTable, centers: &DenseCenters, sizes: &[usize]) -> Result<Vec<usize>> {
    if centers.centers.is_empty() || centers.centers.len() != sizes.len() {
        return Err(Error::contract("need one size per center and at least one center"));
    }
    Ok(exact_costs(table, centers)
        .iter()
        .map(|c| weighted_argmin(c, sizes))
        .collect())
}

/// Update step: member means and sizes.
pub fn exact_update(table: &GradientTable, assignments: &[usize], k: usize) -> Result<(DenseCenters, Vec<usize>)> {
    if assignments.len() != table.len() {
        return Err(Error::contract("assignment length != number of gradients"));
    }
    let sizes = cluster_sizes(assignments, k);
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster(empty));
    }
    let mut centers = vec![vec![0.0; table.dim()]; k];
    for (i, &a) in assignments.iter().enumerate() {
        axpy(1.0, table.row(i), &mut centers[a]);
    }
    for (c, &s) in centers.iter_mut().zip(&sizes) {
        c.iter_mut().for_each(|x| *x /= s as f64);
    }
    Ok((DenseCenters { centers }, sizes))
}

/// `sum_i N_{a_i} ||C_{a_i} - g_i||^2`.
pub fn weighted_objective(table: &GradientTable, state: &ClusterState, centers: &DenseCenters) -> f64 {
    state
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| state.sizes[a] as f64 * sq_dist(table.row(i), &centers.centers[a]))
        .sum()
}

/// Result of the exact clustering.
#[derive(Clone, Debug)]
pub struct ExactFit {
    pub state: ClusterState,
    pub centers: DenseCenters,
    pub objective_trace: Vec<f64>,
    pub initial_objective: f64,
}

/// Exact assign/update iteration from a balanced random start, keeping the
/// best state seen.
pub fn exact_fit(table: &GradientTable, k: usize, iters: usize, rng: &mut RngStream) -> Result<ExactFit> {
    if iters == 0 {
        return Err(Error::Config("clustering needs at least one iteration".into()));
    }
    let init = balanced_random_assignment(table.len(), k, rng)?;
    let mut state = ClusterState::from_assignments(init, k)?;
    let (mut centers, _) = exact_update(table, &state.assignments, k)?;
    state.objective = weighted_objective(table, &state, &centers);
    let initial_objective = state.objective;
    let mut best = (state.clone(), centers.clone());
    let mut trace = Vec::with_capacity(iters);
    for it in 1..=iters {
        let costs = exact_costs(table, &centers);
        let assignments: Vec<usize> = costs.iter().map(|c| weighted_argmin(c, &state.sizes)).collect();
        let unchanged = assignments == state.assignments;
        let mut next = ClusterState::from_assignments(assignments, k)?;
        let own: Vec<f64> = next.assignments.iter().enumerate().map(|(i, &a)| costs[i][a]).collect();
        repair_empty_clusters(&mut next, &own)?;
        centers = exact_update(table, &next.assignments, k)?.0;
        next.objective = weighted_objective(table, &next, &centers);
        next.iterations = it;
        trace.push(next.objective);
        if next.objective < best.0.objective {
            best = (next.clone(), centers.clone());
        }
        state = next;
        if unchanged {
            break;
        }
    }
    Ok(ExactFit {
        state: best.0,
        centers: best.1,
        objective_trace: trace,
        initial_objective,
    })
}

/// Stratified-estimator average variance (trace / d) from exact strata:
/// `N^-2 sum_k N_k^2 V_k`, `V_k` the within-cluster population variance.
pub fn stratified_variance(table: &GradientTable, state: &ClusterState) -> Result<f64> {
    let k = state.k();
    let (centers, sizes) = exact_update(table, &state.assignments, k)?;
    let mut total = 0.0;
    for (i, &a) in state.assignments.iter().enumerate() {
        // N_k^2 * (1/N_k) sum ||g - C||^2 = N_k sum ||g - C||^2.
        total += sizes[a] as f64 * sq_dist(table.row(i), &centers.centers[a]);
    }
    let n = table.len() as f64;
    Ok(total / (n * n) / table.dim() as f64)
}

// ---------------------------------------------------------------------------
// Rank-1 centers on per-example factors.

/// One cluster's center for one parameter block: `C = c d^T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneBlock {
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    /// Cached `||c||^2 ||d||^2 = ||C||_F^2`.
    pub norm_sq: f64,
}

impl RankOneBlock {
    pub fn new(c: Vec<f64>, d: Vec<f64>) -> Self {
        let norm_sq = dot(&c, &c) * dot(&d, &d);
        RankOneBlock { c, d, norm_sq }
    }

    /// Row-major `c d^T`.
    pub fn dense(&self) -> Vec<f64> {
        Matrix::outer(&self.c, &self.d).into_data()
    }
}

/// Rank-1 centers indexed `[block][cluster]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneCenters {
    pub blocks: Vec<Vec<RankOneBlock>>,
}

impl RankOneCenters {
    pub fn k(&self) -> usize {
        self.blocks.first().map_or(0, Vec::len)
    }

    /// Flat parameter-shaped center of cluster `k`.
    pub fn to_dense(&self, factors: &PerExampleFactors, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; factors.param_count];
        for (fb, centers) in factors.blocks.iter().zip(&self.blocks) {
            out[fb.offset..fb.offset + fb.param_count()].copy_from_slice(&centers[k].dense());
        }
        out
    }
}

/// Spatial layout of one block's factors for a single example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub positions: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl From<&FactorBlock> for BlockShape {
    fn from(b: &FactorBlock) -> Self {
        BlockShape {
            positions: b.positions,
            input_dim: b.input_dim,
            output_dim: b.output_dim,
        }
    }
}

/// How to evaluate a convolutional block's inner products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvFormulation {
    /// Sum `M = sum_t A_t D_t^T` first, then `c^T M d` and `||M||^2`.
    PositionSumFirst,
    /// Project each position first: `sum_t (c.A_t)(d.D_t)` and
    /// `sum_{t,t'} (A_t.A_t')(D_t.D_t')`.
    ProjectionFirst,
    /// Pick the cheaper one per term from the block shape and `K`.
    Auto,
}

/// Formulation chosen for the cross term and the norm term separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub cross: ConvFormulation,
    pub norm: ConvFormulation,
}

impl ConvPlan {
    /// Resolves `Auto` by operation counts: for the cross term,
    /// `T K (I + O)` projections against `(T + K) I O` for forming `M` and
    /// contracting it; for the norm, `T^2 (I + O)` Gram entries against
    /// `(T + 1) I O`.
    pub fn resolve(formulation: ConvFormulation, shape: BlockShape, k: usize) -> ConvPlan {
        let BlockShape {
            positions: t,
            input_dim: i,
            output_dim: o,
        } = shape;
        match formulation {
            ConvFormulation::Auto => {
                let pick = |projection: usize, summed: usize| {
                    if projection < summed {
                        ConvFormulation::ProjectionFirst
                    } else {
                        ConvFormulation::PositionSumFirst
                    }
                };
                ConvPlan {
                    cross: pick(t * k * (i + o), (t + k) * i * o),
                    norm: pick(t * t * (i + o), (t + 1) * i * o),
                }
            }
            f => ConvPlan { cross: f, norm: f },
        }
    }
}

/// `||C_k - a d^T||^2` for every cluster's center, with a single position:
/// `||C_k||^2 - 2 (c.a)(d.D) + ||a||^2 ||D||^2`.
pub fn assign_cost_fc(a: &[f64], d: &[f64], centers: &[RankOneBlock]) -> Vec<f64> {
    let gnorm = dot(a, a) * dot(d, d);
    centers
        .iter()
        .map(|ck| ck.norm_sq - 2.0 * dot(&ck.c, a) * dot(&ck.d, d) + gnorm)
        .collect()
}

/// Per-example, per-block quantities that do not depend on the cluster.
struct ExampleBlockCache {
    gnorm: f64,
    /// `M = sum_t A_t D_t^T` when the cross term needs it.
    summed: Option<Vec<f64>>,
}

fn block_cache(a: &[f64], d: &[f64], shape: BlockShape, plan: ConvPlan) -> ExampleBlockCache {
    let BlockShape {
        positions: t,
        input_dim: ii,
        output_dim: oo,
    } = shape;
    let need_sum = plan.cross == ConvFormulation::PositionSumFirst || plan.norm == ConvFormulation::PositionSumFirst;
    let summed = need_sum.then(|| {
        let mut m = vec![0.0; ii * oo];
        for s in 0..t {
            let a_t = &a[s * ii..(s + 1) * ii];
            let d_t = &d[s * oo..(s + 1) * oo];
            for (u, &au) in a_t.iter().enumerate() {
                axpy(au, d_t, &mut m[u * oo..(u + 1) * oo]);
            }
        }
        m
    });
    let gnorm = match plan.norm {
        ConvFormulation::ProjectionFirst => {
            let mut g = 0.0;
            for s in 0..t {
                for r in 0..t {
                    g += dot(&a[s * ii..(s + 1) * ii], &a[r * ii..(r + 1) * ii])
                        * dot(&d[s * oo..(s + 1) * oo], &d[r * oo..(r + 1) * oo]);
                }
            }
            g
        }
        _ => {
            let m = summed.as_ref().expect("summed");
            dot(m, m)
        }
    };
    ExampleBlockCache {
        gnorm,
        summed: if plan.cross == ConvFormulation::PositionSumFirst {
            summed
        } else {
            None
        },
    }
}

fn cross_term(a: &[f64], d: &[f64], shape: BlockShape, cache: &ExampleBlockCache, center: &RankOneBlock) -> f64 {
    let (ii, oo) = (shape.input_dim, shape.output_dim);
    match &cache.summed {
        Some(m) => {
            let mut acc = 0.0;
            for (u, &cu) in center.c.iter().enumerate() {
                acc += cu * dot(&m[u * oo..(u + 1) * oo], &center.d);
            }
            acc
        }
        None => (0..shape.positions)
            .map(|s| dot(&center.c, &a[s * ii..(s + 1) * ii]) * dot(&center.d, &d[s * oo..(s + 1) * oo]))
            .sum(),
    }
}

/// `||C_k - sum_t A_t D_t^T||^2` for every cluster's center. `a` holds the
/// `T x I` patch rows and `d` the `T x O` output-gradient rows of one
/// example. A single position always takes the fully-connected path.
pub fn assign_cost_conv(
    a: &[f64],
    d: &[f64],
    shape: BlockShape,
    centers: &[RankOneBlock],
    formulation: ConvFormulation,
) -> Vec<f64> {
    if shape.positions == 1 {
        return assign_cost_fc(a, d, centers);
    }
    let plan = ConvPlan::resolve(formulation, shape, centers.len());
    let cache = block_cache(a, d, shape, plan);
    centers
        .iter()
        .map(|ck| ck.norm_sq - 2.0 * cross_term(a, d, shape, &cache, ck) + cache.gnorm)
        .collect()
}

/// Squared distance of example `i`'s full gradient to every center, summed
/// over blocks and clamped at zero against rounding.
fn example_costs(factors: &PerExampleFactors, centers: &RankOneCenters, i: usize, formulation: ConvFormulation) -> Vec<f64> {
    let k = centers.k();
    let mut total = vec![0.0; k];
    for (fb, cb) in factors.blocks.iter().zip(&centers.blocks) {
        let costs = assign_cost_conv(fb.a_of(i), fb.d_of(i), fb.into(), cb, formulation);
        for (t, c) in total.iter_mut().zip(costs) {
            *t += c;
        }
    }
    total.iter_mut().for_each(|c| *c = c.max(0.0));
    total
}

/// Cost matrix `N x K` under rank-1 centers.
pub fn rank1_costs(factors: &PerExampleFactors, centers: &RankOneCenters, formulation: ConvFormulation) -> Vec<Vec<f64>> {
    (0..factors.len())
        .into_par_iter()
        .map(|i| example_costs(factors, centers, i, formulation))
        .collect()
}

/// Center update rule for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `c` = mean input factor, `d` = mean output factor. Exact when the
    /// input factors are constant within the cluster.
    MeanFactors,
    /// Leading singular pair of the exact dense cluster mean (best rank-1
    /// approximation in Frobenius norm).
    TruncatedSvd,
}

/// Update rule per layer: a default plus explicit per-layer overrides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterUpdate {
    pub default: UpdateRule,
    #[serde(default)]
    pub overrides: Vec<(usize, UpdateRule)>,
}

impl Default for CenterUpdate {
    fn default() -> Self {
        CenterUpdate {
            default: UpdateRule::MeanFactors,
            overrides: Vec::new(),
        }
    }
}

impl CenterUpdate {
    pub fn all(rule: UpdateRule) -> Self {
        CenterUpdate {
            default: rule,
            overrides: Vec::new(),
        }
    }

    pub fn rule_for(&self, layer: usize) -> UpdateRule {
        self.overrides
            .iter()
            .rev()
            .find(|(l, _)| *l == layer)
            .map_or(self.default, |(_, r)| *r)
    }
}

const SVD_ITERS: usize = 500;
const SVD_TOL: f64 = 1e-13;

fn mean_factor_center(fb: &FactorBlock, members: &[usize]) -> RankOneBlock {
    let (ii, oo, t) = (fb.input_dim, fb.output_dim, fb.positions);
    let mut c = vec![0.0; ii];
    let mut d = vec![0.0; oo];
    for &i in members {
        for row in fb.a_of(i).chunks_exact(ii) {
            axpy(1.0, row, &mut c);
        }
        for row in fb.d_of(i).chunks_exact(oo) {
            axpy(1.0, row, &mut d);
        }
    }
    // c averages over members and positions, d over members only, so that
    // c d^T sums over positions like the gradient does.
    let nk = members.len() as f64;
    c.iter_mut().for_each(|x| *x /= nk * t as f64);
    d.iter_mut().for_each(|x| *x /= nk);
    RankOneBlock::new(c, d)
}

fn svd_center(fb: &FactorBlock, members: &[usize]) -> Result<RankOneBlock> {
    let mut mean = vec![0.0; fb.param_count()];
    for &i in members {
        fb.add_gradient(i, &mut mean);
    }
    let nk = members.len() as f64;
    mean.iter_mut().for_each(|x| *x /= nk);
    let m = Matrix::from_vec(fb.input_dim, fb.output_dim, mean)?;
    let triple = top_singular_pair(&m, SVD_ITERS, SVD_TOL)?;
    if !triple.converged {
        log::debug!("rank-1 center power iteration stopped after {} iterations", triple.iterations);
    }
    let root = triple.s.sqrt();
    Ok(RankOneBlock::new(
        triple.u.iter().map(|x| root * x).collect(),
        triple.v.iter().map(|x| root * x).collect(),
    ))
}

/// Update step for rank-1 centers.
pub fn u_step_rank1(factors: &PerExampleFactors, state: &ClusterState, update: &CenterUpdate) -> Result<RankOneCenters> {
    if state.len() != factors.len() {
        return Err(Error::contract("assignment length != number of examples"));
    }
    if let Some(empty) = state.first_empty() {
        return Err(Error::EmptyCluster(empty));
    }
    let members = state.members();
    let blocks = factors
        .blocks
        .iter()
        .map(|fb| {
            members
                .par_iter()
                .map(|m| match update.rule_for(fb.layer) {
                    UpdateRule::MeanFactors => Ok(mean_factor_center(fb, m)),
                    UpdateRule::TruncatedSvd => svd_center(fb, m),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankOneCenters { blocks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcConfig {
    pub iters: usize,
    #[serde(default)]
    pub center_update: CenterUpdate,
    #[serde(default = "default_formulation")]
    pub formulation: ConvFormulation,
}

fn default_formulation() -> ConvFormulation {
    ConvFormulation::Auto
}

impl Default for GcConfig {
    fn default() -> Self {
        GcConfig {
            iters: 10,
            center_update: CenterUpdate::default(),
            formulation: ConvFormulation::Auto,
        }
    }
}

/// Result of gradient clustering on factors.
#[derive(Clone, Debug)]
pub struct GcFit {
    /// Best state seen, with its rank-1 objective.
    pub state: ClusterState,
    pub centers: RankOneCenters,
    /// Objective after every iteration.
    pub objective_trace: Vec<f64>,
    pub initial_objective: f64,
    /// All per-example gradients were zero; the partition is arbitrary.
    pub degenerate: bool,
}

fn rank1_objective(state: &ClusterState, costs: &[Vec<f64>]) -> f64 {
    state
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| state.sizes[a] as f64 * costs[i][a])
        .sum()
}

/// Gradient clustering from a balanced random partition.
pub fn gc_fit(factors: &PerExampleFactors, k: usize, rng: &mut RngStream, config: &GcConfig) -> Result<GcFit> {
    let init = balanced_random_assignment(factors.len(), k, rng)?;
    gc_refine(factors, init, k, config)
}

/// Gradient clustering from a given partition (warm start). Runs
/// `config.iters` rounds of: assignment with frozen sizes, size update,
/// empty-cluster repair, center update. Returns the best state seen.
pub fn gc_refine(factors: &PerExampleFactors, init: Vec<usize>, k: usize, config: &GcConfig) -> Result<GcFit> {
    let n = factors.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    if config.iters == 0 {
        return Err(Error::Config("gradient clustering needs iters >= 1".into()));
    }
    if init.len() != n {
        return Err(Error::contract("initial assignment length != number of examples"));
    }
    let mut state = ClusterState::from_assignments(init, k)?;
    if state.first_empty().is_some() {
        // Warm starts may leave clusters empty; distance-free repair.
        repair_empty_clusters(&mut state, &vec![0.0; n])?;
    }

    let all_zero = factors
        .blocks
        .iter()
        .all(|b| b.d.data().iter().all(|&x| x == 0.0) || b.a.data().iter().all(|&x| x == 0.0));
    let mut centers = u_step_rank1(factors, &state, &config.center_update)?;
    if all_zero {
        log::warn!("all per-example gradients are zero; clustering is degenerate");
        state.objective = 0.0;
        return Ok(GcFit {
            state,
            centers,
            objective_trace: vec![0.0],
            initial_objective: 0.0,
            degenerate: true,
        });
    }

    let mut costs = rank1_costs(factors, &centers, config.formulation);
    state.objective = rank1_objective(&state, &costs);
    let initial_objective = state.objective;
    let mut best = (state.clone(), centers.clone());
    let mut trace = Vec::with_capacity(config.iters);
    for it in 1..=config.iters {
        let assignments: Vec<usize> = costs.iter().map(|c| weighted_argmin(c, &state.sizes)).collect();
        let unchanged = assignments == state.assignments;
        let mut next = ClusterState::from_assignments(assignments, k)?;
        let own: Vec<f64> = next.assignments.iter().enumerate().map(|(i, &a)| costs[i][a]).collect();
        let repaired = repair_empty_clusters(&mut next, &own)?;
        if repaired > 0 {
            log::debug!("iteration {it}: re-seeded {repaired} empty clusters");
        }
        centers = u_step_rank1(factors, &next, &config.center_update)?;
        costs = rank1_costs(factors, &centers, config.formulation);
        next.objective = rank1_objective(&next, &costs);
        next.iterations = it;
        trace.push(next.objective);
        if next.objective < best.0.objective {
            best = (next.clone(), centers.clone());
        }
        state = next;
        if unchanged {
            break;
        }
    }
    Ok(GcFit {
        state: best.0,
        centers: best.1,
        objective_trace: trace,
        initial_objective,
        degenerate: false,
    })
}

//! Wasserstein-1 machinery over weighted point clouds.
//!
//! Three routes to the same quantity live here on purpose: the entropic
//! Sinkhorn solver used during training, an exact linear-programming solver
//! for oracle-scale instances, and the closed-form 1-D solution. The exact
//! routes check the approximate one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted point cloud in a joint feature-label space (or feature-only).
#[derive(Debug, Clone)]
pub struct EmpiricalDistribution {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Uniform weights `1/n`.
    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len(),
                context: "point matrix not divisible by dim",
            });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::EmptyInput("empirical distribution"));
        }
        let weights = vec![1.0 / n as f64; n];
        Self::validated(points, n, dim, weights)
    }

    /// Explicit weights; they must be nonnegative and sum to 1 (they are
    /// renormalized to machine precision after validation).
    pub fn weighted(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len(),
                context: "point matrix not divisible by dim",
            });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::EmptyInput("empirical distribution"));
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: weights.len(),
                context: "weight vector length",
            });
        }
        Self::validated(points, n, dim, weights)
    }

    fn validated(points: Vec<f64>, n: usize, dim: usize, mut weights: Vec<f64>) -> Result<Self> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("distribution coordinates".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::NotASimplex(f64::NAN));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotASimplex(sum));
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
        Ok(EmpiricalDistribution {
            points,
            n,
            dim,
            weights,
        })
    }

    /// Rows as 1-D points.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::uniform(values.to_vec(), 1)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }
}

/// Pairwise Euclidean distances between two clouds.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    entries: Vec<f64>,
    n: usize,
    m: usize,
}

impl CostMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_entry(&self) -> f64 {
        self.entries.iter().sum::<f64>() / self.entries.len() as f64
    }

    pub fn from_entries(entries: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        if entries.len() != n * m {
            return Err(Error::DimensionMismatch {
                expected: n * m,
                got: entries.len(),
                context: "cost matrix entries",
            });
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("cost matrix entries".into()));
        }
        Ok(CostMatrix { entries, n, m })
    }
}

/// Euclidean cost matrix between two clouds of equal column count.
pub fn cost_matrix(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> Result<CostMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
            context: "cost matrix column counts",
        });
    }
    let (n, m, d) = (a.len(), b.len(), a.dim());
    let mut entries = vec![0.0; n * m];
    for i in 0..n {
        let ri = a.row(i);
        let row = &mut entries[i * m..(i + 1) * m];
        for (j, e) in row.iter_mut().enumerate() {
            let rj = b.row(j);
            let mut s = 0.0;
            for k in 0..d {
                let diff = ri[k] - rj[k];
                s += diff * diff;
            }
            *e = s.sqrt();
        }
    }
    Ok(CostMatrix { entries, n, m })
}

/// A coupling with its marginal targets.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub row_targets: Vec<f64>,
    pub col_targets: Vec<f64>,
}

impl TransportPlan {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.m + j]
    }

    /// Largest violation of either marginal constraint.
    pub fn marginal_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            let s: f64 = self.coupling[i * self.m..(i + 1) * self.m].iter().sum();
            worst = worst.max((s - self.row_targets[i]).abs());
        }
        for j in 0..self.m {
            let s: f64 = (0..self.n).map(|i| self.coupling[i * self.m + j]).sum();
            worst = worst.max((s - self.col_targets[j]).abs());
        }
        worst
    }
}

/// Entropic regularization settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub beta: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl SinkhornConfig {
    pub fn with_beta(beta: f64) -> Self {
        SinkhornConfig {
            beta,
            max_iter: 10_000,
            tolerance: 1e-9,
        }
    }

    /// Default regularization relative to the batch at hand:
    /// `beta = 0.05 * mean cost`.
    pub fn for_cost(cost: &CostMatrix) -> Self {
        let mean = cost.mean_entry();
        Self::with_beta((0.05 * mean).max(1e-12))
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sinkhorn beta must be positive, got {}",
                self.beta
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("sinkhorn max_iter = 0".into()));
        }
        Ok(())
    }
}

fn validate_weights(w: &[f64], len: usize, context: &'static str) -> Result<()> {
    if w.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: w.len(),
            context,
        });
    }
    if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::NotASimplex(f64::NAN));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotASimplex(sum));
    }
    Ok(())
}

#[inline]
fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Sinkhorn matrix scaling. Returns the plan and the transport cost
/// `sum(plan * cost)`; the entropic term is excluded from the reported value.
///
/// When `exp(-C/beta)` underflows anywhere the solver switches to log-domain
/// potentials instead of erroring.
pub fn sinkhorn(
    cost: &CostMatrix,
    a_weights: &[f64],
    b_weights: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan, f64)> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    validate_weights(a_weights, n, "sinkhorn source weights")?;
    validate_weights(b_weights, m, "sinkhorn target weights")?;

    let beta = cfg.beta;
    let kernel: Vec<f64> = cost.entries().iter().map(|&c| (-c / beta).exp()).collect();
    let underflow = kernel.iter().any(|&k| k < f64::MIN_POSITIVE);
    if underflow {
        return sinkhorn_log_domain(cost, a_weights, b_weights, cfg);
    }

    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    for _ in 0..cfg.max_iter {
        // Scale-free change measure: the scaling vectors carry an arbitrary
        // gauge (and can reach e^{C/beta}), so absolute changes say nothing.
        let mut du: f64 = 0.0;
        let mut dv: f64 = 0.0;
        for i in 0..n {
            kv[i] = crate::neural::dot(&kernel[i * m..(i + 1) * m], &v);
        }
        for i in 0..n {
            if kv[i] <= 0.0 || !kv[i].is_finite() {
                return sinkhorn_log_domain(cost, a_weights, b_weights, cfg);
            }
            let new = a_weights[i] / kv[i];
            du = du.max((new - u[i]).abs() / new.abs().max(f64::MIN_POSITIVE));
            u[i] = new;
        }
        for j in 0..m {
            let mut s = 0.0;
            for i in 0..n {
                s += kernel[i * m + j] * u[i];
            }
            ktu[j] = s;
        }
        for j in 0..m {
            if ktu[j] <= 0.0 || !ktu[j].is_finite() {
                return sinkhorn_log_domain(cost, a_weights, b_weights, cfg);
            }
            let new = b_weights[j] / ktu[j];
            dv = dv.max((new - v[j]).abs() / new.abs().max(f64::MIN_POSITIVE));
            v[j] = new;
        }
        if du < cfg.tolerance && dv < cfg.tolerance {
            break;
        }
    }
    let mut coupling = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            coupling[i * m + j] = u[i] * kernel[i * m + j] * v[j];
        }
    }
    if coupling.iter().any(|p| !p.is_finite()) {
        return sinkhorn_log_domain(cost, a_weights, b_weights, cfg);
    }
    round_to_polytope(&mut coupling, n, m, a_weights, b_weights);
    let mut distance = 0.0;
    for i in 0..n {
        for j in 0..m {
            distance += coupling[i * m + j] * cost.at(i, j);
        }
    }
    Ok((
        TransportPlan {
            coupling,
            n,
            m,
            row_targets: a_weights.to_vec(),
            col_targets: b_weights.to_vec(),
        },
        distance,
    ))
}

/// Rounds an almost-feasible coupling onto the transport polytope: scale rows
/// and columns down to their targets, then spread the leftover mass with a
/// rank-one correction. Marginals come out exact to float precision and the
/// cost moves by at most the pre-rounding violation times the cost diameter.
fn round_to_polytope(coupling: &mut [f64], n: usize, m: usize, a: &[f64], b: &[f64]) {
    for i in 0..n {
        let row = &mut coupling[i * m..(i + 1) * m];
        let rs: f64 = row.iter().sum();
        if rs > a[i] && rs > 0.0 {
            let f = a[i] / rs;
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    for j in 0..m {
        let cs: f64 = (0..n).map(|i| coupling[i * m + j]).sum();
        if cs > b[j] && cs > 0.0 {
            let f = b[j] / cs;
            for i in 0..n {
                coupling[i * m + j] *= f;
            }
        }
    }
    let err_a: Vec<f64> = (0..n)
        .map(|i| (a[i] - coupling[i * m..(i + 1) * m].iter().sum::<f64>()).max(0.0))
        .collect();
    let err_b: Vec<f64> = (0..m)
        .map(|j| (b[j] - (0..n).map(|i| coupling[i * m + j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = err_a.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            if err_a[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                coupling[i * m + j] += err_a[i] * err_b[j] / total;
            }
        }
    }
}

fn sinkhorn_log_domain(
    cost: &CostMatrix,
    a_weights: &[f64],
    b_weights: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan, f64)> {
    let (n, m) = cost.shape();
    let beta = cfg.beta;
    let log_a: Vec<f64> = a_weights.iter().map(|&a| a.ln()).collect();
    let log_b: Vec<f64> = b_weights.iter().map(|&b| b.ln()).collect();
    let mut f: Vec<f64> = vec![0.0; n];
    let mut g: Vec<f64> = vec![0.0; m];
    // Potential changes of beta * tol match the scaling-vector stopping rule.
    let pot_tol = beta * cfg.tolerance.max(1e-12);
    for _ in 0..cfg.max_iter {
        let mut df: f64 = 0.0;
        let mut dg: f64 = 0.0;
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| (g[j] - cost.at(i, j)) / beta));
            let new = beta * (log_a[i] - lse);
            if new.is_finite() || f[i].is_finite() {
                df = df.max((new - f[i]).abs());
            }
            f[i] = new;
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - cost.at(i, j)) / beta));
            let new = beta * (log_b[j] - lse);
            if new.is_finite() || g[j].is_finite() {
                dg = dg.max((new - g[j]).abs());
            }
            g[j] = new;
        }
        if df < pot_tol && dg < pot_tol {
            break;
        }
    }
    for i in 0..n {
        let lse = logsumexp((0..m).map(|j| (g[j] - cost.at(i, j)) / beta));
        f[i] = beta * (log_a[i] - lse);
    }
    let mut coupling = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - cost.at(i, j)) / beta).exp();
            coupling[i * m + j] = if p.is_finite() { p } else { 0.0 };
        }
    }
    round_to_polytope(&mut coupling, n, m, a_weights, b_weights);
    let mut distance = 0.0;
    for i in 0..n {
        for j in 0..m {
            distance += coupling[i * m + j] * cost.at(i, j);
        }
    }
    Ok((
        TransportPlan {
            coupling,
            n,
            m,
            row_targets: a_weights.to_vec(),
            col_targets: b_weights.to_vec(),
        },
        distance,
    ))
}

/// Scale guard for the exact solver.
const EXACT_LIMIT: usize = 4096;

/// Exact Wasserstein-1 between two weighted clouds, by solving the
/// transportation linear program with successive shortest paths.
pub fn exact_w1(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> Result<f64> {
    exact_w1_with_plan(a, b).map(|(d, _)| d)
}

/// Exact solve that also returns the optimal plan (used by the bound
/// diagnostics, which need the optimal coupling itself).
pub fn exact_w1_with_plan(
    a: &EmpiricalDistribution,
    b: &EmpiricalDistribution,
) -> Result<(f64, TransportPlan)> {
    let cost = cost_matrix(a, b)?;
    exact_transport(&cost, a.weights(), b.weights())
}

/// Exact transportation solve for an arbitrary nonnegative cost matrix.
pub fn exact_transport(
    cost: &CostMatrix,
    a_weights: &[f64],
    b_weights: &[f64],
) -> Result<(f64, TransportPlan)> {
    let (n, m) = cost.shape();
    if n * m > EXACT_LIMIT {
        return Err(Error::OracleScale {
            n,
            m,
            limit: EXACT_LIMIT,
        });
    }
    validate_weights(a_weights, n, "exact solver source weights")?;
    validate_weights(b_weights, m, "exact solver target weights")?;

    // Successive shortest paths on the bipartite transportation graph.
    // Nodes: 0..n sources, n..n+m sinks. Reduced cost of a forward arc is
    // c_ij + pi_i - pi_j', of a backward arc (flow > 0) the negation; the
    // Johnson potential update keeps both nonnegative so Dijkstra applies.
    let mut supply: Vec<f64> = a_weights.to_vec();
    let mut demand: Vec<f64> = b_weights.to_vec();
    let mut flow = vec![0.0f64; n * m];
    let mut potential = vec![0.0f64; n + m];

    let total_nodes = n + m;
    // Mass below this is treated as exhausted; keeps the augmentation count
    // finite under floating-point arithmetic.
    let mass_eps = 1e-15;
    let max_augmentations = 8 * (n + m) * (n + m) + 64;

    let mut remaining: f64 = supply.iter().sum();
    let mut iterations = 0usize;
    while remaining > mass_eps {
        iterations += 1;
        if iterations > max_augmentations {
            return Err(Error::InvalidParameter(
                "exact transport solver failed to converge".into(),
            ));
        }
        // Dijkstra over reduced costs from all sources with remaining supply.
        let mut dist = vec![f64::INFINITY; total_nodes];
        let mut prev = vec![usize::MAX; total_nodes];
        let mut done = vec![false; total_nodes];
        for i in 0..n {
            if supply[i] > mass_eps {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for v in 0..total_nodes {
                if !done[v] && dist[v] < best_d {
                    best_d = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                // forward arcs source -> sink
                let i = best;
                for j in 0..m {
                    let rc = cost.at(i, j) + potential[i] - potential[n + j];
                    let nd = dist[i] + rc.max(0.0);
                    if nd < dist[n + j] {
                        dist[n + j] = nd;
                        prev[n + j] = i;
                    }
                }
            } else {
                // backward arcs sink -> source where flow exists
                let j = best - n;
                for i in 0..n {
                    if flow[i * m + j] > mass_eps {
                        let rc = -cost.at(i, j) + potential[n + j] - potential[i];
                        let nd = dist[n + j] + rc.max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = n + j;
                        }
                    }
                }
            }
        }
        // Closest sink with unmet demand.
        let mut target = usize::MAX;
        let mut target_d = f64::INFINITY;
        for j in 0..m {
            if demand[j] > mass_eps && dist[n + j] < target_d {
                target_d = dist[n + j];
                target = n + j;
            }
        }
        if target == usize::MAX {
            return Err(Error::InvalidParameter(
                "exact transport solver: no augmenting path".into(),
            ));
        }
        // Walk the path backwards to find the bottleneck.
        let mut path = vec![target];
        let mut node = target;
        while prev[node] != usize::MAX {
            node = prev[node];
            path.push(node);
        }
        path.reverse();
        let start = path[0];
        let mut bottleneck = supply[start].min(demand[target - n]);
        for w in path.windows(2) {
            let (x, y) = (w[0], w[1]);
            if x >= n {
                // backward arc: sink x -> source y limited by existing flow
                bottleneck = bottleneck.min(flow[y * m + (x - n)]);
            }
        }
        // Augment.
        supply[start] -= bottleneck;
        demand[target - n] -= bottleneck;
        remaining -= bottleneck;
        for w in path.windows(2) {
            let (x, y) = (w[0], w[1]);
            if x < n {
                flow[x * m + (y - n)] += bottleneck;
            } else {
                flow[y * m + (x - n)] -= bottleneck;
            }
        }
        // pi_v += min(d_v, d_t); clamping at the target distance preserves
        // nonnegative reduced costs toward unsettled nodes.
        for v in 0..total_nodes {
            potential[v] += dist[v].min(target_d);
        }
    }

    let mut value = 0.0;
    for i in 0..n {
        for j in 0..m {
            value += flow[i * m + j] * cost.at(i, j);
        }
    }
    Ok((
        value,
        TransportPlan {
            coupling: flow,
            n,
            m,
            row_targets: a_weights.to_vec(),
            col_targets: b_weights.to_vec(),
        },
    ))
}

/// Closed-form 1-D Wasserstein-1 for equal-size uniform clouds: sort both
/// sides and average the absolute differences.
pub fn w1_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.len() != samples_b.len() {
        return Err(Error::DimensionMismatch {
            expected: samples_a.len(),
            got: samples_b.len(),
            context: "1-D W1 sample lengths",
        });
    }
    if samples_a.is_empty() {
        return Err(Error::EmptyInput("1-D W1 samples"));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of `sum_ij plan_ij * ||a_i - b_j||` with respect to the source
/// positions, with the plan held fixed (envelope gradient; exact at the
/// optimum). A floor keeps coincident points from dividing by zero.
pub fn sinkhorn_sample_grad(
    plan: &TransportPlan,
    a: &EmpiricalDistribution,
    b: &EmpiricalDistribution,
) -> Result<Vec<f64>> {
    if plan.n != a.len() || plan.m != b.len() {
        return Err(Error::DimensionMismatch {
            expected: plan.n,
            got: a.len(),
            context: "plan shape vs clouds",
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
            context: "cloud dims in transport gradient",
        });
    }
    let d = a.dim();
    let mut grad = vec![0.0; a.len() * d];
    for i in 0..a.len() {
        let ai = a.row(i);
        let gi = &mut grad[i * d..(i + 1) * d];
        for j in 0..b.len() {
            let p = plan.at(i, j);
            if p == 0.0 {
                continue;
            }
            let bj = b.row(j);
            let mut norm_sq = 0.0;
            for k in 0..d {
                let diff = ai[k] - bj[k];
                norm_sq += diff * diff;
            }
            let norm = norm_sq.sqrt().max(1e-9);
            for k in 0..d {
                gi[k] += p * (ai[k] - bj[k]) / norm;
            }
        }
    }
    Ok(grad)
}

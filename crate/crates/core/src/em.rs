//! Pairwise-likelihood EM.
//!
//! The E-step runs forward-backward on every within-cluster pair and
//! accumulates expected counts for the two component chains plus posterior
//! weights for each `(unit, occasion, u, v)` cell. The M-step updates the
//! chains in closed form and the regression part by weighted Newton-Raphson
//! (Bernoulli) or weighted least squares (Gaussian).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{build_tridiagonal, combine_pair_emissions, identity, unit_emission_table, FactoredChain};
use crate::error::{Error, Result};
use crate::forward::{pair_counts_into, CollapsedCounts, PairWorkspace};
use crate::model::{
    ClusterData, MeasurementFamily, ModelSpec, ParameterLayout, ParameterSet, PanelDataset, TransitionConstraint, UnitData,
};
use crate::regression::{weighted_least_squares, weighted_logistic, WeightedDesign};

/// Smallest and largest admissible `rho` for tridiagonal transitions.
pub const RHO_MIN: f64 = 1e-10;
pub const RHO_MAX: f64 = 0.5 - 1e-10;

/// Posterior weights below this are dropped from the regression M-step.
pub const MIN_WEIGHT: f64 = 1e-12;

/// Allowed decrease of the pairwise log-likelihood between EM iterations
/// before it is reported as an ascent violation.
pub const ASCENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop when `|delta pl| / (|pl| + 1)` falls below this.
    pub rel_tolerance: f64,
    pub n_random_starts: usize,
    pub seed: u64,
    pub newton_max_steps: usize,
    pub newton_tolerance: f64,
    /// Reserved for a weighted pairwise likelihood; must be `None`.
    pub pair_weighting: Option<String>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            rel_tolerance: 1e-8,
            n_random_starts: 10,
            seed: 0,
            newton_max_steps: 100,
            newton_tolerance: 1e-8,
            pair_weighting: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.newton_max_steps == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        if !(self.rel_tolerance > 0.0) || !(self.newton_tolerance > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if let Some(w) = &self.pair_weighting {
            return Err(Error::Unsupported(format!("weighted pairwise likelihood ('{w}')")));
        }
        Ok(())
    }
}

/// E-step output of a single cluster.
#[derive(Debug, Clone)]
pub struct ClusterStats {
    pub ploglik: f64,
    pub n_pairs: usize,
    pub cluster_initial: Vec<f64>,
    /// Row-major `k1 x k1`.
    pub cluster_transitions: Vec<f64>,
    pub unit_initial: Vec<f64>,
    /// Row-major `k2 x k2`.
    pub unit_transitions: Vec<f64>,
    /// `weights[unit][t][u * k2 + v]`, zero at masked occasions.
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Unordered pairs `(i, j)` of a cluster; a singleton cluster yields
/// `(0, None)` unless strict pairing is requested.
pub fn cluster_pairs(n_units: usize, strict: bool) -> Vec<(usize, Option<usize>)> {
    if n_units == 1 {
        return if strict { Vec::new() } else { vec![(0, None)] };
    }
    (0..n_units).flat_map(|i| (i + 1..n_units).map(move |j| (i, Some(j)))).collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

pub(crate) fn stats_for_cluster(
    h: usize,
    cluster: &ClusterData,
    theta: &ParameterSet,
    chain: &FactoredChain,
    spec: &ModelSpec,
    ws: &mut PairWorkspace,
) -> Result<ClusterStats> {
    let (k1, k2) = (spec.k1, spec.k2);
    let k = spec.augmented_states();
    let t_len = cluster.covariates.len();
    let n = cluster.units.len();
    let tables: Vec<Vec<Vec<f64>>> = cluster
        .units
        .iter()
        .map(|unit| (0..t_len).map(|t| unit_emission_table(t, cluster, unit, theta, spec.family)).collect())
        .collect();
    let mut stats = ClusterStats {
        ploglik: 0.0,
        n_pairs: 0,
        cluster_initial: vec![0.0; k1],
        cluster_transitions: vec![0.0; k1 * k1],
        unit_initial: vec![0.0; k2],
        unit_transitions: vec![0.0; k2 * k2],
        weights: vec![vec![vec![0.0; k1 * k2]; t_len]; n],
    };
    let mut emissions = vec![0.0; t_len * k];
    let mut cc = CollapsedCounts::default();
    for (i, j) in cluster_pairs(n, spec.strict_pairs) {
        for t in 0..t_len {
            let second = j.map(|j| tables[j][t].as_slice());
            combine_pair_emissions(&tables[i][t], second, k1, k2, &mut emissions[t * k..(t + 1) * k]);
        }
        let ll = pair_counts_into(chain, &emissions, ws, &mut cc).map_err(|e| match e {
            Error::ZeroEmission { occasion } => Error::ZeroLikelihood {
                cluster: h,
                unit_a: i,
                unit_b: j.unwrap_or(i),
                occasion,
            },
            other => other,
        })?;
        stats.ploglik += ll;
        stats.n_pairs += 1;
        add_into(&mut stats.cluster_initial, &cc.cluster_initial);
        add_into(&mut stats.cluster_transitions, &cc.cluster_transitions);
        let members: &[(usize, usize)] = match j {
            Some(j) => &[(i, 0), (j, 1)],
            None => &[(i, 0)],
        };
        for &(unit, m) in members {
            add_into(&mut stats.unit_initial, &cc.unit_initial[m]);
            add_into(&mut stats.unit_transitions, &cc.unit_transitions[m]);
            for t in 0..t_len {
                if cluster.units[unit].mask[t] {
                    add_into(&mut stats.weights[unit][t], &cc.joint[m][t]);
                }
            }
        }
    }
    Ok(stats)
}

/// Per-cluster E-step statistics, computed in parallel and returned in
/// cluster order.
pub fn all_cluster_stats(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<Vec<ClusterStats>> {
    let chain = FactoredChain::new(theta);
    data.clusters
        .par_iter()
        .enumerate()
        .map_init(PairWorkspace::default, |ws, (h, c)| stats_for_cluster(h, c, theta, &chain, spec, ws))
        .collect()
}

/// Pairwise log-likelihood contribution of cluster `h`.
pub fn cluster_loglik(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet, h: usize) -> Result<f64> {
    let chain = FactoredChain::new(theta);
    let mut ws = PairWorkspace::default();
    Ok(stats_for_cluster(h, &data.clusters[h], theta, &chain, spec, &mut ws)?.ploglik)
}

/// Sum over clusters of the log-likelihoods of all within-cluster pairs.
pub fn pairwise_loglik(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<f64> {
    // the reduction runs sequentially in cluster order for reproducibility
    Ok(all_cluster_stats(data, spec, theta)?.iter().map(|s| s.ploglik).sum())
}

/// Aggregated E-step output.
#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    pub ploglik: f64,
    pub n_pairs: usize,
    pub cluster_initial: Vec<f64>,
    pub cluster_transitions: Vec<f64>,
    pub unit_initial: Vec<f64>,
    pub unit_transitions: Vec<f64>,
    /// `weights[cluster][unit][t][u * k2 + v]`.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

impl ExpectedCounts {
    pub fn from_clusters(spec: &ModelSpec, stats: Vec<ClusterStats>) -> Self {
        let (k1, k2) = (spec.k1, spec.k2);
        let mut out = ExpectedCounts {
            ploglik: 0.0,
            n_pairs: 0,
            cluster_initial: vec![0.0; k1],
            cluster_transitions: vec![0.0; k1 * k1],
            unit_initial: vec![0.0; k2],
            unit_transitions: vec![0.0; k2 * k2],
            weights: Vec::with_capacity(stats.len()),
        };
        for s in stats {
            out.ploglik += s.ploglik;
            out.n_pairs += s.n_pairs;
            add_into(&mut out.cluster_initial, &s.cluster_initial);
            add_into(&mut out.cluster_transitions, &s.cluster_transitions);
            add_into(&mut out.unit_initial, &s.unit_initial);
            add_into(&mut out.unit_transitions, &s.unit_transitions);
            out.weights.push(s.weights);
        }
        out
    }
}

pub fn e_step(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<ExpectedCounts> {
    Ok(ExpectedCounts::from_clusters(spec, all_cluster_stats(data, spec, theta)?))
}

/// Sufficient statistics `(A, B, C)` of a tridiagonal-constant chain:
/// expected moves to an adjacent state, expected stays in the two end
/// states, and expected stays in interior states.
pub fn tridiagonal_statistics(transitions: &[f64], k: usize) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut c = 0.0;
    for r in 0..k {
        if r > 0 {
            a += transitions[r * k + r - 1];
        }
        if r + 1 < k {
            a += transitions[r * k + r + 1];
        }
        if r > 0 && r + 1 < k {
            c += transitions[r * k + r];
        }
    }
    let b = transitions[0] + transitions[k * k - 1];
    (a, b, c)
}

/// Maximizer of `A log(rho) + B log(1 - rho) + C log(1 - 2 rho)` over
/// `[RHO_MIN, RHO_MAX]`, or `None` when all counts vanish.
pub fn solve_tridiagonal_rho(a: f64, b: f64, c: f64) -> Option<f64> {
    if !(a + b + c > 0.0) {
        return None;
    }
    if a <= 0.0 {
        return Some(RHO_MIN);
    }
    if c <= 0.0 {
        return Some((a / (a + b)).clamp(RHO_MIN, RHO_MAX));
    }
    let score = |r: f64| a / r - b / (1.0 - r) - 2.0 * c / (1.0 - 2.0 * r);
    let curvature = |r: f64| -a / (r * r) - b / ((1.0 - r) * (1.0 - r)) - 4.0 * c / ((1.0 - 2.0 * r) * (1.0 - 2.0 * r));
    let (mut lo, mut hi) = (RHO_MIN, RHO_MAX);
    if score(lo) <= 0.0 {
        return Some(lo);
    }
    if score(hi) >= 0.0 {
        return Some(hi);
    }
    // score is strictly decreasing; keep a sign bracket around the root
    let mut r = (a / (a + b + 2.0 * c)).clamp(lo, hi) * 0.999;
    for _ in 0..200 {
        let g = score(r);
        if g > 0.0 {
            lo = r;
        } else {
            hi = r;
        }
        let mut next = r - g / curvature(r);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - r).abs() <= 1e-15 * r.max(1e-300) || hi - lo <= 1e-16 {
            return Some(next);
        }
        r = next;
    }
    Some(r)
}

/// Closed-form chain update.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainUpdate {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    /// Rows (zero-based) with no expected visits, left at their previous value.
    pub degenerate_rows: Vec<usize>,
}

fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = x.iter().sum();
    (s > 0.0 && s.is_finite()).then(|| x.iter().map(|v| v / s).collect())
}

/// Maximizes the expected complete-data log-likelihood of one chain.
pub fn m_step_chain(
    initial_counts: &[f64],
    transition_counts: &[f64],
    constraint: TransitionConstraint,
    previous_initial: &[f64],
    previous_transition: &[Vec<f64>],
) -> ChainUpdate {
    let k = initial_counts.len();
    let initial = normalized(initial_counts).unwrap_or_else(|| previous_initial.to_vec());
    let mut degenerate_rows = Vec::new();
    let transition = if k == 1 {
        identity(1)
    } else {
        match constraint {
            TransitionConstraint::Diagonal => identity(k),
            TransitionConstraint::Unconstrained => (0..k)
                .map(|r| {
                    normalized(&transition_counts[r * k..(r + 1) * k]).unwrap_or_else(|| {
                        degenerate_rows.push(r);
                        previous_transition[r].clone()
                    })
                })
                .collect(),
            TransitionConstraint::TridiagonalConstant => {
                let (a, b, c) = tridiagonal_statistics(transition_counts, k);
                match solve_tridiagonal_rho(a, b, c) {
                    Some(rho) => build_tridiagonal(k, rho).expect("rho kept inside (0, 0.5)"),
                    None => {
                        degenerate_rows.extend(0..k);
                        previous_transition.to_vec()
                    }
                }
            }
        }
    };
    ChainUpdate { initial, transition, degenerate_rows }
}

/// Expanded regression design: one pseudo-observation per unmasked
/// `(unit, occasion, u, v)` cell with positive posterior weight. Occasions of
/// a unit with identical response and covariates are merged by summing
/// their weights.
pub fn regression_design(counts: &ExpectedCounts, data: &PanelDataset, spec: &ModelSpec) -> WeightedDesign {
    let layout = ParameterLayout::new(spec);
    let (k1, k2) = (spec.k1, spec.k2);
    let mut design = WeightedDesign::new(layout.names[..layout.regression].to_vec());
    let p = design.n_cols();
    let ng = spec.cluster_covariates.len();
    let mut row = vec![0.0; p];
    let cov_start = k1 + k2 - 1;
    let same = |c: &ClusterData, unit: &UnitData, a: usize, b: usize| {
        let eq = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
        unit.responses[a].to_bits() == unit.responses[b].to_bits()
            && eq(&c.covariates[a], &c.covariates[b])
            && eq(&unit.covariates[a], &unit.covariates[b])
    };
    // occasions of a unit with identical response and covariates share rows
    let mut groups: Vec<(usize, Vec<f64>)> = Vec::new();
    for (cluster, cw) in data.clusters.iter().zip(&counts.weights) {
        for (unit, uw) in cluster.units.iter().zip(cw) {
            groups.clear();
            for (t, tw) in uw.iter().enumerate() {
                if !unit.mask[t] {
                    continue;
                }
                match groups.iter_mut().find(|(t0, _)| same(cluster, unit, *t0, t)) {
                    Some((_, w)) => w.iter_mut().zip(tw).for_each(|(a, b)| *a += b),
                    None => groups.push((t, tw.clone())),
                }
            }
            for (t, tw) in &groups {
                let t = *t;
                row[cov_start..cov_start + ng].copy_from_slice(&cluster.covariates[t]);
                row[cov_start + ng..].copy_from_slice(&unit.covariates[t]);
                for u in 0..k1 {
                    for v in 0..k2 {
                        let w = tw[u * k2 + v];
                        if w < MIN_WEIGHT {
                            continue;
                        }
                        row[..cov_start].iter_mut().for_each(|x| *x = 0.0);
                        row[0] = 1.0;
                        if u > 0 {
                            row[u] = 1.0;
                        }
                        if v > 0 {
                            row[k1 - 1 + v] = 1.0;
                        }
                        design.push(&row, unit.responses[t], w);
                    }
                }
            }
        }
    }
    design
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionUpdate {
    /// Intercept, `alpha[2..]`, `beta[2..]`, gamma, delta.
    pub coefficients: Vec<f64>,
    pub sigma2: Option<f64>,
    pub newton_steps: usize,
    /// Support points held at their previous values because a state is
    /// (nearly) empty.
    pub frozen: Vec<String>,
}

/// States carrying less than this share of the pseudo-observation weight
/// have their support point held fixed in the regression step.
pub const EMPTY_STATE_SHARE: f64 = 1e-9;

/// Support-point columns to hold fixed. A near-empty non-baseline state's
/// column is (nearly) zero; a near-empty baseline makes the heaviest other
/// state's column (nearly) equal to the intercept, so that one is held.
fn frozen_support_columns(design: &WeightedDesign, spec: &ModelSpec) -> Vec<usize> {
    let p = design.n_cols();
    let total: f64 = design.w.iter().sum();
    let mut frozen = Vec::new();
    for (first, k) in [(1, spec.k1), (spec.k1, spec.k2)] {
        let cols: Vec<usize> = (first..first + k - 1).collect();
        let mut weight = vec![0.0; k];
        for i in 0..design.n_rows() {
            let row = &design.x[i * p..(i + 1) * p];
            let state = cols.iter().position(|&j| row[j] != 0.0).map_or(0, |s| s + 1);
            weight[state] += design.w[i];
        }
        let empty = |s: usize| weight[s] < EMPTY_STATE_SHARE * total;
        frozen.extend((1..k).filter(|&s| empty(s)).map(|s| cols[s - 1]));
        if k > 1 && empty(0) {
            let heaviest = (1..k).max_by(|&a, &b| weight[a].total_cmp(&weight[b])).expect("k > 1");
            if !empty(heaviest) {
                frozen.push(cols[heaviest - 1]);
            }
        }
    }
    frozen
}

/// Design restricted to `keep`, with the other columns moved into the
/// offset at coefficients `b`.
fn hold_columns(design: &WeightedDesign, keep: &[usize], b: &[f64]) -> WeightedDesign {
    let mut out = WeightedDesign::new(keep.iter().map(|&j| design.names[j].clone()).collect());
    let mut row = vec![0.0; keep.len()];
    for i in 0..design.n_rows() {
        let full = design.row(i);
        for (r, &j) in row.iter_mut().zip(keep) {
            *r = full[j];
        }
        out.push(&row, design.y[i], design.w[i]);
        let held: f64 = (0..full.len()).filter(|j| !keep.contains(j)).map(|j| full[j] * b[j]).sum();
        out.offset.push(held);
    }
    out
}

/// Maximizes the expected complete-data measurement log-likelihood.
pub fn m_step_regression(
    counts: &ExpectedCounts,
    data: &PanelDataset,
    spec: &ModelSpec,
    theta: &ParameterSet,
    config: &EmConfig,
) -> Result<RegressionUpdate> {
    let mut design = regression_design(counts, data, spec);
    let mut coefficients = theta.regression_coefficients();
    let held = frozen_support_columns(&design, spec);
    let frozen = held.iter().map(|&j| design.names[j].clone()).collect();
    let keep: Vec<usize> = (0..design.n_cols()).filter(|j| !held.contains(j)).collect();
    if !held.is_empty() {
        design = hold_columns(&design, &keep, &coefficients);
    }
    let (solved, sigma2, newton_steps) = match spec.family {
        MeasurementFamily::Bernoulli => {
            let start: Vec<f64> = keep.iter().map(|&j| coefficients[j]).collect();
            let fit = weighted_logistic(&design, &start, config.newton_max_steps, config.newton_tolerance)?;
            (fit.coefficients, None, fit.steps)
        }
        MeasurementFamily::Gaussian => {
            let (b, s2) = weighted_least_squares(&design)?;
            (b, Some(s2.max(f64::MIN_POSITIVE)), 1)
        }
    };
    for (&j, b) in keep.iter().zip(solved) {
        coefficients[j] = b;
    }
    Ok(RegressionUpdate { coefficients, sigma2, newton_steps, frozen })
}

fn m_step(
    counts: &ExpectedCounts,
    data: &PanelDataset,
    spec: &ModelSpec,
    theta: &ParameterSet,
    config: &EmConfig,
    warnings: &mut Vec<String>,
) -> Result<ParameterSet> {
    let mut next = theta.clone();
    let cluster = m_step_chain(
        &counts.cluster_initial,
        &counts.cluster_transitions,
        spec.cluster_transition,
        &theta.lambda,
        &theta.cluster_transition,
    );
    let unit = m_step_chain(
        &counts.unit_initial,
        &counts.unit_transitions,
        spec.unit_transition,
        &theta.pi,
        &theta.unit_transition,
    );
    for (level, rows) in [("cluster", &cluster.degenerate_rows), ("unit", &unit.degenerate_rows)] {
        if !rows.is_empty() {
            let msg = format!("{level} chain: no expected visits to states {rows:?}; rows kept");
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
    }
    next.lambda = cluster.initial;
    next.cluster_transition = cluster.transition;
    next.pi = unit.initial;
    next.unit_transition = unit.transition;
    let reg = m_step_regression(counts, data, spec, theta, config)?;
    if !reg.frozen.is_empty() {
        let msg = format!("nearly empty states: {:?} held fixed", reg.frozen);
        if !warnings.contains(&msg) {
            warnings.push(msg);
        }
    }
    next.set_regression_coefficients(&reg.coefficients);
    next.sigma2 = reg.sigma2;
    Ok(next)
}

/// Mean and spread of the unmasked responses.
fn marginal_response(data: &PanelDataset) -> (f64, f64) {
    let ys: Vec<f64> = data
        .clusters
        .iter()
        .flat_map(|c| &c.units)
        .flat_map(|u| u.responses.iter().zip(&u.mask).filter(|(_, m)| **m).map(|(y, _)| *y))
        .collect();
    let n = ys.len().max(1) as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    (mean, var)
}

fn start_transition(k: usize, constraint: TransitionConstraint) -> Vec<Vec<f64>> {
    if k == 1 {
        return identity(1);
    }
    match constraint {
        TransitionConstraint::Diagonal => identity(k),
        TransitionConstraint::TridiagonalConstant => build_tridiagonal(k, 0.05).expect("valid rho"),
        TransitionConstraint::Unconstrained => (0..k)
            .map(|r| (0..k).map(|c| if r == c { 0.9 } else { 0.1 / (k - 1) as f64 }).collect())
            .collect(),
    }
}

/// Center and half-width of the starting support points.
fn start_location(data: &PanelDataset, spec: &ModelSpec) -> (f64, f64, Option<f64>) {
    let (mean, var) = marginal_response(data);
    match spec.family {
        MeasurementFamily::Bernoulli => {
            let p = mean.clamp(0.01, 0.99);
            let logit = (p / (1.0 - p)).ln();
            (logit, logit.abs().clamp(0.5, 2.5), None)
        }
        MeasurementFamily::Gaussian => {
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            (mean, sd, Some(if var > 0.0 { var } else { 1.0 }))
        }
    }
}

fn equispaced(k: usize, half_width: f64) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|u| 2.0 * half_width * u as f64 / (k - 1) as f64).collect()
}

/// Deterministic starting point: equispaced support points around the
/// marginal response level, uniform initial probabilities and persistent
/// transitions.
pub fn deterministic_start(data: &PanelDataset, spec: &ModelSpec) -> ParameterSet {
    let (center, half, sigma2) = start_location(data, spec);
    let shift = if spec.k1 > 1 { half } else { 0.0 } + if spec.k2 > 1 { half } else { 0.0 };
    ParameterSet {
        lambda: vec![1.0 / spec.k1 as f64; spec.k1],
        cluster_transition: start_transition(spec.k1, spec.cluster_transition),
        pi: vec![1.0 / spec.k2 as f64; spec.k2],
        unit_transition: start_transition(spec.k2, spec.unit_transition),
        intercept: center - shift,
        alpha: equispaced(spec.k1, half),
        beta: equispaced(spec.k2, half),
        gamma: vec![0.0; spec.cluster_covariates.len()],
        delta: vec![0.0; spec.unit_covariates.len()],
        sigma2,
    }
}

fn random_distribution(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn random_transition(k: usize, constraint: TransitionConstraint, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k == 1 {
        return identity(1);
    }
    match constraint {
        TransitionConstraint::Diagonal => identity(k),
        TransitionConstraint::TridiagonalConstant => {
            build_tridiagonal(k, rng.gen_range(0.01..0.2)).expect("valid rho")
        }
        TransitionConstraint::Unconstrained => (0..k)
            .map(|r| {
                let stay = rng.gen_range(0.6..0.95);
                let off = random_distribution(k - 1, rng);
                let mut it = off.into_iter();
                (0..k).map(|c| if c == r { stay } else { (1.0 - stay) * it.next().unwrap() }).collect()
            })
            .collect(),
    }
}

/// Seeded perturbation of the deterministic start. `start` numbers the
/// random starts from 1.
pub fn random_start(data: &PanelDataset, spec: &ModelSpec, seed: u64, start: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start);
    let mut theta = deterministic_start(data, spec);
    let (_, half, _) = start_location(data, spec);
    let noise = Normal::new(0.0, 0.5 * half).expect("positive scale");
    for a in theta.alpha.iter_mut().skip(1) {
        *a += noise.sample(&mut rng);
    }
    for b in theta.beta.iter_mut().skip(1) {
        *b += noise.sample(&mut rng);
    }
    theta.lambda = random_distribution(spec.k1, &mut rng);
    theta.pi = random_distribution(spec.k2, &mut rng);
    theta.cluster_transition = random_transition(spec.k1, spec.cluster_transition, &mut rng);
    theta.unit_transition = random_transition(spec.k2, spec.unit_transition, &mut rng);
    theta
}

/// One EM run from a given start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRun {
    pub theta: ParameterSet,
    pub ploglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Pairwise log-likelihood at every iteration; the last entry belongs to `theta`.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl EmRun {
    /// Largest decrease of the pairwise log-likelihood between iterations
    /// (zero for a monotone trace).
    pub fn max_decrease(&self) -> f64 {
        self.trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }
}

pub fn run_em(
    data: &PanelDataset,
    spec: &ModelSpec,
    start: ParameterSet,
    config: &EmConfig,
) -> Result<EmRun> {
    start.validate(spec)?;
    let mut theta = start;
    let mut trace: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    for iter in 1..=config.max_iterations {
        let counts = e_step(data, spec, &theta)?;
        let pl = counts.ploglik;
        if let Some(&prev) = trace.last() {
            if pl < prev - ASCENT_TOL {
                warnings.push(format!("iteration {iter}: pairwise log-likelihood fell by {:.3e}", prev - pl));
            }
            trace.push(pl);
            if (pl - prev).abs() / (pl.abs() + 1.0) < config.rel_tolerance {
                converged = true;
                break;
            }
        } else {
            trace.push(pl);
        }
        if iter == config.max_iterations {
            break;
        }
        theta = m_step(&counts, data, spec, &theta, config, &mut warnings)?;
    }
    Ok(EmRun {
        theta,
        ploglik: *trace.last().expect("at least one iteration"),
        iterations: trace.len(),
        converged,
        trace,
        warnings,
    })
}

/// Ordering of states after a fit: `order[new] = old`.
fn state_order(support: &[f64], constraint: TransitionConstraint) -> Vec<usize> {
    let k = support.len();
    let identity_order: Vec<usize> = (0..k).collect();
    match constraint {
        // only the reversal keeps the banded pattern
        TransitionConstraint::TridiagonalConstant => {
            if k > 1 && support[k - 1] < support[0] {
                identity_order.into_iter().rev().collect()
            } else {
                identity_order
            }
        }
        _ => {
            let mut order = identity_order;
            order.sort_by(|&a, &b| support[a].total_cmp(&support[b]));
            order
        }
    }
}

fn permute_chain(initial: &[f64], transition: &[Vec<f64>], order: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let init = order.iter().map(|&o| initial[o]).collect();
    let trans = order.iter().map(|&r| order.iter().map(|&c| transition[r][c]).collect()).collect();
    (init, trans)
}

fn permute_support(support: &[f64], order: &[usize]) -> (Vec<f64>, f64) {
    let shifted: Vec<f64> = order.iter().map(|&o| support[o]).collect();
    let base = shifted[0];
    (shifted.iter().map(|s| s - base).collect(), base)
}

/// Relabels states so support points ascend (cluster and unit chains
/// separately), re-zeroing the first support point and moving the shift
/// into the intercept. Returns the new parameters and both orders.
pub fn canonical_order(theta: &ParameterSet, spec: &ModelSpec) -> (ParameterSet, Vec<usize>, Vec<usize>) {
    let co = state_order(&theta.alpha, spec.cluster_transition);
    let uo = state_order(&theta.beta, spec.unit_transition);
    let mut out = theta.clone();
    let (alpha, sa) = permute_support(&theta.alpha, &co);
    let (beta, sb) = permute_support(&theta.beta, &uo);
    out.alpha = alpha;
    out.beta = beta;
    out.intercept += sa + sb;
    (out.lambda, out.cluster_transition) = permute_chain(&theta.lambda, &theta.cluster_transition, &co);
    (out.pi, out.unit_transition) = permute_chain(&theta.pi, &theta.unit_transition, &uo);
    (out, co, uo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    /// 0 for the deterministic start, then 1.. for random starts.
    pub start: usize,
    /// Final pairwise log-likelihood, `None` when the start failed.
    pub ploglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: ParameterSet,
    pub ploglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub best_start: usize,
    pub starts: Vec<StartSummary>,
    /// Iteration trace of the selected start.
    pub trace: Vec<f64>,
    /// `cluster_state_order[new] = old` label applied after fitting.
    pub cluster_state_order: Vec<usize>,
    pub unit_state_order: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Runs EM from the deterministic start and `n_random_starts` random
/// starts and keeps the run with the largest pairwise log-likelihood.
pub fn fit(data: &PanelDataset, spec: &ModelSpec, config: &EmConfig) -> Result<FitResult> {
    spec.validate()?;
    config.validate()?;
    let mut best: Option<(usize, EmRun)> = None;
    let mut starts = Vec::new();
    let mut first_error = None;
    for s in 0..=config.n_random_starts {
        let start = if s == 0 {
            deterministic_start(data, spec)
        } else {
            random_start(data, spec, config.seed, s as u64)
        };
        match run_em(data, spec, start, config) {
            Ok(run) => {
                starts.push(StartSummary {
                    start: s,
                    ploglik: Some(run.ploglik),
                    iterations: run.iterations,
                    converged: run.converged,
                    error: None,
                });
                if best.as_ref().map_or(true, |(_, b)| run.ploglik > b.ploglik) {
                    best = Some((s, run));
                }
            }
            Err(e) => {
                starts.push(StartSummary {
                    start: s,
                    ploglik: None,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let Some((best_start, run)) = best else {
        return Err(first_error.expect("at least one start ran"));
    };
    finish_fit(data, spec, config, best_start, run, starts)
}

/// Runs EM from `start` alone; the result reports it as start 0.
pub fn fit_from(data: &PanelDataset, spec: &ModelSpec, start: ParameterSet, config: &EmConfig) -> Result<FitResult> {
    spec.validate()?;
    config.validate()?;
    let run = run_em(data, spec, start, config)?;
    let summary = StartSummary {
        start: 0,
        ploglik: Some(run.ploglik),
        iterations: run.iterations,
        converged: run.converged,
        error: None,
    };
    finish_fit(data, spec, config, 0, run, vec![summary])
}

/// Canonical relabelling and bookkeeping for the selected run.
fn finish_fit(
    data: &PanelDataset,
    spec: &ModelSpec,
    config: &EmConfig,
    best_start: usize,
    run: EmRun,
    starts: Vec<StartSummary>,
) -> Result<FitResult> {
    let (theta, cluster_state_order, unit_state_order) = canonical_order(&run.theta, spec);
    let ploglik = pairwise_loglik(data, spec, &theta)?;
    let mut warnings = run.warnings;
    if !run.converged {
        warnings.push(format!("no convergence within {} iterations", config.max_iterations));
    }
    Ok(FitResult {
        theta,
        ploglik,
        iterations: run.iterations,
        converged: run.converged,
        best_start,
        starts,
        trace: run.trace,
        cluster_state_order,
        unit_state_order,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn state_design(k2: usize, states: &[usize]) -> (WeightedDesign, ModelSpec) {
        let spec = ModelSpec { k1: 1, k2, ..ModelSpec::default() };
        let mut d = WeightedDesign::new((0..k2).map(|j| format!("c{j}")).collect());
        for &v in states {
            let mut row = vec![0.0; k2];
            row[0] = 1.0;
            if v > 0 {
                row[v] = 1.0;
            }
            d.push(&row, 1.0, 1.0);
        }
        (d, spec)
    }

    #[test]
    fn empty_states_are_held() {
        let (d, spec) = state_design(3, &[0, 1, 1, 0]);
        assert_eq!(frozen_support_columns(&d, &spec), vec![2]);
        // empty baseline: the heaviest remaining state stands in for it
        let (d, spec) = state_design(3, &[1, 2, 2]);
        assert_eq!(frozen_support_columns(&d, &spec), vec![2]);
        let (d, spec) = state_design(3, &[0, 1, 2]);
        assert!(frozen_support_columns(&d, &spec).is_empty());
        let held = hold_columns(&d, &[0, 1], &[0.5, 1.0, -2.0]);
        assert_eq!(held.offset, vec![0.0, 0.0, -2.0]);
    }

    #[test]
    fn pairs_of_a_cluster() {
        assert_eq!(cluster_pairs(3, false).len(), 3);
        assert_eq!(cluster_pairs(1, false), vec![(0, None)]);
        assert!(cluster_pairs(1, true).is_empty());
    }

    #[test]
    fn two_state_tridiagonal_closed_form() {
        let counts = [45.0, 5.0, 5.0, 45.0];
        let (a, b, c) = tridiagonal_statistics(&counts, 2);
        assert_eq!((a, b, c), (10.0, 90.0, 0.0));
        let upd = m_step_chain(&[1.0, 1.0], &counts, TransitionConstraint::TridiagonalConstant, &[0.5, 0.5], &identity(2));
        assert_abs_diff_eq!(upd.transition[0][1], 0.10, epsilon = 1e-15);
    }

    #[test]
    fn unconstrained_row_normalization() {
        let upd = m_step_chain(
            &[2.0, 6.0],
            &[3.0, 1.0, 0.0, 0.0],
            TransitionConstraint::Unconstrained,
            &[0.5, 0.5],
            &[vec![0.5, 0.5], vec![0.3, 0.7]],
        );
        assert_eq!(upd.initial, vec![0.25, 0.75]);
        assert_eq!(upd.transition[0], vec![0.75, 0.25]);
        assert_eq!(upd.transition[1], vec![0.3, 0.7]);
        assert_eq!(upd.degenerate_rows, vec![1]);
    }

    #[test]
    fn diagonal_is_never_updated() {
        let upd = m_step_chain(&[1.0, 3.0], &[5.0, 1.0, 1.0, 5.0], TransitionConstraint::Diagonal, &[0.5, 0.5], &identity(2));
        assert_eq!(upd.transition, identity(2));
    }

    #[test]
    fn rho_boundaries() {
        assert_eq!(solve_tridiagonal_rho(0.0, 0.0, 0.0), None);
        assert_eq!(solve_tridiagonal_rho(0.0, 5.0, 5.0), Some(RHO_MIN));
        assert_eq!(solve_tridiagonal_rho(9.0, 1.0, 0.0), Some(RHO_MAX));
    }

    #[test]
    fn canonical_order_sorts_support_points() {
        let spec = ModelSpec { k1: 2, k2: 1, lag_handling: crate::model::LagHandling::None, ..Default::default() };
        let theta = ParameterSet {
            lambda: vec![0.3, 0.7],
            cluster_transition: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            pi: vec![1.0],
            unit_transition: identity(1),
            intercept: 1.0,
            alpha: vec![0.0, -2.0],
            beta: vec![0.0],
            gamma: vec![],
            delta: vec![],
            sigma2: None,
        };
        let (c, order, _) = canonical_order(&theta, &spec);
        assert_eq!(order, vec![1, 0]);
        assert_eq!(c.alpha, vec![0.0, 2.0]);
        assert_eq!(c.intercept, -1.0);
        assert_eq!(c.lambda, vec![0.7, 0.3]);
        assert_eq!(c.cluster_transition, vec![vec![0.8, 0.2], vec![0.1, 0.9]]);
        c.validate(&spec).unwrap();
    }
}

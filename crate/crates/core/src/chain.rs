//! Transition matrices and the augmented pair-level chain.
//!
//! A pair of units `(i, j)` in the same cluster is driven by the joint latent
//! state `w = (u, v1, v2)`: the cluster state and the two unit states. The
//! joint chain has `k1 * k2^2` states with flat index
//! `u * k2^2 + v1 * k2 + v2` (zero-based), and its initial and transition
//! probabilities factor over the three component chains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterData, MeasurementFamily, ModelSpec, ParameterSet, UnitData};

/// `k x k` identity transition matrix.
pub fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|r| (0..k).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Tridiagonal transition matrix with constant off-diagonal `rho`: end
/// rows stay with probability `1 - rho`, interior rows with `1 - 2 rho`.
pub fn build_tridiagonal(k: usize, rho: f64) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return Err(Error::InvalidParameters(format!(
            "tridiagonal transitions need at least 2 states, got {k}"
        )));
    }
    if !(rho > 0.0 && rho < 0.5) {
        return Err(Error::InvalidParameters(format!("rho must lie in (0, 0.5), got {rho}")));
    }
    let mut m = vec![vec![0.0; k]; k];
    for (r, row) in m.iter_mut().enumerate() {
        let interior = r > 0 && r + 1 < k;
        row[r] = if interior { 1.0 - 2.0 * rho } else { 1.0 - rho };
        if r > 0 {
            row[r - 1] = rho;
        }
        if r + 1 < k {
            row[r + 1] = rho;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedChain {
    pub k1: usize,
    pub k2: usize,
    /// Initial probabilities over joint states.
    pub initial: Vec<f64>,
    /// Dense joint transition matrix, rows indexed by the previous state.
    pub transition: Vec<Vec<f64>>,
}

impl AugmentedChain {
    pub fn n_states(&self) -> usize {
        self.k1 * self.k2 * self.k2
    }

    pub fn index(&self, u: usize, v1: usize, v2: usize) -> usize {
        (u * self.k2 + v1) * self.k2 + v2
    }

    /// Inverse of [`AugmentedChain::index`].
    pub fn state(&self, w: usize) -> (usize, usize, usize) {
        let kk = self.k2 * self.k2;
        (w / kk, (w % kk) / self.k2, w % self.k2)
    }
}

fn check_square(m: &[Vec<f64>], k: usize, what: &str) -> Result<()> {
    if m.len() != k || m.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension(format!("{what} must be {k}x{k}")));
    }
    Ok(())
}

/// Joint chain of a cluster and two of its units.
pub fn compose_augmented(
    lambda: &[f64],
    cluster_transition: &[Vec<f64>],
    pi: &[f64],
    unit_transition: &[Vec<f64>],
) -> Result<AugmentedChain> {
    let (k1, k2) = (lambda.len(), pi.len());
    if k1 == 0 || k2 == 0 {
        return Err(Error::Dimension("empty initial distribution".into()));
    }
    check_square(cluster_transition, k1, "cluster transition")?;
    check_square(unit_transition, k2, "unit transition")?;
    let k = k1 * k2 * k2;
    let mut chain = AugmentedChain { k1, k2, initial: vec![0.0; k], transition: vec![vec![0.0; k]; k] };
    for u in 0..k1 {
        for v1 in 0..k2 {
            for v2 in 0..k2 {
                let w = chain.index(u, v1, v2);
                chain.initial[w] = lambda[u] * pi[v1] * pi[v2];
                for ub in 0..k1 {
                    for vb1 in 0..k2 {
                        for vb2 in 0..k2 {
                            let wb = chain.index(ub, vb1, vb2);
                            chain.transition[wb][w] = cluster_transition[ub][u]
                                * unit_transition[vb1][v1]
                                * unit_transition[vb2][v2];
                        }
                    }
                }
            }
        }
    }
    Ok(chain)
}

/// The augmented chain kept in factored form. Matrix-vector products with
/// the joint transition matrix are applied one component at a time.
#[derive(Debug, Clone)]
pub struct FactoredChain {
    pub k1: usize,
    pub k2: usize,
    pub lambda: Vec<f64>,
    /// Row-major `k1 x k1`.
    pub cluster_transition: Vec<f64>,
    pub pi: Vec<f64>,
    /// Row-major `k2 x k2`.
    pub unit_transition: Vec<f64>,
    cluster_transposed: Vec<f64>,
    unit_transposed: Vec<f64>,
    joint_initial: Vec<f64>,
}

fn transposed(m: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|x| m[(x % n) * n + x / n]).collect()
}

impl FactoredChain {
    pub fn new(theta: &ParameterSet) -> Self {
        let (k1, k2) = (theta.lambda.len(), theta.pi.len());
        let cluster_transition = theta.cluster_transition.concat();
        let unit_transition = theta.unit_transition.concat();
        let mut joint_initial = Vec::with_capacity(k1 * k2 * k2);
        for &l in &theta.lambda {
            for &p1 in &theta.pi {
                for &p2 in &theta.pi {
                    joint_initial.push(l * p1 * p2);
                }
            }
        }
        Self {
            k1,
            k2,
            lambda: theta.lambda.clone(),
            cluster_transposed: transposed(&cluster_transition, k1),
            unit_transposed: transposed(&unit_transition, k2),
            cluster_transition,
            pi: theta.pi.clone(),
            unit_transition,
            joint_initial,
        }
    }

    pub fn n_states(&self) -> usize {
        self.k1 * self.k2 * self.k2
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.k1, self.k2, self.k2]
    }

    pub fn initial(&self) -> &[f64] {
        &self.joint_initial
    }

    /// `out = Phi' x`, propagating a distribution one step forward.
    pub fn propagate(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dims();
        mode_product(x, d, 0, &self.cluster_transposed, out);
        mode_product(out, d, 1, &self.unit_transposed, scratch);
        mode_product(scratch, d, 2, &self.unit_transposed, out);
    }

    /// `out = Phi x`, pulling a function of the next state back one step.
    pub fn pull_back(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dims();
        mode_product(x, d, 0, &self.cluster_transition, out);
        mode_product(out, d, 1, &self.unit_transition, scratch);
        mode_product(scratch, d, 2, &self.unit_transition, out);
    }
}

/// Multiplies a 3-way tensor along one mode by a square row-major matrix:
/// `out[.., i, ..] = sum_j m[i][j] x[.., j, ..]`.
pub(crate) fn mode_product(x: &[f64], dims: [usize; 3], mode: usize, m: &[f64], out: &mut [f64]) {
    let n = dims[mode];
    let inner: usize = dims[mode + 1..].iter().product();
    let outer: usize = dims[..mode].iter().product();
    let block = n * inner;
    for o in 0..outer {
        let xb = &x[o * block..(o + 1) * block];
        let ob = &mut out[o * block..(o + 1) * block];
        for i in 0..n {
            let mrow = &m[i * n..(i + 1) * n];
            let orow = &mut ob[i * inner..(i + 1) * inner];
            let x0 = &xb[..inner];
            for r in 0..inner {
                orow[r] = mrow[0] * x0[r];
            }
            for j in 1..n {
                let xs = &xb[j * inner..(j + 1) * inner];
                let c = mrow[j];
                for r in 0..inner {
                    orow[r] += c * xs[r];
                }
            }
        }
    }
}

/// Linear predictor without the latent support points:
/// `intercept + x' gamma + z' delta`.
pub fn fixed_predictor(theta: &ParameterSet, cluster_cov: &[f64], unit_cov: &[f64]) -> f64 {
    theta.intercept
        + cluster_cov.iter().zip(&theta.gamma).map(|(x, g)| x * g).sum::<f64>()
        + unit_cov.iter().zip(&theta.delta).map(|(z, d)| z * d).sum::<f64>()
}

/// Probability (Bernoulli) or density (Gaussian) of one response given its
/// full linear predictor.
pub fn response_density(y: f64, eta: f64, family: MeasurementFamily, sigma2: Option<f64>) -> f64 {
    match family {
        MeasurementFamily::Bernoulli => {
            // P(Y = y) = 1 / (1 + exp(-s * eta)) with s = +1 for y = 1, -1 for y = 0
            let s = if y == 1.0 { eta } else { -eta };
            if s >= 0.0 {
                1.0 / (1.0 + (-s).exp())
            } else {
                let e = s.exp();
                e / (1.0 + e)
            }
        }
        MeasurementFamily::Gaussian => {
            let s2 = sigma2.expect("Gaussian family carries sigma2");
            let r = y - eta;
            (-0.5 * r * r / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
        }
    }
}

/// Conditional densities of one unit's response at occasion `t` for every
/// `(u, v)` cell, `u`-major. A masked occasion yields all ones.
pub fn unit_emission_table(
    t: usize,
    cluster: &ClusterData,
    unit: &UnitData,
    theta: &ParameterSet,
    family: MeasurementFamily,
) -> Vec<f64> {
    let (k1, k2) = (theta.alpha.len(), theta.beta.len());
    if !unit.mask[t] {
        return vec![1.0; k1 * k2];
    }
    let base = fixed_predictor(theta, &cluster.covariates[t], &unit.covariates[t]);
    let y = unit.responses[t];
    let mut out = Vec::with_capacity(k1 * k2);
    for a in &theta.alpha {
        for b in &theta.beta {
            out.push(response_density(y, base + a + b, family, theta.sigma2));
        }
    }
    out
}

/// Joint emission vector of a pair from two per-unit tables.
pub(crate) fn combine_pair_emissions(first: &[f64], second: Option<&[f64]>, k1: usize, k2: usize, out: &mut [f64]) {
    for u in 0..k1 {
        for v1 in 0..k2 {
            let a = first[u * k2 + v1];
            let row = &mut out[(u * k2 + v1) * k2..(u * k2 + v1 + 1) * k2];
            match second {
                Some(s) => row.iter_mut().zip(&s[u * k2..(u + 1) * k2]).for_each(|(o, b)| *o = a * b),
                None => row.iter_mut().for_each(|o| *o = a),
            }
        }
    }
}

/// Conditional probability (or density) of the pair's responses at occasion
/// `t` (zero-based) for every joint state `w = (u, v1, v2)`. Passing `None`
/// as the second unit treats it as fully masked.
pub fn pair_emission_vector(
    t: usize,
    cluster: &ClusterData,
    first: &UnitData,
    second: Option<&UnitData>,
    theta: &ParameterSet,
    spec: &ModelSpec,
) -> Vec<f64> {
    let a = unit_emission_table(t, cluster, first, theta, spec.family);
    let b = second.map(|s| unit_emission_table(t, cluster, s, theta, spec.family));
    let mut out = vec![0.0; spec.augmented_states()];
    combine_pair_emissions(&a, b.as_deref(), spec.k1, spec.k2, &mut out);
    out
}

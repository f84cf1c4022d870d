//! Scaled forward-backward recursions on the augmented pair chain.
//!
//! The forward vector is rescaled to sum one at every occasion and the log of
//! each scale factor is accumulated, so long panels never underflow.

use serde::{Deserialize, Serialize};

use crate::chain::{mode_product, AugmentedChain, FactoredChain};
use crate::error::{Error, Result};

/// Posterior expectations of the latent-state indicators for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPosterior {
    /// `gammas[t][w]`: posterior probability of joint state `w` at occasion `t`.
    pub gammas: Vec<Vec<f64>>,
    /// `xi[t - 1][wb * k + w]`: posterior probability of moving from `wb` at
    /// occasion `t - 1` to `w` at occasion `t`, for `t = 1..T` (zero-based).
    pub xi: Vec<Vec<f64>>,
    pub loglik: f64,
}

impl PairPosterior {
    pub fn gamma1(&self) -> &[f64] {
        &self.gammas[0]
    }
}

/// Scaled forward pass; returns the normalized forward vectors and the
/// scale factors.
fn forward_dense(chain: &AugmentedChain, emissions: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let k = chain.n_states();
    if emissions.is_empty() {
        return Err(Error::Dimension("no occasions".into()));
    }
    if let Some(bad) = emissions.iter().position(|m| m.len() != k) {
        return Err(Error::Dimension(format!("emission vector at occasion {} has wrong length", bad + 1)));
    }
    let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(emissions.len());
    let mut scales = Vec::with_capacity(emissions.len());
    let mut q: Vec<f64> = chain.initial.iter().zip(&emissions[0]).map(|(p, m)| p * m).collect();
    for t in 0..emissions.len() {
        if t > 0 {
            let prev = &alphas[t - 1];
            q = (0..k)
                .map(|w| emissions[t][w] * (0..k).map(|wb: usize| chain.transition[wb][w] * prev[wb]).sum::<f64>())
                .collect();
        }
        let c: f64 = q.iter().sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(Error::ZeroEmission { occasion: t + 1 });
        }
        q.iter_mut().for_each(|x| *x /= c);
        scales.push(c);
        alphas.push(q.clone());
    }
    Ok((alphas, scales))
}

/// Log-probability of a pair's observed sequence given the joint chain and
/// per-occasion emission vectors.
pub fn forward_loglik(chain: &AugmentedChain, emissions: &[Vec<f64>]) -> Result<f64> {
    let (_, scales) = forward_dense(chain, emissions)?;
    Ok(scales.iter().map(|c| c.ln()).sum())
}

/// Forward-backward smoothing on the dense joint chain.
pub fn posteriors(chain: &AugmentedChain, emissions: &[Vec<f64>]) -> Result<PairPosterior> {
    let k = chain.n_states();
    let (alphas, scales) = forward_dense(chain, emissions)?;
    let loglik = scales.iter().map(|c| c.ln()).sum();
    let t_len = emissions.len();
    let mut betas = vec![vec![1.0; k]; t_len];
    let mut xi = vec![Vec::new(); t_len - 1];
    for t in (1..t_len).rev() {
        let b: Vec<f64> = (0..k).map(|w| emissions[t][w] * betas[t][w] / scales[t]).collect();
        let mut x = vec![0.0; k * k];
        for wb in 0..k {
            let mut acc = 0.0;
            for w in 0..k {
                let p = chain.transition[wb][w] * b[w];
                acc += p;
                x[wb * k + w] = alphas[t - 1][wb] * p;
            }
            betas[t - 1][wb] = acc;
        }
        xi[t - 1] = x;
    }
    let gammas = alphas
        .iter()
        .zip(&betas)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();
    Ok(PairPosterior { gammas, xi, loglik })
}

/// Posterior expected counts of one pair, marginalized onto the component
/// chains.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapsedCounts {
    /// Expected cluster state at the first occasion (`k1`).
    pub cluster_initial: Vec<f64>,
    /// Expected cluster transitions summed over occasions (row-major `k1 x k1`).
    pub cluster_transitions: Vec<f64>,
    /// `cluster_occupancy[t][u]`.
    pub cluster_occupancy: Vec<Vec<f64>>,
    /// Expected initial unit state, per pair member (`k2` each).
    pub unit_initial: [Vec<f64>; 2],
    /// Expected unit transitions summed over occasions, per pair member
    /// (row-major `k2 x k2`).
    pub unit_transitions: [Vec<f64>; 2],
    /// `joint[member][t][u * k2 + v]`: posterior of cluster state `u` and
    /// that member's state `v` at occasion `t`.
    pub joint: [Vec<Vec<f64>>; 2],
}

impl CollapsedCounts {
    fn zeros(k1: usize, k2: usize, t_len: usize) -> Self {
        let mut out = Self::default();
        out.reset(k1, k2, t_len);
        out
    }

    /// Zeroes every count, reusing the allocations.
    fn reset(&mut self, k1: usize, k2: usize, t_len: usize) {
        fn zero(v: &mut Vec<f64>, n: usize) {
            v.clear();
            v.resize(n, 0.0);
        }
        fn zero_rows(v: &mut Vec<Vec<f64>>, rows: usize, n: usize) {
            v.resize_with(rows, Vec::new);
            v.iter_mut().for_each(|r| zero(r, n));
        }
        zero(&mut self.cluster_initial, k1);
        zero(&mut self.cluster_transitions, k1 * k1);
        zero_rows(&mut self.cluster_occupancy, t_len, k1);
        for m in 0..2 {
            zero(&mut self.unit_initial[m], k2);
            zero(&mut self.unit_transitions[m], k2 * k2);
            zero_rows(&mut self.joint[m], t_len, k1 * k2);
        }
    }

    fn fill_occupancy(&mut self, t: usize, gamma: &[f64], k1: usize, k2: usize) {
        for u in 0..k1 {
            for v1 in 0..k2 {
                for v2 in 0..k2 {
                    let g = gamma[(u * k2 + v1) * k2 + v2];
                    self.cluster_occupancy[t][u] += g;
                    self.joint[0][t][u * k2 + v1] += g;
                    self.joint[1][t][u * k2 + v2] += g;
                }
            }
        }
        if t == 0 {
            self.cluster_initial.copy_from_slice(&self.cluster_occupancy[0]);
            for m in 0..2 {
                for u in 0..k1 {
                    for v in 0..k2 {
                        self.unit_initial[m][v] += self.joint[m][0][u * k2 + v];
                    }
                }
            }
        }
    }
}

/// Sums a pair posterior over the configurations of the joint state that
/// share each component-chain state.
pub fn collapse_posteriors(p: &PairPosterior, k1: usize, k2: usize) -> CollapsedCounts {
    let t_len = p.gammas.len();
    let k = k1 * k2 * k2;
    let mut out = CollapsedCounts::zeros(k1, k2, t_len);
    for (t, g) in p.gammas.iter().enumerate() {
        out.fill_occupancy(t, g, k1, k2);
    }
    let split = |w: usize| (w / (k2 * k2), (w / k2) % k2, w % k2);
    for x in &p.xi {
        for wb in 0..k {
            let (ub, vb1, vb2) = split(wb);
            for w in 0..k {
                let val = x[wb * k + w];
                if val == 0.0 {
                    continue;
                }
                let (u, v1, v2) = split(w);
                out.cluster_transitions[ub * k1 + u] += val;
                out.unit_transitions[0][vb1 * k2 + v1] += val;
                out.unit_transitions[1][vb2 * k2 + v2] += val;
            }
        }
    }
    out
}

/// Reusable buffers for [`pair_counts`].
#[derive(Debug, Default)]
pub struct PairWorkspace {
    alphas: Vec<f64>,
    scales: Vec<f64>,
    beta: Vec<f64>,
    b: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
    gamma: Vec<f64>,
    s_cluster: Vec<f64>,
    s_unit: [Vec<f64>; 2],
}

/// Log-likelihood and collapsed posterior counts of one pair, computed on
/// the factored chain without forming the dense joint transition matrix.
///
/// `emissions` holds `T` joint emission vectors concatenated.
pub fn pair_counts(chain: &FactoredChain, emissions: &[f64], ws: &mut PairWorkspace) -> Result<(f64, CollapsedCounts)> {
    let mut out = CollapsedCounts::default();
    let loglik = pair_counts_into(chain, emissions, ws, &mut out)?;
    Ok((loglik, out))
}

/// [`pair_counts`] writing into a reused `out`.
pub fn pair_counts_into(
    chain: &FactoredChain,
    emissions: &[f64],
    ws: &mut PairWorkspace,
    out: &mut CollapsedCounts,
) -> Result<f64> {
    let (k1, k2) = (chain.k1, chain.k2);
    let k = chain.n_states();
    let t_len = emissions.len() / k;
    let dims = chain.dims();
    ws.alphas.resize(t_len * k, 0.0);
    ws.scales.resize(t_len, 0.0);
    ws.beta.resize(k, 0.0);
    ws.b.resize(k, 0.0);
    ws.tmp.resize(k, 0.0);
    ws.tmp2.resize(k, 0.0);
    ws.gamma.resize(k, 0.0);

    let init = chain.initial();
    for t in 0..t_len {
        let m = &emissions[t * k..(t + 1) * k];
        if t == 0 {
            ws.tmp.iter_mut().zip(init.iter().zip(m)).for_each(|(o, (p, e))| *o = p * e);
        } else {
            let (done, _) = ws.alphas.split_at(t * k);
            chain.propagate(&done[(t - 1) * k..], &mut ws.tmp, &mut ws.tmp2);
            ws.tmp.iter_mut().zip(m).for_each(|(o, e)| *o *= e);
        }
        let c: f64 = ws.tmp.iter().sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(Error::ZeroEmission { occasion: t + 1 });
        }
        ws.scales[t] = c;
        ws.alphas[t * k..(t + 1) * k].iter_mut().zip(&ws.tmp).for_each(|(a, x)| *a = x / c);
    }
    let loglik = ws.scales.iter().map(|c| c.ln()).sum();

    out.reset(k1, k2, t_len);
    // Unnormalized transition sums; multiplied by the transition entries at the end.
    let mut s_cluster = std::mem::take(&mut ws.s_cluster);
    let mut s_unit = std::mem::take(&mut ws.s_unit);
    s_cluster.clear();
    s_cluster.resize(k1 * k1, 0.0);
    for s in &mut s_unit {
        s.clear();
        s.resize(k2 * k2, 0.0);
    }
    ws.beta.iter_mut().for_each(|x| *x = 1.0);
    for t in (0..t_len).rev() {
        let alpha_t = &ws.alphas[t * k..(t + 1) * k];
        ws.gamma.iter_mut().zip(alpha_t.iter().zip(&ws.beta)).for_each(|(g, (a, b))| *g = a * b);
        out.fill_occupancy(t, &ws.gamma, k1, k2);
        if t == 0 {
            break;
        }
        let m = &emissions[t * k..(t + 1) * k];
        let c = ws.scales[t];
        ws.b.iter_mut().zip(m.iter().zip(&ws.beta)).for_each(|(o, (e, b))| *o = e * b / c);
        let a = &ws.alphas[(t - 1) * k..t * k];

        // cluster: S(ub, u) = sum_{vb1, vb2} a(ub, vb1, vb2) [(I x Pi x Pi) b](u, vb1, vb2)
        mode_product(&ws.b, dims, 1, &chain.unit_transition, &mut ws.tmp);
        mode_product(&ws.tmp, dims, 2, &chain.unit_transition, &mut ws.tmp2);
        let kk = k2 * k2;
        for ub in 0..k1 {
            for u in 0..k1 {
                s_cluster[ub * k1 + u] += dot(&a[ub * kk..(ub + 1) * kk], &ws.tmp2[u * kk..(u + 1) * kk]);
            }
        }
        // the cluster mode completes Phi b
        mode_product(&ws.tmp2, dims, 0, &chain.cluster_transition, &mut ws.beta);
        // first unit: S(vb1, v1) = sum_{ub, vb2} a(ub, vb1, vb2) [(Lambda x I x Pi) b](ub, v1, vb2)
        mode_product(&ws.b, dims, 0, &chain.cluster_transition, &mut ws.tmp);
        mode_product(&ws.tmp, dims, 2, &chain.unit_transition, &mut ws.tmp2);
        for ub in 0..k1 {
            for vb1 in 0..k2 {
                for v1 in 0..k2 {
                    let ra = &a[(ub * k2 + vb1) * k2..(ub * k2 + vb1 + 1) * k2];
                    let rb = &ws.tmp2[(ub * k2 + v1) * k2..(ub * k2 + v1 + 1) * k2];
                    s_unit[0][vb1 * k2 + v1] += dot(ra, rb);
                }
            }
        }
        // second unit: S(vb2, v2) = sum_{ub, vb1} a(ub, vb1, vb2) [(Lambda x Pi x I) b](ub, vb1, v2)
        mode_product(&ws.tmp, dims, 1, &chain.unit_transition, &mut ws.tmp2);
        for ub in 0..k1 {
            for vb1 in 0..k2 {
                let base = (ub * k2 + vb1) * k2;
                for vb2 in 0..k2 {
                    for v2 in 0..k2 {
                        s_unit[1][vb2 * k2 + v2] += a[base + vb2] * ws.tmp2[base + v2];
                    }
                }
            }
        }
    }
    for (o, (s, p)) in out.cluster_transitions.iter_mut().zip(s_cluster.iter().zip(&chain.cluster_transition)) {
        *o = s * p;
    }
    for m in 0..2 {
        for (o, (s, p)) in out.unit_transitions[m].iter_mut().zip(s_unit[m].iter().zip(&chain.unit_transition)) {
            *o = s * p;
        }
    }
    ws.s_cluster = s_cluster;
    ws.s_unit = s_unit;
    Ok(loglik)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

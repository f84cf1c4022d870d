//! Shared helpers: random models, random panels and brute-force oracles that
//! enumerate latent paths directly from the component chains.

#![allow(dead_code)]

use nested_hmm::chain::{build_tridiagonal, identity};
use nested_hmm::model::{
    validate_dataset, ClusterData, LagHandling, MeasurementFamily, ModelSpec, PanelDataset, ParameterSet,
    TransitionConstraint, UnitData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn spec(k1: usize, k2: usize) -> ModelSpec {
    ModelSpec { k1, k2, lag_handling: LagHandling::None, ..Default::default() }
}

/// Probability vector with every entry at least `floor / k`.
pub fn random_distribution(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| 0.1 + rng.gen::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // put the rounding residue on the last entry so the sum is exactly 1
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = 1.0 - head;
    p
}

pub fn random_transition(k: usize, c: TransitionConstraint, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k == 1 {
        return identity(1);
    }
    match c {
        TransitionConstraint::Unconstrained => (0..k).map(|_| random_distribution(k, rng)).collect(),
        TransitionConstraint::Diagonal => identity(k),
        TransitionConstraint::TridiagonalConstant => build_tridiagonal(k, rng.gen_range(0.02..0.45)).unwrap(),
    }
}

pub fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParameterSet {
    let support = |k: usize, rng: &mut ChaCha8Rng| {
        let mut s = vec![0.0];
        s.extend((1..k).map(|_| rng.gen_range(-2.0..2.0)));
        s
    };
    ParameterSet {
        lambda: random_distribution(spec.k1, rng),
        cluster_transition: random_transition(spec.k1, spec.cluster_transition, rng),
        pi: random_distribution(spec.k2, rng),
        unit_transition: random_transition(spec.k2, spec.unit_transition, rng),
        intercept: rng.gen_range(-1.0..1.0),
        alpha: support(spec.k1, rng),
        beta: support(spec.k2, rng),
        gamma: spec.cluster_covariates.iter().map(|_| rng.gen_range(-0.8..0.8)).collect(),
        delta: spec.unit_covariates.iter().map(|_| rng.gen_range(-0.8..0.8)).collect(),
        sigma2: match spec.family {
            MeasurementFamily::Gaussian => Some(rng.gen_range(0.5..2.0)),
            MeasurementFamily::Bernoulli => None,
        },
    }
}

fn random_response(family: MeasurementFamily, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        MeasurementFamily::Bernoulli => f64::from(u8::from(rng.gen::<bool>())),
        MeasurementFamily::Gaussian => rng.gen_range(-2.0..2.0),
    }
}

/// Panel with random responses and covariates, validated against `spec`.
pub fn random_panel(
    spec: &ModelSpec,
    sizes: &[usize],
    occasions: usize,
    rng: &mut ChaCha8Rng,
) -> PanelDataset {
    let clusters = sizes
        .iter()
        .enumerate()
        .map(|(h, &n)| ClusterData {
            id: format!("c{h}"),
            covariates: (0..occasions)
                .map(|_| spec.cluster_covariates.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            units: (0..n)
                .map(|i| UnitData {
                    id: format!("u{i}"),
                    responses: (0..occasions).map(|_| random_response(spec.family, rng)).collect(),
                    covariates: (0..occasions)
                        .map(|_| spec.unit_covariates.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect(),
                    mask: vec![true; occasions],
                })
                .collect(),
        })
        .collect();
    let raw = PanelDataset {
        clusters,
        occasions,
        unit_covariate_names: spec.unit_covariates.clone(),
        cluster_covariate_names: spec.cluster_covariates.clone(),
    };
    validate_dataset(&raw, spec).unwrap()
}

pub fn oracle_density(y: f64, eta: f64, family: MeasurementFamily, sigma2: Option<f64>) -> f64 {
    match family {
        MeasurementFamily::Bernoulli => {
            let p = 1.0 / (1.0 + (-eta).exp());
            if y == 1.0 {
                p
            } else {
                1.0 - p
            }
        }
        MeasurementFamily::Gaussian => {
            let s2 = sigma2.unwrap();
            (-(y - eta).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
        }
    }
}

/// Density of one unit's response at `t` given the two latent states; 1 when
/// masked.
pub fn oracle_unit_density(c: &ClusterData, unit: &UnitData, t: usize, u: usize, v: usize, theta: &ParameterSet, spec: &ModelSpec) -> f64 {
    if !unit.mask[t] {
        return 1.0;
    }
    let mut eta = theta.intercept + theta.alpha[u] + theta.beta[v];
    eta += c.covariates[t].iter().zip(&theta.gamma).map(|(x, g)| x * g).sum::<f64>();
    eta += unit.covariates[t].iter().zip(&theta.delta).map(|(x, d)| x * d).sum::<f64>();
    oracle_density(unit.responses[t], eta, spec.family, theta.sigma2)
}

/// Every state path of length `t_len` over `k` states.
pub fn all_paths(k: usize, t_len: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![vec![]];
    for _ in 0..t_len {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    paths
}

pub fn path_probability(path: &[usize], initial: &[f64], transition: &[Vec<f64>]) -> f64 {
    let mut p = initial[path[0]];
    for w in path.windows(2) {
        p *= transition[w[0]][w[1]];
    }
    p
}

/// Exact manifest log-likelihood of one cluster: sum over the cluster path,
/// and for each unit an inner sum over its own path.
pub fn brute_cluster_loglik(c: &ClusterData, theta: &ParameterSet, spec: &ModelSpec, t_len: usize) -> f64 {
    let u_paths = all_paths(spec.k1, t_len);
    let v_paths = all_paths(spec.k2, t_len);
    let mut total = 0.0;
    for up in &u_paths {
        let mut p = path_probability(up, &theta.lambda, &theta.cluster_transition);
        for unit in &c.units {
            let mut unit_sum = 0.0;
            for vp in &v_paths {
                let mut q = path_probability(vp, &theta.pi, &theta.unit_transition);
                for t in 0..t_len {
                    q *= oracle_unit_density(c, unit, t, up[t], vp[t], theta, spec);
                }
                unit_sum += q;
            }
            p *= unit_sum;
        }
        total += p;
    }
    total.ln()
}

/// Pair log-likelihood by enumerating every joint path of the augmented
/// chain, built from the component chains.
pub fn brute_pair_loglik(
    c: &ClusterData,
    a: &UnitData,
    b: &UnitData,
    theta: &ParameterSet,
    spec: &ModelSpec,
    t_len: usize,
) -> f64 {
    let (k1, k2) = (spec.k1, spec.k2);
    let k = k1 * k2 * k2;
    let split = |w: usize| (w / (k2 * k2), (w / k2) % k2, w % k2);
    let mut total = 0.0;
    for path in all_paths(k, t_len) {
        let (u0, v10, v20) = split(path[0]);
        let mut p = theta.lambda[u0] * theta.pi[v10] * theta.pi[v20];
        for w in path.windows(2) {
            let (ub, vb1, vb2) = split(w[0]);
            let (u, v1, v2) = split(w[1]);
            p *= theta.cluster_transition[ub][u] * theta.unit_transition[vb1][v1] * theta.unit_transition[vb2][v2];
        }
        for (t, &w) in path.iter().enumerate() {
            let (u, v1, v2) = split(w);
            p *= oracle_unit_density(c, a, t, u, v1, theta, spec) * oracle_unit_density(c, b, t, u, v2, theta, spec);
        }
        total += p;
    }
    total.ln()
}

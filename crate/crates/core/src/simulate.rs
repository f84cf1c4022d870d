//! Draws multilevel panels from the nested hidden-Markov model.
//!
//! Every cluster and every unit has its own ChaCha stream (stream id
//! `cluster << 24 | slot`, slot 0 for the cluster itself and `i + 1` for
//! unit `i`), so clusters can be generated in any order or in parallel and
//! still reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::fixed_predictor;
use crate::error::{Error, Result};
use crate::model::{ClusterData, MeasurementFamily, ModelSpec, PanelDataset, ParameterSet, UnitData};
use crate::regression::logistic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateGenerator {
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Binary { rate: f64 },
    /// Previous response; `initial` at the first occasion.
    LaggedResponse { initial: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    pub generator: CovariateGenerator,
    /// Draw once per unit (or cluster) and repeat it at every occasion.
    pub time_invariant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub clusters: usize,
    pub cluster_size_min: usize,
    pub cluster_size_max: usize,
    pub occasions: usize,
    pub spec: ModelSpec,
    pub theta: ParameterSet,
    pub cluster_covariates: Vec<CovariateColumn>,
    pub unit_covariates: Vec<CovariateColumn>,
    pub seed: u64,
}

/// True latent paths (zero-based states).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub cluster_states: Vec<Vec<usize>>,
    /// `unit_states[cluster][unit][t]`.
    pub unit_states: Vec<Vec<Vec<usize>>>,
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.theta.validate(&self.spec)?;
        if self.clusters == 0 || self.occasions == 0 {
            return Err(Error::Config("simulation needs at least one cluster and one occasion".into()));
        }
        if self.cluster_size_min == 0 || self.cluster_size_min > self.cluster_size_max {
            return Err(Error::Config(format!(
                "invalid cluster size range {}..{}",
                self.cluster_size_min, self.cluster_size_max
            )));
        }
        let names = |cols: &[CovariateColumn]| cols.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
        if names(&self.cluster_covariates) != self.spec.cluster_covariates
            || names(&self.unit_covariates) != self.spec.unit_covariates
        {
            return Err(Error::Config("covariate generators must match the model's covariates in order".into()));
        }
        let lagged = |c: &&CovariateColumn| matches!(c.generator, CovariateGenerator::LaggedResponse { .. });
        if self.cluster_covariates.iter().any(|c| lagged(&c)) {
            return Err(Error::Config("the lagged response is a unit-level covariate".into()));
        }
        if self.unit_covariates.iter().filter(lagged).count() > 1 {
            return Err(Error::Config("at most one lagged-response column".into()));
        }
        for col in self.cluster_covariates.iter().chain(&self.unit_covariates) {
            match col.generator {
                CovariateGenerator::Uniform { low, high } if !(low < high) => {
                    return Err(Error::Config(format!("'{}': uniform needs low < high", col.name)))
                }
                CovariateGenerator::Binary { rate } if !(0.0..=1.0).contains(&rate) => {
                    return Err(Error::Config(format!("'{}': binary rate must lie in [0, 1]", col.name)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn draw_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if x < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Markov path of length `t_len`.
pub fn draw_path(initial: &[f64], transition: &[Vec<f64>], t_len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut path = Vec::with_capacity(t_len);
    let mut s = draw_categorical(initial, rng);
    path.push(s);
    for _ in 1..t_len {
        s = draw_categorical(&transition[s], rng);
        path.push(s);
    }
    path
}

fn draw_columns(cols: &[CovariateColumn], t_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut draw = |g: &CovariateGenerator| match *g {
        CovariateGenerator::Constant(v) => v,
        CovariateGenerator::Uniform { low, high } => rng.gen_range(low..high),
        CovariateGenerator::Binary { rate } => f64::from(u8::from(rng.gen::<f64>() < rate)),
        CovariateGenerator::LaggedResponse { initial } => initial,
    };
    let mut out = vec![vec![0.0; cols.len()]; t_len];
    for (j, col) in cols.iter().enumerate() {
        if col.time_invariant {
            let v = draw(&col.generator);
            out.iter_mut().for_each(|row| row[j] = v);
        } else {
            out.iter_mut().for_each(|row| row[j] = draw(&col.generator));
        }
    }
    out
}

fn stream(seed: u64, cluster: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((cluster as u64) << 24) | slot as u64);
    rng
}

fn simulate_cluster(design: &SimDesign, h: usize) -> (ClusterData, Vec<usize>, Vec<Vec<usize>>) {
    let theta = &design.theta;
    let t_len = design.occasions;
    let mut rng = stream(design.seed, h, 0);
    let size = rng.gen_range(design.cluster_size_min..=design.cluster_size_max);
    let covariates = draw_columns(&design.cluster_covariates, t_len, &mut rng);
    let u_path = draw_path(&theta.lambda, &theta.cluster_transition, t_len, &mut rng);
    let lag_col = design
        .unit_covariates
        .iter()
        .position(|c| matches!(c.generator, CovariateGenerator::LaggedResponse { .. }));
    let noise = theta.sigma2.map(|s2| Normal::new(0.0, s2.sqrt()).expect("positive variance"));

    let mut units = Vec::with_capacity(size);
    let mut v_paths = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = stream(design.seed, h, i + 1);
        let mut unit_covs = draw_columns(&design.unit_covariates, t_len, &mut rng);
        let v_path = draw_path(&theta.pi, &theta.unit_transition, t_len, &mut rng);
        let mut responses = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if let (Some(j), Some(&prev)) = (lag_col, responses.last()) {
                unit_covs[t][j] = prev;
            }
            let eta = fixed_predictor(theta, &covariates[t], &unit_covs[t])
                + theta.alpha[u_path[t]]
                + theta.beta[v_path[t]];
            let y = match design.spec.family {
                MeasurementFamily::Bernoulli => f64::from(u8::from(rng.gen::<f64>() < logistic(eta))),
                MeasurementFamily::Gaussian => eta + noise.as_ref().expect("Gaussian sigma2").sample(&mut rng),
            };
            responses.push(y);
        }
        units.push(UnitData {
            id: (i + 1).to_string(),
            responses,
            covariates: unit_covs,
            mask: vec![true; t_len],
        });
        v_paths.push(v_path);
    }
    (ClusterData { id: (h + 1).to_string(), covariates, units }, u_path, v_paths)
}

/// Simulated panel plus the latent paths that generated it.
pub fn simulate(design: &SimDesign) -> Result<(PanelDataset, LatentRecord)> {
    design.validate()?;
    let drawn: Vec<_> = (0..design.clusters).into_par_iter().map(|h| simulate_cluster(design, h)).collect();
    let mut clusters = Vec::with_capacity(drawn.len());
    let mut latent = LatentRecord { cluster_states: Vec::new(), unit_states: Vec::new() };
    for (c, u, v) in drawn {
        clusters.push(c);
        latent.cluster_states.push(u);
        latent.unit_states.push(v);
    }
    Ok((
        PanelDataset {
            clusters,
            occasions: design.occasions,
            unit_covariate_names: design.spec.unit_covariates.clone(),
            cluster_covariate_names: design.spec.cluster_covariates.clone(),
        },
        latent,
    ))
}

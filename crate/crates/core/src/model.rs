//! Panel data, model specification and parameter types.
//!
//! The free-parameter vector used for scores, Hessians and the sandwich
//! covariance has a fixed layout (see [`ParameterLayout`]):
//!
//! 1. `intercept`
//! 2. `alpha[u]` for cluster states `u = 2..k1`
//! 3. `beta[v]` for unit states `v = 2..k2`
//! 4. `gamma[name]`, one per selected cluster covariate
//! 5. `delta[name]`, one per selected unit covariate
//! 6. `log_sigma2` (Gaussian family only)
//! 7. cluster chain: `lambda[u]` as `log(lambda_u / lambda_1)` for `u = 2..k1`,
//!    then the transition block
//! 8. unit chain: `pi[v]` as `log(pi_v / pi_1)` for `v = 2..k2`, then the
//!    transition block
//!
//! A transition block is empty for `Diagonal` or a single state, holds
//! `logit(2 rho)` for `TridiagonalConstant`, and holds the row-wise log-ratios
//! `log(P[r][c] / P[r][1])`, `c = 2..k`, row by row for `Unconstrained`.

use serde::{Deserialize, Serialize};

use crate::chain::{build_tridiagonal, identity};
use crate::error::{Error, Result};

/// Tolerance on probability sums and constrained-pattern checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Log-ratios are clamped to this magnitude so boundary probabilities stay
/// representable on the unconstrained scale.
const MAX_LOG_RATIO: f64 = 800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementFamily {
    Bernoulli,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LagHandling {
    /// Every occasion contributes to the likelihood.
    None,
    /// The lagged-response column is set to zero at the first occasion.
    ZeroFill,
    /// The first occasion is excluded from the measurement model; the latent
    /// chains still start there.
    ConditionOnFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionConstraint {
    Unconstrained,
    /// Moves only to adjacent states, all with the same probability `rho`.
    TridiagonalConstant,
    /// Identity transitions: states never change.
    Diagonal,
}

impl TransitionConstraint {
    /// Number of free transition parameters for a chain with `k` states.
    pub fn free_parameters(self, k: usize) -> usize {
        if k <= 1 {
            return 0;
        }
        match self {
            TransitionConstraint::Unconstrained => k * (k - 1),
            TransitionConstraint::TridiagonalConstant => 1,
            TransitionConstraint::Diagonal => 0,
        }
    }
}

impl std::str::FromStr for TransitionConstraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconstrained" => Ok(Self::Unconstrained),
            "tridiagonal" | "tridiagonal-constant" => Ok(Self::TridiagonalConstant),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(Error::Config(format!("unknown transition constraint '{other}'"))),
        }
    }
}

impl std::str::FromStr for MeasurementFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" | "binary" => Ok(Self::Bernoulli),
            "gaussian" | "normal" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!("unknown measurement family '{other}'"))),
        }
    }
}

impl std::str::FromStr for LagHandling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "zero-fill" => Ok(Self::ZeroFill),
            "condition-on-first" => Ok(Self::ConditionOnFirst),
            other => Err(Error::Config(format!("unknown lag handling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of cluster-level latent states.
    pub k1: usize,
    /// Number of unit-level latent states.
    pub k2: usize,
    pub cluster_transition: TransitionConstraint,
    pub unit_transition: TransitionConstraint,
    pub family: MeasurementFamily,
    pub lag_handling: LagHandling,
    /// Unit covariate holding the lagged response, if any.
    pub lag_column: Option<String>,
    pub cluster_covariates: Vec<String>,
    pub unit_covariates: Vec<String>,
    /// Drop singleton clusters from the pairwise likelihood instead of
    /// contributing their single-unit marginal.
    pub strict_pairs: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            k1: 1,
            k2: 1,
            cluster_transition: TransitionConstraint::Unconstrained,
            unit_transition: TransitionConstraint::Unconstrained,
            family: MeasurementFamily::Bernoulli,
            lag_handling: LagHandling::ConditionOnFirst,
            lag_column: None,
            cluster_covariates: Vec::new(),
            unit_covariates: Vec::new(),
            strict_pairs: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::InvalidSpec("state counts must be at least 1".into()));
        }
        for (k, c, level) in [
            (self.k1, self.cluster_transition, "cluster"),
            (self.k2, self.unit_transition, "unit"),
        ] {
            if c == TransitionConstraint::TridiagonalConstant && k < 2 {
                return Err(Error::InvalidSpec(format!(
                    "tridiagonal {level} transitions need at least 2 states, got {k}"
                )));
            }
        }
        if self.lag_handling == LagHandling::ZeroFill {
            match &self.lag_column {
                None => {
                    return Err(Error::InvalidSpec(
                        "lag_handling = zero-fill requires lag_column".into(),
                    ))
                }
                Some(name) if !self.unit_covariates.contains(name) => {
                    return Err(Error::InvalidSpec(format!(
                        "lag column '{name}' is not among the selected unit covariates"
                    )))
                }
                _ => {}
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in self.cluster_covariates.iter().chain(&self.unit_covariates) {
            if !seen.insert(name) {
                return Err(Error::InvalidSpec(format!("covariate '{name}' selected twice")));
            }
        }
        Ok(())
    }

    /// Number of augmented pair-chain states, `k1 * k2^2`.
    pub fn augmented_states(&self) -> usize {
        self.k1 * self.k2 * self.k2
    }

    /// Number of regression coefficients: intercept, support points and
    /// covariate effects.
    pub fn regression_len(&self) -> usize {
        1 + (self.k1 - 1) + (self.k2 - 1) + self.cluster_covariates.len() + self.unit_covariates.len()
    }

    pub fn free_parameter_count(&self) -> usize {
        ParameterLayout::new(self).len()
    }

    /// Same spec with a different grid cell. Tridiagonal constraints fall
    /// back to unconstrained for a single state, where both are trivial.
    pub fn with_states(&self, k1: usize, k2: usize) -> Self {
        let adapt = |k: usize, c: TransitionConstraint| {
            if k < 2 && c == TransitionConstraint::TridiagonalConstant {
                TransitionConstraint::Unconstrained
            } else {
                c
            }
        };
        Self {
            k1,
            k2,
            cluster_transition: adapt(k1, self.cluster_transition),
            unit_transition: adapt(k2, self.unit_transition),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitData {
    pub id: String,
    /// One response per occasion.
    pub responses: Vec<f64>,
    /// One covariate vector per occasion.
    pub covariates: Vec<Vec<f64>>,
    /// `true` when the response at that occasion enters the likelihood.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub id: String,
    /// One covariate vector per occasion.
    pub covariates: Vec<Vec<f64>>,
    pub units: Vec<UnitData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub clusters: Vec<ClusterData>,
    pub occasions: usize,
    pub unit_covariate_names: Vec<String>,
    pub cluster_covariate_names: Vec<String>,
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.clusters.iter().map(|c| c.units.len()).sum()
    }

    /// Number of within-cluster unordered pairs.
    pub fn n_pairs(&self) -> usize {
        self.clusters
            .iter()
            .map(|c| c.units.len() * c.units.len().saturating_sub(1) / 2)
            .sum()
    }
}

/// Checks every dataset invariant against `spec`, keeps only the selected
/// covariate columns (in spec order) and sets the measurement masks
/// according to the lag handling.
pub fn validate_dataset(data: &PanelDataset, spec: &ModelSpec) -> Result<PanelDataset> {
    spec.validate()?;
    let t_len = data.occasions;
    if t_len == 0 {
        return Err(Error::InvalidDataset("panel has no occasions".into()));
    }
    if data.clusters.is_empty() {
        return Err(Error::InvalidDataset("panel has no clusters".into()));
    }
    if spec.lag_handling == LagHandling::ConditionOnFirst && t_len < 2 {
        return Err(Error::InvalidDataset(
            "condition-on-first lag handling needs at least 2 occasions".into(),
        ));
    }

    let resolve = |selected: &[String], available: &[String], level: &'static str| {
        selected
            .iter()
            .map(|name| {
                available
                    .iter()
                    .position(|a| a == name)
                    .ok_or_else(|| Error::UnknownCovariate { name: name.clone(), level })
            })
            .collect::<Result<Vec<usize>>>()
    };
    let cluster_cols = resolve(&spec.cluster_covariates, &data.cluster_covariate_names, "cluster")?;
    let unit_cols = resolve(&spec.unit_covariates, &data.unit_covariate_names, "unit")?;
    let lag_col = spec
        .lag_column
        .as_ref()
        .filter(|_| spec.lag_handling == LagHandling::ZeroFill)
        .and_then(|name| spec.unit_covariates.iter().position(|c| c == name));

    let mut cluster_ids = std::collections::BTreeSet::new();
    let mut clusters = Vec::with_capacity(data.clusters.len());
    for cluster in &data.clusters {
        let cid = cluster.id.as_str();
        if !cluster_ids.insert(cid) {
            return Err(Error::data(cid, None, None, "duplicate cluster id"));
        }
        if cluster.units.is_empty() {
            return Err(Error::data(cid, None, None, "cluster has no units"));
        }
        if cluster.covariates.len() != t_len {
            return Err(Error::data(
                cid,
                None,
                None,
                format!("expected {t_len} cluster covariate vectors, found {}", cluster.covariates.len()),
            ));
        }
        let mut covariates = Vec::with_capacity(t_len);
        for (t, row) in cluster.covariates.iter().enumerate() {
            if row.len() != data.cluster_covariate_names.len() {
                return Err(Error::data(cid, None, Some(t + 1), "ragged cluster covariate vector"));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::data(
                    cid,
                    None,
                    Some(t + 1),
                    format!("missing or non-finite value in '{}'", data.cluster_covariate_names[j]),
                ));
            }
            covariates.push(cluster_cols.iter().map(|&j| row[j]).collect());
        }

        let mut unit_ids = std::collections::BTreeSet::new();
        let mut units = Vec::with_capacity(cluster.units.len());
        for unit in &cluster.units {
            let uid = unit.id.as_str();
            if !unit_ids.insert(uid) {
                return Err(Error::data(cid, Some(uid), None, "duplicate unit id within cluster"));
            }
            if unit.responses.len() != t_len {
                return Err(Error::data(
                    cid,
                    Some(uid),
                    None,
                    format!("expected {t_len} responses, found {}", unit.responses.len()),
                ));
            }
            if unit.covariates.len() != t_len {
                return Err(Error::data(
                    cid,
                    Some(uid),
                    None,
                    format!("expected {t_len} covariate vectors, found {}", unit.covariates.len()),
                ));
            }
            for (t, &y) in unit.responses.iter().enumerate() {
                if !y.is_finite() {
                    return Err(Error::data(cid, Some(uid), Some(t + 1), "missing or non-finite response"));
                }
                if spec.family == MeasurementFamily::Bernoulli && y != 0.0 && y != 1.0 {
                    return Err(Error::data(
                        cid,
                        Some(uid),
                        Some(t + 1),
                        format!("binary response must be 0 or 1, found {y}"),
                    ));
                }
            }
            let mut unit_covs = Vec::with_capacity(t_len);
            for (t, row) in unit.covariates.iter().enumerate() {
                if row.len() != data.unit_covariate_names.len() {
                    return Err(Error::data(cid, Some(uid), Some(t + 1), "ragged unit covariate vector"));
                }
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::data(
                        cid,
                        Some(uid),
                        Some(t + 1),
                        format!("missing or non-finite value in '{}'", data.unit_covariate_names[j]),
                    ));
                }
                let mut selected: Vec<f64> = unit_cols.iter().map(|&j| row[j]).collect();
                if t == 0 {
                    if let Some(lag) = lag_col {
                        selected[lag] = 0.0;
                    }
                }
                unit_covs.push(selected);
            }
            let mut mask = vec![true; t_len];
            if spec.lag_handling == LagHandling::ConditionOnFirst {
                mask[0] = false;
            }
            units.push(UnitData {
                id: unit.id.clone(),
                responses: unit.responses.clone(),
                covariates: unit_covs,
                mask,
            });
        }
        clusters.push(ClusterData { id: cluster.id.clone(), covariates, units });
    }

    Ok(PanelDataset {
        clusters,
        occasions: t_len,
        unit_covariate_names: spec.unit_covariates.clone(),
        cluster_covariate_names: spec.cluster_covariates.clone(),
    })
}

/// Full parameter vector on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// Initial cluster-state probabilities.
    pub lambda: Vec<f64>,
    /// Cluster-state transition matrix, rows indexed by the previous state.
    pub cluster_transition: Vec<Vec<f64>>,
    /// Initial unit-state probabilities.
    pub pi: Vec<f64>,
    /// Unit-state transition matrix, rows indexed by the previous state.
    pub unit_transition: Vec<Vec<f64>>,
    pub intercept: f64,
    /// Cluster-state support points, `alpha[0] == 0`.
    pub alpha: Vec<f64>,
    /// Unit-state support points, `beta[0] == 0`.
    pub beta: Vec<f64>,
    /// Cluster covariate effects.
    pub gamma: Vec<f64>,
    /// Unit covariate effects.
    pub delta: Vec<f64>,
    /// Residual variance, Gaussian family only.
    pub sigma2: Option<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x) || x.is_nan()) {
        return Err(Error::InvalidParameters(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidParameters(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_transition(m: &[Vec<f64>], k: usize, c: TransitionConstraint, what: &str) -> Result<()> {
    if m.len() != k || m.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidParameters(format!("{what} must be {k}x{k}")));
    }
    for (r, row) in m.iter().enumerate() {
        check_distribution(row, &format!("{what} row {}", r + 1))?;
    }
    let expected = match c {
        TransitionConstraint::Unconstrained => return Ok(()),
        TransitionConstraint::Diagonal => identity(k),
        TransitionConstraint::TridiagonalConstant if k == 1 => identity(1),
        TransitionConstraint::TridiagonalConstant => build_tridiagonal(k, m[0][1])
            .map_err(|e| Error::InvalidParameters(format!("{what}: {e}")))?,
    };
    let pattern_ok = m
        .iter()
        .flatten()
        .zip(expected.iter().flatten())
        .all(|(a, b)| (a - b).abs() <= STOCHASTIC_TOL);
    if !pattern_ok {
        return Err(Error::InvalidParameters(format!("{what} does not match its {c:?} pattern")));
    }
    Ok(())
}

impl ParameterSet {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let dims = |v: usize, want: usize, what: &str| {
            if v == want {
                Ok(())
            } else {
                Err(Error::InvalidParameters(format!("{what} has length {v}, expected {want}")))
            }
        };
        dims(self.lambda.len(), spec.k1, "lambda")?;
        dims(self.alpha.len(), spec.k1, "alpha")?;
        dims(self.pi.len(), spec.k2, "pi")?;
        dims(self.beta.len(), spec.k2, "beta")?;
        dims(self.gamma.len(), spec.cluster_covariates.len(), "gamma")?;
        dims(self.delta.len(), spec.unit_covariates.len(), "delta")?;
        check_distribution(&self.lambda, "lambda")?;
        check_distribution(&self.pi, "pi")?;
        check_transition(&self.cluster_transition, spec.k1, spec.cluster_transition, "cluster transition")?;
        check_transition(&self.unit_transition, spec.k2, spec.unit_transition, "unit transition")?;
        if self.alpha[0] != 0.0 || self.beta[0] != 0.0 {
            return Err(Error::InvalidParameters("alpha[1] and beta[1] must be exactly 0".into()));
        }
        let finite = std::iter::once(self.intercept)
            .chain(self.alpha.iter().copied())
            .chain(self.beta.iter().copied())
            .chain(self.gamma.iter().copied())
            .chain(self.delta.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::InvalidParameters("non-finite regression coefficient".into()));
        }
        match (spec.family, self.sigma2) {
            (MeasurementFamily::Gaussian, Some(s)) if s > 0.0 && s.is_finite() => {}
            (MeasurementFamily::Gaussian, _) => {
                return Err(Error::InvalidParameters("Gaussian family needs sigma2 > 0".into()))
            }
            (MeasurementFamily::Bernoulli, Some(_)) => {
                return Err(Error::InvalidParameters("sigma2 is only defined for the Gaussian family".into()))
            }
            (MeasurementFamily::Bernoulli, None) => {}
        }
        Ok(())
    }

    /// Regression coefficients in design-column order: intercept,
    /// `alpha[2..]`, `beta[2..]`, gamma, delta.
    pub fn regression_coefficients(&self) -> Vec<f64> {
        let mut b = vec![self.intercept];
        b.extend_from_slice(&self.alpha[1..]);
        b.extend_from_slice(&self.beta[1..]);
        b.extend_from_slice(&self.gamma);
        b.extend_from_slice(&self.delta);
        b
    }

    pub fn set_regression_coefficients(&mut self, b: &[f64]) {
        let k1 = self.alpha.len();
        let k2 = self.beta.len();
        let ng = self.gamma.len();
        self.intercept = b[0];
        let mut pos = 1;
        self.alpha[1..].copy_from_slice(&b[pos..pos + k1 - 1]);
        pos += k1 - 1;
        self.beta[1..].copy_from_slice(&b[pos..pos + k2 - 1]);
        pos += k2 - 1;
        self.gamma.copy_from_slice(&b[pos..pos + ng]);
        pos += ng;
        self.delta.copy_from_slice(&b[pos..]);
    }
}

/// Block boundaries and names of the free-parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub names: Vec<String>,
    /// Number of regression coefficients at the front of the vector.
    pub regression: usize,
    /// Index of `log_sigma2`, if present.
    pub log_sigma2: Option<usize>,
    /// Start of the cluster-chain block.
    pub cluster_chain: usize,
    /// Start of the unit-chain block.
    pub unit_chain: usize,
}

impl ParameterLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut names = vec!["intercept".to_string()];
        names.extend((2..=spec.k1).map(|u| format!("alpha[{u}]")));
        names.extend((2..=spec.k2).map(|v| format!("beta[{v}]")));
        names.extend(spec.cluster_covariates.iter().map(|n| format!("gamma[{n}]")));
        names.extend(spec.unit_covariates.iter().map(|n| format!("delta[{n}]")));
        let regression = names.len();
        let log_sigma2 = (spec.family == MeasurementFamily::Gaussian).then(|| {
            names.push("log_sigma2".into());
            regression
        });
        let cluster_chain = names.len();
        chain_names(&mut names, spec.k1, spec.cluster_transition, "lambda", "Lambda", "rho_cluster");
        let unit_chain = names.len();
        chain_names(&mut names, spec.k2, spec.unit_transition, "pi", "Pi", "rho_unit");
        Self { names, regression, log_sigma2, cluster_chain, unit_chain }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn chain_names(
    names: &mut Vec<String>,
    k: usize,
    c: TransitionConstraint,
    initial: &str,
    matrix: &str,
    rho: &str,
) {
    names.extend((2..=k).map(|s| format!("{initial}[{s}]")));
    if k < 2 {
        return;
    }
    match c {
        TransitionConstraint::Unconstrained => {
            for r in 1..=k {
                names.extend((2..=k).map(|s| format!("{matrix}[{r},{s}]")));
            }
        }
        TransitionConstraint::TridiagonalConstant => names.push(rho.to_string()),
        TransitionConstraint::Diagonal => {}
    }
}

fn log_ratios(p: &[f64], out: &mut Vec<f64>) {
    for &x in &p[1..] {
        let r = (x / p[0]).ln();
        out.push(if r.is_nan() { 0.0 } else { r.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO) });
    }
}

/// Inverse of [`log_ratios`]: a probability vector with `eta.len() + 1` entries.
pub(crate) fn softmax_with_reference(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(0.0_f64, f64::max);
    let mut p = Vec::with_capacity(eta.len() + 1);
    p.push((-m).exp());
    p.extend(eta.iter().map(|&e| (e - m).exp()));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

pub(crate) fn rho_to_free(rho: f64) -> f64 {
    let q = 2.0 * rho;
    (q / (1.0 - q)).ln()
}

pub(crate) fn rho_from_free(tau: f64) -> f64 {
    0.5 / (1.0 + (-tau).exp())
}

fn flatten_chain(out: &mut Vec<f64>, initial: &[f64], transition: &[Vec<f64>], c: TransitionConstraint) {
    log_ratios(initial, out);
    if initial.len() < 2 {
        return;
    }
    match c {
        TransitionConstraint::Unconstrained => transition.iter().for_each(|row| log_ratios(row, out)),
        TransitionConstraint::TridiagonalConstant => out.push(rho_to_free(transition[0][1])),
        TransitionConstraint::Diagonal => {}
    }
}

fn unflatten_chain(
    x: &[f64],
    pos: &mut usize,
    k: usize,
    c: TransitionConstraint,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let initial = softmax_with_reference(&x[*pos..*pos + k - 1]);
    *pos += k - 1;
    let transition = if k < 2 {
        identity(k)
    } else {
        match c {
            TransitionConstraint::Unconstrained => (0..k)
                .map(|_| {
                    let row = softmax_with_reference(&x[*pos..*pos + k - 1]);
                    *pos += k - 1;
                    row
                })
                .collect(),
            TransitionConstraint::TridiagonalConstant => {
                let rho = rho_from_free(x[*pos]);
                *pos += 1;
                build_tridiagonal(k, rho).map_err(|e| Error::InvalidParameters(e.to_string()))?
            }
            TransitionConstraint::Diagonal => identity(k),
        }
    };
    Ok((initial, transition))
}

/// Maps `theta` to its free, unconstrained parameter vector.
pub fn flatten_parameters(theta: &ParameterSet, spec: &ModelSpec) -> Result<Vec<f64>> {
    theta.validate(spec)?;
    let mut out = theta.regression_coefficients();
    if let Some(s2) = theta.sigma2 {
        out.push(s2.ln());
    }
    flatten_chain(&mut out, &theta.lambda, &theta.cluster_transition, spec.cluster_transition);
    flatten_chain(&mut out, &theta.pi, &theta.unit_transition, spec.unit_transition);
    Ok(out)
}

/// Inverse of [`flatten_parameters`].
pub fn unflatten_parameters(x: &[f64], spec: &ModelSpec) -> Result<ParameterSet> {
    let layout = ParameterLayout::new(spec);
    if x.len() != layout.len() {
        return Err(Error::Dimension(format!(
            "parameter vector has length {}, layout needs {}",
            x.len(),
            layout.len()
        )));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidParameters("NaN in parameter vector".into()));
    }
    let mut theta = ParameterSet {
        lambda: Vec::new(),
        cluster_transition: Vec::new(),
        pi: Vec::new(),
        unit_transition: Vec::new(),
        intercept: 0.0,
        alpha: vec![0.0; spec.k1],
        beta: vec![0.0; spec.k2],
        gamma: vec![0.0; spec.cluster_covariates.len()],
        delta: vec![0.0; spec.unit_covariates.len()],
        sigma2: layout.log_sigma2.map(|i| x[i].exp()),
    };
    theta.set_regression_coefficients(&x[..layout.regression]);
    let mut pos = layout.cluster_chain;
    let (lambda, lt) = unflatten_chain(x, &mut pos, spec.k1, spec.cluster_transition)?;
    let (pi, pt) = unflatten_chain(x, &mut pos, spec.k2, spec.unit_transition)?;
    theta.lambda = lambda;
    theta.cluster_transition = lt;
    theta.pi = pi;
    theta.unit_transition = pt;
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(id: &str, y: &[f64]) -> UnitData {
        UnitData {
            id: id.into(),
            responses: y.to_vec(),
            covariates: vec![vec![0.5]; y.len()],
            mask: vec![true; y.len()],
        }
    }

    fn panel() -> PanelDataset {
        let cluster = |id: &str| ClusterData {
            id: id.into(),
            covariates: vec![vec![1.0]; 3],
            units: vec![unit("a", &[0.0, 1.0, 1.0]), unit("b", &[1.0, 0.0, 0.0])],
        };
        PanelDataset {
            clusters: vec![cluster("c1"), cluster("c2")],
            occasions: 3,
            unit_covariate_names: vec!["z".into()],
            cluster_covariate_names: vec!["x".into()],
        }
    }

    #[test]
    fn accepts_well_formed_panel() {
        let spec = ModelSpec { lag_handling: LagHandling::None, ..Default::default() };
        let v = validate_dataset(&panel(), &spec).unwrap();
        assert!(v.clusters.iter().flat_map(|c| &c.units).all(|u| u.mask == [true, true, true]));
        // unselected covariate columns are dropped
        assert!(v.clusters[0].units[0].covariates[0].is_empty());
    }

    #[test]
    fn condition_on_first_masks_first_occasion() {
        let spec = ModelSpec { lag_handling: LagHandling::ConditionOnFirst, ..Default::default() };
        let v = validate_dataset(&panel(), &spec).unwrap();
        for u in v.clusters.iter().flat_map(|c| &c.units) {
            assert_eq!(u.mask, vec![false, true, true]);
        }
    }

    #[test]
    fn zero_fill_clears_lag_column_at_first_occasion() {
        let spec = ModelSpec {
            lag_handling: LagHandling::ZeroFill,
            lag_column: Some("z".into()),
            unit_covariates: vec!["z".into()],
            ..Default::default()
        };
        let v = validate_dataset(&panel(), &spec).unwrap();
        let u = &v.clusters[0].units[0];
        assert_eq!(u.covariates[0], vec![0.0]);
        assert_eq!(u.covariates[1], vec![0.5]);
        assert_eq!(u.mask, vec![true; 3]);
    }

    #[test]
    fn rejects_ragged_unit() {
        let mut data = panel();
        data.clusters[1].units[1].responses.pop();
        let err = validate_dataset(&data, &ModelSpec::default()).unwrap_err();
        match err {
            Error::InvalidData { location, .. } => {
                assert_eq!(location.cluster, "c2");
                assert_eq!(location.unit.as_deref(), Some("b"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_missing_and_non_binary_values() {
        let mut data = panel();
        data.clusters[0].units[0].responses[1] = f64::NAN;
        assert!(matches!(
            validate_dataset(&data, &ModelSpec::default()),
            Err(Error::InvalidData { location: Location { occasion: Some(2), .. }, .. })
        ));
        let mut data = panel();
        data.clusters[0].units[1].responses[2] = 0.5;
        assert!(validate_dataset(&data, &ModelSpec::default()).is_err());
        let gaussian = ModelSpec { family: MeasurementFamily::Gaussian, ..Default::default() };
        assert!(validate_dataset(&data, &gaussian).is_ok());
    }

    #[test]
    fn rejects_unknown_covariate() {
        let spec = ModelSpec { unit_covariates: vec!["age".into()], ..Default::default() };
        assert!(matches!(
            validate_dataset(&panel(), &spec),
            Err(Error::UnknownCovariate { .. })
        ));
    }

    use crate::error::Location;

    #[test]
    fn tridiagonal_needs_two_states() {
        let spec = ModelSpec {
            k1: 1,
            cluster_transition: TransitionConstraint::TridiagonalConstant,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let fixed = spec.with_states(1, 2);
        assert_eq!(fixed.cluster_transition, TransitionConstraint::Unconstrained);
    }

    #[test]
    fn degenerate_model_has_only_intercept() {
        let spec = ModelSpec::default();
        let layout = ParameterLayout::new(&spec);
        assert_eq!(layout.names, vec!["intercept"]);
    }

    #[test]
    fn tridiagonal_contributes_one_parameter() {
        let spec = ModelSpec {
            k1: 3,
            cluster_transition: TransitionConstraint::TridiagonalConstant,
            ..Default::default()
        };
        let layout = ParameterLayout::new(&spec);
        assert_eq!(layout.names, vec!["intercept", "alpha[2]", "alpha[3]", "lambda[2]", "lambda[3]", "rho_cluster"]);
    }
}

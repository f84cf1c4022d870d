//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Lists are comma separated, matrix
//! rows are separated by `;`. Unknown keys are rejected, and every run can
//! echo its fully resolved configuration.

use std::collections::BTreeMap;

use crate::chain::{build_tridiagonal, identity};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::model::{LagHandling, MeasurementFamily, ModelSpec, ParameterSet, TransitionConstraint};
use crate::simulate::{CovariateColumn, CovariateGenerator, SimDesign};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    key: String,
    value: String,
    /// Source line, 0 for command-line overrides.
    line: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

const MODEL_KEYS: &[&str] = &["k1", "k2", "cluster_transition", "unit_transition", "family"];

const FIT_KEYS: &[&str] = &[
    "lag_handling",
    "lag_column",
    "cluster_covariates",
    "unit_covariates",
    "strict_pairs",
    "max_iterations",
    "rel_tolerance",
    "n_random_starts",
    "seed",
    "newton_max_steps",
    "newton_tolerance",
    "pair_weighting",
];

const SIM_KEYS: &[&str] = &[
    "clusters",
    "cluster_size",
    "occasions",
    "intercept",
    "alpha",
    "beta",
    "gamma",
    "delta",
    "sigma2",
    "lambda",
    "pi",
    "cluster_rho",
    "unit_rho",
    "cluster_transition_matrix",
    "unit_transition_matrix",
    "seed",
];

const CLUSTER_COV_PREFIX: &str = "cluster_covariate.";
const UNIT_COV_PREFIX: &str = "unit_covariate.";

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse { line: i + 1, message: format!("expected 'key = value', found '{line}'") });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: i + 1, message: "empty key".into() });
            }
            if kv.get(key).is_some() {
                return Err(Error::Parse { line: i + 1, message: format!("duplicate key '{key}'") });
            }
            kv.entries.push(Entry { key: key.into(), value: value.trim().into(), line: i + 1 });
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value.as_str())
    }

    /// Overrides (or adds) a key, as a command-line flag does.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => {
                e.value = value;
                e.line = 0;
            }
            None => self.entries.push(Entry { key: key.into(), value, line: 0 }),
        }
    }

    fn check_known(&self, known: &[&[&str]], prefixes: &[&str]) -> Result<()> {
        for e in &self.entries {
            let ok = known.iter().any(|set| set.contains(&e.key.as_str()))
                || prefixes.iter().any(|p| e.key.starts_with(p) && e.key.len() > p.len());
            if !ok {
                return Err(Error::Config(format!("unknown key '{}'{}", e.key, self.at(e))));
            }
        }
        Ok(())
    }

    fn at(&self, e: &Entry) -> String {
        if e.line > 0 {
            format!(" (line {})", e.line)
        } else {
            " (command line)".into()
        }
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{}' for '{key}'{}", e.value, self.at(e)))),
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => parse_numbers(&e.value)
                .map(Some)
                .map_err(|m| Error::Config(format!("'{key}'{}: {m}", self.at(e)))),
        }
    }

    fn names(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    fn model_spec(&self) -> Result<ModelSpec> {
        let d = ModelSpec::default();
        Ok(ModelSpec {
            k1: self.parsed("k1")?.unwrap_or(d.k1),
            k2: self.parsed("k2")?.unwrap_or(d.k2),
            cluster_transition: self.parsed("cluster_transition")?.unwrap_or(d.cluster_transition),
            unit_transition: self.parsed("unit_transition")?.unwrap_or(d.unit_transition),
            family: self.parsed("family")?.unwrap_or(d.family),
            ..d
        })
    }
}

fn parse_numbers(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<f64>().map_err(|_| format!("'{x}' is not a number")))
        .collect()
}

fn parse_matrix(s: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    s.split(';').map(parse_numbers).collect()
}

/// `A..B` (inclusive) or a single `A`.
pub fn parse_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid range '{s}', expected A..B"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse::<usize>().map_err(|_| bad())?, b.trim().parse::<usize>().map_err(|_| bad())?),
        None => {
            let a = s.trim().parse::<usize>().map_err(|_| bad())?;
            (a, a)
        }
    };
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

fn constraint_name(c: TransitionConstraint) -> &'static str {
    match c {
        TransitionConstraint::Unconstrained => "unconstrained",
        TransitionConstraint::TridiagonalConstant => "tridiagonal",
        TransitionConstraint::Diagonal => "diagonal",
    }
}

fn family_name(f: MeasurementFamily) -> &'static str {
    match f {
        MeasurementFamily::Bernoulli => "bernoulli",
        MeasurementFamily::Gaussian => "gaussian",
    }
}

fn lag_name(l: LagHandling) -> &'static str {
    match l {
        LagHandling::None => "none",
        LagHandling::ZeroFill => "zero-fill",
        LagHandling::ConditionOnFirst => "condition-on-first",
    }
}

/// Model and EM settings of the `fit`, `select` and `loglik` commands.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub spec: ModelSpec,
    pub em: EmConfig,
}

impl FitSettings {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&[MODEL_KEYS, FIT_KEYS], &[])?;
        let mut spec = kv.model_spec()?;
        spec.lag_handling = kv.parsed("lag_handling")?.unwrap_or(spec.lag_handling);
        spec.lag_column = kv.get("lag_column").filter(|s| !s.is_empty()).map(str::to_string);
        spec.cluster_covariates = kv.names("cluster_covariates");
        spec.unit_covariates = kv.names("unit_covariates");
        spec.strict_pairs = kv.parsed("strict_pairs")?.unwrap_or(false);
        let d = EmConfig::default();
        let em = EmConfig {
            max_iterations: kv.parsed("max_iterations")?.unwrap_or(d.max_iterations),
            rel_tolerance: kv.parsed("rel_tolerance")?.unwrap_or(d.rel_tolerance),
            n_random_starts: kv.parsed("n_random_starts")?.unwrap_or(d.n_random_starts),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
            newton_max_steps: kv.parsed("newton_max_steps")?.unwrap_or(d.newton_max_steps),
            newton_tolerance: kv.parsed("newton_tolerance")?.unwrap_or(d.newton_tolerance),
            pair_weighting: kv.get("pair_weighting").map(str::to_string),
        };
        spec.validate()?;
        em.validate()?;
        Ok(Self { spec, em })
    }

    /// Every setting with its effective value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let s = &self.spec;
        let e = &self.em;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("k1", s.k1.to_string());
        put("k2", s.k2.to_string());
        put("cluster_transition", constraint_name(s.cluster_transition).into());
        put("unit_transition", constraint_name(s.unit_transition).into());
        put("family", family_name(s.family).into());
        put("lag_handling", lag_name(s.lag_handling).into());
        put("lag_column", s.lag_column.clone().unwrap_or_default());
        put("cluster_covariates", s.cluster_covariates.join(","));
        put("unit_covariates", s.unit_covariates.join(","));
        put("strict_pairs", s.strict_pairs.to_string());
        put("max_iterations", e.max_iterations.to_string());
        put("rel_tolerance", e.rel_tolerance.to_string());
        put("n_random_starts", e.n_random_starts.to_string());
        put("seed", e.seed.to_string());
        put("newton_max_steps", e.newton_max_steps.to_string());
        put("newton_tolerance", e.newton_tolerance.to_string());
        m
    }
}

fn parse_generator(s: &str) -> std::result::Result<(CovariateGenerator, bool), String> {
    let s = s.trim();
    let (body, fixed) = match s.strip_suffix("fixed") {
        Some(rest) => (rest.trim(), true),
        None => (s, false),
    };
    let (name, args) = body
        .strip_suffix(')')
        .and_then(|b| b.split_once('('))
        .ok_or_else(|| format!("expected name(args), found '{s}'"))?;
    let args = parse_numbers(args)?;
    let want = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("'{name}' takes {n} argument(s)"))
        }
    };
    let g = match name.trim() {
        "constant" => {
            want(1)?;
            CovariateGenerator::Constant(args[0])
        }
        "uniform" => {
            want(2)?;
            CovariateGenerator::Uniform { low: args[0], high: args[1] }
        }
        "binary" => {
            want(1)?;
            CovariateGenerator::Binary { rate: args[0] }
        }
        "lagged" => {
            want(1)?;
            CovariateGenerator::LaggedResponse { initial: args[0] }
        }
        other => return Err(format!("unknown generator '{other}'")),
    };
    Ok((g, fixed))
}

/// Builds a simulation design from a config. Covariate columns are declared
/// as `unit_covariate.<name> = <generator>` or `cluster_covariate.<name> = ...`
/// with generators `constant(v)`, `uniform(lo, hi)`, `binary(rate)` and
/// `lagged(initial)`, optionally followed by `fixed` for time-invariant draws.
pub fn sim_design_from_kv(kv: &KeyValues) -> Result<SimDesign> {
    kv.check_known(&[MODEL_KEYS, SIM_KEYS], &[CLUSTER_COV_PREFIX, UNIT_COV_PREFIX])?;
    let mut spec = kv.model_spec()?;
    spec.lag_handling = LagHandling::None;
    let mut cluster_covariates = Vec::new();
    let mut unit_covariates = Vec::new();
    for e in &kv.entries {
        let (target, name) = if let Some(n) = e.key.strip_prefix(CLUSTER_COV_PREFIX) {
            (&mut cluster_covariates, n)
        } else if let Some(n) = e.key.strip_prefix(UNIT_COV_PREFIX) {
            (&mut unit_covariates, n)
        } else {
            continue;
        };
        let (generator, time_invariant) =
            parse_generator(&e.value).map_err(|m| Error::Config(format!("'{}'{}: {m}", e.key, kv.at(e))))?;
        target.push(CovariateColumn { name: name.to_string(), generator, time_invariant });
    }
    spec.cluster_covariates = cluster_covariates.iter().map(|c: &CovariateColumn| c.name.clone()).collect();
    spec.unit_covariates = unit_covariates.iter().map(|c: &CovariateColumn| c.name.clone()).collect();
    spec.validate()?;

    let required = |key: &str| Error::Config(format!("missing required key '{key}'"));
    let support = |key: &str, k: usize| -> Result<Vec<f64>> {
        match kv.list(key)? {
            Some(v) => Ok(v),
            None if k == 1 => Ok(vec![0.0]),
            None => Err(required(key)),
        }
    };
    let probs = |key: &str, k: usize| -> Result<Vec<f64>> {
        Ok(kv.list(key)?.unwrap_or_else(|| vec![1.0 / k as f64; k]))
    };
    let transition = |rho_key: &str, matrix_key: &str, k: usize, c: TransitionConstraint| -> Result<Vec<Vec<f64>>> {
        if k == 1 {
            return Ok(identity(1));
        }
        match c {
            TransitionConstraint::Diagonal => Ok(identity(k)),
            TransitionConstraint::TridiagonalConstant => {
                let rho: f64 = kv.parsed(rho_key)?.ok_or_else(|| required(rho_key))?;
                build_tridiagonal(k, rho)
            }
            TransitionConstraint::Unconstrained => {
                let e = kv.entry(matrix_key).ok_or_else(|| required(matrix_key))?;
                parse_matrix(&e.value).map_err(|m| Error::Config(format!("'{matrix_key}'{}: {m}", kv.at(e))))
            }
        }
    };
    let theta = ParameterSet {
        lambda: probs("lambda", spec.k1)?,
        cluster_transition: transition("cluster_rho", "cluster_transition_matrix", spec.k1, spec.cluster_transition)?,
        pi: probs("pi", spec.k2)?,
        unit_transition: transition("unit_rho", "unit_transition_matrix", spec.k2, spec.unit_transition)?,
        intercept: kv.parsed("intercept")?.unwrap_or(0.0),
        alpha: support("alpha", spec.k1)?,
        beta: support("beta", spec.k2)?,
        gamma: kv.list("gamma")?.unwrap_or_default(),
        delta: kv.list("delta")?.unwrap_or_default(),
        sigma2: kv.parsed("sigma2")?,
    };
    let sizes = parse_range(kv.get("cluster_size").ok_or_else(|| required("cluster_size"))?)?;
    Ok(SimDesign {
        clusters: kv.parsed("clusters")?.ok_or_else(|| required("clusters"))?,
        cluster_size_min: sizes[0],
        cluster_size_max: *sizes.last().expect("nonempty range"),
        occasions: kv.parsed("occasions")?.ok_or_else(|| required("occasions"))?,
        spec,
        theta,
        cluster_covariates,
        unit_covariates,
        seed: kv.parsed("seed")?.unwrap_or(0),
    })
}

/// Resolved echo of a simulation design.
pub fn sim_resolved(d: &SimDesign) -> BTreeMap<String, String> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let matrix = |m: &[Vec<f64>]| m.iter().map(|r| join(r)).collect::<Vec<_>>().join(";");
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("k1", d.spec.k1.to_string());
    put("k2", d.spec.k2.to_string());
    put("cluster_transition", constraint_name(d.spec.cluster_transition).into());
    put("unit_transition", constraint_name(d.spec.unit_transition).into());
    put("family", family_name(d.spec.family).into());
    put("clusters", d.clusters.to_string());
    put("cluster_size", format!("{}..{}", d.cluster_size_min, d.cluster_size_max));
    put("occasions", d.occasions.to_string());
    put("intercept", d.theta.intercept.to_string());
    put("alpha", join(&d.theta.alpha));
    put("beta", join(&d.theta.beta));
    put("gamma", join(&d.theta.gamma));
    put("delta", join(&d.theta.delta));
    put("lambda", join(&d.theta.lambda));
    put("pi", join(&d.theta.pi));
    put("cluster_transition_matrix", matrix(&d.theta.cluster_transition));
    put("unit_transition_matrix", matrix(&d.theta.unit_transition));
    if let Some(s2) = d.theta.sigma2 {
        put("sigma2", s2.to_string());
    }
    put("seed", d.seed.to_string());
    m
}

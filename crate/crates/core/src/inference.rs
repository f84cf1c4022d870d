//! Sandwich standard errors and CLIC model selection.
//!
//! Cluster scores come from the Fisher identity: the gradient of the
//! expected complete-data pairwise log-likelihood, with the posteriors
//! evaluated at the same parameter. The information matrix is the negative
//! central-difference Jacobian of the total score. Everything is computed on
//! the unconstrained free-parameter scale of [`ParameterLayout`].

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::em::{all_cluster_stats, fit, fit_from, pairwise_loglik, ClusterStats, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::chain::fixed_predictor;
use crate::model::{
    flatten_parameters, unflatten_parameters, ClusterData, MeasurementFamily, ModelSpec, PanelDataset,
    ParameterLayout, ParameterSet, TransitionConstraint,
};
use crate::regression::logistic;

/// Matrices with reciprocal condition number below this are treated as singular.
pub const MIN_RCOND: f64 = 1e-12;

/// Saddle escapes tried per grid cell, and the move length on the
/// unconstrained scale.
pub const MAX_SADDLE_ESCAPES: usize = 3;
pub const SADDLE_STEP: f64 = 0.5;

fn chain_score(
    initial_counts: &[f64],
    transition_counts: &[f64],
    initial: &[f64],
    transition: &[Vec<f64>],
    constraint: TransitionConstraint,
    out: &mut Vec<f64>,
) {
    let k = initial.len();
    let total: f64 = initial_counts.iter().sum();
    for s in 1..k {
        out.push(initial_counts[s] - total * initial[s]);
    }
    if k < 2 {
        return;
    }
    match constraint {
        TransitionConstraint::Unconstrained => {
            for r in 0..k {
                let row = &transition_counts[r * k..(r + 1) * k];
                let n: f64 = row.iter().sum();
                for c in 1..k {
                    out.push(row[c] - n * transition[r][c]);
                }
            }
        }
        TransitionConstraint::TridiagonalConstant => {
            let (a, b, c) = crate::em::tridiagonal_statistics(transition_counts, k);
            let rho = transition[0][1];
            let d_rho = a / rho - b / (1.0 - rho) - 2.0 * c / (1.0 - 2.0 * rho);
            out.push(d_rho * rho * (1.0 - 2.0 * rho));
        }
        TransitionConstraint::Diagonal => {}
    }
}

/// Gradient of one cluster's pairwise log-likelihood from its E-step
/// statistics at the same parameter.
pub fn score_from_stats(
    stats: &ClusterStats,
    cluster: &ClusterData,
    theta: &ParameterSet,
    spec: &ModelSpec,
) -> Vec<f64> {
    let layout = ParameterLayout::new(spec);
    let (k1, k2) = (spec.k1, spec.k2);
    let ng = spec.cluster_covariates.len();
    let cov_start = k1 + k2 - 1;
    let mut g = vec![0.0; layout.regression];
    let mut g_log_sigma2 = 0.0;
    for (unit, uw) in cluster.units.iter().zip(&stats.weights) {
        for (t, tw) in uw.iter().enumerate() {
            if !unit.mask[t] {
                continue;
            }
            let x = &cluster.covariates[t];
            let z = &unit.covariates[t];
            let base = fixed_predictor(theta, x, z);
            let y = unit.responses[t];
            for u in 0..k1 {
                for v in 0..k2 {
                    let w = tw[u * k2 + v];
                    if w == 0.0 {
                        continue;
                    }
                    let eta = base + theta.alpha[u] + theta.beta[v];
                    let r = match spec.family {
                        MeasurementFamily::Bernoulli => w * (y - logistic(eta)),
                        MeasurementFamily::Gaussian => {
                            let s2 = theta.sigma2.expect("Gaussian sigma2");
                            let e = y - eta;
                            g_log_sigma2 += w * (-0.5 + 0.5 * e * e / s2);
                            w * e / s2
                        }
                    };
                    g[0] += r;
                    if u > 0 {
                        g[u] += r;
                    }
                    if v > 0 {
                        g[k1 - 1 + v] += r;
                    }
                    for (j, xv) in x.iter().enumerate() {
                        g[cov_start + j] += r * xv;
                    }
                    for (j, zv) in z.iter().enumerate() {
                        g[cov_start + ng + j] += r * zv;
                    }
                }
            }
        }
    }
    if layout.log_sigma2.is_some() {
        g.push(g_log_sigma2);
    }
    chain_score(
        &stats.cluster_initial,
        &stats.cluster_transitions,
        &theta.lambda,
        &theta.cluster_transition,
        spec.cluster_transition,
        &mut g,
    );
    chain_score(
        &stats.unit_initial,
        &stats.unit_transitions,
        &theta.pi,
        &theta.unit_transition,
        spec.unit_transition,
        &mut g,
    );
    debug_assert_eq!(g.len(), layout.len());
    g
}

/// Per-cluster gradients of the pairwise log-likelihood at `theta`.
pub fn cluster_scores(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<Vec<Vec<f64>>> {
    let stats = all_cluster_stats(data, spec, theta)?;
    Ok(stats
        .iter()
        .zip(&data.clusters)
        .map(|(s, c)| score_from_stats(s, c, theta, spec))
        .collect())
}

pub fn total_score(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<Vec<f64>> {
    let scores = cluster_scores(data, spec, theta)?;
    let mut total = vec![0.0; ParameterLayout::new(spec).len()];
    for s in &scores {
        total.iter_mut().zip(s).for_each(|(t, x)| *t += x);
    }
    Ok(total)
}

/// Step used for the central difference in coordinate `x`.
pub fn difference_step(x: f64) -> f64 {
    (1e-5 * x.abs()).max(1e-5)
}

/// Negative Hessian of the pairwise log-likelihood by central differences
/// of the analytic total score. Returns the symmetrized matrix and the
/// relative asymmetry `max|J - J'| / max|J|` before symmetrization.
pub fn numerical_information(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<(Vec<Vec<f64>>, f64)> {
    let x = flatten_parameters(theta, spec)?;
    let p = x.len();
    let mut j = vec![vec![0.0; p]; p];
    for c in 0..p {
        let h = difference_step(x[c]);
        let mut plus = x.clone();
        plus[c] += h;
        let mut minus = x.clone();
        minus[c] -= h;
        let sp = total_score(data, spec, &unflatten_parameters(&plus, spec)?)?;
        let sm = total_score(data, spec, &unflatten_parameters(&minus, spec)?)?;
        for r in 0..p {
            j[r][c] = -(sp[r] - sm[r]) / (2.0 * h);
        }
    }
    let scale = j.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0_f64;
    for r in 0..p {
        for c in 0..r {
            asym = asym.max((j[r][c] - j[c][r]).abs());
            let avg = 0.5 * (j[r][c] + j[c][r]);
            j[r][c] = avg;
            j[c][r] = avg;
        }
    }
    Ok((j, if scale > 0.0 { asym / scale } else { 0.0 }))
}

/// One row of the estimates table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    /// Name on the unconstrained scale.
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    /// Name of the natural-scale counterpart.
    pub natural_name: String,
    pub natural_estimate: f64,
    /// Delta-method standard error on the natural scale.
    pub natural_std_error: Option<f64>,
    /// Map from the unconstrained to the natural scale.
    pub transform: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub ploglik: f64,
    pub n_parameters: usize,
    pub parameters: Vec<ParameterEstimate>,
    /// Sandwich covariance on the unconstrained scale; `None` when the
    /// information matrix is singular.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub j_hat: Vec<Vec<f64>>,
    pub k_hat: Vec<Vec<f64>>,
    /// `tr(K J^-1)`.
    pub penalty: Option<f64>,
    /// `pl - tr(K J^-1)`; larger is better.
    pub clic: Option<f64>,
    /// Smallest over largest absolute eigenvalue of the information matrix.
    pub reciprocal_condition: f64,
    pub min_information_eigenvalue: f64,
    /// Relative asymmetry of the information matrix before symmetrization.
    pub information_asymmetry: f64,
}

fn natural_descriptor(name: &str) -> (String, &'static str) {
    if name == "log_sigma2" {
        return ("sigma2".into(), "exp(x)");
    }
    if name == "rho_cluster" || name == "rho_unit" {
        return (name.into(), "0.5 / (1 + exp(-x))");
    }
    for prefix in ["lambda[", "Lambda[", "pi[", "Pi["] {
        if name.starts_with(prefix) {
            return (name.into(), "softmax with state 1 as reference");
        }
    }
    (name.into(), "identity")
}

/// Natural-scale value of every free parameter, in layout order.
pub fn natural_values(x: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    let theta = unflatten_parameters(x, spec)?;
    let mut out = theta.regression_coefficients();
    if let Some(s2) = theta.sigma2 {
        out.push(s2);
    }
    let mut chain = |init: &[f64], trans: &[Vec<f64>], c: TransitionConstraint| {
        out.extend_from_slice(&init[1..]);
        if init.len() < 2 {
            return;
        }
        match c {
            TransitionConstraint::Unconstrained => trans.iter().for_each(|r| out.extend_from_slice(&r[1..])),
            TransitionConstraint::TridiagonalConstant => out.push(trans[0][1]),
            TransitionConstraint::Diagonal => {}
        }
    };
    chain(&theta.lambda, &theta.cluster_transition, spec.cluster_transition);
    chain(&theta.pi, &theta.unit_transition, spec.unit_transition);
    Ok(out)
}

fn natural_jacobian(x: &[f64], spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let p = x.len();
    let mut g = DMatrix::zeros(p, p);
    for c in 0..p {
        let h = 1e-6 * x[c].abs().max(1.0);
        let mut plus = x.to_vec();
        plus[c] += h;
        let mut minus = x.to_vec();
        minus[c] -= h;
        let np = natural_values(&plus, spec)?;
        let nm = natural_values(&minus, spec)?;
        for r in 0..p {
            g[(r, c)] = (np[r] - nm[r]) / (2.0 * h);
        }
    }
    Ok(g)
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.len();
    DMatrix::from_fn(p, p, |r, c| rows[r][c])
}

/// Sandwich covariance `J^-1 K J^-1`, standard errors, Wald statistics and
/// CLIC at `theta` (normally the pairwise-likelihood estimate).
pub fn sandwich(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<InferenceReport> {
    let layout = ParameterLayout::new(spec);
    let p = layout.len();
    let x = flatten_parameters(theta, spec)?;
    let stats = all_cluster_stats(data, spec, theta)?;
    let ploglik: f64 = stats.iter().map(|s| s.ploglik).sum();
    let mut k_hat = DMatrix::<f64>::zeros(p, p);
    for (s, c) in stats.iter().zip(&data.clusters) {
        let g = nalgebra::DVector::from_vec(score_from_stats(s, c, theta, spec));
        k_hat += &g * g.transpose();
    }
    drop(stats);
    let (j_rows, asymmetry) = numerical_information(data, spec, theta)?;
    let j_hat = from_rows(&j_rows);

    let eig = SymmetricEigen::new(j_hat.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min_abs = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let rcond = if max_abs > 0.0 { min_abs / max_abs } else { 0.0 };

    let naturals = natural_values(&x, spec)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut report = InferenceReport {
        ploglik,
        n_parameters: p,
        parameters: Vec::with_capacity(p),
        covariance: None,
        j_hat: j_rows,
        k_hat: to_rows(&k_hat),
        penalty: None,
        clic: None,
        reciprocal_condition: rcond,
        min_information_eigenvalue: min_eig,
        information_asymmetry: asymmetry,
    };

    let cov = if rcond >= MIN_RCOND && rcond.is_finite() {
        let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
        let j_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        let mut cov = &j_inv * &k_hat * &j_inv;
        cov = 0.5 * (&cov + cov.transpose());
        // the penalty presumes a local maximum
        if min_eig > 0.0 {
            let penalty = (&k_hat * &j_inv).trace();
            report.penalty = Some(penalty);
            report.clic = Some(ploglik - penalty);
        }
        report.covariance = Some(to_rows(&cov));
        Some(cov)
    } else {
        None
    };
    let natural_cov = match &cov {
        Some(c) => {
            let g = natural_jacobian(&x, spec)?;
            Some(&g * c * g.transpose())
        }
        None => None,
    };

    for i in 0..p {
        let se = cov.as_ref().map(|c| c[(i, i)].max(0.0).sqrt());
        let z = se.filter(|s| *s > 0.0).map(|s| x[i] / s);
        let (natural_name, transform) = natural_descriptor(&layout.names[i]);
        report.parameters.push(ParameterEstimate {
            name: layout.names[i].clone(),
            estimate: x[i],
            std_error: se,
            z,
            p_value: z.map(|z| 2.0 * normal.sf(z.abs())),
            natural_name,
            natural_estimate: naturals[i],
            natural_std_error: natural_cov.as_ref().map(|c| c[(i, i)].max(0.0).sqrt()),
            transform: transform.into(),
        });
    }
    Ok(report)
}

/// `pl(theta) - tr(K J^-1)`.
pub fn clic(data: &PanelDataset, spec: &ModelSpec, theta: &ParameterSet) -> Result<f64> {
    let report = sandwich(data, spec, theta)?;
    report.clic.ok_or_else(|| information_error(&report))
}

fn information_error(report: &InferenceReport) -> Error {
    if report.reciprocal_condition < MIN_RCOND || !report.reciprocal_condition.is_finite() {
        Error::SingularInformation { rcond: report.reciprocal_condition }
    } else {
        Error::NotAMaximum { min_eigenvalue: report.min_information_eigenvalue }
    }
}

/// Attempts to leave a saddle point: a short move along the information
/// eigenvector with the most negative eigenvalue, where the pairwise
/// likelihood curves upward, followed by a fresh EM run. Returns the new fit
/// only when it improves the pairwise log-likelihood.
fn escape_saddle(
    data: &PanelDataset,
    spec: &ModelSpec,
    config: &EmConfig,
    current: &FitResult,
    report: &InferenceReport,
) -> Option<FitResult> {
    let eig = SymmetricEigen::new(from_rows(&report.j_hat));
    let (idx, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let direction = eig.eigenvectors.column(idx);
    let x = flatten_parameters(&current.theta, spec).ok()?;
    let start = [SADDLE_STEP, -SADDLE_STEP]
        .iter()
        .filter_map(|step| {
            let moved: Vec<f64> = x.iter().zip(direction.iter()).map(|(a, d)| a + step * d).collect();
            let theta = unflatten_parameters(&moved, spec).ok()?;
            let pl = pairwise_loglik(data, spec, &theta).ok()?;
            Some((pl, theta))
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))?
        .1;
    let refit = fit_from(data, spec, start, config).ok()?;
    (refit.ploglik > current.ploglik).then_some(refit)
}

/// Result of fitting one cell of a selection grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFit {
    pub k1: usize,
    pub k2: usize,
    pub spec: ModelSpec,
    pub n_parameters: usize,
    pub ploglik: Option<f64>,
    pub penalty: Option<f64>,
    pub clic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Fits one model and evaluates its CLIC; failures are recorded, not raised.
pub fn fit_cell(data: &PanelDataset, spec: &ModelSpec, config: &EmConfig) -> CellFit {
    let mut cell = CellFit {
        k1: spec.k1,
        k2: spec.k2,
        spec: spec.clone(),
        n_parameters: spec.free_parameter_count(),
        ploglik: None,
        penalty: None,
        clic: None,
        converged: false,
        error: None,
    };
    let mut result = match fit(data, spec, config) {
        Ok(result) => result,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    let mut report = sandwich(data, spec, &result.theta);
    for _ in 0..MAX_SADDLE_ESCAPES {
        let Ok(rep) = &report else { break };
        if rep.min_information_eigenvalue > 0.0 {
            break;
        }
        let Some(better) = escape_saddle(data, spec, config, &result, rep) else { break };
        result = better;
        report = sandwich(data, spec, &result.theta);
    }
    cell.ploglik = Some(result.ploglik);
    cell.converged = result.converged;
    match report {
        Ok(rep) => {
            cell.penalty = rep.penalty;
            cell.clic = rep.clic;
            if rep.clic.is_none() {
                cell.error = Some(information_error(&rep).to_string());
            }
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub k1_values: Vec<usize>,
    pub k2_values: Vec<usize>,
    /// Row-major over `k1_values` x `k2_values`.
    pub cells: Vec<CellFit>,
    /// Cell with the largest CLIC.
    pub best: Option<(usize, usize)>,
}

impl GridReport {
    pub fn cell(&self, k1: usize, k2: usize) -> Option<&CellFit> {
        self.cells.iter().find(|c| c.k1 == k1 && c.k2 == k2)
    }
}

/// Index of the cell with the largest CLIC.
pub fn best_by_clic(cells: &[CellFit]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.clic.map(|v| (i, v)))
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Fits every `(k1, k2)` cell (independently, in parallel) and flags the
/// CLIC maximizer.
pub fn select_grid(
    data: &PanelDataset,
    k1_values: &[usize],
    k2_values: &[usize],
    template: &ModelSpec,
    config: &EmConfig,
) -> Result<GridReport> {
    if k1_values.is_empty() || k2_values.is_empty() {
        return Err(Error::Config("selection ranges must be nonempty".into()));
    }
    let specs: Vec<ModelSpec> = k1_values
        .iter()
        .flat_map(|&k1| k2_values.iter().map(move |&k2| template.with_states(k1, k2)))
        .collect();
    let cells = compare_specs(data, &specs, config);
    let best = best_by_clic(&cells).map(|i| (cells[i].k1, cells[i].k2));
    Ok(GridReport { k1_values: k1_values.to_vec(), k2_values: k2_values.to_vec(), cells, best })
}

/// Fits each spec (for example the same states under different transition
/// constraints) and returns the cells in input order.
pub fn compare_specs(data: &PanelDataset, specs: &[ModelSpec], config: &EmConfig) -> Vec<CellFit> {
    specs.par_iter().map(|spec| fit_cell(data, spec, config)).collect()
}

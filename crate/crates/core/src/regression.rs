//! Weighted logistic and least-squares solvers over an expanded design.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense weighted design: one row per pseudo-observation.
#[derive(Debug, Clone, Default)]
pub struct WeightedDesign {
    pub names: Vec<String>,
    /// Row-major, `n_rows x names.len()`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    /// Fixed per-row addition to the predictor; empty means zero.
    pub offset: Vec<f64>,
}

impl WeightedDesign {
    pub fn new(names: Vec<String>) -> Self {
        Self { names, ..Default::default() }
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn push(&mut self, row: &[f64], y: f64, w: f64) {
        debug_assert_eq!(row.len(), self.n_cols());
        self.x.extend_from_slice(row);
        self.y.push(y);
        self.w.push(w);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.x[i * p..(i + 1) * p]
    }

    fn offset(&self, i: usize) -> f64 {
        self.offset.get(i).copied().unwrap_or(0.0)
    }

    fn predictor(&self, i: usize, b: &[f64]) -> f64 {
        self.offset(i) + self.row(i).iter().zip(b).map(|(x, c)| x * c).sum::<f64>()
    }

    /// `X' diag(d) X` and `X' e` for per-row factors `d`, `e`.
    fn cross_products(&self, d: &[f64], e: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.n_cols();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xte = DVector::zeros(p);
        for i in 0..self.n_rows() {
            let row = self.row(i);
            for a in 0..p {
                if row[a] == 0.0 {
                    continue;
                }
                xte[a] += row[a] * e[i];
                let ra = row[a] * d[i];
                for b in 0..=a {
                    xtx[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(b, a)] = xtx[(a, b)];
            }
        }
        (xtx, xte)
    }
}

/// Columns that are (numerically) linear combinations of earlier ones, found
/// by a sequential Cholesky of the Gram matrix.
pub fn deficient_columns(gram: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let p = gram.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut accepted: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..p {
        let diag = gram[(j, j)];
        // project column j on the accepted columns
        let mut coeffs = Vec::with_capacity(accepted.len());
        for (ai, &a) in accepted.iter().enumerate() {
            let mut s = gram[(j, a)];
            for (bi, &c) in coeffs.iter().enumerate() {
                s -= l[(ai, bi)] * c;
            }
            coeffs.push(s / l[(ai, ai)]);
        }
        let resid = diag - coeffs.iter().map(|c| c * c).sum::<f64>();
        if diag <= 0.0 || resid <= 1e-10 * diag {
            bad.push(names[j].clone());
            continue;
        }
        let row = accepted.len();
        for (bi, c) in coeffs.iter().enumerate() {
            l[(row, bi)] = *c;
        }
        l[(row, row)] = resid.sqrt();
        accepted.push(j);
    }
    bad
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let finite = a.iter().all(|v| v.is_finite());
    let fallback = a.clone();
    match a.cholesky() {
        Some(ch) if finite => {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        _ => {}
    }
    let mut columns = deficient_columns(&fallback, names);
    if columns.is_empty() {
        columns = names.to_vec();
    }
    Err(Error::SingularDesign { columns })
}

pub fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ascent direction when the Hessian is singular only because fitted
/// probabilities saturate at 0 or 1 (separation): a ridge-damped Newton step,
/// or the gradient itself. `None` when the design is deficient under the
/// observation weights alone.
fn saturated_direction(design: &WeightedDesign, info: DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let zeros = vec![0.0; design.n_rows()];
    let (gram, _) = design.cross_products(&design.w, &zeros);
    if !deficient_columns(&gram, &design.names).is_empty() {
        return None;
    }
    let scale = info.diagonal().iter().fold(0.0_f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
    let mut mu = 1e-10 * scale;
    while mu <= 1e6 * scale {
        let damped = &info + DMatrix::identity(info.nrows(), info.ncols()) * mu;
        if let Some(ch) = damped.cholesky() {
            let dir = ch.solve(grad);
            if dir.iter().all(|v| v.is_finite()) {
                return Some(dir);
            }
        }
        mu *= 100.0;
    }
    Some(grad.clone())
}

/// Weighted Bernoulli log-likelihood `sum w [y eta - log(1 + e^eta)]`.
pub fn logistic_objective(design: &WeightedDesign, b: &[f64]) -> f64 {
    (0..design.n_rows())
        .map(|i| {
            let eta = design.predictor(i, b);
            design.w[i] * (design.y[i] * eta - log1pexp(eta))
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub objective: f64,
    pub steps: usize,
    pub gradient_norm: f64,
}

/// Weighted logistic regression by Newton-Raphson from `start`, with step
/// halving so the objective never decreases.
pub fn weighted_logistic(
    design: &WeightedDesign,
    start: &[f64],
    max_steps: usize,
    gradient_tol: f64,
) -> Result<LogisticFit> {
    let n = design.n_rows();
    let mut b = start.to_vec();
    let mut objective = logistic_objective(design, &b);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut steps = 0;
    let mut gradient_norm = f64::INFINITY;
    while steps < max_steps {
        for i in 0..n {
            let psi = logistic(design.predictor(i, &b));
            d[i] = design.w[i] * psi * (1.0 - psi);
            e[i] = design.w[i] * (design.y[i] - psi);
        }
        let (info, grad) = design.cross_products(&d, &e);
        gradient_norm = grad.norm();
        if gradient_norm < gradient_tol {
            break;
        }
        let dir = match solve_spd(info.clone(), &grad, &design.names) {
            Ok(dir) => dir,
            Err(e) => saturated_direction(design, info, &grad).ok_or(e)?,
        };
        steps += 1;
        // Predicted gain below what the objective can resolve: a line search
        // cannot judge the step, but Newton is quadratic here, so take it.
        if 0.5 * grad.dot(&dir) <= 1e-14 * (1.0 + objective.abs()) {
            b.iter_mut().zip(dir.iter()).for_each(|(x, s)| *x += s);
            objective = logistic_objective(design, &b);
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = b.iter().zip(dir.iter()).map(|(x, s)| x + scale * s).collect();
            let obj = logistic_objective(design, &trial);
            if obj >= objective {
                b = trial;
                let gain = obj - objective;
                objective = obj;
                accepted = true;
                if gain == 0.0 {
                    // no representable progress left
                    return Ok(LogisticFit { coefficients: b, objective, steps, gradient_norm });
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LogisticFit { coefficients: b, objective, steps, gradient_norm })
}

/// Weighted least squares; returns the coefficients and the weighted mean
/// squared residual.
pub fn weighted_least_squares(design: &WeightedDesign) -> Result<(Vec<f64>, f64)> {
    let wy: Vec<f64> = (0..design.n_rows()).map(|i| design.w[i] * (design.y[i] - design.offset(i))).collect();
    let (xtwx, xtwy) = design.cross_products(&design.w, &wy);
    let b = solve_spd(xtwx, &xtwy, &design.names)?;
    let b: Vec<f64> = b.iter().copied().collect();
    let mut rss = 0.0;
    let mut wsum = 0.0;
    for i in 0..design.n_rows() {
        let r = design.y[i] - design.predictor(i, &b);
        rss += design.w[i] * r * r;
        wsum += design.w[i];
    }
    Ok((b, rss / wsum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("c{j}")).collect()
    }

    #[test]
    fn intercept_only_logistic_is_logit_of_mean() {
        let mut d = WeightedDesign::new(names(1));
        for (y, w) in [(1.0, 2.0), (0.0, 5.0), (1.0, 1.0)] {
            d.push(&[1.0], y, w);
        }
        let fit = weighted_logistic(&d, &[0.0], 100, 1e-10).unwrap();
        let p: f64 = 3.0 / 8.0;
        assert_abs_diff_eq!(fit.coefficients[0], (p / (1.0 - p)).ln(), epsilon = 1e-10);
    }

    #[test]
    fn wls_intercept_is_weighted_mean() {
        let mut d = WeightedDesign::new(names(1));
        for (y, w) in [(1.0, 1.0), (3.0, 3.0)] {
            d.push(&[1.0], y, w);
        }
        let (b, s2) = weighted_least_squares(&d).unwrap();
        assert_abs_diff_eq!(b[0], 2.5, epsilon = 1e-14);
        assert_abs_diff_eq!(s2, (1.0 * 2.25 + 3.0 * 0.25) / 4.0, epsilon = 1e-14);
    }

    #[test]
    fn offset_shifts_the_fitted_intercept() {
        let mut d = WeightedDesign::new(names(1));
        for (y, w) in [(1.0, 2.0), (0.0, 5.0), (1.0, 1.0)] {
            d.push(&[1.0], y, w);
        }
        d.offset = vec![0.25; 3];
        let fit = weighted_logistic(&d, &[0.0], 100, 1e-12).unwrap();
        let p: f64 = 3.0 / 8.0;
        assert_abs_diff_eq!(fit.coefficients[0] + 0.25, (p / (1.0 - p)).ln(), epsilon = 1e-10);
        d.y = vec![1.0, 3.0, 3.0];
        let (b, _) = weighted_least_squares(&d).unwrap();
        assert_abs_diff_eq!(b[0] + 0.25, (2.0 + 15.0 + 3.0) / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn separated_data_still_ascends() {
        // x = 1 rows are all successes: the slope MLE is infinite
        let mut d = WeightedDesign::new(names(2));
        for (x, y) in [(0.0, 0.0), (0.0, 1.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0)] {
            d.push(&[1.0, x], y, 1.0);
        }
        let start = [0.0, 40.0];
        let fit = weighted_logistic(&d, &start, 100, 1e-10).unwrap();
        assert!(fit.objective >= logistic_objective(&d, &start));
        assert_abs_diff_eq!(fit.coefficients[0], (1.0_f64 / 2.0).ln(), epsilon = 1e-8);
    }

    #[test]
    fn collinear_columns_are_named() {
        let mut d = WeightedDesign::new(vec!["a".into(), "b".into(), "c".into()]);
        for (i, y) in [0.0, 1.0, 1.0, 0.0, 1.0].iter().enumerate() {
            let x = i as f64;
            d.push(&[1.0, x, 2.0 * x], *y, 1.0);
        }
        match weighted_least_squares(&d) {
            Err(Error::SingularDesign { columns }) => assert_eq!(columns, vec!["c".to_string()]),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn zero_column_is_named() {
        let mut d = WeightedDesign::new(vec!["a".into(), "zero".into()]);
        d.push(&[1.0, 0.0], 1.0, 1.0);
        d.push(&[1.0, 0.0], 1.0, 3.0);
        assert!(matches!(
            weighted_logistic(&d, &[0.0, 0.0], 10, 1e-10),
            Err(Error::SingularDesign { columns }) if columns == vec!["zero".to_string()]
        ));
    }
}

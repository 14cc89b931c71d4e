//! Weighted logistic regression fitted by Newton-Raphson / IRLS.
//!
//! Responses may be fractional (any value in `[0, 1]`), which turns the
//! Bernoulli likelihood into a quasi-binomial one with the same score:
//!
//! ```text
//!     U(b) = Σ wᵢ dᵢ (rᵢ − expit(dᵢᵀb))
//!     I(b) = Σ wᵢ pᵢ (1 − pᵢ) dᵢ dᵢᵀ
//! ```
//!
//! Every estimator in the crate, including the inverse-probability-weighted
//! score equation, is a call into [`fit_weighted_logistic`].

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("design is rank deficient on positively weighted rows (rank {rank} of {columns})")]
    RankDeficient { rank: usize, columns: usize },
    #[error("no convergence after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence { iterations: usize, score_norm: f64 },
    #[error("separation: coefficient `{label}` diverged (|{value:.2}| > guard)")]
    Separation { label: String, value: f64 },
    #[error("fit did not converge")]
    NotConverged,
}

pub type Result<T> = std::result::Result<T, GlmError>;

/// Logistic function, saturating cleanly at both ends.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^x) without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Dense regressor matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(GlmError::InvalidInput("design needs at least one column".into()));
        }
        if labels.len() != values.ncols() {
            return Err(GlmError::DimensionMismatch(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GlmError::InvalidInput("design contains non-finite values".into()));
        }
        Ok(Self { values, labels })
    }

    /// Build from row-major data.
    pub fn from_rows(rows: usize, labels: Vec<String>, data: &[f64]) -> Result<Self> {
        let cols = labels.len();
        if data.len() != rows * cols {
            return Err(GlmError::DimensionMismatch(format!(
                "{} values for {rows}x{cols} design",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data), labels)
    }

    /// Intercept-only design with `rows` rows.
    pub fn intercept_only(rows: usize) -> Self {
        Self {
            values: DMatrix::from_element(rows, 1, 1.0),
            labels: vec![INTERCEPT.to_string()],
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn has_intercept(&self) -> bool {
        self.values.column(0).iter().all(|&v| v == 1.0)
    }

    /// Linear predictor for every row.
    pub fn linear_predictor(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        &self.values * coefficients
    }
}

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Convergence tolerance on both the score norm and the coefficient step.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Any |coefficient| above this is reported as separation.
    pub separation_guard: f64,
    /// Pivot threshold, relative to the largest pivot, for the rank check.
    pub rank_tolerance: f64,
    /// Accept quasi-separated fits: skip the guard, also stop when the
    /// relative change in log-likelihood falls below `tolerance`, and return
    /// a NaN covariance if the information is numerically singular.
    pub allow_separation: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            separation_guard: 30.0,
            rank_tolerance: 1e-10,
            allow_separation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    pub labels: Vec<String>,
    /// Inverse of the weighted observed information at the optimum.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
}

impl FitResult {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.coefficients[i])
    }

    pub fn standard_error(&self, index: usize) -> f64 {
        self.covariance[(index, index)].max(0.0).sqrt()
    }
}

/// Weighted score Σ wᵢ dᵢ (rᵢ − expit(dᵢᵀb)).
pub fn weighted_score(
    design: &DesignMatrix,
    response: &[f64],
    weights: &[f64],
    coefficients: &DVector<f64>,
) -> DVector<f64> {
    let eta = design.linear_predictor(coefficients);
    let p = design.columns();
    let mut score = DVector::zeros(p);
    for i in 0..design.rows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let resid = w * (response[i] - expit(eta[i]));
        for j in 0..p {
            score[j] += design.get(i, j) * resid;
        }
    }
    score
}

fn check_inputs(design: &DesignMatrix, response: &[f64], weights: &[f64]) -> Result<()> {
    let n = design.rows();
    if response.len() != n || weights.len() != n {
        return Err(GlmError::DimensionMismatch(format!(
            "design has {n} rows, response {} and weights {}",
            response.len(),
            weights.len()
        )));
    }
    if let Some(r) = response.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(GlmError::InvalidInput(format!("response {r} outside [0, 1]")));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(GlmError::InvalidInput(format!("invalid weight {w}")));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(GlmError::InvalidInput("no positive weights".into()));
    }
    Ok(())
}

/// Numerical rank of a symmetric PSD matrix by diagonally pivoted Cholesky.
pub fn pivoted_rank(matrix: &DMatrix<f64>, relative_tolerance: f64) -> usize {
    let n = matrix.nrows();
    let mut a = matrix.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut largest = 0.0_f64;
    for k in 0..n {
        let (piv, &val) = perm[k..]
            .iter()
            .enumerate()
            .map(|(off, &idx)| (k + off, &a[(idx, idx)]))
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("non-empty");
        if k == 0 {
            largest = val;
        }
        if !(val > relative_tolerance * largest) || val <= 0.0 {
            return k;
        }
        perm.swap(k, piv);
        let pk = perm[k];
        let l_kk = val.sqrt();
        // Schur complement update on the remaining pivots.
        let col: Vec<f64> = perm[k + 1..].iter().map(|&i| a[(i, pk)] / l_kk).collect();
        for (ii, &i) in perm[k + 1..].iter().enumerate() {
            for (jj, &j) in perm[k + 1..].iter().enumerate() {
                a[(i, j)] -= col[ii] * col[jj];
            }
        }
    }
    n
}

struct Evaluation {
    score: DVector<f64>,
    information: DMatrix<f64>,
    objective: f64,
}

fn separation_at_largest(design: &DesignMatrix, b: &DVector<f64>) -> GlmError {
    let (j, v) = b
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
        .map(|(j, v)| (j, *v))
        .unwrap_or((0, 0.0));
    GlmError::Separation {
        label: design.labels[j].clone(),
        value: v,
    }
}

fn evaluate(design: &DesignMatrix, response: &[f64], weights: &[f64], b: &DVector<f64>) -> Evaluation {
    let p = design.columns();
    let eta = design.linear_predictor(b);
    let mut score = DVector::zeros(p);
    let mut information = DMatrix::zeros(p, p);
    let mut objective = 0.0;
    let mut row = vec![0.0; p];
    for i in 0..design.rows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let e = eta[i];
        let mu = expit(e);
        let r = response[i];
        // r·log(mu) + (1−r)·log(1−mu) = r·e − log(1 + e^e)
        objective += w * (r * e - log1p_exp(e));
        let resid = w * (r - mu);
        let v = w * mu * (1.0 - mu);
        for j in 0..p {
            row[j] = design.get(i, j);
        }
        for j in 0..p {
            score[j] += row[j] * resid;
            let vj = v * row[j];
            if vj == 0.0 {
                continue;
            }
            for k in 0..=j {
                information[(j, k)] += vj * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            information[(k, j)] = information[(j, k)];
        }
    }
    Evaluation {
        score,
        information,
        objective,
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Σ wᵢ dᵢ dᵢᵀ over positively weighted rows that pass `keep`.
fn weighted_cross<F: Fn(usize) -> bool>(design: &DesignMatrix, weights: &[f64], keep: F) -> DMatrix<f64> {
    let p = design.columns();
    let mut cross = DMatrix::<f64>::zeros(p, p);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 || !keep(i) {
            continue;
        }
        for j in 0..p {
            let dj = w * design.get(i, j);
            for k in 0..p {
                cross[(j, k)] += dj * design.get(i, k);
            }
        }
    }
    cross
}

/// Maximum (quasi-)likelihood logistic fit with per-row weights.
pub fn fit_weighted_logistic(
    design: &DesignMatrix,
    response: &[f64],
    weights: &[f64],
) -> Result<FitResult> {
    fit_weighted_logistic_with(design, response, weights, &FitOptions::default())
}

pub fn fit_weighted_logistic_with(
    design: &DesignMatrix,
    response: &[f64],
    weights: &[f64],
    options: &FitOptions,
) -> Result<FitResult> {
    check_inputs(design, response, weights)?;
    let p = design.columns();

    let total_weight: f64 = weights.iter().sum();
    let weighted_response: f64 = weights.iter().zip(response).map(|(w, r)| w * r).sum();
    let rank = pivoted_rank(&weighted_cross(design, weights, |_| true), options.rank_tolerance);
    if rank < p {
        return Err(GlmError::RankDeficient { rank, columns: p });
    }

    let mean = weighted_response / total_weight;
    let mut b = DVector::zeros(p);
    if design.has_intercept() {
        if mean <= 0.0 || mean >= 1.0 {
            return Err(GlmError::Separation {
                label: design.labels[0].clone(),
                value: f64::INFINITY,
            });
        }
        b[0] = logit(mean);
    }

    let mut eval = evaluate(design, response, weights, &b);
    let mut iterations = 0;
    loop {
        let score_norm = eval.score.norm();
        if score_norm <= options.tolerance {
            break;
        }
        if iterations >= options.max_iterations {
            return Err(GlmError::NonConvergence {
                iterations,
                score_norm,
            });
        }
        iterations += 1;

        let step = match eval.information.clone().cholesky() {
            Some(chol) => chol.solve(&eval.score),
            None if options.allow_separation => break,
            None => return Err(separation_at_largest(design, &b)),
        };

        // Step halving keeps the concave objective from decreasing.
        let mut scale = 1.0;
        let mut candidate;
        let mut next;
        loop {
            candidate = &b + &step * scale;
            next = evaluate(design, response, weights, &candidate);
            if next.objective >= eval.objective - 1e-12 * eval.objective.abs() || scale < 1e-4 {
                break;
            }
            scale *= 0.5;
        }
        let change = max_abs(&(&candidate - &b));
        let objective_change = (next.objective - eval.objective).abs() / (next.objective.abs() + 0.1);
        b = candidate;
        eval = next;

        if options.allow_separation {
            if objective_change < options.tolerance {
                break;
            }
            continue;
        }
        if let Some((j, v)) = b
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() > options.separation_guard)
        {
            return Err(GlmError::Separation {
                label: design.labels[j].clone(),
                value: *v,
            });
        }
        if change < options.tolerance && eval.score.norm() <= options.tolerance {
            break;
        }
    }

    if !options.allow_separation {
        // Rows fitted at probability 0 or 1 carry no information. If the
        // rest no longer identify every coefficient, the score only vanished
        // because those rows saturated: the maximum is at infinity.
        let eta = design.linear_predictor(&b);
        let informative = weighted_cross(design, weights, |i| expit(-eta[i].abs()) > options.tolerance);
        if pivoted_rank(&informative, options.rank_tolerance) < p {
            return Err(separation_at_largest(design, &b));
        }
    }

    let covariance = match eval.information.clone().cholesky() {
        Some(chol) => {
            let inv = chol.inverse();
            (&inv + inv.transpose()) * 0.5
        }
        None if options.allow_separation => DMatrix::from_element(p, p, f64::NAN),
        None => {
            return Err(GlmError::RankDeficient {
                rank: pivoted_rank(&eval.information, options.rank_tolerance),
                columns: p,
            })
        }
    };

    Ok(FitResult {
        coefficients: b,
        labels: design.labels.clone(),
        covariance,
        converged: eval.score.norm() <= options.tolerance,
        iterations,
        final_score_norm: eval.score.norm(),
    })
}

/// Fitted probabilities for every row of `design`.
pub fn predict(fit: &FitResult, design: &DesignMatrix) -> Result<Vec<f64>> {
    if design.columns() != fit.coefficients.len() {
        return Err(GlmError::DimensionMismatch(format!(
            "design has {} columns, fit has {} coefficients",
            design.columns(),
            fit.coefficients.len()
        )));
    }
    Ok(design
        .linear_predictor(&fit.coefficients)
        .iter()
        .map(|&e| expit(e))
        .collect())
}

/// Two-sided standard normal quantile for a central interval of `level`.
pub fn normal_quantile(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + level / 2.0)
}

pub fn interval_from_se(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    let half = normal_quantile(level) * se;
    (estimate - half, estimate + half)
}

/// Model-based Wald interval for one coefficient.
pub fn wald_interval(fit: &FitResult, coefficient_index: usize, level: f64) -> Result<(f64, f64)> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(GlmError::InvalidInput(format!("level {level} outside (0, 1)")));
    }
    if coefficient_index >= fit.coefficients.len() {
        return Err(GlmError::DimensionMismatch(format!(
            "coefficient {coefficient_index} of {}",
            fit.coefficients.len()
        )));
    }
    Ok(interval_from_se(
        fit.coefficients[coefficient_index],
        fit.standard_error(coefficient_index),
        level,
    ))
}

//! EM estimation of the affine transform and the posterior match matrix.
//!
//! The E-step applies Bayes' rule column by column in log space. The M-step
//! is a closed-form weighted least-squares affine fit over all reference
//! rows `i >= 1`; the unmatched row carries no information about A and b.
//! sigma^2 is held fixed for the whole run.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gaussian_log_density, AffineTransform, Configuration, ModelParams, Region};
use crate::priors::PriorMatrix;

/// Tolerance on posterior row sums.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// Posterior match probabilities: `p[(j, i)] = p(M_ij = 1 | x_j)`, one row
/// per observed point and one column per reference row (column 0 is the
/// unmatched row).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    p: DMatrix<f64>,
}

impl PosteriorMatrix {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if p.ncols() < 1 {
            return Err(Error::InvalidInput("posterior needs an unmatched column".into()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("posterior entry outside [0, 1]".into()));
        }
        for (j, row) in p.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!("posterior row {j} sums to {s}")));
            }
        }
        Ok(Self { p })
    }

    /// Number of observed points (K + n).
    pub fn observed(&self) -> usize {
        self.p.nrows()
    }

    /// Number of reference rows including the unmatched row (K + m + 1).
    pub fn rows(&self) -> usize {
        self.p.ncols()
    }

    /// p_ji.
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.p[(j, i)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }
}

/// Regression coefficients `R = (mu*' mu*)^-1 mu*' x` of the marker fit.
#[derive(Debug, Clone, PartialEq)]
pub struct InitRegression {
    /// (d + 1) x d; row 0 holds b', the remaining rows hold A'.
    pub r: DMatrix<f64>,
}

impl InitRegression {
    /// Least-squares regression of `x` on `(1, mu)` over paired points.
    pub fn fit(mu: &[DVector<f64>], x: &[DVector<f64>]) -> Result<Self> {
        if mu.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reference markers vs {} observed markers",
                mu.len(),
                x.len()
            )));
        }
        let k = mu.len();
        let d = mu.first().map(|p| p.len()).unwrap_or(0);
        if d == 0 {
            return Err(Error::InsufficientMarkers { needed: 1, found: 0 });
        }
        if k < d + 1 {
            return Err(Error::InsufficientMarkers {
                needed: d + 1,
                found: k,
            });
        }
        if mu.iter().chain(x).any(|p| p.len() != d) {
            return Err(Error::ShapeMismatch("mixed dimensions among markers".into()));
        }
        let design = DMatrix::from_fn(k, d + 1, |r, c| if c == 0 { 1.0 } else { mu[r][c - 1] });
        let target = DMatrix::from_fn(k, d, |r, c| x[r][c]);
        let svd = design.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(Error::DegenerateLandmarks(format!(
                "marker design matrix is rank deficient (singular values {smin:e} / {smax:e})"
            )));
        }
        let r = svd
            .solve(&target, 0.0)
            .map_err(|e| Error::DegenerateLandmarks(e.to_string()))?;
        Ok(Self { r })
    }

    pub fn transform(&self) -> Result<AffineTransform> {
        let d = self.r.ncols();
        let b = self.r.row(0).transpose();
        let a = self.r.rows(1, d).transpose();
        AffineTransform::new(a, b).map_err(|e| match e {
            Error::InvalidTransform(msg) => Error::DegenerateLandmarks(msg),
            other => other,
        })
    }
}

/// Starting transform: least-squares affine map of reference markers onto
/// observed markers.
pub fn initial_transform(mu_markers: &[DVector<f64>], x_markers: &[DVector<f64>]) -> Result<AffineTransform> {
    InitRegression::fit(mu_markers, x_markers)?.transform()
}

/// Residual degrees of freedom `nu = dK - d^2 - d`.
pub fn degrees_of_freedom(dim: usize, k: usize) -> Option<usize> {
    (dim * k).checked_sub(dim * dim + dim).filter(|&nu| nu > 0)
}

/// sigma^2 estimate from the marker residuals of `t0` with `nu` degrees of freedom.
pub fn estimate_sigma2(mu_markers: &[DVector<f64>], x_markers: &[DVector<f64>], t0: &AffineTransform) -> Result<f64> {
    let k = mu_markers.len();
    if x_markers.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{k} reference markers vs {} observed",
            x_markers.len()
        )));
    }
    let d = t0.dim();
    let nu = degrees_of_freedom(d, k).ok_or(Error::InsufficientMarkers {
        needed: d + 2,
        found: k,
    })?;
    let ss: f64 = mu_markers
        .iter()
        .zip(x_markers)
        .map(|(m, x)| (x - t0.apply_point(m)).norm_squared())
        .sum();
    Ok(ss / nu as f64)
}

fn check_shapes(x: &Configuration, mu: &Configuration, q: &PriorMatrix, t: &AffineTransform) -> Result<()> {
    if q.cols() != x.len() || q.rows() != mu.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "prior is {}x{}, expected {}x{}",
            q.rows(),
            q.cols(),
            mu.len() + 1,
            x.len()
        )));
    }
    if x.dim() != mu.dim() || t.dim() != x.dim() {
        return Err(Error::ShapeMismatch("dimension mismatch between inputs".into()));
    }
    Ok(())
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("sigma2 = {sigma2} must be positive")))
    }
}

/// E-step output together with the observed-data log-likelihood at the
/// transform it was computed from.
struct EStep {
    posteriors: PosteriorMatrix,
    loglik: f64,
    degenerate_columns: usize,
}

fn e_step_full(
    x: &Configuration,
    mu: &Configuration,
    t: &AffineTransform,
    q: &PriorMatrix,
    sigma2: f64,
    omega: &Region,
) -> Result<EStep> {
    check_shapes(x, mu, q, t)?;
    check_sigma2(sigma2)?;
    let d = x.dim();
    let mapped: Vec<DVector<f64>> = mu.points().iter().map(|p| t.apply_point(p)).collect();
    let log_background = -omega.area().ln();
    let rows = mu.len() + 1;
    let mut p = DMatrix::zeros(x.len(), rows);
    let mut loglik = 0.0;
    let mut degenerate_columns = 0;
    let mut logs = vec![0.0; rows];
    for (j, xj) in x.points().iter().enumerate() {
        for (i, slot) in logs.iter_mut().enumerate() {
            let qij = q.get(i, j);
            *slot = if qij > 0.0 {
                let ld = if i == 0 {
                    log_background
                } else {
                    gaussian_log_density((xj - &mapped[i - 1]).norm_squared(), sigma2, d)
                };
                qij.ln() + ld
            } else {
                f64::NEG_INFINITY
            };
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            log::warn!("observed point {j}: every candidate has zero prior mass; assigning it to the unmatched row");
            degenerate_columns += 1;
            p[(j, 0)] = 1.0;
            loglik = f64::NEG_INFINITY;
            continue;
        }
        let mut total = 0.0;
        for (i, l) in logs.iter().enumerate() {
            let e = (l - max).exp();
            p[(j, i)] = e;
            total += e;
        }
        for i in 0..rows {
            p[(j, i)] /= total;
        }
        loglik += max + total.ln();
    }
    Ok(EStep {
        posteriors: PosteriorMatrix { p },
        loglik,
        degenerate_columns,
    })
}

/// Posterior match probabilities given the current transform.
pub fn e_step(
    x: &Configuration,
    mu: &Configuration,
    t: &AffineTransform,
    q: &PriorMatrix,
    sigma2: f64,
    omega: &Region,
) -> Result<PosteriorMatrix> {
    e_step_full(x, mu, t, q, sigma2, omega).map(|s| s.posteriors)
}

/// `sum_j log sum_i q_ij p(x_j | M_ij = 1)`.
pub fn observed_loglik(
    x: &Configuration,
    mu: &Configuration,
    t: &AffineTransform,
    q: &PriorMatrix,
    sigma2: f64,
    omega: &Region,
) -> Result<f64> {
    e_step_full(x, mu, t, q, sigma2, omega).map(|s| s.loglik)
}

/// Closed-form weighted least-squares affine fit:
/// minimises `sum_{i>=1} sum_j p_ji |x_j - A mu_i - b|^2`.
pub fn m_step(x: &Configuration, mu: &Configuration, p: &PosteriorMatrix) -> Result<AffineTransform> {
    if p.observed() != x.len() || p.rows() != mu.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "posterior is {}x{}, expected {}x{}",
            p.observed(),
            p.rows(),
            x.len(),
            mu.len() + 1
        )));
    }
    let d = x.dim();
    let pm = p.matrix();
    // Marginal weights of observed points and of reference points.
    let mut wx = vec![0.0; x.len()];
    let mut wmu = vec![0.0; mu.len()];
    for j in 0..x.len() {
        for i in 0..mu.len() {
            let w = pm[(j, i + 1)];
            wx[j] += w;
            wmu[i] += w;
        }
    }
    let total: f64 = wx.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry("no posterior mass on any matched row".into()));
    }
    let mut x_bar = DVector::zeros(d);
    for (xj, w) in x.points().iter().zip(&wx) {
        x_bar.axpy(*w, xj, 1.0);
    }
    x_bar /= total;
    let mut mu_bar = DVector::zeros(d);
    for (mi, w) in mu.points().iter().zip(&wmu) {
        mu_bar.axpy(*w, mi, 1.0);
    }
    mu_bar /= total;

    let xc: Vec<DVector<f64>> = x.points().iter().map(|v| v - &x_bar).collect();
    let mc: Vec<DVector<f64>> = mu.points().iter().map(|v| v - &mu_bar).collect();
    let mut cross = DMatrix::zeros(d, d);
    for (j, xcj) in xc.iter().enumerate() {
        for (i, mci) in mc.iter().enumerate() {
            let w = pm[(j, i + 1)];
            if w != 0.0 {
                cross.ger(w, xcj, mci, 1.0);
            }
        }
    }
    let mut scatter = DMatrix::zeros(d, d);
    for (mci, w) in mc.iter().zip(&wmu) {
        if *w != 0.0 {
            scatter.ger(*w, mci, mci, 1.0);
        }
    }
    let eig = scatter.clone().symmetric_eigen();
    let emax = eig.eigenvalues.max();
    let emin = eig.eigenvalues.min();
    if !(emin > 1e-12 * emax.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateGeometry(format!(
            "weighted reference scatter is singular (eigenvalues {emin:e} / {emax:e})"
        )));
    }
    let inv = scatter
        .cholesky()
        .ok_or_else(|| Error::DegenerateGeometry("weighted reference scatter is not positive definite".into()))?
        .inverse();
    let a = cross * inv;
    let b = &x_bar - &a * &mu_bar;
    AffineTransform::new(a, b).map_err(|e| match e {
        Error::InvalidTransform(msg) => Error::DegenerateGeometry(msg),
        other => other,
    })
}

/// Mean squared change over every cell of two posterior matrices.
pub fn mean_squared_change(prev: &PosteriorMatrix, next: &PosteriorMatrix) -> Result<f64> {
    if prev.matrix().shape() != next.matrix().shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            prev.matrix().shape(),
            next.matrix().shape()
        )));
    }
    let n = prev.matrix().len();
    if n == 0 {
        return Ok(0.0);
    }
    let ss: f64 = prev
        .matrix()
        .iter()
        .zip(next.matrix().iter())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(ss / n as f64)
}

/// True when the mean squared posterior change is at most `10^-l`.
pub fn converged(prev: &PosteriorMatrix, next: &PosteriorMatrix, l: u32) -> Result<bool> {
    Ok(mean_squared_change(prev, next)? <= 10f64.powi(-(l as i32)))
}

/// One line of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    /// `None` for the starting point.
    pub mean_sq_change: Option<f64>,
    pub transform: AffineTransform,
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub transform: AffineTransform,
    pub posteriors: PosteriorMatrix,
    /// Number of M-steps performed.
    pub iteration: usize,
    pub observed_loglik: f64,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

/// Alternates E- and M-steps from `t0` until the posteriors settle or the
/// iteration budget runs out. Hitting the budget is reported through
/// `EmState::converged`, not as an error.
pub fn run_em(
    x: &Configuration,
    mu: &Configuration,
    q: &PriorMatrix,
    params: &ModelParams,
    t0: &AffineTransform,
    omega: &Region,
) -> Result<EmState> {
    params.validate()?;
    let sigma2 = params.sigma2;
    let tol = params.convergence_tolerance();
    let mut t = t0.clone();
    let first = e_step_full(x, mu, &t, q, sigma2, omega)?;
    let mut p = first.posteriors;
    let mut ll = first.loglik;
    let mut trace = vec![IterationRecord {
        iteration: 0,
        loglik: ll,
        mean_sq_change: None,
        transform: t.clone(),
    }];
    let mut done = false;
    let mut iteration = 0;
    while iteration < params.max_iterations {
        iteration += 1;
        let t_next = m_step(x, mu, &p)?;
        let step = e_step_full(x, mu, &t_next, q, sigma2, omega)?;
        if step.degenerate_columns > 0 {
            log::debug!("iteration {iteration}: {} degenerate columns", step.degenerate_columns);
        }
        let change = mean_squared_change(&p, &step.posteriors)?;
        t = t_next;
        p = step.posteriors;
        ll = step.loglik;
        trace.push(IterationRecord {
            iteration,
            loglik: ll,
            mean_sq_change: Some(change),
            transform: t.clone(),
        });
        log::trace!("em iteration {iteration}: loglik {ll}, mean sq change {change:e}");
        if change <= tol {
            done = true;
            break;
        }
    }
    if !done {
        log::warn!("EM stopped after {iteration} iterations without converging");
    }
    Ok(EmState {
        transform: t,
        posteriors: p,
        iteration,
        observed_loglik: ll,
        converged: done,
        trace,
    })
}

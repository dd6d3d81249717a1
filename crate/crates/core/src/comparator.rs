//! Binary regression with a complementary log-log link, fitted by IRLS. This is the
//! gold-standard-only comparator, and on person-period data it is the grouped-time
//! proportional hazards model.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::estimation::FitResult;
use crate::numeric::spd_inverse;
use crate::survey::{sandwich_covariance, SurveyDesign, SurveyError};

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("no rows with an observed outcome")]
    Empty,
    #[error("design matrix has {rows} rows but {found} responses/weights")]
    Shape { rows: usize, found: usize },
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error("covariance unavailable for the {0} fit")]
    NoCovariance(&'static str),
    #[error("coefficient index {0} out of range")]
    Index(usize),
}

const ETA_MAX: f64 = 30.0;

/// `p = 1 − exp(−exp(η))`, with η clamped at 30.
pub fn cloglog_inverse(eta: f64) -> f64 {
    -(-eta.min(ETA_MAX).exp()).exp_m1()
}

/// `η = log(−log(1 − p))`.
pub fn cloglog(p: f64) -> f64 {
    (-(-p).ln_1p()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmCovKind {
    ModelBased,
    Sandwich,
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub cov_kind: GlmCovKind,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    /// Weighted score at the returned coefficients.
    pub score: Vec<f64>,
}

impl GlmFit {
    pub fn se(&self) -> Option<Vec<f64>> {
        self.covariance.as_ref().map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
    }
}

/// One observation for the intercept-plus-covariates comparator.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmRow {
    pub y: bool,
    pub x: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Stop when the largest coefficient update falls below this.
    pub step_tol: f64,
    /// Coefficients beyond this magnitude are treated as separation.
    pub divergence: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, step_tol: 1e-12, divergence: 50.0 }
    }
}

struct Pieces {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
    /// Per-row unweighted score factor r_i, with U_i = r_i x_i.
    resid: Vec<f64>,
}

fn evaluate(x: &DMatrix<f64>, y: &[f64], w: &[f64], coef: &DVector<f64>) -> Pieces {
    let q = x.ncols();
    let eta = x * coef;
    let mut loglik = 0.0;
    let mut score = DVector::zeros(q);
    let mut info = DMatrix::zeros(q, q);
    let mut resid = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let e = eta[i].min(ETA_MAX);
        let ee = e.exp();
        let mu = -(-ee).exp_m1();
        let log_mu = mu.ln();
        loglik += w[i] * (y[i] * log_mu - (1.0 - y[i]) * ee);
        // dμ/dη = e^η (1 − μ); score factor (y − μ) e^η / μ, Fisher weight e^{2η}(1 − μ)/μ
        let r = if mu > 0.0 { (y[i] - mu) * ee / mu } else { y[i] - 1.0 };
        let fw = if mu > 0.0 { ee * ee * (1.0 - mu) / mu } else { ee };
        resid.push(r);
        let row = x.row(i);
        for a in 0..q {
            score[a] += w[i] * r * row[a];
            for b in 0..=a {
                info[(a, b)] += w[i] * fw * row[a] * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    Pieces { loglik, score, info, resid }
}

/// Weighted cloglog regression of `y` on the columns of `x` (no intercept added).
///
/// With a design the covariance is the stratified cluster sandwich of the influence rows
/// `(X'WX)⁻¹ U_i`; without one it is `(X'WX)⁻¹`.
pub fn fit_cloglog_matrix(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    design: Option<&SurveyDesign>,
    options: &IrlsOptions,
) -> Result<GlmFit, GlmError> {
    let n = x.nrows();
    if n == 0 {
        return Err(GlmError::Empty);
    }
    for len in [y.len(), weights.len()] {
        if len != n {
            return Err(GlmError::Shape { rows: n, found: len });
        }
    }
    if let Some(d) = design {
        if d.len() != n {
            return Err(GlmError::Shape { rows: n, found: d.len() });
        }
    }
    let q = x.ncols();
    let mut coef = DVector::zeros(q);
    let mut cur = evaluate(x, y, weights, &coef);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let Some(step) = cur.info.clone().cholesky().map(|c| c.solve(&cur.score)) else { break };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &coef + &step * t;
            let next = evaluate(x, y, weights, &cand);
            if next.loglik.is_finite() && next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs() {
                accepted = Some((cand, next));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, next)) = accepted else { break };
        let delta = (&cand - &coef).abs().max();
        coef = cand;
        cur = next;
        if coef.abs().max() > options.divergence {
            warn!("cloglog coefficients diverging (possible separation)");
            break;
        }
        if delta < options.step_tol {
            converged = true;
            break;
        }
    }
    if !converged && iterations >= options.max_iter {
        warn!("cloglog IRLS hit {} iterations", options.max_iter);
    }

    let bread_inv = spd_inverse(&cur.info);
    let (covariance, cov_kind) = match (design, bread_inv) {
        (None, inv) => (inv, GlmCovKind::ModelBased),
        (Some(d), Some(inv)) => {
            let mut infl = DMatrix::zeros(n, q);
            for i in 0..n {
                let u = x.row(i).transpose() * cur.resid[i];
                infl.row_mut(i).copy_from(&(&inv * u).transpose());
            }
            (Some(sandwich_covariance(&infl, d)?), GlmCovKind::Sandwich)
        }
        (Some(_), None) => (None, GlmCovKind::Sandwich),
    };

    Ok(GlmFit {
        coefficients: coef.iter().copied().collect(),
        covariance,
        cov_kind,
        converged,
        iterations,
        loglik: cur.loglik,
        score: cur.score.iter().copied().collect(),
    })
}

/// Intercept plus covariates. Coefficient 0 is the intercept.
pub fn fit_cloglog(rows: &[GlmRow], design: Option<&SurveyDesign>) -> Result<GlmFit, GlmError> {
    if rows.is_empty() {
        return Err(GlmError::Empty);
    }
    let p = rows[0].x.len();
    let x = DMatrix::from_fn(rows.len(), p + 1, |i, j| if j == 0 { 1.0 } else { rows[i].x[j - 1] });
    let y: Vec<f64> = rows.iter().map(|r| if r.y { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.weight).collect();
    fit_cloglog_matrix(&x, &y, &w, design, &IrlsOptions::default())
}

/// Gold-standard-only comparator on the subjects with an observed status. Survey weights
/// and the sandwich are used when `design` (covering all subjects) is given.
pub fn fit_standard(dataset: &Dataset, design: Option<&SurveyDesign>) -> Result<GlmFit, GlmError> {
    let keep: Vec<bool> = dataset.subjects.iter().map(|s| s.gs_status.is_some()).collect();
    let rows: Vec<GlmRow> = dataset
        .subjects
        .iter()
        .filter_map(|s| {
            s.gs_status.map(|y| GlmRow {
                y,
                x: s.covariates.clone(),
                weight: if design.is_some() { s.weight } else { 1.0 },
            })
        })
        .collect();
    let sub = design.map(|d| d.subset(&keep)).transpose()?;
    fit_cloglog(&rows, sub.as_ref())
}

/// `Var_standard(β_k) / Var_proposed(β_k)`; above 1 favours the proposed estimator.
/// `k` indexes β (the comparator's intercept is skipped).
pub fn relative_efficiency(proposed: &FitResult, standard: &GlmFit, k: usize) -> Result<f64, GlmError> {
    let vp = proposed.full_cov.as_ref().ok_or(GlmError::NoCovariance("proposed"))?;
    let vs = standard.covariance.as_ref().ok_or(GlmError::NoCovariance("standard"))?;
    if k >= proposed.n_covariates() || k + 1 >= vs.nrows() {
        return Err(GlmError::Index(k));
    }
    Ok(variance_ratio(vs[(k + 1, k + 1)], vp[(k, k)]))
}

pub fn variance_ratio(var_standard: f64, var_proposed: f64) -> f64 {
    var_standard / var_proposed
}

/// Person-period expansion for grouped-time proportional hazards. `event_interval[i]` is
/// the interval (1-based) containing the event, or `None` if event-free through visit J.
/// Columns are J interval indicators followed by the covariates.
pub fn person_period(
    event_interval: &[Option<usize>],
    covariates: &[Vec<f64>],
    visits: usize,
) -> (DMatrix<f64>, Vec<f64>) {
    let p = covariates.first().map_or(0, Vec::len);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (ev, x) in event_interval.iter().zip(covariates) {
        let last = ev.unwrap_or(visits).min(visits);
        for m in 1..=last {
            let mut r = vec![0.0; visits + p];
            r[m - 1] = 1.0;
            r[visits..].copy_from_slice(x);
            rows.push(r);
            y.push(if *ev == Some(m) { 1.0 } else { 0.0 });
        }
    }
    let x = DMatrix::from_fn(rows.len(), visits + p, |i, j| rows[i][j]);
    (x, y)
}

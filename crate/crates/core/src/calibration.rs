//! Linear regression calibration of an error-prone exposure, and multiple imputation of
//! the calibrated exposure with a median/MAD combining rule.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{mad, median, psd_factor, to_rows};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration subset has {n} rows; at least {needed} are required")]
    TooFew { n: usize, needed: usize },
    #[error("calibration design is rank deficient: column `{0}` is collinear with earlier columns")]
    RankDeficient(String),
    #[error("row {row}: expected {expected} covariates, found {found}")]
    Covariates { row: usize, expected: usize, found: usize },
    #[error("at least two imputations are required, got {0}")]
    TooFewImputations(usize),
    #[error("bootstrap draws need the calibration subset")]
    NoSubset,
    #[error("all {0} imputations failed")]
    AllFailed(usize),
}

/// One row of the calibration subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub x_double_star: f64,
    pub x_star: f64,
    pub z: Vec<f64>,
}

/// Error-prone exposure and other covariates for a subject needing a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRow {
    pub x_star: f64,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// Intercept, coefficient on x*, then one per z column.
    pub delta: Vec<f64>,
    pub delta_cov: Vec<Vec<f64>>,
    pub residual_variance: f64,
    pub design_info: Vec<String>,
    pub n: usize,
}

impl CalibrationModel {
    pub fn n_z(&self) -> usize {
        self.delta.len() - 2
    }

    pub fn delta_cov_matrix(&self) -> DMatrix<f64> {
        let k = self.delta.len();
        DMatrix::from_fn(k, k, |i, j| self.delta_cov[i][j])
    }

    /// Same model with different coefficients (covariance unchanged).
    pub fn with_delta(&self, delta: Vec<f64>) -> Self {
        Self { delta, ..self.clone() }
    }
}

fn column_names(q: usize) -> Vec<String> {
    let mut names = vec!["intercept".to_string(), "x_star".to_string()];
    names.extend((1..=q).map(|k| format!("z{k}")));
    names
}

/// OLS of x** on (1, x*, z). Coefficient covariance is `σ̂²(X'X)⁻¹` with the residual
/// variance on n − (q + 2) degrees of freedom.
pub fn fit_calibration(rows: &[CalibrationRow]) -> Result<CalibrationModel, CalibrationError> {
    let q = rows.first().map_or(0, |r| r.z.len());
    let k = q + 2;
    if rows.len() <= k {
        return Err(CalibrationError::TooFew { n: rows.len(), needed: k + 1 });
    }
    for (i, r) in rows.iter().enumerate() {
        if r.z.len() != q {
            return Err(CalibrationError::Covariates { row: i + 1, expected: q, found: r.z.len() });
        }
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, k, |i, j| match j {
        0 => 1.0,
        1 => rows[i].x_star,
        _ => rows[i].z[j - 2],
    });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.x_double_star));
    let names = column_names(q);

    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| x.column(j).norm()).fold(0.0f64, f64::max);
    for j in 0..k {
        if r[(j, j)].abs() <= 1e-10 * scale.max(1.0) {
            return Err(CalibrationError::RankDeficient(names[j].clone()));
        }
    }
    let qty = qr.q().transpose() * &y;
    let delta = r.solve_upper_triangular(&qty).ok_or_else(|| CalibrationError::RankDeficient(names[k - 1].clone()))?;
    let resid = &y - &x * &delta;
    let residual_variance = resid.norm_squared() / (n - k) as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| CalibrationError::RankDeficient(names[k - 1].clone()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let cov = crate::numeric::symmetrize(&(xtx_inv * residual_variance));

    Ok(CalibrationModel {
        delta: delta.iter().copied().collect(),
        delta_cov: to_rows(&cov),
        residual_variance,
        design_info: names,
        n,
    })
}

/// `x̂ = δ_0 + δ_1 x* + δ_2'z` for each row.
pub fn predict_xhat(model: &CalibrationModel, rows: &[PredictRow]) -> Result<Vec<f64>, CalibrationError> {
    let q = model.n_z();
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.z.len() != q {
                return Err(CalibrationError::Covariates { row: i + 1, expected: q, found: r.z.len() });
            }
            let d = &model.delta;
            Ok(d[0] + d[1] * r.x_star + r.z.iter().zip(&d[2..]).map(|(z, c)| z * c).sum::<f64>())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMethod {
    /// δ ~ Normal(δ̂, delta_cov).
    #[default]
    Parametric,
    /// Refit on a resample of the calibration subset.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiOptions {
    pub imputations: usize,
    pub seed: u64,
    pub method: DrawMethod,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self { imputations: 25, seed: 0, method: DrawMethod::Parametric }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub beta: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCombineResult {
    /// Median of the per-imputation estimates.
    pub point_estimate: Vec<f64>,
    /// `sqrt(median V̂ + MAD(β̂)²)` per coefficient.
    pub se: Vec<f64>,
    pub imputations: usize,
    pub failed: usize,
    /// More than 10% of the imputations failed.
    pub flagged: bool,
    pub per_imputation: Vec<Imputation>,
}

/// Robust combination of per-imputation estimates and variances.
pub fn combine(per_imputation: &[Imputation]) -> (Vec<f64>, Vec<f64>) {
    let p = per_imputation.first().map_or(0, |m| m.beta.len());
    (0..p)
        .map(|j| {
            let b: Vec<f64> = per_imputation.iter().map(|m| m.beta[j]).collect();
            let v: Vec<f64> = per_imputation.iter().map(|m| m.variance[j]).collect();
            (median(&b), (median(&v) + mad(&b).powi(2)).sqrt())
        })
        .unzip()
}

/// Draws `options.imputations` calibration coefficient vectors, predicts x̂ for `targets`
/// under each, and refits with `fit_fn(x̂) -> (β̂, diag V̂)`.
///
/// Imputation m uses stream m of a ChaCha8 generator seeded from `options.seed`, so
/// results do not depend on scheduling. Failed refits are dropped.
pub fn mi_variance<F, E>(
    fit_fn: F,
    model: &CalibrationModel,
    subset: Option<&[CalibrationRow]>,
    targets: &[PredictRow],
    options: &MiOptions,
) -> Result<MiCombineResult, CalibrationError>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>), E> + Sync,
    E: std::fmt::Display,
{
    let m_total = options.imputations;
    if m_total < 2 {
        return Err(CalibrationError::TooFewImputations(m_total));
    }
    if options.method == DrawMethod::Bootstrap && subset.is_none() {
        return Err(CalibrationError::NoSubset);
    }
    let factor = psd_factor(&model.delta_cov_matrix());
    let delta_hat = DVector::from_column_slice(&model.delta);

    let outcomes: Vec<Option<Imputation>> = (0..m_total)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(m as u64);
            let drawn = match options.method {
                DrawMethod::Parametric => {
                    let z = DVector::from_iterator(
                        delta_hat.len(),
                        (0..delta_hat.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                    );
                    model.with_delta((&delta_hat + &factor * z).iter().copied().collect())
                }
                DrawMethod::Bootstrap => {
                    let rows = subset.unwrap_or_default();
                    let resample: Vec<CalibrationRow> =
                        (0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())].clone()).collect();
                    match fit_calibration(&resample) {
                        Ok(refit) => refit,
                        Err(e) => {
                            warn!("imputation {m}: bootstrap calibration failed: {e}");
                            return None;
                        }
                    }
                }
            };
            let xhat = predict_xhat(&drawn, targets).ok()?;
            match fit_fn(&xhat) {
                Ok((beta, variance)) if beta.iter().chain(&variance).all(|v| v.is_finite()) => {
                    Some(Imputation { beta, variance })
                }
                Ok(_) => {
                    warn!("imputation {m}: non-finite estimates");
                    None
                }
                Err(e) => {
                    warn!("imputation {m}: refit failed: {e}");
                    None
                }
            }
        })
        .collect();

    let per_imputation: Vec<Imputation> = outcomes.into_iter().flatten().collect();
    let failed = m_total - per_imputation.len();
    if per_imputation.is_empty() {
        return Err(CalibrationError::AllFailed(m_total));
    }
    let flagged = failed as f64 > 0.1 * m_total as f64;
    if flagged {
        warn!("{failed} of {m_total} imputations failed");
    }
    let (point_estimate, se) = combine(&per_imputation);
    Ok(MiCombineResult { point_estimate, se, imputations: m_total, failed, flagged, per_imputation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_from(delta: &[f64], n: usize, noise: impl Fn(usize) -> f64) -> Vec<CalibrationRow> {
        (0..n)
            .map(|i| {
                let xs = (i as f64 * 0.37).sin() * 2.0;
                let z = vec![(i as f64 * 0.11).cos(), (i % 5) as f64];
                let xss = delta[0] + delta[1] * xs + delta[2] * z[0] + delta[3] * z[1] + noise(i);
                CalibrationRow { x_double_star: xss, x_star: xs, z }
            })
            .collect()
    }

    #[test]
    fn exact_linear_data() {
        let delta = [0.05, 0.5, 0.003, 0.0009];
        let m = fit_calibration(&rows_from(&delta, 30, |_| 0.0)).unwrap();
        for (a, b) in m.delta.iter().zip(&delta) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.residual_variance < 1e-25);
    }

    #[test]
    fn collinear_column_is_named() {
        let rows: Vec<CalibrationRow> = (0..10)
            .map(|i| CalibrationRow { x_double_star: i as f64, x_star: i as f64, z: vec![2.0 * i as f64] })
            .collect();
        match fit_calibration(&rows) {
            Err(CalibrationError::RankDeficient(c)) => assert_eq!(c, "z1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prediction_edge_cases() {
        let m = CalibrationModel {
            delta: vec![0.0, 1.0, 0.0],
            delta_cov: vec![vec![0.0; 3]; 3],
            residual_variance: 0.0,
            design_info: column_names(1),
            n: 0,
        };
        let rows = vec![PredictRow { x_star: 1.5, z: vec![9.0] }, PredictRow { x_star: -2.0, z: vec![1.0] }];
        assert_eq!(predict_xhat(&m, &rows).unwrap(), vec![1.5, -2.0]);
        let c = m.with_delta(vec![3.0, 0.0, 0.0]);
        assert_eq!(predict_xhat(&c, &rows).unwrap(), vec![3.0, 3.0]);
        let bad = vec![PredictRow { x_star: 1.0, z: vec![] }];
        assert!(matches!(predict_xhat(&m, &bad), Err(CalibrationError::Covariates { row: 1, .. })));
    }

    #[test]
    fn zero_covariance_gives_single_fit() {
        let model = CalibrationModel {
            delta: vec![0.1, 0.8],
            delta_cov: vec![vec![0.0; 2]; 2],
            residual_variance: 0.0,
            design_info: column_names(0),
            n: 10,
        };
        let targets: Vec<PredictRow> = (0..20).map(|i| PredictRow { x_star: i as f64, z: vec![] }).collect();
        let fit = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>), String> {
            Ok((vec![x.iter().sum::<f64>() / x.len() as f64], vec![0.0123]))
        };
        let r = mi_variance(fit, &model, None, &targets, &MiOptions::default()).unwrap();
        assert_eq!(r.se[0], 0.0123f64.sqrt());
        assert_eq!(r.failed, 0);
    }

    #[test]
    fn failures_are_counted_and_flagged() {
        let model = fit_calibration(&rows_from(&[0.0, 1.0, 0.5, 0.1], 40, |i| ((i * 7) % 3) as f64 * 0.1)).unwrap();
        let targets: Vec<PredictRow> = (0..5).map(|i| PredictRow { x_star: i as f64, z: vec![0.0, 1.0] }).collect();
        let fit = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>), String> {
            if x[0] > model.delta[0] + model.delta[3] {
                Err("no".into())
            } else {
                Ok((vec![x[0]], vec![1.0]))
            }
        };
        let r = mi_variance(fit, &model, None, &targets, &MiOptions::default()).unwrap();
        assert!(r.failed > 3 && r.flagged);
        assert_eq!(r.per_imputation.len() + r.failed, 25);
    }
}

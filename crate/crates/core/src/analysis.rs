//! Regression-calibrated analysis: substitute calibrated exposure predictions, fit the
//! proposed and comparator models, and take standard errors from multiple imputation.

use thiserror::Error;

use crate::calibration::{
    fit_calibration, mi_variance, predict_xhat, CalibrationError, CalibrationModel, CalibrationRow, MiCombineResult,
    MiOptions, PredictRow,
};
use crate::comparator::{fit_cloglog, GlmError, GlmFit, GlmRow};
use crate::data::Dataset;
use crate::estimation::{fit_prepared, EstimationError, FitOptions, FitResult};
use crate::likelihood::{AugmentedLikelihood, LikelihoodError};
use crate::survey::{SurveyDesign, SurveyError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error("exposure index {index} out of range for {p} covariates")]
    Exposure { index: usize, p: usize },
}

#[derive(Debug, Clone)]
pub struct CalibratedAnalysis {
    pub model: CalibrationModel,
    /// Calibrated exposure used by the main fits.
    pub xhat: Vec<f64>,
    pub proposed: FitResult,
    pub proposed_mi: MiCombineResult,
    pub standard: GlmFit,
    pub standard_mi: MiCombineResult,
}

impl CalibratedAnalysis {
    /// `(β̂, SE)` for the proposed estimator: main-fit point, imputation SE.
    pub fn proposed_estimates(&self) -> (Vec<f64>, Vec<f64>) {
        (self.proposed.params.beta.clone(), self.proposed_mi.se.clone())
    }

    pub fn standard_estimates(&self) -> (Vec<f64>, Vec<f64>) {
        (self.standard.coefficients[1..].to_vec(), self.standard_mi.se.clone())
    }
}

/// Prediction rows for every subject: the exposure column as `x*`, the rest as `z` in order.
pub fn prediction_rows(data: &Dataset, exposure: usize) -> Result<Vec<PredictRow>, AnalysisError> {
    let p = data.n_covariates();
    if exposure >= p {
        return Err(AnalysisError::Exposure { index: exposure, p });
    }
    Ok(data
        .subjects
        .iter()
        .map(|s| {
            let z = s.covariates.iter().enumerate().filter(|&(j, _)| j != exposure).map(|(_, &v)| v).collect();
            PredictRow { x_star: s.covariates[exposure], z }
        })
        .collect())
}

fn standard_rows(data: &Dataset, exposure: usize, xhat: &[f64], weighted: bool) -> Vec<GlmRow> {
    data.subjects
        .iter()
        .zip(xhat)
        .filter_map(|(s, &x)| {
            let mut cov = s.covariates.clone();
            cov[exposure] = x;
            s.gs_status.map(|y| GlmRow { y, x: cov, weight: if weighted { s.weight } else { 1.0 } })
        })
        .collect()
}

/// Runs the calibrated analysis. `design`, when given, covers every subject in `data` and
/// switches both estimators to weighted fits with sandwich variances; the comparator uses
/// its restriction to subjects with an observed gold standard.
pub fn calibrated_analysis(
    data: &Dataset,
    exposure: usize,
    subset: &[CalibrationRow],
    design: Option<&SurveyDesign>,
    fit: &FitOptions,
    mi: &MiOptions,
) -> Result<CalibratedAnalysis, AnalysisError> {
    let targets = prediction_rows(data, exposure)?;
    let model = fit_calibration(subset)?;
    let xhat = predict_xhat(&model, &targets)?;

    let mut lik = AugmentedLikelihood::new(data)?;
    lik.replace_covariate(exposure, &xhat);
    let proposed = fit_prepared(&lik, design, fit)?;
    let warm = FitOptions { start: Some(proposed.params.clone()), ..fit.clone() };
    let refit = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>), String> {
        let mut l = lik.clone();
        l.replace_covariate(exposure, x);
        let r = fit_prepared(&l, design, &warm).map_err(|e| e.to_string())?;
        if !r.converged {
            return Err("refit did not converge".into());
        }
        let var = r.beta_cov().ok_or("covariance unavailable")?.diagonal().iter().copied().collect();
        Ok((r.params.beta.clone(), var))
    };
    let proposed_mi = mi_variance(refit, &model, Some(subset), &targets, mi)?;

    let keep: Vec<bool> = data.subjects.iter().map(|s| s.gs_status.is_some()).collect();
    let sub = design.map(|d| d.subset(&keep)).transpose()?;
    let weighted = design.is_some();
    let standard = fit_cloglog(&standard_rows(data, exposure, &xhat, weighted), sub.as_ref())?;
    let std_refit = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>), String> {
        let g = fit_cloglog(&standard_rows(data, exposure, x, weighted), sub.as_ref()).map_err(|e| e.to_string())?;
        if !g.converged {
            return Err("comparator refit did not converge".into());
        }
        let cov = g.covariance.ok_or("covariance unavailable")?;
        Ok((g.coefficients[1..].to_vec(), cov.diagonal().iter().skip(1).copied().collect()))
    };
    let standard_mi = mi_variance(std_refit, &model, Some(subset), &targets, mi)?;

    Ok(CalibratedAnalysis { model, xhat, proposed, proposed_mi, standard, standard_mi })
}

//! Simulation designs, data generators and the replicate study harness.

pub(crate) mod generate;
mod study;

pub use generate::{
    calibrate_lambda_b, expected_censoring, generate_hchs_like, generate_srs, generate_survey, HchsSample,
    Superpopulation,
};
pub use study::{run_replicate, run_study, ReplicateMetrics, StudySummary};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::MiOptions;
use crate::estimation::FitOptions;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("infeasible survey stages: {0}")]
    Infeasible(String),
}

/// Distribution of the single covariate in the SRS and survey designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateLaw {
    Gamma {
        shape: f64,
        scale: f64,
    },
    /// `var` is the variance.
    Normal {
        mean: f64,
        var: f64,
    },
    /// Per-stratum gamma with block-group perturbations, from the survey strata.
    StratifiedGamma,
    /// Per-stratum normal with mean `shape` and variance `scale`, perturbed per block group.
    StratifiedNormal,
    /// Three correlated covariates from simulated demographic groups.
    HchsLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMissingMode {
    /// Each visit missed independently.
    #[default]
    Iid,
    /// Once a visit is missed all later visits are missed too.
    Monotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumSpec {
    pub shape: f64,
    pub scale: f64,
    /// Share of the superpopulation in this stratum.
    #[serde(default = "one")]
    pub share: f64,
    /// Fraction of the stratum's block groups sampled at stage one.
    #[serde(default = "half")]
    pub bg_fraction: f64,
    /// Relative household sampling rate at stage two.
    #[serde(default = "one")]
    pub household_rate: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    pub superpopulation: usize,
    pub strata: Vec<StratumSpec>,
    /// Mean number of persons per block group.
    pub block_group_size: f64,
    /// Household size is 1 + Poisson(this).
    pub household_extra_mean: f64,
    /// Persons sampled per selected household (all if fewer).
    pub persons_per_household: usize,
    /// Fixed base household rate; derived from `n_target` when absent.
    pub household_rate: Option<f64>,
    /// Block-group perturbation half-width as a fraction of the stratum parameters.
    pub perturbation: f64,
    pub population_seed: u64,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        let stratum = |shape, scale, bg_fraction, household_rate| StratumSpec {
            shape,
            scale,
            share: 0.25,
            bg_fraction,
            household_rate,
        };
        Self {
            superpopulation: 20_000,
            strata: vec![
                stratum(0.25, 1.25, 0.6, 1.0),
                stratum(0.15, 0.75, 0.4, 1.4),
                stratum(0.30, 1.50, 0.5, 0.8),
                stratum(0.10, 0.50, 0.5, 1.2),
            ],
            block_group_size: 100.0,
            household_extra_mean: 1.2,
            persons_per_household: 2,
            household_rate: None,
            perturbation: 0.15,
            population_seed: 20_000,
        }
    }
}

/// Exposure measurement error and calibration subset settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    /// `X* = α0 + α1 X + α2 Z1 + α3 Z2 + e`.
    pub alpha: [f64; 4],
    pub sigma2_e: f64,
    /// `X** = X + ε` on the calibration subset.
    pub sigma2_eps: f64,
    pub subset_size: usize,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self { alpha: [0.05, 0.50, 0.003, 0.0009], sigma2_e: 0.389, sigma2_eps: 0.019, subset_size: 450 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    #[serde(default)]
    pub name: String,
    pub n_target: usize,
    #[serde(default = "four")]
    pub visits: usize,
    #[serde(default = "four")]
    pub gs_visit: usize,
    pub beta: Vec<f64>,
    pub lambda_b: f64,
    pub covariate: CovariateLaw,
    pub sensitivity: f64,
    pub specificity: f64,
    #[serde(default)]
    pub mr: f64,
    #[serde(default)]
    pub aux_missing_rate: f64,
    #[serde(default)]
    pub aux_missing_mode: AuxMissingMode,
    #[serde(default)]
    pub survey: Option<SurveyConfig>,
    #[serde(default)]
    pub error_model: Option<ErrorModel>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Index of the coefficient summarized in the study output.
    #[serde(default)]
    pub target: usize,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub mi: MiOptions,
}

fn four() -> usize {
    4
}

fn default_replicates() -> usize {
    200
}

/// Baseline rate giving the requested censoring rate in the four-visit gamma design.
pub fn lambda_for_censoring(cr: f64) -> Option<f64> {
    match (cr * 10.0).round() as i64 {
        9 => Some(0.023),
        7 => Some(0.08),
        5 => Some(0.17),
        _ => None,
    }
}

/// Baseline rate for the eight-visit HCHS-like design at censoring 0.90, found with
/// [`calibrate_lambda_b`] and frozen.
pub const HCHS_LAMBDA_B: f64 = 0.012_14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    Srs,
    Survey,
    HchsLike,
}

impl SimDesign {
    /// Simple random sample, four visits, Se 0.80 / Sp 0.90, Gamma(0.2, 1) covariate.
    pub fn table1(mr: f64, cr: f64, n: usize, beta: f64) -> Self {
        Self {
            name: format!("srs_mr{mr}_cr{cr}_n{n}"),
            n_target: n,
            visits: 4,
            gs_visit: 4,
            beta: vec![beta],
            lambda_b: lambda_for_censoring(cr).unwrap_or(0.08),
            covariate: CovariateLaw::Gamma { shape: 0.2, scale: 1.0 },
            sensitivity: 0.80,
            specificity: 0.90,
            mr,
            aux_missing_rate: 0.0,
            aux_missing_mode: AuxMissingMode::Iid,
            survey: None,
            error_model: None,
            replicates: 200,
            seed: 1,
            target: 0,
            fit: FitOptions::default(),
            mi: MiOptions::default(),
        }
    }

    /// Three-stage stratified survey sample with the stratified gamma covariate. The
    /// superpopulation is eight times the target sample, and at least 20,000.
    pub fn survey_design(mr: f64, cr: f64, n: usize) -> Self {
        Self {
            name: format!("survey_mr{mr}_cr{cr}_n{n}"),
            covariate: CovariateLaw::StratifiedGamma,
            survey: Some(SurveyConfig { superpopulation: (8 * n).max(20_000), ..SurveyConfig::default() }),
            ..Self::table1(mr, cr, n, 1.5f64.ln())
        }
    }

    /// Eight visits, gold standard at visit 4, three covariates with the first measured
    /// with error and a 450-person calibration subset.
    pub fn hchs_like() -> Self {
        Self {
            name: "hchs_like".into(),
            n_target: 12_987,
            visits: 8,
            gs_visit: 4,
            beta: vec![1.5f64.ln(), 0.7f64.ln(), 1.3f64.ln()],
            lambda_b: HCHS_LAMBDA_B,
            covariate: CovariateLaw::HchsLike,
            sensitivity: 0.61,
            specificity: 0.98,
            mr: 0.29,
            aux_missing_rate: 0.20,
            aux_missing_mode: AuxMissingMode::Iid,
            survey: None,
            error_model: Some(ErrorModel::default()),
            replicates: 200,
            seed: 1,
            target: 0,
            fit: FitOptions::default(),
            mi: MiOptions::default(),
        }
    }

    pub fn kind(&self) -> DesignKind {
        if self.error_model.is_some() {
            DesignKind::HchsLike
        } else if self.survey.is_some() {
            DesignKind::Survey
        } else {
            DesignKind::Srs
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::Design(m.to_string()));
        if !(self.lambda_b > 0.0 && self.lambda_b.is_finite()) {
            return bad("lambda_b must be positive");
        }
        if !(0.0..1.0).contains(&self.mr) {
            return bad("mr must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.aux_missing_rate) {
            return bad("aux_missing_rate must lie in [0, 1)");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.n_target == 0 {
            return bad("n_target must be positive");
        }
        if self.visits == 0 || self.gs_visit == 0 || self.gs_visit > self.visits {
            return bad("gs_visit must lie in 1..=visits");
        }
        if !(self.sensitivity > 0.0 && self.sensitivity <= 1.0 && self.specificity > 0.0 && self.specificity <= 1.0) {
            return bad("sensitivity and specificity must lie in (0, 1]");
        }
        if self.target >= self.beta.len() {
            return bad("target coefficient out of range");
        }
        let p = match self.covariate {
            CovariateLaw::HchsLike => 3,
            _ => 1,
        };
        if self.beta.len() != p {
            return bad(&format!("covariate law has {p} covariates but beta has {}", self.beta.len()));
        }
        match (&self.covariate, self.kind()) {
            (CovariateLaw::Gamma { shape, scale }, DesignKind::Srs) if *shape > 0.0 && *scale > 0.0 => {}
            (CovariateLaw::Normal { var, .. }, DesignKind::Srs) if *var >= 0.0 => {}
            (CovariateLaw::StratifiedGamma | CovariateLaw::StratifiedNormal, DesignKind::Survey) => {}
            (CovariateLaw::HchsLike, DesignKind::HchsLike) => {}
            (law, kind) => return bad(&format!("covariate law {law:?} does not fit a {kind:?} design")),
        }
        if let Some(s) = &self.survey {
            if s.strata.is_empty() || s.superpopulation == 0 || s.persons_per_household == 0 {
                return bad("survey needs strata, a population and persons per household");
            }
            if s.strata.iter().any(|h| !(h.bg_fraction > 0.0 && h.bg_fraction <= 1.0)) {
                return bad("bg_fraction must lie in (0, 1]");
            }
        }
        if let Some(e) = &self.error_model {
            if e.sigma2_e < 0.0 || e.sigma2_eps < 0.0 || e.subset_size < 5 || e.subset_size > self.n_target {
                return bad("error model variances must be non-negative and the subset fit inside n_target");
            }
        }
        Ok(())
    }
}

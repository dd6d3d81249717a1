//! Maximum likelihood fitting of the augmented likelihood with model-based or
//! design-based covariance.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::likelihood::{AugmentedLikelihood, LikelihoodError, ParamVector, SurvivalVector, WeightsMode};
use crate::numeric::{fd_hessian_bounded, spd_inverse};
use crate::optim::{self, LbfgsOptions};
use crate::survey::{sandwich_covariance, SurveyDesign, SurveyError};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error("design describes {design} subjects, dataset has {data}")]
    DesignSize { design: usize, data: usize },
    #[error("starting values have {found} parameters, model needs {expected}")]
    Start { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Convergence threshold on the projected-gradient ∞-norm of the mean negative log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
    /// Baseline survival at the last visit used to build the default start.
    pub initsurv: f64,
    pub beta_start: f64,
    /// Extra fits from jittered starts; the best converged one is kept.
    pub restarts: usize,
    pub seed: u64,
    pub start: Option<ParamVector>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 500, initsurv: 0.1, beta_start: 0.5, restarts: 0, seed: 0, start: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovKind {
    HessianInverse,
    SurveySandwich,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamVector,
    pub survival: SurvivalVector,
    /// `None` when the Hessian was singular or not negative definite.
    pub full_cov: Option<DMatrix<f64>>,
    pub cov_kind: CovKind,
    /// Per-subject influence rows, survey mode only.
    pub influence: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub loglik_at_optimum: f64,
    /// Parameter positions (in `[β, lam]` order) pinned at their lower bound and left out
    /// of the covariance.
    pub boundary: Vec<usize>,
}

impl FitResult {
    pub fn n_covariates(&self) -> usize {
        self.params.beta.len()
    }

    pub fn beta_cov(&self) -> Option<DMatrix<f64>> {
        let p = self.n_covariates();
        self.full_cov.as_ref().map(|c| c.view((0, 0), (p, p)).into_owned())
    }

    pub fn beta_se(&self) -> Option<Vec<f64>> {
        self.beta_cov().map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
    }
}

fn lower_bounds(p: usize, visits: usize) -> Vec<Option<f64>> {
    (0..p + visits).map(|i| if i > p { Some(0.0) } else { None }).collect()
}

struct Objective<'a> {
    lik: &'a AugmentedLikelihood,
    mode: WeightsMode,
    scale: f64,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>), LikelihoodError> {
        let params = ParamVector::from_slice(self.lik.n_covariates(), x);
        let (ll, g) = self.lik.value_and_gradient(&params, self.mode)?;
        Ok((-ll / self.scale, g.into_iter().map(|v| -v / self.scale).collect()))
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>, LikelihoodError> {
        Ok(self.eval(x)?.1)
    }
}

/// Fits the augmented likelihood; survey weights and the sandwich covariance are used
/// when `design` is given.
pub fn fit(
    dataset: &Dataset,
    design: Option<&SurveyDesign>,
    options: &FitOptions,
) -> Result<FitResult, EstimationError> {
    let lik = AugmentedLikelihood::new(dataset)?;
    fit_prepared(&lik, design, options)
}

/// As [`fit`], on an already prepared likelihood (used by repeated refits).
pub fn fit_prepared(
    lik: &AugmentedLikelihood,
    design: Option<&SurveyDesign>,
    options: &FitOptions,
) -> Result<FitResult, EstimationError> {
    if let Some(d) = design {
        if d.len() != lik.len() {
            return Err(EstimationError::DesignSize { design: d.len(), data: lik.len() });
        }
    }
    let p = lik.n_covariates();
    let k = lik.n_params();
    let mode = if design.is_some() { WeightsMode::Survey } else { WeightsMode::Unweighted };
    let obj = Objective { lik, mode, scale: lik.total_weight(mode) };
    let lower = lower_bounds(p, lik.visits());

    let start = match &options.start {
        Some(s) if s.len() != k => return Err(EstimationError::Start { expected: k, found: s.len() }),
        Some(s) => s.to_vec(),
        None => ParamVector::initial(p, lik.visits(), options.beta_start, options.initsurv).to_vec(),
    };
    let lopts = LbfgsOptions { tol: options.tol, max_iter: options.max_iter, ..Default::default() };

    let mut best = optim::minimize(&start, &lower, &lopts, |x| obj.eval(x))?;
    if options.restarts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        for r in 0..options.restarts {
            let jittered: Vec<f64> = start
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + 0.5 * z
                })
                .collect();
            match optim::minimize(&jittered, &lower, &lopts, |x| obj.eval(x)) {
                Ok(cand) if cand.f < best.f && (cand.converged() || !best.converged()) => {
                    debug!("restart {r} improved objective to {}", cand.f);
                    best = cand;
                }
                Ok(_) => {}
                Err(e) => debug!("restart {r} failed: {e}"),
            }
        }
    }

    let mut x = best.x;
    let mut g = best.grad;
    let mut f = best.f;
    let mut iterations = best.iterations;
    let mut pg_norm = optim::inf_norm(&optim::projected_gradient(&x, &g, &lower));

    // Newton refinement on the free coordinates when the quasi-Newton run stalled short of
    // the tolerance; also yields the Hessian used below.
    let mut hess = fd_hessian_bounded(&x, &lower, |z| obj.grad(z))?;
    for _ in 0..4 {
        if pg_norm <= options.tol {
            break;
        }
        let free = free_coordinates(&x, &g, &lower);
        let Some(step) = newton_step(&hess, &g, &free) else { break };
        let mut trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
        optim::project(&mut trial, &lower);
        let Ok((ft, gt)) = obj.eval(&trial) else { break };
        let pg_t = optim::inf_norm(&optim::projected_gradient(&trial, &gt, &lower));
        if !(ft.is_finite() && ft <= f + 1e-12 * f.abs().max(1.0) && pg_t < pg_norm) {
            break;
        }
        x = trial;
        g = gt;
        f = ft;
        pg_norm = pg_t;
        iterations += 1;
        hess = fd_hessian_bounded(&x, &lower, |z| obj.grad(z))?;
    }

    let converged = pg_norm <= options.tol;
    if !converged {
        warn!("optimizer stopped with projected gradient norm {pg_norm:.3e} after {iterations} iterations");
    }
    let params = ParamVector::from_slice(p, &x);
    let boundary: Vec<usize> = (p + 1..k).filter(|&i| x[i] <= 1e-10).collect();
    if !boundary.is_empty() {
        warn!("baseline survival increments at the lower bound for positions {boundary:?}; dropped from covariance");
    }

    // Negative Hessian of the (weighted) log-likelihood.
    let info = hess * obj.scale;
    let keep: Vec<usize> = (0..k).filter(|i| !boundary.contains(i)).collect();
    let info_inv = restricted_inverse(&info, &keep);
    if info_inv.is_none() {
        warn!("information matrix is singular or not positive definite; covariance unavailable");
    }

    let (full_cov, influence, cov_kind) = match design {
        None => (info_inv, None, CovKind::HessianInverse),
        Some(d) => match info_inv {
            Some(bread_inv) => {
                let scores = lik.scores(&params)?;
                let infl = &scores * &bread_inv;
                let cov = sandwich_covariance(&infl, d)?;
                (Some(cov), Some(infl), CovKind::SurveySandwich)
            }
            None => (None, None, CovKind::SurveySandwich),
        },
    };

    Ok(FitResult {
        survival: params.to_survival(),
        params,
        full_cov,
        cov_kind,
        influence,
        converged,
        iterations,
        final_gradient_norm: pg_norm,
        loglik_at_optimum: -f * obj.scale,
        boundary,
    })
}

fn free_coordinates(x: &[f64], g: &[f64], lower: &[Option<f64>]) -> Vec<usize> {
    let pg = optim::projected_gradient(x, g, lower);
    (0..x.len()).filter(|&i| !(pg[i] == 0.0 && g[i] != 0.0)).collect()
}

fn newton_step(hess: &DMatrix<f64>, g: &[f64], free: &[usize]) -> Option<Vec<f64>> {
    let m = free.len();
    let sub = DMatrix::from_fn(m, m, |a, b| hess[(free[a], free[b])]);
    let rhs = DVector::from_iterator(m, free.iter().map(|&i| -g[i]));
    let sol = sub.cholesky()?.solve(&rhs);
    let mut step = vec![0.0; g.len()];
    for (a, &i) in free.iter().enumerate() {
        step[i] = sol[a];
    }
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Inverse over the `keep` coordinates, embedded in a zero matrix of full size.
fn restricted_inverse(m: &DMatrix<f64>, keep: &[usize]) -> Option<DMatrix<f64>> {
    let r = keep.len();
    let sub = DMatrix::from_fn(r, r, |a, b| m[(keep[a], keep[b])]);
    let inv = spd_inverse(&sub)?;
    let mut full = DMatrix::zeros(m.nrows(), m.ncols());
    for a in 0..r {
        for b in 0..r {
            full[(keep[a], keep[b])] = inv[(a, b)];
        }
    }
    Some(full)
}

/// Inverse of the negative Hessian of the unweighted log-likelihood at `params`, by
/// central differences of the analytic gradient. Survival increments sitting on their bound
/// are left out. `None` if the remaining block is not positive definite.
pub fn hessian_covariance(dataset: &Dataset, params: &ParamVector) -> Result<Option<DMatrix<f64>>, EstimationError> {
    let lik = AugmentedLikelihood::new(dataset)?;
    let p = lik.n_covariates();
    let neg_grad = |x: &[f64]| -> Result<Vec<f64>, LikelihoodError> {
        let g = lik.gradient_total(&ParamVector::from_slice(p, x), WeightsMode::Unweighted)?;
        Ok(g.into_iter().map(|v| -v).collect())
    };
    let x = params.to_vec();
    let info = fd_hessian_bounded(&x, &lower_bounds(p, lik.visits()), neg_grad)?;
    let keep: Vec<usize> = (0..x.len()).filter(|&i| i <= p || x[i] > 1e-10).collect();
    Ok(restricted_inverse(&info, &keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MisclassSpec, SubjectRecord, VisitSchedule};

    fn current_status(events: usize, n: usize) -> Dataset {
        let subjects = (0..n)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                aux_results: vec![],
                aux_visit_indices: vec![],
                gs_visit_index: 1,
                gs_status: Some(i < events),
                covariates: vec![],
                weight: 1.0,
                stratum: None,
                cluster: None,
            })
            .collect();
        Dataset { schedule: VisitSchedule::annual(1).unwrap(), subjects, misclass: MisclassSpec::PERFECT }
    }

    #[test]
    fn binomial_toy_matches_fisher_information() {
        // No covariates, one interval: S_2 = 1 - k/n and lam = log(-log S_2)
        let (k, n) = (30, 100);
        let d = current_status(k, n);
        let r = fit(&d, None, &FitOptions { tol: 1e-11, ..Default::default() }).unwrap();
        assert!(r.converged);
        let s = 1.0 - k as f64 / n as f64;
        assert!((r.survival.0[1] - s).abs() < 1e-8);
        // Var(Ŝ) = S(1-S)/n, dlam/dS = 1/(S log S)
        let var = s * (1.0 - s) / n as f64 / (s * s.ln()).powi(2);
        let v = r.full_cov.unwrap()[(0, 0)];
        assert!((v - var).abs() / var < 1e-5, "{v} vs {var}");
        let direct = hessian_covariance(&d, &r.params).unwrap().unwrap();
        assert!((direct[(0, 0)] - var).abs() / var < 1e-5);
    }

    #[test]
    fn unit_weights_with_trivial_design_match_unweighted() {
        let mut d = current_status(40, 120);
        for (i, s) in d.subjects.iter_mut().enumerate() {
            s.covariates = vec![(i % 7) as f64 / 3.0];
            s.gs_status = Some((i * 37) % 11 < 4 + i % 3);
        }
        let a = fit(&d, None, &FitOptions::default()).unwrap();
        let design = SurveyDesign::from_dataset(&d).unwrap();
        let b = fit(&d, Some(&design), &FitOptions::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(b.cov_kind, CovKind::SurveySandwich);
        assert!(b.influence.is_some());
    }

    #[test]
    fn wrong_start_length_is_rejected() {
        let d = current_status(3, 10);
        let opts = FitOptions { start: Some(ParamVector { beta: vec![0.0], lam: vec![0.0] }), ..Default::default() };
        assert!(matches!(fit(&d, None, &opts), Err(EstimationError::Start { .. })));
    }
}

use std::ops::Range;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Poisson, StandardNormal};

use super::{AuxMissingMode, CovariateLaw, DesignKind, SimDesign, SimulationError, SurveyConfig};
use crate::calibration::CalibrationRow;
use crate::data::{Dataset, MisclassSpec, SubjectRecord, VisitSchedule};

pub(crate) fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

struct Outcome {
    aux_results: Vec<bool>,
    aux_visit_indices: Vec<usize>,
    gs_status: Option<bool>,
    censored: bool,
}

/// Event time from the exponential model, reports corrupted visit by visit, visits missed,
/// then reports after the first positive dropped.
fn simulate_outcome(design: &SimDesign, linear_predictor: f64, rng: &mut ChaCha8Rng) -> Outcome {
    let rate = design.lambda_b * linear_predictor.exp();
    let t: f64 = Exp::new(rate).map(|d| d.sample(rng)).unwrap_or(f64::INFINITY);
    let mut aux_results = Vec::with_capacity(design.visits);
    let mut aux_visit_indices = Vec::with_capacity(design.visits);
    let mut dropped = false;
    for k in 1..=design.visits {
        let occurred = t <= k as f64;
        let report =
            if occurred { rng.random_bool(design.sensitivity) } else { rng.random_bool(1.0 - design.specificity) };
        let missed = match design.aux_missing_mode {
            AuxMissingMode::Iid => rng.random_bool(design.aux_missing_rate),
            AuxMissingMode::Monotone => {
                dropped = dropped || rng.random_bool(design.aux_missing_rate);
                dropped
            }
        };
        if !missed {
            aux_results.push(report);
            aux_visit_indices.push(k);
        }
    }
    if let Some(first) = aux_results.iter().position(|&y| y) {
        aux_results.truncate(first + 1);
        aux_visit_indices.truncate(first + 1);
    }
    let delta = t <= design.gs_visit as f64;
    let missing = rng.random::<f64>() < design.mr;
    Outcome {
        aux_results,
        aux_visit_indices,
        gs_status: (!missing).then_some(delta),
        censored: t > design.visits as f64,
    }
}

fn record(id: String, design: &SimDesign, outcome: Outcome, covariates: Vec<f64>, weight: f64) -> SubjectRecord {
    SubjectRecord {
        id,
        aux_results: outcome.aux_results,
        aux_visit_indices: outcome.aux_visit_indices,
        gs_visit_index: design.gs_visit,
        gs_status: outcome.gs_status,
        covariates,
        weight,
        stratum: None,
        cluster: None,
    }
}

fn dataset(design: &SimDesign, subjects: Vec<SubjectRecord>) -> Result<Dataset, SimulationError> {
    let schedule = VisitSchedule::annual(design.visits).map_err(|e| SimulationError::Design(e.to_string()))?;
    let misclass = MisclassSpec::new(design.sensitivity, design.specificity)
        .map_err(|e| SimulationError::Design(e.to_string()))?;
    Ok(Dataset { schedule, subjects, misclass })
}

fn draw_covariate(law: &CovariateLaw, rng: &mut ChaCha8Rng) -> f64 {
    match *law {
        CovariateLaw::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated").sample(rng),
        CovariateLaw::Normal { mean, var } => Normal::new(mean, var.sqrt()).expect("validated").sample(rng),
        _ => unreachable!("single-covariate law expected"),
    }
}

/// Simple random sample of `n_target` subjects.
pub fn generate_srs(design: &SimDesign, seed: u64) -> Result<Dataset, SimulationError> {
    design.validate()?;
    srs_with(design, &mut ChaCha8Rng::seed_from_u64(seed)).map(|(d, _)| d)
}

/// Returns the dataset and the fraction of subjects event-free at the last visit.
pub(crate) fn srs_with(design: &SimDesign, rng: &mut ChaCha8Rng) -> Result<(Dataset, f64), SimulationError> {
    let mut censored = 0usize;
    let subjects = (0..design.n_target)
        .map(|i| {
            let x = draw_covariate(&design.covariate, rng);
            let out = simulate_outcome(design, x * design.beta[0], rng);
            censored += out.censored as usize;
            record(format!("{}", i + 1), design, out, vec![x], 1.0)
        })
        .collect();
    Ok((dataset(design, subjects)?, censored as f64 / design.n_target as f64))
}

/// A finite population of persons in households, block groups and strata, with a fixed
/// covariate per person.
#[derive(Debug, Clone)]
pub struct Superpopulation {
    bgs_by_stratum: Vec<Vec<usize>>,
    households_by_bg: Vec<Vec<usize>>,
    households: Vec<Range<usize>>,
    /// Covariate per person.
    pub x: Vec<f64>,
}

impl Superpopulation {
    pub fn build(config: &SurveyConfig, law: &CovariateLaw, seed: u64) -> Result<Self, SimulationError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total_share: f64 = config.strata.iter().map(|s| s.share).sum();
        let household_extra = Poisson::new(config.household_extra_mean.max(1e-12))
            .map_err(|e| SimulationError::Design(format!("household size: {e}")))?;
        let mut pop = Self { bgs_by_stratum: vec![], households_by_bg: vec![], households: vec![], x: vec![] };

        for spec in &config.strata {
            let persons = (spec.share / total_share * config.superpopulation as f64).round() as usize;
            let n_bg = ((persons as f64 / config.block_group_size).round() as usize).max(2);
            let mut bgs = Vec::with_capacity(n_bg);
            for b in 0..n_bg {
                let bg = pop.households_by_bg.len();
                bgs.push(bg);
                let omega = config.perturbation * spec.shape * rng.random_range(-1.0..=1.0);
                let rho = config.perturbation * spec.scale * rng.random_range(-1.0..=1.0);
                let (a, s) = (spec.shape + omega, spec.scale + rho);
                let target = persons * (b + 1) / n_bg - persons * b / n_bg;
                let mut filled = 0;
                let mut hhs = Vec::new();
                while filled < target {
                    let size = (1 + household_extra.sample(&mut rng) as usize).min(target - filled);
                    let start = pop.x.len();
                    for _ in 0..size {
                        let x = match law {
                            CovariateLaw::StratifiedGamma => {
                                Gamma::new(a, s).map(|d| d.sample(&mut rng)).map_err(|e| e.to_string())
                            }
                            CovariateLaw::StratifiedNormal => {
                                Normal::new(a, s.sqrt()).map(|d| d.sample(&mut rng)).map_err(|e| e.to_string())
                            }
                            _ => Err("survey needs a stratified covariate law".to_string()),
                        }
                        .map_err(|e| SimulationError::Design(format!("block group covariate law: {e}")))?;
                        pop.x.push(x);
                    }
                    hhs.push(pop.households.len());
                    pop.households.push(start..start + size);
                    filled += size;
                }
                pop.households_by_bg.push(hhs);
            }
            pop.bgs_by_stratum.push(bgs);
        }
        Ok(pop)
    }

    pub fn size(&self) -> usize {
        self.x.len()
    }

    pub fn n_block_groups(&self) -> usize {
        self.households_by_bg.len()
    }

    /// Three-stage sample: block groups by SRSWOR within strata, households by Poisson
    /// sampling, then up to k persons per household by SRSWOR. Returns
    /// `(person, inclusion probability, stratum, block group)`.
    pub fn sample(
        &self,
        config: &SurveyConfig,
        n_target: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(usize, f64, usize, usize)>, SimulationError> {
        let k = config.persons_per_household;
        let m: Vec<usize> = self
            .bgs_by_stratum
            .iter()
            .zip(&config.strata)
            .map(|(bgs, spec)| ((spec.bg_fraction * bgs.len() as f64).round() as usize).clamp(2, bgs.len()))
            .collect();
        let base = match config.household_rate {
            Some(r) => r,
            None => {
                let expected: f64 = self
                    .bgs_by_stratum
                    .iter()
                    .enumerate()
                    .map(|(h, bgs)| {
                        let persons: usize = bgs
                            .iter()
                            .flat_map(|&b| &self.households_by_bg[b])
                            .map(|&hh| self.households[hh].len().min(k))
                            .sum();
                        m[h] as f64 / bgs.len() as f64 * config.strata[h].household_rate * persons as f64
                    })
                    .sum();
                n_target as f64 / expected
            }
        };
        for (h, spec) in config.strata.iter().enumerate() {
            if base * spec.household_rate > 1.0 + 1e-12 {
                return Err(SimulationError::Infeasible(format!(
                    "stratum {} needs household rate {:.3} > 1; enlarge the superpopulation or bg_fraction",
                    h + 1,
                    base * spec.household_rate
                )));
            }
        }

        let mut out = Vec::new();
        for (h, bgs) in self.bgs_by_stratum.iter().enumerate() {
            let rate = (base * config.strata[h].household_rate).min(1.0);
            let p_bg = m[h] as f64 / bgs.len() as f64;
            let mut chosen: Vec<usize> = sample_indices(rng, bgs.len(), m[h]).into_iter().map(|i| bgs[i]).collect();
            chosen.sort_unstable();
            for bg in chosen {
                for &hh in &self.households_by_bg[bg] {
                    if !rng.random_bool(rate) {
                        continue;
                    }
                    let members = self.households[hh].clone();
                    let size = members.len();
                    let take = size.min(k);
                    let mut picked: Vec<usize> =
                        sample_indices(rng, size, take).into_iter().map(|i| members.start + i).collect();
                    picked.sort_unstable();
                    let pi = p_bg * rate * take as f64 / size as f64;
                    out.extend(picked.into_iter().map(|person| (person, pi, h, bg)));
                }
            }
        }
        Ok(out)
    }
}

/// Stratified three-stage sample from a superpopulation built with the configured seed.
pub fn generate_survey(design: &SimDesign, seed: u64) -> Result<Dataset, SimulationError> {
    design.validate()?;
    let config = design.survey.as_ref().ok_or_else(|| SimulationError::Design("survey settings missing".into()))?;
    let pop = Superpopulation::build(config, &design.covariate, config.population_seed)?;
    survey_with(design, &pop, &mut ChaCha8Rng::seed_from_u64(seed)).map(|(d, _)| d)
}

pub(crate) fn survey_with(
    design: &SimDesign,
    pop: &Superpopulation,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, f64), SimulationError> {
    let config = design.survey.as_ref().expect("survey design");
    let drawn = pop.sample(config, design.n_target, rng)?;
    let mut censored = 0usize;
    let subjects: Vec<SubjectRecord> = drawn
        .iter()
        .map(|&(person, pi, h, bg)| {
            let x = pop.x[person];
            let out = simulate_outcome(design, x * design.beta[0], rng);
            censored += out.censored as usize;
            let mut r = record(format!("p{person}"), design, out, vec![x], 1.0 / pi);
            r.stratum = Some(format!("{}", h + 1));
            r.cluster = Some(format!("bg{bg}"));
            r
        })
        .collect();
    let n = subjects.len().max(1);
    Ok((dataset(design, subjects)?, censored as f64 / n as f64))
}

/// HCHS-like replicate: covariates are `[x*, z1, z2]` with x* the error-prone exposure.
#[derive(Debug, Clone)]
pub struct HchsSample {
    pub dataset: Dataset,
    pub subset: Vec<CalibrationRow>,
    /// Position in `dataset.subjects` of each subset row.
    pub subset_index: Vec<usize>,
    pub true_x: Vec<f64>,
    pub censored: f64,
}

// Synthetic demographic groups: sex (2) × background (3) with shifts on (X, Z1, Z2).
const SEX_P: [f64; 2] = [0.6, 0.4];
const SEX_SHIFT: [[f64; 3]; 2] = [[0.05, 0.10, 0.15], [-0.075, -0.15, -0.225]];
const BACKGROUND_P: [f64; 3] = [0.35, 0.30, 0.35];
const BACKGROUND_SHIFT: [[f64; 3]; 3] = [[0.10, -0.10, 0.10], [-0.10, 0.20, 0.20], [-0.014, -0.071, -0.271]];

fn hchs_within_chol() -> Matrix3<f64> {
    let cov = Matrix3::new(0.28, 0.05, -0.04, 0.05, 0.90, 0.12, -0.04, 0.12, 0.90);
    cov.cholesky().expect("positive definite").l()
}

fn pick(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn hchs_covariates(rng: &mut ChaCha8Rng, chol: &Matrix3<f64>) -> [f64; 3] {
    let sex = pick(&SEX_P, rng.random());
    let bg = pick(&BACKGROUND_P, rng.random());
    let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let v = chol * z;
    [0, 1, 2].map(|c| SEX_SHIFT[sex][c] + BACKGROUND_SHIFT[bg][c] + v[c])
}

pub fn generate_hchs_like(design: &SimDesign, seed: u64) -> Result<HchsSample, SimulationError> {
    design.validate()?;
    hchs_with(design, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn hchs_with(design: &SimDesign, rng: &mut ChaCha8Rng) -> Result<HchsSample, SimulationError> {
    let em = design.error_model.as_ref().ok_or_else(|| SimulationError::Design("error model missing".into()))?;
    let chol = hchs_within_chol();
    let sd_e = em.sigma2_e.sqrt();
    let sd_eps = em.sigma2_eps.sqrt();
    let n = design.n_target;
    let mut censored = 0usize;
    let mut true_x = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let [x, z1, z2] = hchs_covariates(rng, &chol);
        let e: f64 = rng.sample(StandardNormal);
        let x_star = em.alpha[0] + em.alpha[1] * x + em.alpha[2] * z1 + em.alpha[3] * z2 + sd_e * e;
        let lp = design.beta[0] * x + design.beta[1] * z1 + design.beta[2] * z2;
        let out = simulate_outcome(design, lp, rng);
        censored += out.censored as usize;
        true_x.push(x);
        subjects.push(record(format!("{}", i + 1), design, out, vec![x_star, z1, z2], 1.0));
    }
    let mut subset_index = sample_indices(rng, n, em.subset_size).into_vec();
    subset_index.sort_unstable();
    let subset = subset_index
        .iter()
        .map(|&i| {
            let eps: f64 = rng.sample(StandardNormal);
            let c = &subjects[i].covariates;
            CalibrationRow { x_double_star: true_x[i] + sd_eps * eps, x_star: c[0], z: vec![c[1], c[2]] }
        })
        .collect();
    Ok(HchsSample {
        dataset: dataset(design, subjects)?,
        subset,
        subset_index,
        true_x,
        censored: censored as f64 / n as f64,
    })
}

/// Linear predictors `x'β` drawn from the design's covariate law.
fn linear_predictors(design: &SimDesign, n: usize, seed: u64) -> Result<Vec<f64>, SimulationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match design.kind() {
        DesignKind::Srs => (0..n).map(|_| draw_covariate(&design.covariate, &mut rng) * design.beta[0]).collect(),
        DesignKind::Survey => {
            let config = design.survey.as_ref().expect("survey design");
            let pop = Superpopulation::build(config, &design.covariate, config.population_seed)?;
            pop.x.iter().map(|x| x * design.beta[0]).collect()
        }
        DesignKind::HchsLike => {
            let chol = hchs_within_chol();
            (0..n)
                .map(|_| {
                    let c = hchs_covariates(&mut rng, &chol);
                    c.iter().zip(&design.beta).map(|(x, b)| x * b).sum()
                })
                .collect()
        }
    })
}

/// Monte Carlo estimate of Pr(T > τ_J) at baseline rate `lambda_b`.
pub fn expected_censoring(design: &SimDesign, lambda_b: f64, n: usize, seed: u64) -> Result<f64, SimulationError> {
    let lp = linear_predictors(design, n, seed)?;
    let tau = design.visits as f64;
    Ok(lp.iter().map(|l| (-lambda_b * l.exp() * tau).exp()).sum::<f64>() / lp.len() as f64)
}

/// Baseline rate giving censoring rate `target_cr`, by bisection on the Monte Carlo
/// censoring curve over a fixed covariate sample.
pub fn calibrate_lambda_b(design: &SimDesign, target_cr: f64, n: usize, seed: u64) -> Result<f64, SimulationError> {
    if !(0.0..1.0).contains(&target_cr) || target_cr == 0.0 {
        return Err(SimulationError::Design("target censoring rate must lie in (0, 1)".into()));
    }
    let lp: Vec<f64> = linear_predictors(design, n, seed)?.into_iter().map(f64::exp).collect();
    let tau = design.visits as f64;
    let cr = |lam: f64| lp.iter().map(|e| (-lam * e * tau).exp()).sum::<f64>() / lp.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while cr(hi) > target_cr {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cr(mid) > target_cr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

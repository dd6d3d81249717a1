//! Augmented log-likelihood for grouped-time proportional hazards with
//! misclassified auxiliary reports and a single gold-standard assessment.
//!
//! For subject i, `C_ij` is the probability of the observed report sequence given the
//! true event falls in interval j. With baseline survival `S` (S_1 = 1) and
//! `η_i = exp(x_i'β)`, the likelihood contribution is
//!
//! ```text
//! L_i = Σ_j C̃_ij (S_j^η − S_{j+1}^η) = Σ_j D̃_ij S_j^η,    D̃ = C̃·R
//! ```
//!
//! where `C̃` is `C` with entries outside the intervals compatible with the gold
//! standard set to zero (j ≤ V for a validated positive, j > V for a validated
//! negative, none when the gold standard is missing) and `R` maps S to interval
//! probabilities θ.
//!
//! Baseline survival is parameterized by `lam`: `log(-log S_{k+1}) = lam_1 + … + lam_k`,
//! so `lam_k ≥ 0` for k ≥ 2 keeps S strictly decreasing.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, MisclassSpec, SubjectRecord, VisitSchedule};
use crate::numeric::CompensatedSum;

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("likelihood is zero or not finite for subject `{0}`")]
    Degenerate(String),
    #[error("survival vector: {0}")]
    Domain(String),
    #[error("parameter vector has length {found}, expected {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `C_i·` for one subject: entry j-1 holds `C_ij` for interval j in `1..=J+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrixRow(pub Vec<f64>);

/// Report probabilities per true-event interval, over observed reports only.
///
/// A report at visit k means "event already occurred" for intervals j ≤ k and
/// "not yet occurred" for j > k. Missed visits contribute nothing.
pub fn c_row(subject: &SubjectRecord, schedule: &VisitSchedule, misclass: &MisclassSpec) -> CMatrixRow {
    let intervals = schedule.visits() + 1;
    let row = (1..=intervals)
        .map(|j| {
            subject
                .aux_visit_indices
                .iter()
                .zip(&subject.aux_results)
                .map(
                    |(&k, &y)| {
                        if k >= j {
                            misclass.p_report_given_event(y)
                        } else {
                            misclass.p_report_given_no_event(y)
                        }
                    },
                )
                .product()
        })
        .collect();
    CMatrixRow(row)
}

/// Which intervals the gold standard leaves possible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Validated positive at visit V: intervals 1..=V.
    Positive(usize),
    /// Validated negative at visit V: intervals V+1..=J+1.
    Negative(usize),
    Missing,
}

impl Branch {
    pub fn of(subject: &SubjectRecord) -> Self {
        match subject.gs_status {
            Some(true) => Branch::Positive(subject.gs_visit_index),
            Some(false) => Branch::Negative(subject.gs_visit_index),
            None => Branch::Missing,
        }
    }

    /// Whether 1-based interval j is compatible with the gold standard.
    pub fn allows(&self, j: usize) -> bool {
        match *self {
            Branch::Positive(v) => j <= v,
            Branch::Negative(v) => j > v,
            Branch::Missing => true,
        }
    }
}

/// `R` with `θ = R·S`: θ_j = S_j − S_{j+1} for j ≤ J, θ_{J+1} = S_{J+1}.
pub fn r_matrix(intervals: usize) -> DMatrix<f64> {
    DMatrix::from_fn(intervals, intervals, |k, j| {
        if k == j {
            1.0
        } else if j == k + 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Row-vector product `c·R`, using the banded structure of R.
pub fn d_row(c: &[f64]) -> Vec<f64> {
    (0..c.len()).map(|j| if j == 0 { c[0] } else { c[j] - c[j - 1] }).collect()
}

/// Baseline survival `S_1..S_{J+1}` with S_1 = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalVector(pub Vec<f64>);

impl SurvivalVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LikelihoodError> {
        check_survival(&values)?;
        Ok(Self(values))
    }

    pub fn theta(&self) -> Vec<f64> {
        differences(&self.0)
    }
}

fn check_survival(s: &[f64]) -> Result<(), LikelihoodError> {
    if s.len() < 2 {
        return Err(LikelihoodError::Domain("need at least two entries".into()));
    }
    if s[0] != 1.0 {
        return Err(LikelihoodError::Domain(format!("S_1 must be 1, got {}", s[0])));
    }
    if s.windows(2).any(|w| !(w[1] < w[0])) || !(s[s.len() - 1] > 0.0) {
        return Err(LikelihoodError::Domain("S must be strictly decreasing and positive".into()));
    }
    Ok(())
}

fn differences(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n).map(|j| if j + 1 < n { s[j] - s[j + 1] } else { s[j] }).collect()
}

/// Interval probabilities from a valid baseline survival vector.
pub fn theta_from_survival(s: &[f64]) -> Result<Vec<f64>, LikelihoodError> {
    check_survival(s)?;
    Ok(differences(s))
}

/// Regression coefficients and the log-log increments of baseline survival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub lam: Vec<f64>,
}

impl ParamVector {
    /// Starting point: all β equal to `beta0`, survival linearly spaced from 1 to
    /// `initsurv` over the J visits.
    pub fn initial(p: usize, visits: usize, beta0: f64, initsurv: f64) -> Self {
        let s: Vec<f64> = (1..=visits).map(|k| 1.0 - (1.0 - initsurv) * k as f64 / visits as f64).collect();
        let loglog: Vec<f64> = s.iter().map(|v| (-v.ln()).ln()).collect();
        let lam = increments(&loglog);
        Self { beta: vec![beta0; p], lam }
    }

    pub fn from_survival(beta: Vec<f64>, survival: &SurvivalVector) -> Self {
        let loglog: Vec<f64> = survival.0[1..].iter().map(|v| (-v.ln()).ln()).collect();
        Self { beta, lam: increments(&loglog) }
    }

    pub fn to_survival(&self) -> SurvivalVector {
        let mut s = Vec::with_capacity(self.lam.len() + 1);
        s.push(1.0);
        let mut cum = 0.0;
        for l in &self.lam {
            cum += l;
            s.push((-cum.exp()).exp());
        }
        SurvivalVector(s)
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.lam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[β, lam]` as one vector.
    pub fn to_vec(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.lam).copied().collect()
    }

    pub fn from_slice(p: usize, x: &[f64]) -> Self {
        Self { beta: x[..p].to_vec(), lam: x[p..].to_vec() }
    }

    /// Cumulative baseline hazards `H_j = -log S_j` for j = 1..=J+1 (H_1 = 0).
    fn cumulative_hazards(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.lam.len() + 1);
        h.push(0.0);
        let mut cum = 0.0;
        for l in &self.lam {
            cum += l;
            h.push(cum.exp());
        }
        h
    }
}

fn increments(v: &[f64]) -> Vec<f64> {
    (0..v.len()).map(|k| if k == 0 { v[0] } else { v[k] - v[k - 1] }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    Unweighted,
    Survey,
}

/// Per-subject quantities that do not depend on the parameters.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub branch: Branch,
    pub c: CMatrixRow,
    /// Branch-masked `C̃·R`.
    pub d: Vec<f64>,
    pub x: Vec<f64>,
    pub weight: f64,
}

impl PreparedSubject {
    /// Builds the masked D row. Reports after the first positive one are dropped.
    pub fn new(
        subject: &SubjectRecord,
        schedule: &VisitSchedule,
        misclass: &MisclassSpec,
    ) -> Result<Self, LikelihoodError> {
        let mut s = subject.clone();
        s.truncate_reports();
        let branch = Branch::of(&s);
        let c = c_row(&s, schedule, misclass);
        let masked: Vec<f64> =
            c.0.iter().enumerate().map(|(j, &v)| if branch.allows(j + 1) { v } else { 0.0 }).collect();
        if masked.iter().all(|&v| v <= 0.0) {
            return Err(LikelihoodError::Degenerate(s.id));
        }
        Ok(Self { id: s.id.clone(), branch, d: d_row(&masked), c, x: s.covariates, weight: s.weight })
    }

    fn eta(&self, beta: &[f64]) -> f64 {
        self.x.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>().exp()
    }

    fn likelihood_with(&self, eta: f64, hazards: &[f64]) -> f64 {
        let mut acc = CompensatedSum::new();
        for (d, h) in self.d.iter().zip(hazards) {
            if *d != 0.0 {
                acc.add(d * (-eta * h).exp());
            }
        }
        acc.value()
    }

    fn checked_log(&self, value: f64) -> Result<f64, LikelihoodError> {
        if value.is_finite() && value >= f64::MIN_POSITIVE {
            Ok(value.ln())
        } else {
            Err(LikelihoodError::Degenerate(self.id.clone()))
        }
    }

    /// Likelihood contribution before taking logs.
    pub fn likelihood(&self, params: &ParamVector) -> f64 {
        self.likelihood_with(self.eta(&params.beta), &params.cumulative_hazards())
    }

    pub fn loglik(&self, params: &ParamVector) -> Result<f64, LikelihoodError> {
        self.checked_log(self.likelihood(params))
    }

    /// Log-likelihood and its gradient with respect to `[β, lam]`, written into `grad`.
    fn loglik_and_score(
        &self,
        params: &ParamVector,
        hazards: &[f64],
        grad: &mut [f64],
    ) -> Result<f64, LikelihoodError> {
        let p = params.beta.len();
        let eta = self.eta(&params.beta);
        let mut value = CompensatedSum::new();
        // t_j = ∂(D_j S_j^η)/∂(log H_j) = −η H_j D_j S_j^η
        let intervals = self.d.len();
        let mut t = [0.0f64; 32];
        let mut t_heap;
        let t: &mut [f64] = if intervals <= t.len() {
            &mut t[..intervals]
        } else {
            t_heap = vec![0.0; intervals];
            &mut t_heap
        };
        for j in 0..intervals {
            let d = self.d[j];
            if d != 0.0 {
                let term = d * (-eta * hazards[j]).exp();
                value.add(term);
                t[j] = -eta * hazards[j] * term;
            } else {
                t[j] = 0.0;
            }
        }
        let a = value.value();
        let ll = self.checked_log(a)?;

        let sum_t: f64 = t.iter().sum();
        for (g, x) in grad[..p].iter_mut().zip(&self.x) {
            *g = x * sum_t / a;
        }
        // ∂/∂lam_m = Σ_{j > m} t_j (1-based interval index j = m+1..=J+1)
        let mut tail = 0.0;
        for m in (0..intervals - 1).rev() {
            tail += t[m + 1];
            grad[p + m] = tail / a;
        }
        Ok(ll)
    }

    /// Gradient of this subject's log-likelihood (unweighted).
    pub fn score(&self, params: &ParamVector) -> Result<Vec<f64>, LikelihoodError> {
        let mut g = vec![0.0; params.len()];
        self.loglik_and_score(params, &params.cumulative_hazards(), &mut g)?;
        Ok(g)
    }
}

/// The full-sample likelihood over prepared subjects.
#[derive(Debug, Clone)]
pub struct AugmentedLikelihood {
    visits: usize,
    p: usize,
    subjects: Vec<PreparedSubject>,
}

const CHUNK: usize = 512;

impl AugmentedLikelihood {
    pub fn new(dataset: &Dataset) -> Result<Self, LikelihoodError> {
        dataset.ensure_valid()?;
        let subjects = dataset
            .subjects
            .iter()
            .map(|s| PreparedSubject::new(s, &dataset.schedule, &dataset.misclass))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { visits: dataset.schedule.visits(), p: dataset.n_covariates(), subjects })
    }

    pub fn visits(&self) -> usize {
        self.visits
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_params(&self) -> usize {
        self.p + self.visits
    }

    pub fn subjects(&self) -> &[PreparedSubject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Overwrites covariate column `col` for every subject.
    pub fn replace_covariate(&mut self, col: usize, values: &[f64]) {
        assert_eq!(values.len(), self.subjects.len(), "one value per subject");
        for (s, &v) in self.subjects.iter_mut().zip(values) {
            s.x[col] = v;
        }
    }

    pub fn total_weight(&self, mode: WeightsMode) -> f64 {
        match mode {
            WeightsMode::Unweighted => self.subjects.len() as f64,
            WeightsMode::Survey => self.subjects.iter().map(|s| s.weight).sum(),
        }
    }

    fn check_len(&self, params: &ParamVector) -> Result<(), LikelihoodError> {
        if params.beta.len() != self.p || params.lam.len() != self.visits {
            return Err(LikelihoodError::ParamLength { expected: self.n_params(), found: params.len() });
        }
        Ok(())
    }

    fn weight(s: &PreparedSubject, mode: WeightsMode) -> f64 {
        match mode {
            WeightsMode::Unweighted => 1.0,
            WeightsMode::Survey => s.weight,
        }
    }

    /// `Σ_i w_i l_i` with a fixed chunked reduction order.
    pub fn loglik_total(&self, params: &ParamVector, mode: WeightsMode) -> Result<f64, LikelihoodError> {
        self.check_len(params)?;
        let hazards = params.cumulative_hazards();
        let partial: Vec<Result<CompensatedSum, LikelihoodError>> = self
            .subjects
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = CompensatedSum::new();
                for s in chunk {
                    let l = s.checked_log(s.likelihood_with(s.eta(&params.beta), &hazards))?;
                    acc.add(Self::weight(s, mode) * l);
                }
                Ok(acc)
            })
            .collect();
        let mut total = CompensatedSum::new();
        for p in partial {
            total.add(p?.value());
        }
        Ok(total.value())
    }

    /// Weighted total log-likelihood and its gradient in one pass.
    pub fn value_and_gradient(
        &self,
        params: &ParamVector,
        mode: WeightsMode,
    ) -> Result<(f64, Vec<f64>), LikelihoodError> {
        self.check_len(params)?;
        let k = self.n_params();
        let hazards = params.cumulative_hazards();
        let partial: Vec<Result<(CompensatedSum, Vec<CompensatedSum>), LikelihoodError>> = self
            .subjects
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut f = CompensatedSum::new();
                let mut g = vec![CompensatedSum::new(); k];
                let mut gi = vec![0.0; k];
                for s in chunk {
                    let w = Self::weight(s, mode);
                    f.add(w * s.loglik_and_score(params, &hazards, &mut gi)?);
                    for (acc, v) in g.iter_mut().zip(&gi) {
                        acc.add(w * v);
                    }
                }
                Ok((f, g))
            })
            .collect();
        let mut f = CompensatedSum::new();
        let mut g = vec![CompensatedSum::new(); k];
        for part in partial {
            let (pf, pg) = part?;
            f.add(pf.value());
            for (acc, v) in g.iter_mut().zip(pg) {
                acc.add(v.value());
            }
        }
        Ok((f.value(), g.iter().map(|c| c.value()).collect()))
    }

    pub fn gradient_total(&self, params: &ParamVector, mode: WeightsMode) -> Result<Vec<f64>, LikelihoodError> {
        Ok(self.value_and_gradient(params, mode)?.1)
    }

    /// Unweighted per-subject scores, one row per subject.
    pub fn scores(&self, params: &ParamVector) -> Result<DMatrix<f64>, LikelihoodError> {
        self.check_len(params)?;
        let k = self.n_params();
        let hazards = params.cumulative_hazards();
        let rows: Vec<Result<Vec<f64>, LikelihoodError>> = self
            .subjects
            .par_iter()
            .map(|s| {
                let mut g = vec![0.0; k];
                s.loglik_and_score(params, &hazards, &mut g)?;
                Ok(g)
            })
            .collect();
        let mut m = DMatrix::zeros(self.subjects.len(), k);
        for (i, r) in rows.into_iter().enumerate() {
            for (j, v) in r?.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests_support::subject;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn c_row_closed_form_example() {
        let s = subject(&[0, 0, 0, 1], &[1, 2, 3, 4], None, 4);
        let m = MisclassSpec::new(0.8, 0.9).unwrap();
        let row = c_row(&s, &VisitSchedule::annual(4).unwrap(), &m);
        let expected = [0.0064, 0.0288, 0.1296, 0.5832, 0.0729];
        for (a, b) in row.0.iter().zip(expected) {
            assert!(close(*a, b, 1e-15), "{:?}", row.0);
        }
    }

    #[test]
    fn c_row_empty_and_perfect() {
        let m = MisclassSpec::new(0.7, 0.6).unwrap();
        let s = subject(&[], &[], None, 2);
        assert_eq!(c_row(&s, &VisitSchedule::annual(3).unwrap(), &m).0, vec![1.0; 4]);
        let s = subject(&[0, 1], &[1, 2], None, 2);
        let row = c_row(&s, &VisitSchedule::annual(2).unwrap(), &MisclassSpec::PERFECT);
        assert_eq!(row.0, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn theta_examples() {
        let t = theta_from_survival(&[1.0, 0.8, 0.5]).unwrap();
        assert!(close(t[0], 0.2, 1e-15) && close(t[1], 0.3, 1e-15) && t[2] == 0.5);
        let eps = 1e-9;
        let t = theta_from_survival(&[1.0, eps, eps / 2.0]).unwrap();
        assert!(close(t.iter().sum::<f64>(), 1.0, 1e-15));
        assert!(theta_from_survival(&[1.0, 0.5, 0.6]).is_err());
        assert!(theta_from_survival(&[0.9, 0.5]).is_err());
    }

    #[test]
    fn d_row_matches_matrix_product() {
        let c = [0.1, 0.4, 0.3, 0.9];
        let r = r_matrix(4);
        let cm = nalgebra::RowDVector::from_row_slice(&c);
        let prod = cm * r;
        for (a, b) in prod.iter().zip(d_row(&c)) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn param_survival_round_trip_and_initial() {
        let p = ParamVector::initial(2, 4, 0.5, 0.1);
        let s = p.to_survival();
        let expected = [1.0, 0.775, 0.55, 0.325, 0.1];
        for (a, b) in s.0.iter().zip(expected) {
            assert!(close(*a, b, 1e-12), "{:?}", s.0);
        }
        assert!(p.lam[1..].iter().all(|&l| l >= 0.0));
        let back = ParamVector::from_survival(p.beta.clone(), &s);
        for (a, b) in back.lam.iter().zip(&p.lam) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    fn one_subject_dataset(s: SubjectRecord, visits: usize, m: MisclassSpec) -> Dataset {
        Dataset { schedule: VisitSchedule::annual(visits).unwrap(), subjects: vec![s], misclass: m }
    }

    #[test]
    fn perfect_report_pins_interval_one() {
        let mut s = subject(&[1], &[1], None, 1);
        s.covariates = vec![0.0];
        let prep = PreparedSubject::new(&s, &VisitSchedule::annual(1).unwrap(), &MisclassSpec::PERFECT).unwrap();
        // θ = (0.3, 0.7) → S = (1, 0.7)
        let params = ParamVector::from_survival(vec![0.0], &SurvivalVector::new(vec![1.0, 0.7]).unwrap());
        assert!(close(prep.loglik(&params).unwrap(), 0.3f64.ln(), 1e-14));
    }

    #[test]
    fn current_status_probability() {
        let mut s = subject(&[], &[], Some(true), 1);
        s.covariates = vec![0.0];
        let prep = PreparedSubject::new(&s, &VisitSchedule::annual(1).unwrap(), &MisclassSpec::new(0.8, 0.9).unwrap())
            .unwrap();
        let params = ParamVector::from_survival(vec![0.0], &SurvivalVector::new(vec![1.0, 0.6]).unwrap());
        assert!(close(prep.loglik(&params).unwrap(), 0.4f64.ln(), 1e-14));
    }

    #[test]
    fn contradictory_data_is_degenerate() {
        // Sp = 1 with a positive report at visit 1 rules out the event after visit 1,
        // but the gold standard is negative at visit 2.
        let s = subject(&[1], &[1], Some(false), 2);
        let m = MisclassSpec::new(0.8, 1.0).unwrap();
        let err = PreparedSubject::new(&s, &VisitSchedule::annual(3).unwrap(), &m).unwrap_err();
        assert!(matches!(err, LikelihoodError::Degenerate(ref id) if id == "s"));
    }

    #[test]
    fn weights_and_additivity() {
        let m = MisclassSpec::new(0.8, 0.9).unwrap();
        let mut a = subject(&[0, 1], &[1, 3], Some(true), 3);
        a.weight = 3.0;
        let params = ParamVector { beta: vec![0.4], lam: vec![-1.5, 0.3, 0.2, 0.1] };
        let single = AugmentedLikelihood::new(&one_subject_dataset(a.clone(), 4, m)).unwrap();
        let l1 = single.loglik_total(&params, WeightsMode::Unweighted).unwrap();
        let lw = single.loglik_total(&params, WeightsMode::Survey).unwrap();
        let copies: Vec<_> = (0..3).map(|k| SubjectRecord { id: format!("c{k}"), weight: 1.0, ..a.clone() }).collect();
        let triple = AugmentedLikelihood::new(&Dataset {
            schedule: VisitSchedule::annual(4).unwrap(),
            subjects: copies,
            misclass: m,
        })
        .unwrap();
        let l3 = triple.loglik_total(&params, WeightsMode::Unweighted).unwrap();
        assert!(close(lw, 3.0 * l1, 1e-13));
        assert!(close(l3, lw, 1e-13));
    }

    #[test]
    fn zero_covariate_has_zero_beta_score() {
        let mut s = subject(&[0, 0, 1], &[1, 2, 3], None, 3);
        s.covariates = vec![0.0];
        let prep = PreparedSubject::new(&s, &VisitSchedule::annual(4).unwrap(), &MisclassSpec::new(0.8, 0.9).unwrap())
            .unwrap();
        let g = prep.score(&ParamVector { beta: vec![0.7], lam: vec![-1.0, 0.2, 0.2, 0.2] }).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn larger_beta_lowers_powered_survival() {
        let p1 = ParamVector { beta: vec![0.2], lam: vec![-1.0, 0.3, 0.3] };
        let p2 = ParamVector { beta: vec![0.5], ..p1.clone() };
        let x = 0.8;
        let h = p1.cumulative_hazards();
        for hj in &h[1..] {
            let s1 = (-(x * p1.beta[0]).exp() * hj).exp();
            let s2 = (-(x * p2.beta[0]).exp() * hj).exp();
            assert!(s2 < s1);
        }
    }
}

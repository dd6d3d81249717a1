//! Study data: visit grid, per-subject records and well-formedness checks.
//!
//! Visit indices are 1-based positions on a common grid `0 = τ_0 < τ_1 < … < τ_J`.
//! Missed visits are simply absent from a subject's auxiliary index list; the
//! likelihood handles such gaps directly.

mod csv_io;

pub use csv_io::{covariate_columns, read_long_csv, read_wide_csv, write_long_csv, write_wide_csv, ColumnMap};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("visit schedule: {0}")]
    Schedule(String),
    #[error("misclassification rates: {0}")]
    Misclass(String),
    #[error("auxiliary results and visit indices differ in length ({results} vs {indices})")]
    Misaligned { results: usize, indices: usize },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("dataset is invalid: {0} violation(s), first: {1}")]
    Invalid(usize, String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Common visit grid. `boundaries[0]` is baseline (0) and `boundaries[J]` the last visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    boundaries: Vec<f64>,
}

impl VisitSchedule {
    pub fn new(boundaries: Vec<f64>) -> Result<Self, DataError> {
        if boundaries.len() < 2 {
            return Err(DataError::Schedule("need at least one post-baseline visit".into()));
        }
        if boundaries[0] != 0.0 {
            return Err(DataError::Schedule("first boundary must be 0".into()));
        }
        if boundaries.windows(2).any(|w| !(w[1] > w[0])) || boundaries.iter().any(|b| !b.is_finite()) {
            return Err(DataError::Schedule("boundaries must be finite and strictly increasing".into()));
        }
        Ok(Self { boundaries })
    }

    /// Annual grid `0, 1, …, J`.
    pub fn annual(visits: usize) -> Result<Self, DataError> {
        Self::new((0..=visits).map(|v| v as f64).collect())
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Number of post-baseline visits, J. There are J+1 intervals.
    pub fn visits(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Index of the interval `(τ_{j-1}, τ_j]` containing `t`, in `1..=J+1`.
    pub fn interval_of(&self, t: f64) -> usize {
        // partition_point gives the number of boundaries strictly below t
        self.boundaries.partition_point(|&b| b < t).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisclassSpec {
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MisclassSpec {
    pub fn new(sensitivity: f64, specificity: f64) -> Result<Self, DataError> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(sensitivity) || !ok(specificity) {
            return Err(DataError::Misclass(format!(
                "sensitivity {sensitivity} and specificity {specificity} must lie in (0, 1]"
            )));
        }
        if sensitivity + specificity <= 1.0 {
            log::warn!(
                "sensitivity + specificity = {} <= 1: the auxiliary test carries no information",
                sensitivity + specificity
            );
        }
        Ok(Self { sensitivity, specificity })
    }

    pub const PERFECT: MisclassSpec = MisclassSpec { sensitivity: 1.0, specificity: 1.0 };

    /// Probability of the observed report when the event has already occurred.
    pub fn p_report_given_event(&self, positive: bool) -> f64 {
        if positive {
            self.sensitivity
        } else {
            1.0 - self.sensitivity
        }
    }

    /// Probability of the observed report when the event has not yet occurred.
    pub fn p_report_given_no_event(&self, positive: bool) -> f64 {
        if positive {
            1.0 - self.specificity
        } else {
            self.specificity
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub aux_results: Vec<bool>,
    /// 1-based visit indices of the auxiliary reports, strictly increasing.
    pub aux_visit_indices: Vec<usize>,
    /// Visit index V of the gold-standard assessment.
    pub gs_visit_index: usize,
    /// `None` when the gold standard is missing.
    pub gs_status: Option<bool>,
    pub covariates: Vec<f64>,
    pub weight: f64,
    pub stratum: Option<String>,
    pub cluster: Option<String>,
}

impl SubjectRecord {
    pub fn n_reports(&self) -> usize {
        self.aux_results.len()
    }

    pub fn gs_missing(&self) -> bool {
        self.gs_status.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schedule: VisitSchedule,
    pub subjects: Vec<SubjectRecord>,
    pub misclass: MisclassSpec,
}

impl Dataset {
    /// Number of covariates, taken from the first subject.
    pub fn n_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.covariates.len())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Fails with the first violation if the dataset is not well formed.
    pub fn ensure_valid(&self) -> Result<(), DataError> {
        let v = validate(self);
        match v.first() {
            None => Ok(()),
            Some(first) => Err(DataError::Invalid(v.len(), first.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    NonIncreasingVisitIndices,
    VisitIndexOutOfRange(usize),
    MisalignedReports { results: usize, indices: usize },
    NonPositiveWeight(f64),
    GoldStandardVisitOutOfRange(usize),
    CovariateDimension { expected: usize, found: usize },
    NonFiniteCovariate,
    DuplicateId,
    NoInformation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject_id: Option<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(id) = &self.subject_id {
            write!(f, "subject {id}: ")?;
        }
        match &self.kind {
            ViolationKind::NonIncreasingVisitIndices => write!(f, "non-increasing visit indices"),
            ViolationKind::VisitIndexOutOfRange(v) => write!(f, "visit index {v} outside 1..=J"),
            ViolationKind::MisalignedReports { results, indices } => {
                write!(f, "{results} results but {indices} visit indices")
            }
            ViolationKind::NonPositiveWeight(w) => write!(f, "non-positive weight {w}"),
            ViolationKind::GoldStandardVisitOutOfRange(v) => {
                write!(f, "gold-standard visit {v} outside 1..=J")
            }
            ViolationKind::CovariateDimension { expected, found } => {
                write!(f, "expected {expected} covariates, found {found}")
            }
            ViolationKind::NonFiniteCovariate => write!(f, "non-finite covariate"),
            ViolationKind::DuplicateId => write!(f, "duplicate subject id"),
            ViolationKind::NoInformation => {
                write!(f, "no subject has a gold standard or an auxiliary report")
            }
        }
    }
}

/// Lists every invariant violation; empty iff the dataset is well formed.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let j = dataset.schedule.visits();
    let p = dataset.n_covariates();
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut informative = false;

    for s in &dataset.subjects {
        let mut push = |kind| out.push(Violation { subject_id: Some(s.id.clone()), kind });
        if !seen.insert(s.id.as_str()) {
            push(ViolationKind::DuplicateId);
        }
        if s.aux_results.len() != s.aux_visit_indices.len() {
            push(ViolationKind::MisalignedReports { results: s.aux_results.len(), indices: s.aux_visit_indices.len() });
        }
        if s.aux_visit_indices.windows(2).any(|w| w[1] <= w[0]) {
            push(ViolationKind::NonIncreasingVisitIndices);
        }
        if let Some(&bad) = s.aux_visit_indices.iter().find(|&&v| v == 0 || v > j) {
            push(ViolationKind::VisitIndexOutOfRange(bad));
        }
        if !(s.weight > 0.0 && s.weight.is_finite()) {
            push(ViolationKind::NonPositiveWeight(s.weight));
        }
        if s.gs_visit_index == 0 || s.gs_visit_index > j {
            push(ViolationKind::GoldStandardVisitOutOfRange(s.gs_visit_index));
        }
        if s.covariates.len() != p {
            push(ViolationKind::CovariateDimension { expected: p, found: s.covariates.len() });
        }
        if s.covariates.iter().any(|x| !x.is_finite()) {
            push(ViolationKind::NonFiniteCovariate);
        }
        informative |= s.gs_status.is_some() || !s.aux_results.is_empty();
    }
    if !dataset.subjects.is_empty() && !informative {
        out.push(Violation { subject_id: None, kind: ViolationKind::NoInformation });
    }
    out
}

/// Keeps reports up to and including the first positive one.
pub fn truncate_after_first_positive(
    aux_results: &[bool],
    aux_visit_indices: &[usize],
) -> Result<(Vec<bool>, Vec<usize>), DataError> {
    if aux_results.len() != aux_visit_indices.len() {
        return Err(DataError::Misaligned { results: aux_results.len(), indices: aux_visit_indices.len() });
    }
    let end = aux_results.iter().position(|&y| y).map_or(aux_results.len(), |k| k + 1);
    Ok((aux_results[..end].to_vec(), aux_visit_indices[..end].to_vec()))
}

impl SubjectRecord {
    /// Applies [`truncate_after_first_positive`] in place.
    pub fn truncate_reports(&mut self) {
        if let Some(k) = self.aux_results.iter().position(|&y| y) {
            self.aux_results.truncate(k + 1);
            self.aux_visit_indices.truncate(k + 1);
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, results: &[u8], visits: &[usize]) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            aux_results: results.iter().map(|&r| r == 1).collect(),
            aux_visit_indices: visits.to_vec(),
            gs_visit_index: 2,
            gs_status: Some(false),
            covariates: vec![0.3],
            weight: 1.0,
            stratum: None,
            cluster: None,
        }
    }

    fn dataset(subjects: Vec<SubjectRecord>) -> Dataset {
        Dataset {
            schedule: VisitSchedule::annual(4).unwrap(),
            subjects,
            misclass: MisclassSpec::new(0.8, 0.9).unwrap(),
        }
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        let d = dataset(vec![subject("a", &[0, 0, 1], &[1, 2, 3]), subject("b", &[0], &[2])]);
        assert!(validate(&d).is_empty());
    }

    #[test]
    fn decreasing_indices_are_reported() {
        let d = dataset(vec![subject("a", &[0, 0], &[2, 1])]);
        let v = validate(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::NonIncreasingVisitIndices);
        assert_eq!(v[0].subject_id.as_deref(), Some("a"));
    }

    #[test]
    fn zero_weight_is_reported() {
        let mut s = subject("a", &[0], &[1]);
        s.weight = 0.0;
        let v = validate(&dataset(vec![s]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::NonPositiveWeight(0.0));
    }

    #[test]
    fn out_of_range_and_uninformative() {
        let mut s = subject("a", &[], &[]);
        s.gs_status = None;
        s.gs_visit_index = 7;
        let v = validate(&dataset(vec![s]));
        let kinds: Vec<_> = v.iter().map(|v| v.kind.clone()).collect();
        assert!(kinds.contains(&ViolationKind::GoldStandardVisitOutOfRange(7)));
        assert!(kinds.contains(&ViolationKind::NoInformation));
    }

    #[test]
    fn truncation_examples() {
        let (r, v) = truncate_after_first_positive(&[false, true, true, true], &[1, 2, 3, 4]).unwrap();
        assert_eq!((r, v), (vec![false, true], vec![1, 2]));
        let (r, v) = truncate_after_first_positive(&[false; 4], &[1, 2, 3, 4]).unwrap();
        assert_eq!((r, v), (vec![false; 4], vec![1, 2, 3, 4]));
        let (r, v) = truncate_after_first_positive(&[true], &[3]).unwrap();
        assert_eq!((r, v), (vec![true], vec![3]));
        assert!(truncate_after_first_positive(&[true, false], &[1]).is_err());
    }

    #[test]
    fn schedule_rules() {
        assert!(VisitSchedule::new(vec![0.0]).is_err());
        assert!(VisitSchedule::new(vec![0.5, 1.0]).is_err());
        assert!(VisitSchedule::new(vec![0.0, 1.0, 1.0]).is_err());
        let s = VisitSchedule::annual(4).unwrap();
        assert_eq!(s.visits(), 4);
        assert_eq!(s.interval_of(0.3), 1);
        assert_eq!(s.interval_of(1.0), 1);
        assert_eq!(s.interval_of(1.0001), 2);
        assert_eq!(s.interval_of(4.0), 4);
        assert_eq!(s.interval_of(9.0), 5);
    }

    #[test]
    fn misclass_bounds() {
        assert!(MisclassSpec::new(0.0, 0.9).is_err());
        assert!(MisclassSpec::new(0.8, 1.1).is_err());
        // uninformative is allowed, only warned about
        assert!(MisclassSpec::new(0.4, 0.5).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn truncation_is_idempotent(bits in proptest::collection::vec(proptest::bool::ANY, 0..10)) {
            let idx: Vec<usize> = (1..=bits.len()).collect();
            let (r1, v1) = truncate_after_first_positive(&bits, &idx).unwrap();
            let (r2, v2) = truncate_after_first_positive(&r1, &v1).unwrap();
            proptest::prop_assert_eq!(&r1, &r2);
            proptest::prop_assert_eq!(&v1, &v2);
            proptest::prop_assert!(r1.iter().filter(|&&b| b).count() <= 1);
        }
    }
}

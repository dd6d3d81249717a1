//! Stratified cluster designs and the linearization (sandwich) variance of a
//! Horvitz-Thompson total of influence rows.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum SurveyError {
    #[error("stratum `{0}` has a single sampled cluster; its variance contribution is not estimable")]
    SingleCluster(String),
    #[error("cluster `{cluster}` appears in strata `{first}` and `{second}`")]
    ClusterInManyStrata { cluster: String, first: String, second: String },
    #[error("design has {design} subjects but {found} were supplied")]
    Length { design: usize, found: usize },
    #[error("weight {weight} at position {index} is not positive and finite")]
    Weight { index: usize, weight: f64 },
}

/// Per-subject stratum, cluster and weight, with clusters indexed within the design.
#[derive(Debug, Clone)]
pub struct SurveyDesign {
    stratum_of: Vec<usize>,
    cluster_of: Vec<usize>,
    weights: Vec<f64>,
    stratum_names: Vec<String>,
    /// Stratum index of each cluster.
    cluster_stratum: Vec<usize>,
}

impl SurveyDesign {
    /// Missing stratum labels put the subject in a single shared stratum; a missing
    /// cluster label makes the subject its own cluster.
    pub fn new(strata: &[Option<String>], clusters: &[Option<String>], weights: &[f64]) -> Result<Self, SurveyError> {
        let n = weights.len();
        for len in [strata.len(), clusters.len()] {
            if len != n {
                return Err(SurveyError::Length { design: n, found: len });
            }
        }
        if let Some((index, &weight)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(SurveyError::Weight { index, weight });
        }

        let mut stratum_index: HashMap<&str, usize> = HashMap::new();
        let mut stratum_names = Vec::new();
        let mut cluster_index: HashMap<&str, usize> = HashMap::new();
        let mut cluster_stratum = Vec::new();
        let mut stratum_of = Vec::with_capacity(n);
        let mut cluster_of = Vec::with_capacity(n);

        for i in 0..n {
            let sname = strata[i].as_deref().unwrap_or("");
            let h = *stratum_index.entry(sname).or_insert_with(|| {
                stratum_names.push(sname.to_string());
                stratum_names.len() - 1
            });
            let c = match clusters[i].as_deref() {
                Some(cname) => {
                    let c = *cluster_index.entry(cname).or_insert_with(|| {
                        cluster_stratum.push(h);
                        cluster_stratum.len() - 1
                    });
                    if cluster_stratum[c] != h {
                        return Err(SurveyError::ClusterInManyStrata {
                            cluster: cname.to_string(),
                            first: stratum_names[cluster_stratum[c]].clone(),
                            second: sname.to_string(),
                        });
                    }
                    c
                }
                None => {
                    cluster_stratum.push(h);
                    cluster_stratum.len() - 1
                }
            };
            stratum_of.push(h);
            cluster_of.push(c);
        }
        Ok(Self { stratum_of, cluster_of, weights: weights.to_vec(), stratum_names, cluster_stratum })
    }

    pub fn from_dataset(dataset: &Dataset) -> Result<Self, SurveyError> {
        let strata: Vec<_> = dataset.subjects.iter().map(|s| s.stratum.clone()).collect();
        let clusters: Vec<_> = dataset.subjects.iter().map(|s| s.cluster.clone()).collect();
        let weights: Vec<_> = dataset.subjects.iter().map(|s| s.weight).collect();
        Self::new(&strata, &clusters, &weights)
    }

    /// One stratum, every subject its own cluster.
    pub fn independent(weights: &[f64]) -> Result<Self, SurveyError> {
        let none = vec![None; weights.len()];
        Self::new(&none, &none, weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_names.len()
    }

    /// `(stratum name, number of sampled clusters)` per stratum.
    pub fn cluster_counts(&self) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.stratum_names.len()];
        for &h in &self.cluster_stratum {
            counts[h] += 1;
        }
        self.stratum_names.iter().cloned().zip(counts).collect()
    }

    /// Errors naming the first stratum with fewer than two clusters.
    pub fn check_estimable(&self) -> Result<(), SurveyError> {
        match self.cluster_counts().into_iter().find(|(_, n)| *n < 2) {
            Some((name, _)) => Err(SurveyError::SingleCluster(name)),
            None => Ok(()),
        }
    }

    /// Keeps only the subjects flagged in `keep`, preserving strata and cluster labels.
    pub fn subset(&self, keep: &[bool]) -> Result<Self, SurveyError> {
        if keep.len() != self.len() {
            return Err(SurveyError::Length { design: self.len(), found: keep.len() });
        }
        let mut strata = Vec::new();
        let mut clusters = Vec::new();
        let mut weights = Vec::new();
        for i in (0..self.len()).filter(|&i| keep[i]) {
            strata.push(Some(self.stratum_names[self.stratum_of[i]].clone()));
            clusters.push(Some(format!("{}", self.cluster_of[i])));
            weights.push(self.weights[i]);
        }
        Self::new(&strata, &clusters, &weights)
    }

    /// Same design with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut d = self.clone();
        d.weights.iter_mut().for_each(|w| *w *= c);
        d
    }
}

/// Stratified with-replacement cluster variance of `Σ_i w_i · infl_i`.
///
/// For stratum h with n_h clusters and cluster totals `z_hc = Σ_{i∈c} w_i infl_i`,
/// `v_h = n_h/(n_h − 1) Σ_c (z_hc − z̄_h)(z_hc − z̄_h)'`; the result is `Σ_h v_h`.
pub fn sandwich_covariance(influence: &DMatrix<f64>, design: &SurveyDesign) -> Result<DMatrix<f64>, SurveyError> {
    if influence.nrows() != design.len() {
        return Err(SurveyError::Length { design: design.len(), found: influence.nrows() });
    }
    design.check_estimable()?;
    let k = influence.ncols();
    let mut totals = vec![DVector::<f64>::zeros(k); design.cluster_stratum.len()];
    for i in 0..design.len() {
        let w = design.weights[i];
        let z = &mut totals[design.cluster_of[i]];
        for j in 0..k {
            z[j] += w * influence[(i, j)];
        }
    }

    let mut cov = DMatrix::<f64>::zeros(k, k);
    for (h, (_, n_h)) in design.cluster_counts().into_iter().enumerate() {
        let members: Vec<&DVector<f64>> =
            totals.iter().zip(&design.cluster_stratum).filter(|(_, &s)| s == h).map(|(z, _)| z).collect();
        let mean = members.iter().fold(DVector::zeros(k), |acc, z| acc + *z) / n_h as f64;
        let mut v = DMatrix::<f64>::zeros(k, k);
        for z in members {
            let d = z - &mean;
            v += &d * d.transpose();
        }
        cov += v * (n_h as f64 / (n_h as f64 - 1.0));
    }
    Ok(crate::numeric::symmetrize(&cov))
}

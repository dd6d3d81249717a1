use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{hchs_with, replicate_rng, srs_with, survey_with, HchsSample, Superpopulation};
use super::{DesignKind, SimDesign, SimulationError};
use crate::analysis::calibrated_analysis;
use crate::calibration::MiOptions;
use crate::comparator::{fit_standard, GlmFit};
use crate::data::Dataset;
use crate::estimation::{fit, FitResult};
use crate::numeric::{mad, median};
use crate::survey::SurveyDesign;

/// Outcome of one simulated replicate for the summarized coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub n: usize,
    /// Fraction event-free at the last visit.
    pub censoring: f64,
    pub gs_missing: f64,
    pub beta: Option<f64>,
    pub se: Option<f64>,
    pub converged: bool,
    pub std_beta: Option<f64>,
    pub std_se: Option<f64>,
    pub std_converged: bool,
    /// `se_std² / se²`.
    pub re: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// `100 (median β̂ − β) / β`; absent when β = 0.
    pub pct_bias: Option<f64>,
    pub median_estimate: f64,
    /// Median standard error.
    pub ase: f64,
    /// Scaled median absolute deviation of the estimates.
    pub mad: f64,
    /// Share of 95% intervals covering the true value.
    pub cp: f64,
    /// Share of Wald tests of β = 0 rejected at 5%.
    pub rejection_rate: f64,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub name: String,
    pub design: SimDesign,
    pub replicates: usize,
    pub mean_n: f64,
    pub mean_censoring: f64,
    pub mean_gs_missing: f64,
    pub proposed: Option<MethodSummary>,
    pub standard: Option<MethodSummary>,
    pub median_re: Option<f64>,
    pub failures: usize,
    pub per_replicate: Vec<ReplicateMetrics>,
}

const Z95: f64 = 1.96;

fn summarize(pairs: &[(f64, f64)], truth: f64) -> Option<MethodSummary> {
    if pairs.is_empty() {
        return None;
    }
    let est: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let se: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let m = pairs.len() as f64;
    let med = median(&est);
    Some(MethodSummary {
        pct_bias: (truth != 0.0).then(|| 100.0 * (med - truth) / truth),
        median_estimate: med,
        ase: median(&se),
        mad: mad(&est),
        cp: pairs.iter().filter(|(b, s)| (b - truth).abs() <= Z95 * s).count() as f64 / m,
        rejection_rate: pairs.iter().filter(|(b, s)| (b / s).abs() > Z95).count() as f64 / m,
        used: pairs.len(),
    })
}

impl StudySummary {
    fn from_replicates(design: &SimDesign, per_replicate: Vec<ReplicateMetrics>) -> Self {
        let truth = design.beta[design.target];
        let proposed: Vec<(f64, f64)> =
            per_replicate.iter().filter(|r| r.converged).filter_map(|r| Some((r.beta?, r.se?))).collect();
        let standard: Vec<(f64, f64)> =
            per_replicate.iter().filter(|r| r.std_converged).filter_map(|r| Some((r.std_beta?, r.std_se?))).collect();
        let re: Vec<f64> =
            per_replicate.iter().filter(|r| r.converged && r.std_converged).filter_map(|r| r.re).collect();
        let k = per_replicate.len().max(1) as f64;
        Self {
            name: design.name.clone(),
            design: design.clone(),
            replicates: per_replicate.len(),
            mean_n: per_replicate.iter().map(|r| r.n as f64).sum::<f64>() / k,
            mean_censoring: per_replicate.iter().map(|r| r.censoring).sum::<f64>() / k,
            mean_gs_missing: per_replicate.iter().map(|r| r.gs_missing).sum::<f64>() / k,
            proposed: summarize(&proposed, truth),
            standard: summarize(&standard, truth),
            median_re: (!re.is_empty()).then(|| median(&re)),
            failures: per_replicate.iter().filter(|r| r.error.is_some() || !r.converged).count(),
            per_replicate,
        }
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "MR",
        "CR",
        "N",
        "Proposed %Bias",
        "Proposed ASE",
        "Proposed MAD",
        "Proposed CP",
        "Standard %Bias",
        "Standard ASE",
        "Standard MAD",
        "Standard CP",
        "RE",
        "Type I Error",
        "Converged",
        "Replicates",
    ];

    /// One table row in the column order of [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> Vec<String> {
        let f = |v: Option<f64>, d: usize| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.d$}"));
        let p = self.proposed.as_ref();
        let s = self.standard.as_ref();
        vec![
            format!("{:.1}", self.design.mr),
            format!("{:.3}", self.mean_censoring),
            format!("{:.0}", self.mean_n),
            f(p.and_then(|m| m.pct_bias), 3),
            f(p.map(|m| m.ase), 3),
            f(p.map(|m| m.mad), 3),
            f(p.map(|m| m.cp), 3),
            f(s.and_then(|m| m.pct_bias), 3),
            f(s.map(|m| m.ase), 3),
            f(s.map(|m| m.mad), 3),
            f(s.map(|m| m.cp), 3),
            f(self.median_re, 3),
            f(p.map(|m| m.rejection_rate), 3),
            format!("{}", p.map_or(0, |m| m.used)),
            format!("{}", self.replicates),
        ]
    }

    pub fn write_csv<W: Write>(summaries: &[StudySummary], out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for s in summaries {
            w.write_record(s.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gs_missing_share(d: &Dataset) -> f64 {
    d.subjects.iter().filter(|s| s.gs_status.is_none()).count() as f64 / d.len().max(1) as f64
}

fn fill_proposed(m: &mut ReplicateMetrics, r: &FitResult, k: usize) {
    m.beta = Some(r.params.beta[k]);
    m.se = r.beta_se().map(|s| s[k]).filter(|s| *s > 0.0);
    m.converged = r.converged && m.se.is_some();
}

fn fill_standard(m: &mut ReplicateMetrics, g: &GlmFit, k: usize) {
    m.std_beta = Some(g.coefficients[k + 1]);
    m.std_se = g.se().map(|s| s[k + 1]).filter(|s| *s > 0.0);
    m.std_converged = g.converged && m.std_se.is_some();
}

fn finish(mut m: ReplicateMetrics) -> ReplicateMetrics {
    if let (Some(a), Some(b)) = (m.se, m.std_se) {
        m.re = Some((b / a).powi(2));
    }
    m
}

fn empty_metrics(replicate: usize) -> ReplicateMetrics {
    ReplicateMetrics {
        replicate,
        n: 0,
        censoring: f64::NAN,
        gs_missing: f64::NAN,
        beta: None,
        se: None,
        converged: false,
        std_beta: None,
        std_se: None,
        std_converged: false,
        re: None,
        error: None,
    }
}

/// Runs one replicate. `pop` must be given for survey designs.
pub fn run_replicate(design: &SimDesign, replicate: usize, pop: Option<&Superpopulation>) -> ReplicateMetrics {
    let mut m = empty_metrics(replicate);
    let mut rng = replicate_rng(design.seed, replicate as u64);
    let k = design.target;
    let result: Result<(), String> = (|| {
        match design.kind() {
            DesignKind::Srs | DesignKind::Survey => {
                let (data, censoring) = match design.kind() {
                    DesignKind::Srs => srs_with(design, &mut rng),
                    _ => survey_with(design, pop.ok_or("survey design needs a superpopulation")?, &mut rng),
                }
                .map_err(|e| e.to_string())?;
                m.n = data.len();
                m.censoring = censoring;
                m.gs_missing = gs_missing_share(&data);
                let sd = match design.kind() {
                    DesignKind::Survey => Some(SurveyDesign::from_dataset(&data).map_err(|e| e.to_string())?),
                    _ => None,
                };
                let prop = fit(&data, sd.as_ref(), &design.fit).map_err(|e| e.to_string())?;
                fill_proposed(&mut m, &prop, k);
                let std = fit_standard(&data, sd.as_ref()).map_err(|e| e.to_string())?;
                fill_standard(&mut m, &std, k);
            }
            DesignKind::HchsLike => {
                let sample = hchs_with(design, &mut rng).map_err(|e| e.to_string())?;
                let mi_seed: u64 = rng.random();
                m.n = sample.dataset.len();
                m.censoring = sample.censored;
                m.gs_missing = gs_missing_share(&sample.dataset);
                hchs_fits(design, &sample, mi_seed, &mut m)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        m.error = Some(e);
    }
    finish(m)
}

/// Calibrated main fit for the point estimate, then multiple imputation for the standard
/// error, for both estimators.
fn hchs_fits(design: &SimDesign, sample: &HchsSample, mi_seed: u64, m: &mut ReplicateMetrics) -> Result<(), String> {
    let k = design.target;
    let data = &sample.dataset;
    let weights: Vec<f64> = data.subjects.iter().map(|s| s.weight).collect();
    let sd = SurveyDesign::independent(&weights).map_err(|e| e.to_string())?;
    let mi = MiOptions { seed: mi_seed, ..design.mi.clone() };
    let a = calibrated_analysis(data, 0, &sample.subset, Some(&sd), &design.fit, &mi).map_err(|e| e.to_string())?;

    m.beta = Some(a.proposed.params.beta[k]);
    m.se = Some(a.proposed_mi.se[k]).filter(|s| s.is_finite() && *s > 0.0);
    m.converged = a.proposed.converged && m.se.is_some() && !a.proposed_mi.flagged;
    m.std_beta = Some(a.standard.coefficients[k + 1]);
    m.std_se = Some(a.standard_mi.se[k]).filter(|s| s.is_finite() && *s > 0.0);
    m.std_converged = a.standard.converged && m.std_se.is_some() && !a.standard_mi.flagged;
    Ok(())
}

/// Runs every replicate of `design` in parallel; output order follows replicate index.
pub fn run_study(design: &SimDesign) -> Result<StudySummary, SimulationError> {
    design.validate()?;
    let pop = match (design.kind(), &design.survey) {
        (DesignKind::Survey, Some(cfg)) => Some(Superpopulation::build(cfg, &design.covariate, cfg.population_seed)?),
        _ => None,
    };
    if let (Some(p), Some(cfg)) = (&pop, &design.survey) {
        // Surface infeasible stage sizes as a configuration error before any work.
        p.sample(cfg, design.n_target, &mut replicate_rng(design.seed, u64::MAX))?;
    }
    let done = AtomicUsize::new(0);
    let total = design.replicates;
    let per_replicate: Vec<ReplicateMetrics> = (0..total)
        .into_par_iter()
        .map(|r| {
            let out = run_replicate(design, r, pop.as_ref());
            let d = done.fetch_add(1, Ordering::Relaxed) + 1;
            if d % (total / 10).max(1) == 0 || d == total {
                info!("{}: {d}/{total} replicates", design.name);
            }
            out
        })
        .collect();
    Ok(StudySummary::from_replicates(design, per_replicate))
}

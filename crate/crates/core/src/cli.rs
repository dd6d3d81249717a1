//! Command-line driver: fit models on CSV data, run calibrations and simulation studies.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data error,
//! 4 non-convergence (outputs are still written).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{calibrated_analysis, prediction_rows};
use crate::calibration::{fit_calibration, predict_xhat, CalibrationModel, CalibrationRow, MiOptions};
use crate::comparator::{fit_standard, variance_ratio, GlmFit};
use crate::data::{
    covariate_columns, read_long_csv, read_wide_csv, write_long_csv, write_wide_csv, ColumnMap, Dataset, MisclassSpec,
    VisitSchedule,
};
use crate::estimation::{fit, FitOptions, FitResult};
use crate::simulation::{generate, run_study, DesignKind, SimDesign, StudySummary, Superpopulation};
use crate::survey::SurveyDesign;

#[derive(Debug, Parser)]
#[command(
    name = "auglik",
    version,
    about = "Discrete proportional hazards with misclassified self-reports and a validated outcome"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the augmented-likelihood model and the gold-standard-only comparator.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Calibration subset CSV; overrides `calibration.subset` in the config.
        #[arg(long)]
        subset: Option<PathBuf>,
        /// Also write the hazard ratio table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Fit only the complementary log-log comparator on subjects with an observed gold standard.
    FitStandard {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the exposure calibration model on a validation subset.
    Calibrate {
        #[arg(long)]
        subset: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the data (long layout) with the exposure replaced by its calibrated prediction.
        #[arg(long)]
        write_data: Option<PathBuf>,
    },
    /// Run one simulation study, or an array of them, from a design JSON.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the replicate count of every design.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Write the data of one simulated replicate.
    Generate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        #[arg(long, value_enum, default_value_t = Layout::Long)]
        layout: Layout,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::NotConverged(_) => 4,
            CliError::Failed(_) | CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Long,
    Wide,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Covariate column holding the error-prone exposure.
    pub exposure: String,
    /// Subset CSV, relative to the config file.
    #[serde(default)]
    pub subset: Option<PathBuf>,
    /// Column of the subset CSV with the reference measurement.
    #[serde(default = "default_reference_column")]
    pub reference_column: String,
    #[serde(default)]
    pub mi: MiOptions,
}

fn default_reference_column() -> String {
    "x_double_star".into()
}

/// Config shared by `fit`, `fit-standard` and `calibrate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sensitivity: f64,
    pub specificity: f64,
    /// Number of scheduled visits J; indices in the data run over 1..=J.
    pub visits: usize,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Use weights, strata and clusters with design-based (sandwich) variances.
    #[serde(default)]
    pub survey: bool,
    /// Multiplicative increment r per covariate; hazard ratios are reported for a change
    /// of `log r`. Covariates not listed are reported per unit.
    #[serde(default)]
    pub hr_increments: BTreeMap<String, f64>,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default)]
    pub fit: FitOptions,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = read_json(path)?;
    if let Some(bad) = cfg.hr_increments.iter().find(|(_, r)| !(**r > 0.0 && r.is_finite())) {
        return Err(CliError::Config(format!("hr_increments: `{}` must be positive", bad.0)));
    }
    if cfg.calibration.as_ref().is_some_and(|c| c.mi.imputations < 2) {
        return Err(CliError::Config("calibration.mi.imputations must be at least 2".into()));
    }
    Ok(cfg)
}

/// Reads the data named by `cfg` and returns it with its covariate names.
pub fn load_data(path: &Path, cfg: &RunConfig) -> Result<(Dataset, Vec<String>), CliError> {
    let schedule = VisitSchedule::annual(cfg.visits).map_err(|e| CliError::Config(e.to_string()))?;
    let misclass = MisclassSpec::new(cfg.sensitivity, cfg.specificity).map_err(|e| CliError::Config(e.to_string()))?;
    let names = covariate_columns(path, &cfg.columns).map_err(data_err)?;
    let data = match cfg.layout {
        Layout::Long => read_long_csv(path, &cfg.columns, schedule, misclass),
        Layout::Wide => read_wide_csv(path, &cfg.columns, schedule, misclass),
    }
    .map_err(data_err)?;
    data.ensure_valid().map_err(data_err)?;
    if data.is_empty() {
        return Err(CliError::Data("no subjects".into()));
    }
    Ok((data, names))
}

fn survey_design(data: &Dataset, cfg: &RunConfig) -> Result<Option<SurveyDesign>, CliError> {
    cfg.survey.then(|| SurveyDesign::from_dataset(data).map_err(data_err)).transpose()
}

/// Joins the subset CSV (`id` plus the reference column) to the main data by id.
pub fn read_subset(
    path: &Path,
    data: &Dataset,
    exposure: usize,
    reference_column: &str,
) -> Result<Vec<CalibrationRow>, CliError> {
    let by_id: HashMap<&str, usize> = data.subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut rdr = csv::Reader::from_path(path).map_err(data_err)?;
    let headers = rdr.headers().map_err(data_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (c_id, c_ref) = (col("id")?, col(reference_column)?);
    let mut seen = vec![false; data.len()];
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(data_err)?;
        let row = k + 2;
        let id = rec.get(c_id).unwrap_or("").trim();
        let &i = by_id.get(id).ok_or_else(|| CliError::Data(format!("subset row {row}: id `{id}` not in the data")))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(CliError::Data(format!("subset row {row}: duplicate id `{id}`")));
        }
        let raw = rec.get(c_ref).unwrap_or("").trim();
        let x_double_star: f64 =
            raw.parse().map_err(|_| CliError::Data(format!("subset row {row}: cannot parse `{raw}`")))?;
        let s = &data.subjects[i];
        let z = s.covariates.iter().enumerate().filter(|&(j, _)| j != exposure).map(|(_, &v)| v).collect();
        rows.push(CalibrationRow { x_double_star, x_star: s.covariates[exposure], z });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Multiplicative increment r; `None` means per unit.
    pub increment: Option<f64>,
    pub hr: f64,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

impl Coefficient {
    /// HR = exp(β log r), CI = exp((β ± 1.96 SE) log r).
    pub fn new(name: &str, estimate: f64, se: Option<f64>, increment: Option<f64>) -> Self {
        let scale = increment.map_or(1.0, f64::ln);
        let se = se.filter(|s| s.is_finite());
        Self {
            name: name.to_string(),
            estimate,
            se,
            increment,
            hr: (estimate * scale).exp(),
            ci_lower: se.map(|s| ((estimate - 1.96 * s) * scale).exp()),
            ci_upper: se.map(|s| ((estimate + 1.96 * s) * scale).exp()),
        }
    }

    fn hr_text(&self) -> String {
        match (self.ci_lower, self.ci_upper) {
            (Some(l), Some(u)) => format!("{:.2} ({:.2}, {:.2})", self.hr, l, u),
            _ => format!("{:.2} (NA)", self.hr),
        }
    }
}

fn coefficients(names: &[String], beta: &[f64], se: Option<&[f64]>, cfg: &RunConfig) -> Vec<Coefficient> {
    names
        .iter()
        .zip(beta)
        .enumerate()
        .map(|(k, (n, &b))| Coefficient::new(n, b, se.map(|s| s[k]), cfg.hr_increments.get(n).copied()))
        .collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardReport {
    pub method: String,
    pub n_used: usize,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub variance: String,
    pub intercept: f64,
    pub intercept_se: Option<f64>,
    pub coefficients: Vec<Coefficient>,
    /// Intercept first.
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl StandardReport {
    fn new(g: &GlmFit, names: &[String], n_used: usize, se_override: Option<&[f64]>, cfg: &RunConfig) -> Self {
        let se = g.se();
        let beta_se: Option<Vec<f64>> =
            se_override.map(<[f64]>::to_vec).or_else(|| se.as_ref().map(|s| s[1..].to_vec()));
        let variance = match (se_override, g.cov_kind) {
            (Some(_), _) => "multiple_imputation",
            (None, crate::comparator::GlmCovKind::ModelBased) => "model_based",
            (None, crate::comparator::GlmCovKind::Sandwich) => "survey_sandwich",
        };
        Self {
            method: "standard".into(),
            n_used,
            converged: g.converged,
            iterations: g.iterations,
            loglik: g.loglik,
            variance: variance.into(),
            intercept: g.coefficients[0],
            intercept_se: se.map(|s| s[0]),
            coefficients: coefficients(names, &g.coefficients[1..], beta_se.as_deref(), cfg),
            covariance: g.covariance.as_ref().map(matrix_rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub exposure: String,
    pub model: CalibrationModel,
    pub imputations: usize,
    pub proposed_failed: usize,
    pub standard_failed: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub n_subjects: usize,
    pub visits: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub variance: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub loglik: f64,
    pub coefficients: Vec<Coefficient>,
    /// Baseline survival at visits 1..=J.
    pub survival: Vec<f64>,
    pub lam: Vec<f64>,
    /// Main-fit covariance in `[β, lam]` order; rows of boundary positions are zero.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub boundary: Vec<usize>,
    pub standard: Option<StandardReport>,
    /// `Var_standard / Var_proposed` per covariate.
    pub relative_efficiency: Vec<Option<f64>>,
    pub calibration: Option<CalibrationReport>,
}

impl FitReport {
    fn new(r: &FitResult, data: &Dataset, names: &[String], se: Option<&[f64]>, mi: bool, cfg: &RunConfig) -> Self {
        let own = r.beta_se();
        let se = se.map(<[f64]>::to_vec).or(own);
        let variance = if mi {
            "multiple_imputation"
        } else {
            match r.cov_kind {
                crate::estimation::CovKind::HessianInverse => "hessian_inverse",
                crate::estimation::CovKind::SurveySandwich => "survey_sandwich",
            }
        };
        Self {
            method: "augmented".into(),
            n_subjects: data.len(),
            visits: data.schedule.visits(),
            sensitivity: data.misclass.sensitivity,
            specificity: data.misclass.specificity,
            variance: variance.into(),
            converged: r.converged,
            iterations: r.iterations,
            final_gradient_norm: r.final_gradient_norm,
            loglik: r.loglik_at_optimum,
            coefficients: coefficients(names, &r.params.beta, se.as_deref(), cfg),
            survival: r.survival.0.clone(),
            lam: r.params.lam.clone(),
            covariance: r.full_cov.as_ref().map(matrix_rows),
            boundary: r.boundary.clone(),
            standard: None,
            relative_efficiency: Vec::new(),
            calibration: None,
        }
    }

    fn attach_standard(&mut self, s: StandardReport) {
        self.relative_efficiency = self
            .coefficients
            .iter()
            .zip(&s.coefficients)
            .map(|(p, q)| match (p.se, q.se) {
                (Some(a), Some(b)) if a > 0.0 => Some(variance_ratio(b * b, a * a)),
                _ => None,
            })
            .collect();
        self.standard = Some(s);
    }

    /// Aligned plain-text hazard ratio table.
    pub fn table(&self) -> String {
        let mut rows = vec![[
            "Covariate".to_string(),
            "Increment".into(),
            "Proposed HR (95% CI)".into(),
            "No auxiliary data HR (95% CI)".into(),
            "RE".into(),
        ]];
        for (k, c) in self.coefficients.iter().enumerate() {
            let std = self.standard.as_ref().map_or("NA".into(), |s| s.coefficients[k].hr_text());
            let re = self.relative_efficiency.get(k).copied().flatten().map_or("NA".into(), |v| format!("{v:.2}"));
            rows.push([c.name.clone(), c.increment.map_or("unit".into(), |r| format!("{r}")), c.hr_text(), std, re]);
        }
        let widths: Vec<usize> = (0..5).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn resolve(config: &Path, p: &Path) -> PathBuf {
    match config.parent() {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

fn exposure_index(names: &[String], exposure: &str) -> Result<usize, CliError> {
    names
        .iter()
        .position(|n| n == exposure)
        .ok_or_else(|| CliError::Config(format!("exposure `{exposure}` is not a covariate column")))
}

pub fn cmd_fit(
    data: &Path,
    config: &Path,
    out: &Path,
    subset: Option<&Path>,
    table: Option<&Path>,
) -> Result<FitReport, CliError> {
    let cfg = load_config(config)?;
    let (ds, names) = load_data(data, &cfg)?;
    let design = survey_design(&ds, &cfg)?;
    let n_used = ds.subjects.iter().filter(|s| s.gs_status.is_some()).count();

    let report = match &cfg.calibration {
        Some(cal) => {
            let subset_path = subset
                .map(Path::to_path_buf)
                .or_else(|| cal.subset.as_ref().map(|p| resolve(config, p)))
                .ok_or_else(|| CliError::Config("calibration needs a subset file".into()))?;
            let exposure = exposure_index(&names, &cal.exposure)?;
            let rows = read_subset(&subset_path, &ds, exposure, &cal.reference_column)?;
            let a = calibrated_analysis(&ds, exposure, &rows, design.as_ref(), &cfg.fit, &cal.mi).map_err(failed)?;
            if a.proposed_mi.flagged || a.standard_mi.flagged {
                warn!("more than 10% of imputation refits failed");
            }
            let mut rep = FitReport::new(&a.proposed, &ds, &names, Some(&a.proposed_mi.se), true, &cfg);
            rep.attach_standard(StandardReport::new(&a.standard, &names, n_used, Some(&a.standard_mi.se), &cfg));
            rep.calibration = Some(CalibrationReport {
                exposure: cal.exposure.clone(),
                model: a.model.clone(),
                imputations: cal.mi.imputations,
                proposed_failed: a.proposed_mi.failed,
                standard_failed: a.standard_mi.failed,
                flagged: a.proposed_mi.flagged || a.standard_mi.flagged,
            });
            rep
        }
        None => {
            let r = fit(&ds, design.as_ref(), &cfg.fit).map_err(failed)?;
            let mut rep = FitReport::new(&r, &ds, &names, None, false, &cfg);
            match fit_standard(&ds, design.as_ref()) {
                Ok(g) => rep.attach_standard(StandardReport::new(&g, &names, n_used, None, &cfg)),
                Err(e) => warn!("comparator fit failed: {e}"),
            }
            rep
        }
    };

    write_json(out, &report)?;
    let text = report.table();
    print!("{text}");
    if let Some(t) = table {
        fs::write(t, &text).map_err(io_err(t))?;
    }
    if !report.converged {
        return Err(CliError::NotConverged(format!(
            "projected gradient norm {:.3e} after {} iterations",
            report.final_gradient_norm, report.iterations
        )));
    }
    Ok(report)
}

pub fn cmd_fit_standard(data: &Path, config: &Path, out: &Path) -> Result<StandardReport, CliError> {
    let cfg = load_config(config)?;
    let (ds, names) = load_data(data, &cfg)?;
    let design = survey_design(&ds, &cfg)?;
    let n_used = ds.subjects.iter().filter(|s| s.gs_status.is_some()).count();
    let g = fit_standard(&ds, design.as_ref()).map_err(failed)?;
    let report = StandardReport::new(&g, &names, n_used, None, &cfg);
    write_json(out, &report)?;
    for c in &report.coefficients {
        println!("{}  {:.6}  {}", c.name, c.estimate, c.se.map_or("NA".into(), |s| format!("{s:.6}")));
    }
    if !report.converged {
        return Err(CliError::NotConverged("IRLS did not converge or the data are separated".into()));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOutput {
    pub exposure: String,
    pub model: CalibrationModel,
}

pub fn cmd_calibrate(
    subset: &Path,
    data: &Path,
    config: &Path,
    out: &Path,
    write_data: Option<&Path>,
) -> Result<CalibrateOutput, CliError> {
    let cfg = load_config(config)?;
    let cal = cfg.calibration.as_ref().ok_or_else(|| CliError::Config("`calibration` section missing".into()))?;
    let (mut ds, names) = load_data(data, &cfg)?;
    let exposure = exposure_index(&names, &cal.exposure)?;
    let rows = read_subset(subset, &ds, exposure, &cal.reference_column)?;
    let model = fit_calibration(&rows).map_err(data_err)?;
    let output = CalibrateOutput { exposure: cal.exposure.clone(), model };
    write_json(out, &output)?;
    if let Some(path) = write_data {
        let targets = prediction_rows(&ds, exposure).map_err(failed)?;
        let xhat = predict_xhat(&output.model, &targets).map_err(failed)?;
        for (s, x) in ds.subjects.iter_mut().zip(xhat) {
            s.covariates[exposure] = x;
        }
        write_long_csv(&ds, path).map_err(failed)?;
    }
    Ok(output)
}

/// Parses a design file holding one design object or an array of them.
pub fn load_designs(path: &Path) -> Result<Vec<SimDesign>, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let designs: Vec<SimDesign> = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value),
        other => serde_json::from_value(other).map(|d| vec![d]),
    }
    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for d in &designs {
        d.validate().map_err(|e| CliError::Config(format!("{}: {e}", d.name)))?;
    }
    Ok(designs)
}

const REPLICATE_HEADER: [&str; 13] = [
    "design",
    "replicate",
    "n",
    "censoring",
    "gs_missing",
    "beta",
    "se",
    "converged",
    "std_beta",
    "std_se",
    "std_converged",
    "re",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn cmd_simulate(design: &Path, out: &Path, replicates: Option<usize>) -> Result<Vec<StudySummary>, CliError> {
    let mut designs = load_designs(design)?;
    if let Some(r) = replicates {
        if r == 0 {
            return Err(CliError::Config("--replicates must be at least 1".into()));
        }
        designs.iter_mut().for_each(|d| d.replicates = r);
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut summaries = Vec::new();
    for d in &designs {
        info!("running {} ({} replicates)", d.name, d.replicates);
        summaries.push(run_study(d).map_err(|e| CliError::Config(e.to_string()))?);
    }

    let csv_path = out.join("summary.csv");
    let f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    StudySummary::write_csv(&summaries, f).map_err(failed)?;
    write_json(&out.join("summary.json"), &summaries)?;

    let rep_path = out.join("replicates.csv");
    let mut w = csv::Writer::from_path(&rep_path).map_err(failed)?;
    w.write_record(REPLICATE_HEADER).map_err(failed)?;
    for s in &summaries {
        for m in &s.per_replicate {
            w.write_record([
                s.name.clone(),
                m.replicate.to_string(),
                m.n.to_string(),
                m.censoring.to_string(),
                m.gs_missing.to_string(),
                opt(m.beta),
                opt(m.se),
                m.converged.to_string(),
                opt(m.std_beta),
                opt(m.std_se),
                m.std_converged.to_string(),
                opt(m.re),
                m.error.clone().unwrap_or_default(),
            ])
            .map_err(failed)?;
        }
    }
    w.flush().map_err(io_err(&rep_path))?;

    let mut table = vec![StudySummary::CSV_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    table.extend(summaries.iter().map(StudySummary::csv_row));
    let widths: Vec<usize> =
        (0..table[0].len()).map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut stdout = std::io::stdout().lock();
    for r in &table {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, &w)| format!("{s:>w$}")).collect();
        writeln!(stdout, "{}", line.join("  ")).map_err(failed)?;
    }
    Ok(summaries)
}

/// Writes `data.csv` and, for designs with a calibration subset,
/// `subset.csv` with columns `id,x_double_star`.
pub fn cmd_generate(design: &Path, out: &Path, replicate: u64, layout: Layout) -> Result<(), CliError> {
    let designs = load_designs(design)?;
    let [d] = designs.as_slice() else {
        return Err(CliError::Config("generate takes a single design".into()));
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rng = generate::replicate_rng(d.seed, replicate);
    let cfg_err = |e: crate::simulation::SimulationError| CliError::Config(e.to_string());
    let data = match d.kind() {
        DesignKind::Srs => generate::srs_with(d, &mut rng).map_err(cfg_err)?.0,
        DesignKind::Survey => {
            let cfg = d.survey.as_ref().expect("survey design has survey settings");
            let pop = Superpopulation::build(cfg, &d.covariate, cfg.population_seed).map_err(cfg_err)?;
            generate::survey_with(d, &pop, &mut rng).map_err(cfg_err)?.0
        }
        DesignKind::HchsLike => {
            let sample = generate::hchs_with(d, &mut rng).map_err(cfg_err)?;
            let _mi_seed: u64 = rng.random();
            let path = out.join("subset.csv");
            let mut w = csv::Writer::from_path(&path).map_err(failed)?;
            w.write_record(["id", "x_double_star"]).map_err(failed)?;
            for (row, &i) in sample.subset.iter().zip(&sample.subset_index) {
                w.write_record([sample.dataset.subjects[i].id.clone(), row.x_double_star.to_string()])
                    .map_err(failed)?;
            }
            w.flush().map_err(io_err(&path))?;
            sample.dataset
        }
    };
    let path = out.join("data.csv");
    match layout {
        Layout::Long => write_long_csv(&data, path),
        Layout::Wide => write_wide_csv(&data, path),
    }
    .map_err(failed)
}

/// Applies `AUGLIK_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("AUGLIK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("AUGLIK_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(failed)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Fit { data, config, out, subset, table } => {
            cmd_fit(&data, &config, &out, subset.as_deref(), table.as_deref()).map(drop)
        }
        Command::FitStandard { data, config, out } => cmd_fit_standard(&data, &config, &out).map(drop),
        Command::Calibrate { subset, data, config, out, write_data } => {
            cmd_calibrate(&subset, &data, &config, &out, write_data.as_deref()).map(drop)
        }
        Command::Simulate { design, out, replicates } => cmd_simulate(&design, &out, replicates).map(drop),
        Command::Generate { design, out, replicate, layout } => cmd_generate(&design, &out, replicate, layout),
    }
}

//! Long (one row per subject-visit) and wide (one row per subject) CSV layouts.
//!
//! Long layout: `id,time_index,result,gs_visit,gs_status,weight,stratum,cluster,x1..xp`.
//! A row with `time_index = 0` carries subject-level fields only; this is how a subject
//! without any auxiliary report is written. An empty `result` is a missed visit.
//! Empty `gs_status` encodes a missing gold standard.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, MisclassSpec, SubjectRecord, VisitSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub id: String,
    pub time_index: String,
    pub result: String,
    pub gs_visit: String,
    pub gs_status: String,
    pub weight: String,
    pub stratum: String,
    pub cluster: String,
    /// Covariate columns in model order. `None` picks every `x<k>` column, ordered by k.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time_index: "time_index".into(),
            result: "result".into(),
            gs_visit: "gs_visit".into(),
            gs_status: "gs_status".into(),
            weight: "weight".into(),
            stratum: "stratum".into(),
            cluster: "cluster".into(),
            covariates: None,
        }
    }
}

fn default_covariates(headers: &csv::StringRecord) -> Vec<String> {
    let mut cols: Vec<(usize, String)> = headers
        .iter()
        .filter_map(|h| {
            let k = h.strip_prefix('x')?.parse::<usize>().ok()?;
            Some((k, h.to_string()))
        })
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, h)| h).collect()
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        let index = headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        Self { index }
    }

    fn required(&self, name: &str) -> Result<usize, DataError> {
        self.index.get(name).copied().ok_or_else(|| DataError::MissingColumn(name.into()))
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

fn row_err(row: usize, message: impl Into<String>) -> DataError {
    DataError::Row { row, message: message.into() }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize) -> &'a str {
    rec.get(idx).unwrap_or("").trim()
}

fn parse_binary(s: &str, row: usize, what: &str) -> Result<Option<bool>, DataError> {
    match s {
        "" | "NA" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(row_err(row, format!("{what} must be 0, 1 or empty, got `{other}`"))),
    }
}

fn parse_f64(s: &str, row: usize, what: &str) -> Result<f64, DataError> {
    s.parse::<f64>().map_err(|_| row_err(row, format!("cannot parse {what} `{s}`")))
}

fn parse_usize(s: &str, row: usize, what: &str) -> Result<usize, DataError> {
    s.parse::<usize>().map_err(|_| row_err(row, format!("cannot parse {what} `{s}`")))
}

fn opt_label(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

/// Subject-level fields shared by both layouts.
struct SubjectFields {
    cols_gs_visit: usize,
    cols_gs_status: usize,
    cols_weight: Option<usize>,
    cols_stratum: Option<usize>,
    cols_cluster: Option<usize>,
    cols_x: Vec<usize>,
}

impl SubjectFields {
    fn resolve(cols: &Columns, map: &ColumnMap, headers: &csv::StringRecord) -> Result<Self, DataError> {
        let names = map.covariates.clone().unwrap_or_else(|| default_covariates(headers));
        let cols_x = names.iter().map(|n| cols.required(n)).collect::<Result<_, _>>()?;
        Ok(Self {
            cols_gs_visit: cols.required(&map.gs_visit)?,
            cols_gs_status: cols.required(&map.gs_status)?,
            cols_weight: cols.optional(&map.weight),
            cols_stratum: cols.optional(&map.stratum),
            cols_cluster: cols.optional(&map.cluster),
            cols_x,
        })
    }

    fn read(&self, id: String, rec: &csv::StringRecord, row: usize) -> Result<SubjectRecord, DataError> {
        let weight = match self.cols_weight.map(|c| field(rec, c)) {
            None | Some("") => 1.0,
            Some(w) => parse_f64(w, row, "weight")?,
        };
        let covariates =
            self.cols_x.iter().map(|&c| parse_f64(field(rec, c), row, "covariate")).collect::<Result<_, _>>()?;
        Ok(SubjectRecord {
            id,
            aux_results: Vec::new(),
            aux_visit_indices: Vec::new(),
            gs_visit_index: parse_usize(field(rec, self.cols_gs_visit), row, "gs_visit")?,
            gs_status: parse_binary(field(rec, self.cols_gs_status), row, "gs_status")?,
            covariates,
            weight,
            stratum: self.cols_stratum.and_then(|c| opt_label(field(rec, c))),
            cluster: self.cols_cluster.and_then(|c| opt_label(field(rec, c))),
        })
    }
}

fn same_subject_fields(a: &SubjectRecord, b: &SubjectRecord) -> bool {
    a.gs_visit_index == b.gs_visit_index
        && a.gs_status == b.gs_status
        && a.weight.to_bits() == b.weight.to_bits()
        && a.stratum == b.stratum
        && a.cluster == b.cluster
        && a.covariates.len() == b.covariates.len()
        && a.covariates.iter().zip(&b.covariates).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Covariate column names, in model order, that either layout reader would use for `path`.
pub fn covariate_columns(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Vec<String>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    Ok(map.covariates.clone().unwrap_or_else(|| default_covariates(&headers)))
}

/// Reads the long layout. Row numbers in errors count the header as row 1.
pub fn read_long_csv(
    path: impl AsRef<Path>,
    map: &ColumnMap,
    schedule: VisitSchedule,
    misclass: MisclassSpec,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols = Columns::new(&headers);
    let c_id = cols.required(&map.id)?;
    let c_time = cols.required(&map.time_index)?;
    let c_result = cols.required(&map.result)?;
    let fields = SubjectFields::resolve(&cols, map, &headers)?;

    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, (SubjectRecord, Vec<(usize, bool)>)> = HashMap::new();

    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let id = field(&rec, c_id).to_string();
        if id.is_empty() {
            return Err(row_err(row, "empty id"));
        }
        let time = parse_usize(field(&rec, c_time), row, "time_index")?;
        let result = parse_binary(field(&rec, c_result), row, "result")?;
        let parsed = fields.read(id.clone(), &rec, row)?;
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (parsed.clone(), Vec::new())
        });
        if !same_subject_fields(&entry.0, &parsed) {
            return Err(row_err(row, format!("subject-level fields of `{id}` differ between rows")));
        }
        if let (true, Some(y)) = (time > 0, result) {
            if entry.1.iter().any(|&(t, _)| t == time) {
                return Err(row_err(row, format!("duplicate time_index {time} for `{id}`")));
            }
            entry.1.push((time, y));
        }
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let (mut s, mut reports) = subjects.remove(&id).expect("id recorded on first sight");
            reports.sort_by_key(|&(t, _)| t);
            s.aux_visit_indices = reports.iter().map(|&(t, _)| t).collect();
            s.aux_results = reports.iter().map(|&(_, y)| y).collect();
            s
        })
        .collect();
    Ok(Dataset { schedule, subjects, misclass })
}

fn fmt_status(s: Option<bool>) -> &'static str {
    match s {
        None => "",
        Some(false) => "0",
        Some(true) => "1",
    }
}

fn subject_header(p: usize) -> Vec<String> {
    let mut h: Vec<String> =
        ["gs_visit", "gs_status", "weight", "stratum", "cluster"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=p).map(|k| format!("x{k}")));
    h
}

fn subject_fields(s: &SubjectRecord) -> Vec<String> {
    let mut f = vec![
        s.gs_visit_index.to_string(),
        fmt_status(s.gs_status).to_string(),
        s.weight.to_string(),
        s.stratum.clone().unwrap_or_default(),
        s.cluster.clone().unwrap_or_default(),
    ];
    // `{}` on f64 prints the shortest string that parses back to the same bits
    f.extend(s.covariates.iter().map(|x| x.to_string()));
    f
}

pub fn write_long_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "time_index".into(), "result".into()];
    header.extend(subject_header(dataset.n_covariates()));
    w.write_record(&header)?;
    for s in &dataset.subjects {
        let tail = subject_fields(s);
        if s.aux_results.is_empty() {
            let mut rec = vec![s.id.clone(), "0".into(), String::new()];
            rec.extend(tail.iter().cloned());
            w.write_record(&rec)?;
        }
        for (&t, &y) in s.aux_visit_indices.iter().zip(&s.aux_results) {
            let mut rec = vec![s.id.clone(), t.to_string(), fmt_status(Some(y)).into()];
            rec.extend(tail.iter().cloned());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Wide layout: subject fields followed by `result_1..result_J` (empty = no report).
pub fn write_wide_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let j = dataset.schedule.visits();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(subject_header(dataset.n_covariates()));
    header.extend((1..=j).map(|k| format!("result_{k}")));
    w.write_record(&header)?;
    for s in &dataset.subjects {
        let mut rec = vec![s.id.clone()];
        rec.extend(subject_fields(s));
        let mut results = vec![String::new(); j];
        for (&t, &y) in s.aux_visit_indices.iter().zip(&s.aux_results) {
            if (1..=j).contains(&t) {
                results[t - 1] = fmt_status(Some(y)).into();
            }
        }
        rec.extend(results);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_wide_csv(
    path: impl AsRef<Path>,
    map: &ColumnMap,
    schedule: VisitSchedule,
    misclass: MisclassSpec,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols = Columns::new(&headers);
    let c_id = cols.required(&map.id)?;
    let fields = SubjectFields::resolve(&cols, map, &headers)?;
    let c_results: Vec<Option<usize>> =
        (1..=schedule.visits()).map(|k| cols.optional(&format!("result_{k}"))).collect();

    let mut subjects = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let id = field(&rec, c_id).to_string();
        if id.is_empty() {
            return Err(row_err(row, "empty id"));
        }
        let mut s = fields.read(id, &rec, row)?;
        for (visit, col) in c_results.iter().enumerate() {
            if let Some(y) = col.map(|c| parse_binary(field(&rec, c), row, "result")).transpose()?.flatten() {
                s.aux_visit_indices.push(visit + 1);
                s.aux_results.push(y);
            }
        }
        subjects.push(s);
    }
    Ok(Dataset { schedule, subjects, misclass })
}

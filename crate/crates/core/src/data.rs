//! Observation-level container and CSV ingestion.
//!
//! Every estimator consumes a [`Dataset`]: outcome `y`, binary treatment `d`,
//! binary instrument `z`, a covariate block and optional cluster labels.
//! Ingestion applies listwise deletion on the mapped columns only and keeps
//! a count of dropped rows.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens treated as a missing value in any mapped column.
const MISSING_TOKENS: [&str; 5] = ["", "NA", "na", "NaN", "."];

/// Assignment of CSV columns to analysis roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
}

impl ColumnMap {
    pub fn new(outcome: &str, treatment: &str, instrument: &str, covariates: &[&str]) -> Self {
        ColumnMap {
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            instrument: instrument.to_string(),
            covariates: covariates.iter().map(|c| c.to_string()).collect(),
            cluster: None,
        }
    }

    pub fn with_cluster(mut self, cluster: &str) -> Self {
        self.cluster = Some(cluster.to_string());
        self
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let map: ColumnMap = serde_json::from_reader(file)
            .map_err(|e| Error::Config(format!("column map {}: {e}", path.as_ref().display())))?;
        map.check_roles()?;
        Ok(map)
    }

    /// The four roles must not share a column.
    pub fn check_roles(&self) -> Result<()> {
        let mut seen: HashMap<String, &'static str> = HashMap::new();
        let mut claim = |col: &str, role: &'static str| -> Result<()> {
            if let Some(prev) = seen.insert(col.to_string(), role) {
                return Err(Error::Config(format!(
                    "column '{col}' mapped to both {prev} and {role}"
                )));
            }
            Ok(())
        };
        claim(&self.outcome, "outcome")?;
        claim(&self.treatment, "treatment")?;
        claim(&self.instrument, "instrument")?;
        for c in &self.covariates {
            claim(c, "covariate")?;
        }
        if let Some(c) = &self.cluster {
            claim(c, "cluster")?;
        }
        Ok(())
    }
}

/// One named covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<f64>,
    /// Normalized (trimmed) source text of each value; used as cell identity.
    pub labels: Vec<String>,
}

impl Covariate {
    pub fn new(name: &str, values: Vec<f64>) -> Self {
        let labels = values.iter().map(|v| format!("{v}")).collect();
        Covariate {
            name: name.to_string(),
            values,
            labels,
        }
    }
}

/// Immutable columnar sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    covariates: Vec<Covariate>,
    cluster: Option<Vec<usize>>,
    dropped: usize,
}

fn check_binary(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|&x| x != 0.0 && x != 1.0) {
        Some(i) => Err(Error::Domain(format!(
            "{name} takes value {} at row {i}; must be 0 or 1",
            v[i]
        ))),
        None => Ok(()),
    }
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        d: Vec<f64>,
        z: Vec<f64>,
        covariates: Vec<Covariate>,
        cluster: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyData("dataset has no rows".into()));
        }
        if n < 2 {
            return Err(Error::EmptyData(format!("need at least 2 rows, got {n}")));
        }
        if d.len() != n || z.len() != n {
            return Err(Error::Config(format!(
                "column lengths differ: y={n}, d={}, z={}",
                d.len(),
                z.len()
            )));
        }
        for c in &covariates {
            if c.values.len() != n || c.labels.len() != n {
                return Err(Error::Config(format!(
                    "covariate '{}' has {} rows, expected {n}",
                    c.name,
                    c.values.len()
                )));
            }
        }
        if let Some(cl) = &cluster {
            if cl.len() != n {
                return Err(Error::Config(format!(
                    "cluster column has {} rows, expected {n}",
                    cl.len()
                )));
            }
        }
        check_binary("treatment", &d)?;
        check_binary("instrument", &z)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("outcome is not finite at row {i}")));
        }
        Ok(Dataset {
            y,
            d,
            z,
            covariates,
            cluster,
            dropped: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn cluster(&self) -> Option<&[usize]> {
        self.cluster.as_deref()
    }

    /// Rows removed by listwise deletion at ingestion.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Cell identity of row `i`: the tuple of normalized covariate labels.
    pub fn covariate_key(&self, i: usize) -> Vec<String> {
        self.covariates.iter().map(|c| c.labels[i].clone()).collect()
    }

    /// New dataset restricted to `rows` (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            y: pick(&self.y),
            d: pick(&self.d),
            z: pick(&self.z),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: pick(&c.values),
                    labels: rows.iter().map(|&i| c.labels[i].clone()).collect(),
                })
                .collect(),
            cluster: self
                .cluster
                .as_ref()
                .map(|cl| rows.iter().map(|&i| cl[i]).collect()),
            dropped: self.dropped,
        }
    }

    /// Writes `y,d,z,<covariates>[,cluster]` with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string(), "d".to_string(), "z".to_string()];
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        if self.cluster.is_some() {
            header.push("cluster".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![
                format!("{}", self.y[i]),
                format!("{}", self.d[i]),
                format!("{}", self.z[i]),
            ];
            row.extend(self.covariates.iter().map(|c| c.labels[i].clone()));
            if let Some(cl) = &self.cluster {
                row.push(cl[i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_missing(s: &str) -> bool {
    MISSING_TOKENS.contains(&s)
}

/// Strict binary parse: only "0", "1", "0.0", "1.0" are accepted.
fn parse_binary(s: &str) -> Option<f64> {
    match s {
        "0" | "0.0" => Some(0.0),
        "1" | "1.0" => Some(1.0),
        _ => None,
    }
}

enum Field {
    Value(f64),
    Missing,
}

/// Load a comma-delimited file with a header row, mapping columns per `map`.
///
/// Rows with a missing or unparseable mapped field are dropped and counted;
/// a treatment or instrument value other than 0/1 is a domain error.
pub fn load_dataset(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Dataset> {
    map.check_roles()?;
    let file = File::open(path.as_ref())?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(b',')
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in input")))
    };
    let iy = find(&map.outcome)?;
    let id = find(&map.treatment)?;
    let iz = find(&map.instrument)?;
    let ix: Vec<usize> = map
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;
    let icl = map.cluster.as_deref().map(find).transpose()?;

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut z = Vec::new();
    let mut xv: Vec<Vec<f64>> = vec![Vec::new(); ix.len()];
    let mut xl: Vec<Vec<String>> = vec![Vec::new(); ix.len()];
    let mut cluster_ids: Vec<usize> = Vec::new();
    let mut cluster_index: HashMap<String, usize> = HashMap::new();
    let mut raw = 0usize;
    let mut dropped = 0usize;

    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        raw += 1;
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let real = |i: usize| -> Field {
            let s = get(i);
            if is_missing(s) {
                return Field::Missing;
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Field::Value(v),
                _ => Field::Missing,
            }
        };
        let binary = |i: usize, col: &str| -> Result<Field> {
            let s = get(i);
            if is_missing(s) {
                return Ok(Field::Missing);
            }
            parse_binary(s).map(Field::Value).ok_or_else(|| {
                Error::Domain(format!(
                    "column '{col}' has value '{s}' at data row {}; must be 0 or 1",
                    line + 1
                ))
            })
        };

        let fy = real(iy);
        let fd = binary(id, &map.treatment)?;
        let fz = binary(iz, &map.instrument)?;
        let fx: Vec<Field> = ix.iter().map(|&i| real(i)).collect();
        let fcl = icl.map(|i| get(i).to_string());

        let (Field::Value(vy), Field::Value(vd), Field::Value(vz)) = (fy, fd, fz) else {
            dropped += 1;
            continue;
        };
        if fx.iter().any(|f| matches!(f, Field::Missing)) {
            dropped += 1;
            continue;
        }
        if let Some(c) = &fcl {
            if is_missing(c) {
                dropped += 1;
                continue;
            }
        }
        y.push(vy);
        d.push(vd);
        z.push(vz);
        for (k, f) in fx.into_iter().enumerate() {
            if let Field::Value(v) = f {
                xv[k].push(v);
                xl[k].push(get(ix[k]).to_string());
            }
        }
        if let Some(c) = fcl {
            let next = cluster_index.len();
            let id = *cluster_index.entry(c).or_insert(next);
            cluster_ids.push(id);
        }
    }

    if y.is_empty() {
        return Err(Error::EmptyData(format!(
            "no usable rows in {} ({raw} read, {dropped} dropped)",
            path.as_ref().display()
        )));
    }
    let covariates = map
        .covariates
        .iter()
        .zip(xv.into_iter().zip(xl))
        .map(|(name, (values, labels))| Covariate {
            name: name.clone(),
            values,
            labels,
        })
        .collect();
    let cluster = icl.map(|_| cluster_ids);
    let mut ds = Dataset::new(y, d, z, covariates, cluster)?;
    ds.dropped = dropped;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub messages: Vec<String>,
    pub warnings: Vec<String>,
    pub constant_covariates: Vec<String>,
}

/// Structural checks shared by every estimator; never errors.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut messages = Vec::new();
    let mut warnings = Vec::new();
    let has = |v: &[f64], target: f64| v.contains(&target);

    if !(has(ds.z(), 0.0) && has(ds.z(), 1.0)) {
        messages.push("instrument has no variation".to_string());
    }
    if !(has(ds.d(), 0.0) && has(ds.d(), 1.0)) {
        messages.push("treatment has no variation".to_string());
    }
    let constant_covariates: Vec<String> = ds
        .covariates()
        .iter()
        .filter(|c| c.values.iter().all(|&v| v == c.values[0]))
        .map(|c| c.name.clone())
        .collect();
    if !constant_covariates.is_empty() {
        warnings.push(format!(
            "constant covariate column(s): {}",
            constant_covariates.join(", ")
        ));
    }
    if ds.dropped() > 0 {
        warnings.push(format!("{} row(s) dropped at ingestion", ds.dropped()));
    }
    ValidationReport {
        passed: messages.is_empty(),
        messages,
        warnings,
        constant_covariates,
    }
}

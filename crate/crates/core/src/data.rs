//! Multi-batch functional data: containers, validation and long-format CSV.
//!
//! The CSV layout is one row per observation:
//!
//! ```text
//! batch_id,t,z,x1,...,xQ,u1,...,up[,w1,...,wr][,cluster_id]
//! ```
//!
//! `u` columns are per-batch scalar covariates and must be constant within a
//! batch. When no `u` column is present every batch gets the single
//! intercept covariate `u = [1]`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::family::ObservationFamily;

/// One subject's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalBatch {
    pub batch_id: String,
    pub times: Vec<f64>,
    pub responses: Vec<f64>,
    /// `N × Q`, row `i` is `x(t_i)`.
    pub covariates: DMatrix<f64>,
    /// Length `p`.
    pub scalar_covariates: DVector<f64>,
    /// `N × r` random-effect design, for clustered data.
    pub re_covariates: Option<DMatrix<f64>>,
    pub cluster_id: Option<String>,
}

impl FunctionalBatch {
    pub fn new(
        batch_id: impl Into<String>,
        times: Vec<f64>,
        responses: Vec<f64>,
        covariates: DMatrix<f64>,
        scalar_covariates: DVector<f64>,
    ) -> Result<Self> {
        let b = Self {
            batch_id: batch_id.into(),
            times,
            responses,
            covariates,
            scalar_covariates,
            re_covariates: None,
            cluster_id: None,
        };
        b.check()?;
        Ok(b)
    }

    pub fn with_random_effects(mut self, w: DMatrix<f64>, cluster_id: impl Into<String>) -> Result<Self> {
        self.re_covariates = Some(w);
        self.cluster_id = Some(cluster_id.into());
        self.check()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn q(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn p(&self) -> usize {
        self.scalar_covariates.len()
    }

    pub fn r(&self) -> Option<usize> {
        self.re_covariates.as_ref().map(|w| w.ncols())
    }

    fn check(&self) -> Result<()> {
        let n = self.times.len();
        let bad = |msg: String| Error::Consistency {
            batch: self.batch_id.clone(),
            msg,
        };
        if self.responses.len() != n {
            return Err(bad(format!("{} times but {} responses", n, self.responses.len())));
        }
        if self.covariates.nrows() != n {
            return Err(bad(format!("{} times but {} covariate rows", n, self.covariates.nrows())));
        }
        if let Some(w) = &self.re_covariates {
            if w.nrows() != n {
                return Err(bad(format!("{} times but {} random-effect rows", n, w.nrows())));
            }
        }
        let finite = self.times.iter().chain(&self.responses).all(|v| v.is_finite())
            && self.covariates.iter().all(|v| v.is_finite())
            && self.scalar_covariates.iter().all(|v| v.is_finite())
            && self.re_covariates.iter().flat_map(|w| w.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite value".into()));
        }
        if let Some(i) = self.times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation {
                batch: self.batch_id.clone(),
                row: i + 2,
                msg: format!("times must be strictly increasing ({} then {})", self.times[i], self.times[i + 1]),
            });
        }
        Ok(())
    }

    /// Checks every response against the family's support. `row` in the
    /// error is the 1-based position within the batch.
    pub fn validate_family(&self, family: &ObservationFamily) -> Result<()> {
        for (i, &z) in self.responses.iter().enumerate() {
            family.check_response(z).map_err(|msg| Error::Validation {
                batch: self.batch_id.clone(),
                row: i + 1,
                msg,
            })?;
        }
        Ok(())
    }

    /// The observations at `idx` (in the given order, which must keep times
    /// increasing).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let b = Self {
            batch_id: self.batch_id.clone(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            responses: idx.iter().map(|&i| self.responses[i]).collect(),
            covariates: self.covariates.select_rows(idx),
            scalar_covariates: self.scalar_covariates.clone(),
            re_covariates: self.re_covariates.as_ref().map(|w| w.select_rows(idx)),
            cluster_id: self.cluster_id.clone(),
        };
        b.check()?;
        Ok(b)
    }
}

/// A collection of batches sharing `Q`, `p` (and `r`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub batches: Vec<FunctionalBatch>,
    pub family_tag: String,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(batches: Vec<FunctionalBatch>, family_tag: impl Into<String>, covariate_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            batches,
            family_tag: family_tag.into(),
            covariate_names,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Dataset with default covariate names `x1..xQ`.
    pub fn from_batches(batches: Vec<FunctionalBatch>, family: &ObservationFamily) -> Result<Self> {
        let q = batches.first().map_or(0, |b| b.q());
        let names = (1..=q).map(|i| format!("x{i}")).collect();
        let ds = Self::new(batches, family.tag(), names)?;
        ds.validate_family(family)?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let Some(first) = self.batches.first() else {
            return Ok(());
        };
        let (q, p, r) = (first.q(), first.p(), first.r());
        let mut seen = std::collections::HashSet::new();
        for b in &self.batches {
            if b.q() != q || b.p() != p || b.r() != r {
                return Err(Error::Consistency {
                    batch: b.batch_id.clone(),
                    msg: format!("dimensions (Q={}, p={}) differ from the first batch (Q={q}, p={p})", b.q(), b.p()),
                });
            }
            if !seen.insert(b.batch_id.as_str()) {
                return Err(Error::Consistency {
                    batch: b.batch_id.clone(),
                    msg: "duplicate batch id".into(),
                });
            }
        }
        if !self.covariate_names.is_empty() && self.covariate_names.len() != q {
            return Err(Error::Schema(format!("{} covariate names for Q={q}", self.covariate_names.len())));
        }
        Ok(())
    }

    pub fn validate_family(&self, family: &ObservationFamily) -> Result<()> {
        self.batches.iter().try_for_each(|b| b.validate_family(family))
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn q(&self) -> usize {
        self.batches.first().map_or(0, |b| b.q())
    }

    pub fn p(&self) -> usize {
        self.batches.first().map_or(0, |b| b.p())
    }

    pub fn r(&self) -> Option<usize> {
        self.batches.first().and_then(|b| b.r())
    }

    pub fn n_obs(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }

    pub fn all_times(&self) -> Vec<f64> {
        self.batches.iter().flat_map(|b| b.times.iter().copied()).collect()
    }
}

/// Column naming for CSV ingestion.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub batch_col: String,
    pub time_col: String,
    pub response_col: String,
    pub covariate_prefix: String,
    pub scalar_prefix: String,
    pub re_prefix: String,
    pub cluster_col: String,
    /// Responses are range-checked against this family when given.
    pub family: Option<ObservationFamily>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            batch_col: "batch_id".into(),
            time_col: "t".into(),
            response_col: "z".into(),
            covariate_prefix: "x".into(),
            scalar_prefix: "u".into(),
            re_prefix: "w".into(),
            cluster_col: "cluster_id".into(),
            family: None,
        }
    }
}

impl CsvSchema {
    pub fn for_family(family: ObservationFamily) -> Self {
        Self {
            family: Some(family),
            ..Self::default()
        }
    }
}

/// Indices of the columns `prefix1, prefix2, ...` (contiguous from 1).
fn numbered_columns(headers: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    for k in 1.. {
        let name = format!("{prefix}{k}");
        match headers.iter().position(|h| h == name) {
            Some(i) => out.push(i),
            None => break,
        }
    }
    out
}

/// Orders ids like `b2` before `b10`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for (x, y) in ca.iter().zip(&cb) {
        let o = match (x.0, y.0) {
            (true, true) => {
                let (tx, ty) = (x.1.trim_start_matches('0'), y.1.trim_start_matches('0'));
                tx.len().cmp(&ty.len()).then_with(|| tx.cmp(ty))
            }
            _ => x.1.cmp(y.1),
        };
        if o != Ordering::Equal {
            return o;
        }
    }
    ca.len().cmp(&cb.len()).then_with(|| a.cmp(b))
}

fn parse_num(field: &str, line: usize, col: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column {col}: cannot parse {field:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("column {col}: non-finite value {field:?}"),
        });
    }
    Ok(v)
}

struct Row {
    line: usize,
    t: f64,
    z: f64,
    x: Vec<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
    cluster: Option<String>,
}

/// Reads a long-format CSV. Batches are ordered by id (natural order) and
/// rows by time within a batch, so the result does not depend on the row
/// order of the file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let ib = col(&schema.batch_col)?;
    let it = col(&schema.time_col)?;
    let iz = col(&schema.response_col)?;
    let ix = numbered_columns(&headers, &schema.covariate_prefix);
    if ix.is_empty() {
        return Err(Error::Schema(format!("missing column {:?}", format!("{}1", schema.covariate_prefix))));
    }
    let iu = numbered_columns(&headers, &schema.scalar_prefix);
    let iw = numbered_columns(&headers, &schema.re_prefix);
    let ic = headers.iter().position(|h| h == schema.cluster_col);
    if !iw.is_empty() && ic.is_none() {
        return Err(Error::Schema(format!(
            "random-effect columns need a {:?} column",
            schema.cluster_col
        )));
    }

    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let nums = |cols: &[usize], prefix: &str| -> Result<Vec<f64>> {
            cols.iter()
                .enumerate()
                .map(|(j, &i)| parse_num(get(i), line, &format!("{prefix}{}", j + 1)))
                .collect()
        };
        let row = Row {
            line,
            t: parse_num(get(it), line, &schema.time_col)?,
            z: parse_num(get(iz), line, &schema.response_col)?,
            x: nums(&ix, &schema.covariate_prefix)?,
            u: nums(&iu, &schema.scalar_prefix)?,
            w: nums(&iw, &schema.re_prefix)?,
            cluster: ic.map(|i| get(i).to_string()),
        };
        groups.entry(get(ib).to_string()).or_default().push(row);
    }

    let mut ids: Vec<String> = groups.keys().cloned().collect();
    ids.sort_by(|a, b| natural_cmp(a, b));
    let q = ix.len();
    let mut batches = Vec::with_capacity(ids.len());
    for id in ids {
        let mut rows = groups.remove(&id).expect("key present");
        rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.line.cmp(&b.line)));
        let first = &rows[0];
        for r in &rows[1..] {
            if r.u != first.u {
                return Err(Error::Consistency {
                    batch: id.clone(),
                    msg: format!(
                        "scalar covariates differ within the batch (line {} has {:?}, line {} has {:?})",
                        first.line, first.u, r.line, r.u
                    ),
                });
            }
            if r.cluster != first.cluster {
                return Err(Error::Consistency {
                    batch: id.clone(),
                    msg: format!("cluster id changes within the batch at line {}", r.line),
                });
            }
        }
        for pair in rows.windows(2) {
            if pair[0].t == pair[1].t {
                return Err(Error::Validation {
                    batch: id.clone(),
                    row: pair[1].line,
                    msg: format!("duplicate time {} (also on line {})", pair[1].t, pair[0].line),
                });
            }
        }
        if let Some(fam) = &schema.family {
            for r in &rows {
                fam.check_response(r.z).map_err(|msg| Error::Validation {
                    batch: id.clone(),
                    row: r.line,
                    msg,
                })?;
            }
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, q, |i, j| rows[i].x[j]);
        let u = if iu.is_empty() {
            DVector::from_element(1, 1.0)
        } else {
            DVector::from_vec(first.u.clone())
        };
        let mut b = FunctionalBatch::new(
            id,
            rows.iter().map(|r| r.t).collect(),
            rows.iter().map(|r| r.z).collect(),
            x,
            u,
        )?;
        if !iw.is_empty() {
            let w = DMatrix::from_fn(n, iw.len(), |i, j| rows[i].w[j]);
            b = b.with_random_effects(w, first.cluster.clone().unwrap_or_default())?;
        } else if let Some(c) = &first.cluster {
            b.cluster_id = Some(c.clone());
        }
        batches.push(b);
    }
    let tag = schema.family.as_ref().map_or_else(String::new, |f| f.tag().to_string());
    Dataset::new(batches, tag, (1..=q).map(|i| format!("{}{i}", schema.covariate_prefix)).collect())
}

/// Writes the dataset in the long format read by [`load_csv`]. Numbers use
/// the shortest representation that parses back to the same `f64`.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (q, p, r) = (ds.q(), ds.p(), ds.r().unwrap_or(0));
    let clustered = ds.batches.iter().any(|b| b.cluster_id.is_some());
    let mut header = vec!["batch_id".to_string(), "t".into(), "z".into()];
    header.extend((1..=q).map(|i| format!("x{i}")));
    header.extend((1..=p).map(|i| format!("u{i}")));
    header.extend((1..=r).map(|i| format!("w{i}")));
    if clustered {
        header.push("cluster_id".into());
    }
    w.write_record(&header).map_err(csv_io)?;
    for b in &ds.batches {
        for i in 0..b.len() {
            let mut rec = vec![b.batch_id.clone(), b.times[i].to_string(), b.responses[i].to_string()];
            rec.extend((0..q).map(|j| b.covariates[(i, j)].to_string()));
            rec.extend(b.scalar_covariates.iter().map(|v| v.to_string()));
            if let Some(wm) = &b.re_covariates {
                rec.extend((0..r).map(|j| wm[(i, j)].to_string()));
            }
            if clustered {
                rec.push(b.cluster_id.clone().unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_csv(ds, std::io::BufWriter::new(f))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

//! File formats: the binary array container, covariate CSV and JSON documents.
//!
//! Array files start with the magic bytes `MWAY`, then a little-endian `u32`
//! version (1), a `u32` order `K`, `K` little-endian `u64` dimensions and the
//! entries as little-endian IEEE-754 doubles, first index fastest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cp_als::CpFit;
use crate::error::{invalid, Error, Result};
use crate::simulation::SimTruth;
use crate::supcp::{Centering, FitConfig, FitResult, InitMethod, SupCpParams};
use crate::tensor::{LoadingSet, Matrix, MultiwayArray};

pub const TENSOR_MAGIC: &[u8; 4] = b"MWAY";
pub const TENSOR_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

pub fn encode_tensor(x: &MultiwayArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * x.order() + 8 * x.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(x.order() as u32).to_le_bytes());
    for &d in x.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in x.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<MultiwayArray> {
    let take = |offset: usize, len: usize, what: &str| -> Result<&[u8]> {
        match bytes.get(offset..offset + len) {
            Some(b) => Ok(b),
            None => format_err(bytes.len(), format!("file ends inside the {what}")),
        }
    };
    if take(0, 4, "magic")? != TENSOR_MAGIC {
        return format_err(0, "bad magic (expected \"MWAY\")");
    }
    let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().expect("4 bytes"));
    if version != TENSOR_VERSION {
        return format_err(4, format!("unsupported version {version}"));
    }
    let order = u32::from_le_bytes(take(8, 4, "order")?.try_into().expect("4 bytes")) as usize;
    if order == 0 {
        return format_err(8, "array order is zero");
    }
    let mut dims = Vec::with_capacity(order.min(64));
    let mut len: usize = 1;
    for k in 0..order {
        let offset = 12 + 8 * k;
        let d = u64::from_le_bytes(take(offset, 8, "dimension list")?.try_into().expect("8 bytes"));
        let d = match usize::try_from(d) {
            Ok(d) if d > 0 => d,
            Ok(_) => return format_err(offset, format!("dimension {k} is zero")),
            Err(_) => return format_err(offset, format!("dimension {k} ({d}) is too large")),
        };
        len = match len.checked_mul(d).filter(|l| l.checked_mul(8).is_some()) {
            Some(l) => l,
            None => return format_err(offset, "dimension product overflows"),
        };
        dims.push(d);
    }
    let header = 12 + 8 * order;
    let expected = header + 8 * len;
    if bytes.len() < expected {
        return format_err(
            bytes.len(),
            format!("payload truncated: {} of {} value bytes present", bytes.len() - header, 8 * len),
        );
    }
    if bytes.len() > expected {
        return format_err(expected, format!("{} unexpected trailing bytes", bytes.len() - expected));
    }
    let values = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    MultiwayArray::new(dims, values)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<MultiwayArray> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, x: &MultiwayArray) -> Result<()> {
    write_atomic(path, &encode_tensor(x))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses a rectangular numeric CSV. A first row containing any non-numeric
/// cell is taken as a header and skipped.
pub fn parse_matrix_csv(reader: impl Read) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => {
                width = Some(record.len());
                continue;
            }
            Err(_) => {
                let (col, cell) = record
                    .iter()
                    .enumerate()
                    .find(|(_, c)| c.parse::<f64>().is_err())
                    .expect("some cell failed");
                return Err(Error::Parse {
                    line,
                    message: format!("column {}: {cell:?} is not a number", col + 1),
                });
            }
        };
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("column {}: non-finite value", pos + 1),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data rows".into() });
    }
    let cols = rows[0].len();
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_matrix_csv(fs::File::open(path)?)
}

/// CSV text with one matrix row per line; values use the shortest
/// representation that parses back to the same double.
pub fn format_matrix_csv(m: &Matrix, header: Option<&[&str]>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(h) = header {
        if h.len() != m.ncols() {
            return invalid("header length does not match column count");
        }
        w.write_record(h).map_err(csv_io)?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Matrix, header: Option<&[&str]>) -> Result<()> {
    write_atomic(path, format_matrix_csv(m, header)?.as_bytes())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter(format!("{what} must be {nrows} × {ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaFDoc {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringDoc {
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub seeds: Vec<u64>,
    /// Seed of the start that was kept.
    pub chosen_seed: u64,
    pub init_method: InitMethod,
    pub anneal_iters: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub n_iters: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

/// A fitted model as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: u32,
    /// Feature dimensions `d_1, …, d_K` (without the sample mode).
    pub dims: Vec<usize>,
    pub rank: usize,
    pub n_covariates: usize,
    /// One `d_k × R` matrix per mode, as row arrays.
    pub loadings: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    pub sigma_f: SigmaFDoc,
    pub sigma_e2: f64,
    pub diag_constraint: bool,
    pub centering: CenteringDoc,
    pub fit: Option<FitMetadata>,
}

impl ModelDocument {
    pub fn from_params(params: &SupCpParams, centering: &Centering) -> Self {
        let sigma_f = if params.diag_constraint {
            SigmaFDoc::Diagonal(params.sigma_f.diagonal().iter().copied().collect())
        } else {
            SigmaFDoc::Full(to_rows(&params.sigma_f))
        };
        Self {
            schema_version: SCHEMA_VERSION,
            dims: params.loadings.dims(),
            rank: params.rank(),
            n_covariates: params.n_covariates(),
            loadings: params.loadings.factors().iter().map(to_rows).collect(),
            b: to_rows(&params.b),
            sigma_f,
            sigma_e2: params.sigma_e2,
            diag_constraint: params.diag_constraint,
            centering: CenteringDoc {
                x_mean: centering.x_mean.clone(),
                y_mean: centering.y_mean.clone(),
            },
            fit: None,
        }
    }

    pub fn from_fit(fit: &FitResult, config: &FitConfig, seeds: &[u64]) -> Self {
        let mut doc = Self::from_params(&fit.params, &fit.centering);
        doc.fit = Some(FitMetadata {
            seeds: seeds.to_vec(),
            chosen_seed: fit.seed,
            init_method: config.init_method,
            anneal_iters: config.anneal_iters,
            max_iters: config.max_iters,
            tol: config.tol,
            n_iters: fit.n_iters,
            converged: fit.converged,
            loglik_trace: fit.loglik_trace.clone(),
            final_loglik: fit.final_loglik(),
            diagnostics: fit.diagnostics.clone(),
        });
        doc
    }

    pub fn params(&self) -> Result<SupCpParams> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported model schema version {}",
                self.schema_version
            )));
        }
        if self.loadings.len() != self.dims.len() {
            return Err(Error::InvalidParameter("one loading matrix per mode is required".into()));
        }
        let r = self.rank;
        let factors = self
            .loadings
            .iter()
            .zip(&self.dims)
            .enumerate()
            .map(|(k, (rows, &d))| from_rows(rows, d, r, &format!("loading matrix {k}")))
            .collect::<Result<Vec<_>>>()?;
        let b = from_rows(&self.b, self.n_covariates, r, "B")?;
        let sigma_f = match &self.sigma_f {
            SigmaFDoc::Diagonal(d) if d.len() == r => {
                Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))
            }
            SigmaFDoc::Diagonal(_) => {
                return Err(Error::InvalidParameter(format!("Σ_f diagonal must have {r} entries")))
            }
            SigmaFDoc::Full(rows) => from_rows(rows, r, r, "Σ_f")?,
        };
        let params = SupCpParams {
            loadings: LoadingSet::new(factors)?,
            b,
            sigma_f,
            sigma_e2: self.sigma_e2,
            diag_constraint: self.diag_constraint,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn centering(&self) -> Result<Centering> {
        let d: usize = self.dims.iter().product();
        if self.centering.x_mean.len() != d || self.centering.y_mean.len() != self.n_covariates {
            return Err(Error::InvalidParameter("centering means have the wrong length".into()));
        }
        Ok(Centering {
            x_mean: self.centering.x_mean.clone(),
            y_mean: self.centering.y_mean.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// A least-squares CP fit as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpDocument {
    pub schema_version: u32,
    pub dims: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
    /// Sample weights `n × R`, as row arrays.
    pub u: Vec<Vec<f64>>,
    pub loadings: Vec<Vec<Vec<f64>>>,
    pub rss: f64,
    pub rss_trace: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
}

impl CpDocument {
    pub fn from_fit(fit: &CpFit, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dims: fit.loadings.dims(),
            rank: fit.loadings.rank(),
            seed,
            u: to_rows(&fit.u),
            loadings: fit.loadings.factors().iter().map(to_rows).collect(),
            rss: fit.rss,
            rss_trace: fit.rss_trace.clone(),
            n_iters: fit.n_iters,
            converged: fit.converged,
        }
    }
}

/// Ground truth of a simulated dataset as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub scheme: String,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub rank: usize,
    pub u: Vec<Vec<f64>>,
    pub loadings: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    pub sigma_f: Vec<Vec<f64>>,
    pub sigma_e2: f64,
}

impl TruthDocument {
    pub fn new(truth: &SimTruth, scheme: &str, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scheme: scheme.to_string(),
            seed,
            dims: truth.loadings.dims(),
            rank: truth.loadings.rank(),
            u: to_rows(&truth.u),
            loadings: truth.loadings.factors().iter().map(to_rows).collect(),
            b: to_rows(&truth.b),
            sigma_f: to_rows(&truth.sigma_f),
            sigma_e2: truth.sigma_e2,
        }
    }
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

//! Result files, manifests and exit-code mapping.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use saber::SaberError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Saber(#[from] SaberError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 configuration or input, 3 numeric failure, 4 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Saber(e) => match e {
                SaberError::DimensionMismatch(_)
                | SaberError::InvalidArgument(_)
                | SaberError::UnknownField(_)
                | SaberError::Config(_) => 2,
                SaberError::NonFinite(_)
                | SaberError::Singular(_)
                | SaberError::Divergence { .. }
                | SaberError::UndefinedDensity(_) => 3,
                SaberError::UnsupportedVersion { .. }
                | SaberError::Format(_)
                | SaberError::Io(_)
                | SaberError::Json(_)
                | SaberError::Csv(_) => 4,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a JSON config, with every field optional.
pub fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = serde_json::to_string(cfg).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes serializable rows as CSV with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Saber(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Saber(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes a matrix with the given column names.
pub fn write_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Saber(e.into()))?;
    w.write_record(header).map_err(|e| CliError::Saber(e.into()))?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))
            .map_err(|e| CliError::Saber(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn input_header(d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("x_{k}")).collect()
}

/// Reads the `x_1..x_d` columns of a CSV; other known columns are ignored.
pub fn read_inputs(path: &Path) -> CliResult<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Saber(e.into()))?;
    let header = r.headers().map_err(|e| CliError::Saber(e.into()))?.clone();
    let mut cols = Vec::new();
    for (i, name) in header.iter().enumerate() {
        match name {
            n if n.starts_with("x_") => {
                let k: usize = n[2..]
                    .parse()
                    .map_err(|_| SaberError::UnknownField(n.to_string()))?;
                if k != cols.len() + 1 {
                    return Err(SaberError::Format(format!("input column {n} out of order")).into());
                }
                cols.push(i);
            }
            "y" | "f" | "v" | "p" => {}
            other => return Err(SaberError::UnknownField(other.to_string()).into()),
        }
    }
    if cols.is_empty() {
        return Err(SaberError::Format("no input columns x_1..x_d".into()).into());
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Saber(e.into()))?;
        for &c in &cols {
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| SaberError::Format(format!("row {}: '{field}' is not a number", rows + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.len(), &data))
}

#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub experiment: &'a str,
    pub version: &'a str,
    pub config: &'a C,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

pub fn write_manifest<C: Serialize>(dir: &Path, manifest: &Manifest<'_, C>) -> CliResult<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

//! Training sets and their CSV representation.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaberError};

/// Inputs, noisy labels and optional ground truth sampled at the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Noise-free target values, when known.
    pub f: Option<DVector<f64>>,
    /// Local noise variance `v(xᵢ)`, when known.
    pub noise_var: Option<DVector<f64>>,
    /// Input density `p(xᵢ)`, when known.
    pub density: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let ds = Dataset {
            x,
            y,
            f: None,
            noise_var: None,
            density: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_truth(mut self, f: DVector<f64>) -> Result<Self> {
        self.f = Some(f);
        self.validate()?;
        Ok(self)
    }

    pub fn with_noise_var(mut self, v: DVector<f64>) -> Result<Self> {
        self.noise_var = Some(v);
        self.validate()?;
        Ok(self)
    }

    pub fn with_density(mut self, p: DVector<f64>) -> Result<Self> {
        self.density = Some(p);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.y.len() != n {
            return Err(SaberError::dims(format!(
                "{} input rows but {} labels",
                n,
                self.y.len()
            )));
        }
        for (name, col) in [("f", &self.f), ("v", &self.noise_var), ("p", &self.density)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(SaberError::dims(format!(
                        "column {name} has {} entries, expected {n}",
                        c.len()
                    )));
                }
            }
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(SaberError::non_finite("dataset"));
        }
        if let Some(v) = &self.noise_var {
            if v.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(SaberError::invalid("noise variance must be positive and finite"));
            }
        }
        Ok(())
    }

    /// Noise variance samples, or all ones for the homoscedastic model.
    pub fn noise_var_or_ones(&self) -> DVector<f64> {
        self.noise_var
            .clone()
            .unwrap_or_else(|| DVector::from_element(self.len(), 1.0))
    }

    /// Copy with the noise variance dropped (homoscedastic treatment).
    pub fn homoscedastic(&self) -> Self {
        Dataset {
            noise_var: None,
            ..self.clone()
        }
    }

    /// Rows at the given indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &DVector<f64>| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
        Dataset {
            x: self.x.select_rows(idx),
            y: pick(&self.y),
            f: self.f.as_ref().map(pick),
            noise_var: self.noise_var.as_ref().map(pick),
            density: self.density.as_ref().map(pick),
        }
    }

    /// All rows except `i`.
    pub fn without(&self, i: usize) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&k| k != i).collect();
        self.subset(&idx)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        header.push("y".into());
        if self.f.is_some() {
            header.push("f".into());
        }
        if self.noise_var.is_some() {
            header.push("v".into());
        }
        if self.density.is_some() {
            header.push("p".into());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = (0..d).map(|k| format!("{:e}", self.x[(i, k)])).collect();
            rec.push(format!("{:e}", self.y[i]));
            for col in [&self.f, &self.noise_var, &self.density].into_iter().flatten() {
                rec.push(format!("{:e}", col[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with header `x_1,…,x_d,y[,f][,v][,p]`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let d = header.iter().take_while(|h| h.starts_with("x_")).count();
        if d == 0 {
            return Err(SaberError::Format("header must start with x_1".into()));
        }
        for (k, h) in header.iter().take(d).enumerate() {
            if *h != format!("x_{}", k + 1) {
                return Err(SaberError::Format(format!("unexpected input column `{h}`")));
            }
        }
        let rest = &header[d..];
        if rest.first().map(String::as_str) != Some("y") {
            return Err(SaberError::Format("missing label column `y`".into()));
        }
        let mut extra = Vec::new();
        for h in &rest[1..] {
            match h.as_str() {
                "f" | "v" | "p" if !extra.contains(h) => extra.push(h.clone()),
                other => return Err(SaberError::UnknownField(other.to_string())),
            }
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); extra.len()];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(SaberError::Format(format!(
                    "row {} has {} fields, expected {}",
                    line + 2,
                    rec.len(),
                    header.len()
                )));
            }
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| SaberError::Format(format!("row {}: {e}", line + 2)))?;
            xs.extend_from_slice(&vals[..d]);
            ys.push(vals[d]);
            for (c, v) in cols.iter_mut().zip(&vals[d + 1..]) {
                c.push(*v);
            }
        }
        let n = ys.len();
        let mut ds = Dataset {
            x: DMatrix::from_row_slice(n, d, &xs),
            y: DVector::from_vec(ys),
            f: None,
            noise_var: None,
            density: None,
        };
        for (name, c) in extra.iter().zip(cols) {
            let v = Some(DVector::from_vec(c));
            match name.as_str() {
                "f" => ds.f = v,
                "v" => ds.noise_var = v,
                _ => ds.density = v,
            }
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the CSV plus a `<name>.json` sidecar describing its origin.
    pub fn write_with_sidecar(&self, path: &Path, meta: &DatasetMeta) -> Result<()> {
        self.write_csv(path)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }
}

/// Provenance stored next to a dataset CSV.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.5, -1.0, 1e-3, 2.0]);
        let y = DVector::from_vec(vec![0.1, -0.2, 1.0 / 3.0]);
        Dataset::new(x, y)
            .unwrap()
            .with_truth(DVector::from_vec(vec![0.0, 0.0, 0.3]))
            .unwrap()
            .with_noise_var(DVector::from_vec(vec![0.01, 0.02, 0.03]))
            .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = sample();
        ds.write_with_sidecar(
            &path,
            &DatasetMeta {
                generator: "test".into(),
                seed: 7,
                config: serde_json::json!({}),
            },
        )
        .unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back, ds);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x_1,y,w\n1,2,3\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path), Err(SaberError::UnknownField(_))));
        std::fs::write(&path, "a,y\n1,2\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path), Err(SaberError::Format(_))));
    }

    #[test]
    fn subset_and_without() {
        let ds = sample();
        let s = ds.without(1);
        assert_eq!(s.len(), 2);
        assert_eq!(s.y[1], ds.y[2]);
        assert_eq!(s.noise_var.unwrap()[0], 0.01);
    }

    #[test]
    fn label_count_must_match() {
        let x = DMatrix::zeros(3, 1);
        let y = DVector::zeros(2);
        assert!(matches!(Dataset::new(x, y), Err(SaberError::DimensionMismatch(_))));
    }
}

//! Local function complexity from a fitted bandwidth field, input density
//! models, and density proposals for active sampling.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SaberError};
use crate::lls::ScalarField;
use crate::saber::{sigma_saber, SaberModel, SigmaField};

/// Axis-aligned box split into `counts[k]` intervals per coordinate.
///
/// Nodes are the `counts[k]` equally spaced points including both ends;
/// cells are the `counts[k]` equal intervals, represented by their centers.
/// Coordinate 0 varies fastest in both orderings.
#[derive(Clone, Debug, PartialEq)]
pub struct RectGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl RectGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != counts.len() {
            return Err(SaberError::dims("grid bounds and counts differ in length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(SaberError::invalid("grid needs finite bounds with lower < upper"));
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(SaberError::invalid("grid needs at least two points per coordinate"));
        }
        Ok(RectGrid { lower, upper, counts })
    }

    pub fn unit_cube(d: usize, per_dim: usize) -> Result<Self> {
        RectGrid::new(vec![0.0; d], vec![1.0; d], vec![per_dim; d])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.counts
            .iter()
            .map(|&c| {
                let i = flat % c;
                flat /= c;
                i
            })
            .collect()
    }

    fn cell_width(&self, k: usize) -> f64 {
        (self.upper[k] - self.lower[k]) / self.counts[k] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.cell_width(k)).product()
    }

    pub fn nodes(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(self.len(), d, |i, k| {
            let idx = self.multi_index(i)[k];
            self.lower[k] + (self.upper[k] - self.lower[k]) * idx as f64 / (self.counts[k] - 1) as f64
        })
    }

    pub fn cell_centers(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(self.len(), d, |i, k| {
            let idx = self.multi_index(i)[k];
            self.lower[k] + (idx as f64 + 0.5) * self.cell_width(k)
        })
    }

    /// Trapezoid rule over node values.
    pub fn trapezoid(&self, values: &DVector<f64>) -> Result<f64> {
        if values.len() != self.len() {
            return Err(SaberError::dims("one value per grid node is required"));
        }
        let spacing: f64 = (0..self.dim())
            .map(|k| (self.upper[k] - self.lower[k]) / (self.counts[k] - 1) as f64)
            .product();
        let mut total = 0.0;
        for (i, v) in values.iter().enumerate() {
            let w: f64 = self
                .multi_index(i)
                .iter()
                .zip(&self.counts)
                .map(|(&j, &c)| if j == 0 || j == c - 1 { 0.5 } else { 1.0 })
                .product();
            total += w * v;
        }
        Ok(total * spacing)
    }

    /// Midpoint rule over cell values.
    pub fn cell_integral(&self, values: &DVector<f64>) -> Result<f64> {
        if values.len() != self.len() {
            return Err(SaberError::dims("one value per grid cell is required"));
        }
        Ok(values.sum() * self.cell_volume())
    }

    /// Index of the cell containing `x`, if inside the box.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        let mut stride = 1;
        for k in 0..self.dim() {
            if !(self.lower[k]..=self.upper[k]).contains(&x[k]) {
                return None;
            }
            let j = (((x[k] - self.lower[k]) / self.cell_width(k)) as usize).min(self.counts[k] - 1);
            flat += j * stride;
            stride *= self.counts[k];
        }
        Some(flat)
    }
}

/// Input density model.
#[derive(Clone)]
pub enum DensityKind {
    /// Analytic density.
    Known(ScalarField),
    /// Product-Gaussian kernel density estimate.
    Kde { points: DMatrix<f64>, bandwidths: Vec<f64> },
    /// Piecewise constant over the cells of a grid, zero outside.
    Cells { grid: RectGrid, values: DVector<f64> },
}

#[derive(Clone)]
pub struct DensityModel {
    pub kind: DensityKind,
    pub dim: usize,
    /// Multiplier applied on evaluation, set by normalization.
    pub scale: f64,
}

impl fmt::Debug for DensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            DensityKind::Known(_) => "known",
            DensityKind::Kde { .. } => "kde",
            DensityKind::Cells { .. } => "cells",
        };
        f.debug_struct("DensityModel")
            .field("kind", &kind)
            .field("dim", &self.dim)
            .field("scale", &self.scale)
            .finish()
    }
}

impl DensityModel {
    pub fn known(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        DensityModel {
            kind: DensityKind::Known(Arc::new(f)),
            dim,
            scale: 1.0,
        }
    }

    /// Uniform density on a box.
    pub fn uniform(grid: &RectGrid) -> Self {
        let (lo, hi) = (grid.lower.clone(), grid.upper.clone());
        let vol: f64 = lo.iter().zip(&hi).map(|(l, u)| u - l).product();
        DensityModel::known(grid.dim(), move |x| {
            let inside = x.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, u))| (*l..=*u).contains(v));
            if inside {
                1.0 / vol
            } else {
                0.0
            }
        })
    }

    /// Piecewise-constant density, normalized over the grid cells.
    pub fn cells(grid: RectGrid, values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SaberError::invalid("cell densities must be finite and non-negative"));
        }
        let total = grid.cell_integral(&values)?;
        if !(total > 0.0) {
            return Err(SaberError::invalid("cell densities have no mass"));
        }
        Ok(DensityModel {
            dim: grid.dim(),
            kind: DensityKind::Cells { grid, values },
            scale: 1.0 / total,
        })
    }

    /// Evaluates the density row-wise.
    pub fn evaluate(&self, xq: &DMatrix<f64>) -> Result<DVector<f64>> {
        if xq.ncols() != self.dim {
            return Err(SaberError::dims(format!(
                "query has {} columns, density is {}-dimensional",
                xq.ncols(),
                self.dim
            )));
        }
        let raw = match &self.kind {
            DensityKind::Known(f) => DVector::from_fn(xq.nrows(), |i, _| {
                let row: Vec<f64> = xq.row(i).iter().copied().collect();
                f(&row)
            }),
            DensityKind::Kde { points, bandwidths } => {
                let norm: f64 = bandwidths.iter().map(|h| h * (2.0 * PI).sqrt()).product::<f64>() * points.nrows() as f64;
                DVector::from_fn(xq.nrows(), |i, _| {
                    let s: f64 = (0..points.nrows())
                        .map(|r| {
                            let e: f64 = (0..self.dim)
                                .map(|k| {
                                    let u = (xq[(i, k)] - points[(r, k)]) / bandwidths[k];
                                    u * u
                                })
                                .sum();
                            (-0.5 * e).exp()
                        })
                        .sum();
                    s / norm
                })
            }
            DensityKind::Cells { grid, values } => DVector::from_fn(xq.nrows(), |i, _| {
                let row: Vec<f64> = xq.row(i).iter().copied().collect();
                grid.cell_of(&row).map_or(0.0, |c| values[c])
            }),
        };
        Ok(raw * self.scale)
    }

    /// Rescales so the density integrates to one over the grid nodes.
    pub fn normalized_on(mut self, grid: &RectGrid) -> Result<Self> {
        if grid.dim() != self.dim {
            return Err(SaberError::dims("grid and density differ in dimension"));
        }
        self.scale = 1.0;
        let total = grid.trapezoid(&self.evaluate(&grid.nodes())?)?;
        if !(total > 0.0) || !total.is_finite() {
            return Err(SaberError::invalid("density has no mass on the grid"));
        }
        self.scale = 1.0 / total;
        Ok(self)
    }
}

/// Product-Gaussian KDE with Silverman's rule per coordinate.
pub fn estimate_density(x: &DMatrix<f64>) -> Result<DensityModel> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(SaberError::invalid("density estimation needs samples"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SaberError::non_finite("density samples"));
    }
    let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    let bandwidths = (0..d)
        .map(|k| {
            let col = x.column(k);
            let mean = col.mean();
            let sd = if n > 1 {
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let range = col.max() - col.min();
            let floor = if range > 0.0 { 1e-6 * range } else { 1e-6 };
            (sd * factor).max(floor)
        })
        .collect();
    Ok(DensityModel {
        kind: DensityKind::Kde {
            points: x.clone(),
            bandwidths,
        },
        dim: d,
        scale: 1.0,
    })
}

/// `(s^d det Σ)^{−1/d} p^{−1/(4+d)}` from a bandwidth field and density
/// values; `None` where the density vanishes.
pub fn lfc_from_field(field: &SigmaField, density: &DVector<f64>, d: usize) -> Result<Vec<Option<f64>>> {
    if field.factors.len() != density.len() {
        return Err(SaberError::dims("bandwidth field and density differ in length"));
    }
    let log_det = field.shared.log_det(d)?;
    let df = d as f64;
    Ok(field
        .factors
        .iter()
        .zip(density.iter())
        .map(|(s, p)| (*p > 0.0).then(|| (-(df * s.ln() + log_det) / df).exp() * p.powf(-1.0 / (4.0 + df))))
        .collect())
}

/// Local function complexity of a trained model at query points.
pub fn lfc_saber(xq: &DMatrix<f64>, model: &SaberModel, density: &DensityModel) -> Result<Vec<Option<f64>>> {
    let field = sigma_saber(xq, model)?;
    lfc_from_field(&field, &density.evaluate(xq)?, xq.ncols())
}

/// Complexity for a scalar bandwidth field `σ(x)` in `d` dimensions.
pub fn lfc_isotropic(sigma: &DVector<f64>, density: &DVector<f64>, d: usize) -> Result<Vec<Option<f64>>> {
    if sigma.len() != density.len() {
        return Err(SaberError::dims("bandwidth field and density differ in length"));
    }
    let df = d as f64;
    Ok(sigma
        .iter()
        .zip(density.iter())
        .map(|(s, p)| (*p > 0.0).then(|| s.recip() * p.powf(-1.0 / (4.0 + df))))
        .collect())
}

/// Unnormalized proposal `[C^d q]^{(4+d)/(8+d)} v^{4/(8+d)}`; zero where the
/// complexity is undefined.
pub fn propose_from_lfc(lfc: &[Option<f64>], test_density: &DVector<f64>, noise_var: &DVector<f64>, d: usize) -> Result<DVector<f64>> {
    if lfc.len() != test_density.len() || lfc.len() != noise_var.len() {
        return Err(SaberError::dims("complexity, test density and noise differ in length"));
    }
    Ok(DVector::from_fn(lfc.len(), |i, _| {
        lfc[i].map_or(0.0, |c| crate::lls::optimal_density_value(c, test_density[i], noise_var[i], d))
    }))
}

/// Proposal over the cells of `grid` from a bandwidth field evaluated at the
/// cell centers, the density the data were drawn from, and the test density.
/// The noise variance defaults to one.
pub fn propose_density(
    grid: &RectGrid,
    sigma: &DVector<f64>,
    sampling: &DensityModel,
    test: &DensityModel,
    noise_var: Option<&DVector<f64>>,
) -> Result<DensityModel> {
    let centers = grid.cell_centers();
    let d = grid.dim();
    let p = sampling.evaluate(&centers)?;
    let q = test.evaluate(&centers)?;
    let lfc = lfc_isotropic(sigma, &p, d)?;
    let ones = DVector::from_element(grid.len(), 1.0);
    let raw = propose_from_lfc(&lfc, &q, noise_var.unwrap_or(&ones), d)?;
    DensityModel::cells(grid.clone(), raw)
}

/// Draws `budget` points from a cell density: inverse CDF over cells, then
/// uniform jitter inside the chosen cell.
pub fn resample(density: &DensityModel, budget: usize, seed: u64) -> Result<DMatrix<f64>> {
    let DensityKind::Cells { grid, values } = &density.kind else {
        return Err(SaberError::invalid("resampling needs a cell density"));
    };
    let mut cdf = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for v in values.iter() {
        acc += v;
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(SaberError::invalid("cell density has no mass"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim();
    let mut out = DMatrix::zeros(budget, d);
    for r in 0..budget {
        let u = rng.random::<f64>() * acc;
        let cell = cdf.partition_point(|&c| c <= u).min(values.len() - 1);
        let idx = grid.multi_index(cell);
        for k in 0..d {
            let w = grid.cell_width(k);
            out[(r, k)] = grid.lower[k] + (idx[k] as f64 + rng.random::<f64>()) * w;
        }
    }
    Ok(out)
}

//! Local linear smoothing and its asymptotic bandwidth theory.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Result, SaberError};
use crate::kernels::{kernel_matrix, Bandwidth};

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Analytic regression problem: target, its curvature `𝟙ᵀH𝟙`, gradient,
/// input density and noise variance.
#[derive(Clone)]
pub struct FieldSpec {
    pub name: String,
    pub dim: usize,
    pub f: ScalarField,
    pub curvature: ScalarField,
    pub gradient: VectorField,
    pub density: ScalarField,
    pub noise_var: ScalarField,
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FieldSpec").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

/// Local linear fit at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFit {
    pub value: f64,
    /// The local design was rank deficient and a small ridge was added.
    pub ridged: bool,
}

const LOCAL_RIDGE: f64 = 1e-10;

/// Intercept of the kernel-weighted local linear least-squares fit at `x`.
pub fn lls_predict(x: &[f64], bw: &Bandwidth, data: &Dataset) -> Result<LocalFit> {
    let d = data.dim();
    if x.len() != d {
        return Err(SaberError::dims(format!("query has {} coordinates, data {d}", x.len())));
    }
    if data.is_empty() {
        return Err(SaberError::invalid("local fit needs data"));
    }
    let q = DMatrix::from_row_slice(1, d, x);
    let w = kernel_matrix(&data.x, &q, bw)?;
    let n = data.len();
    let mut z = DMatrix::zeros(n, d + 1);
    let mut t = DVector::zeros(n);
    for i in 0..n {
        let sw = w[(i, 0)].sqrt();
        z[(i, 0)] = sw;
        for k in 0..d {
            z[(i, k + 1)] = sw * (data.x[(i, k)] - x[k]);
        }
        t[i] = sw * data.y[i];
    }
    let qr = z.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    let full_rank = n > d && scale > 0.0 && r.diagonal().iter().all(|v| v.abs() > 1e-12 * scale);
    if full_rank {
        let rhs = qr.q().tr_mul(&t);
        if let Some(beta) = r.solve_upper_triangular(&rhs) {
            if beta.iter().all(|b| b.is_finite()) {
                return Ok(LocalFit {
                    value: beta[0],
                    ridged: false,
                });
            }
        }
    }
    let mut gram = z.tr_mul(&z);
    for k in 0..=d {
        gram[(k, k)] += LOCAL_RIDGE;
    }
    let beta = gram
        .cholesky()
        .ok_or_else(|| SaberError::Singular("local design".into()))?
        .solve(&z.tr_mul(&t));
    Ok(LocalFit {
        value: beta[0],
        ridged: true,
    })
}

/// Local linear fits with a separate isotropic bandwidth per query point.
pub fn lls_predict_field(xq: &DMatrix<f64>, bandwidths: &[f64], data: &Dataset) -> Result<DVector<f64>> {
    if bandwidths.len() != xq.nrows() {
        return Err(SaberError::dims("one bandwidth per query point is required"));
    }
    let mut out = DVector::zeros(xq.nrows());
    for (i, s) in bandwidths.iter().enumerate() {
        let row: Vec<f64> = xq.row(i).iter().copied().collect();
        out[i] = lls_predict(&row, &Bandwidth::isotropic(*s), data)?.value;
    }
    Ok(out)
}

/// Asymptotic bandwidth, which is infinite where the curvature vanishes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TheoBandwidth {
    Finite(f64),
    Pole,
}

impl TheoBandwidth {
    pub fn finite(self) -> Option<f64> {
        match self {
            TheoBandwidth::Finite(v) => Some(v),
            TheoBandwidth::Pole => None,
        }
    }

    /// Value with poles and large values capped.
    pub fn capped(self, cap: f64) -> f64 {
        match self {
            TheoBandwidth::Finite(v) => v.min(cap),
            TheoBandwidth::Pole => cap,
        }
    }
}

/// `[v / ((𝟙ᵀH𝟙)² p)]^{1/(4+d)}` from pointwise values.
pub fn sigma_theo_value(curvature: f64, density: f64, noise_var: f64, d: usize) -> Result<TheoBandwidth> {
    if !(density > 0.0) {
        return Err(SaberError::UndefinedDensity(0));
    }
    if curvature == 0.0 {
        return Ok(TheoBandwidth::Pole);
    }
    let v = noise_var / (curvature * curvature * density);
    Ok(TheoBandwidth::Finite(v.powf(1.0 / (4.0 + d as f64))))
}

pub fn sigma_theo(x: &[f64], spec: &FieldSpec) -> Result<TheoBandwidth> {
    sigma_theo_value((spec.curvature)(x), (spec.density)(x), (spec.noise_var)(x), spec.dim)
}

/// Asymptotic local function complexity `|𝟙ᵀH𝟙|^{2/(4+d)}`.
pub fn lfc_lls(x: &[f64], spec: &FieldSpec) -> f64 {
    (spec.curvature)(x).abs().powf(2.0 / (4.0 + spec.dim as f64))
}

/// Unnormalized optimal training density from pointwise complexity, test
/// density and noise variance.
pub fn optimal_density_value(lfc: f64, test_density: f64, noise_var: f64, d: usize) -> f64 {
    let d = d as f64;
    (lfc.powf(d) * test_density).powf((4.0 + d) / (8.0 + d)) * noise_var.powf(4.0 / (8.0 + d))
}

pub fn optimal_density(
    x: &[f64],
    lfc: &dyn Fn(&[f64]) -> f64,
    noise_var: &dyn Fn(&[f64]) -> f64,
    test_density: &dyn Fn(&[f64]) -> f64,
    d: usize,
) -> f64 {
    optimal_density_value(lfc(x), test_density(x), noise_var(x), d)
}

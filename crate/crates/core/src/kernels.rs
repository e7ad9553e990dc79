//! Gaussian kernels, distance matrices and the symmetric eigensolver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaberError};

/// Diagonal bandwidth matrix, stored through its log-scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bandwidth {
    Isotropic { log_scale: f64 },
    Diagonal { log_scales: Vec<f64> },
}

impl Bandwidth {
    /// Isotropic bandwidth with the given (linear) scale.
    pub fn isotropic(scale: f64) -> Self {
        Bandwidth::Isotropic {
            log_scale: scale.ln(),
        }
    }

    pub fn diagonal(scales: &[f64]) -> Self {
        Bandwidth::Diagonal {
            log_scales: scales.iter().map(|s| s.ln()).collect(),
        }
    }

    /// Input dimension this bandwidth is tied to, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            Bandwidth::Isotropic { .. } => None,
            Bandwidth::Diagonal { log_scales } => Some(log_scales.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Bandwidth::Isotropic { log_scale } => log_scale.is_finite(),
            Bandwidth::Diagonal { log_scales } => {
                !log_scales.is_empty() && log_scales.iter().all(|s| s.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SaberError::invalid("bandwidth log-scales must be finite"))
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.fixed_dim() {
            Some(k) if k != d => Err(SaberError::dims(format!(
                "bandwidth has {k} coordinates, inputs have {d}"
            ))),
            _ => Ok(()),
        }
    }

    /// Per-coordinate scales for `d`-dimensional inputs.
    pub fn scales(&self, d: usize) -> Result<Vec<f64>> {
        self.check_dim(d)?;
        Ok(match self {
            Bandwidth::Isotropic { log_scale } => vec![log_scale.exp(); d],
            Bandwidth::Diagonal { log_scales } => log_scales.iter().map(|s| s.exp()).collect(),
        })
    }

    /// Bandwidth multiplied by a positive scalar factor.
    pub fn scaled(&self, factor: f64) -> Self {
        let shift = factor.ln();
        match self {
            Bandwidth::Isotropic { log_scale } => Bandwidth::Isotropic {
                log_scale: log_scale + shift,
            },
            Bandwidth::Diagonal { log_scales } => Bandwidth::Diagonal {
                log_scales: log_scales.iter().map(|s| s + shift).collect(),
            },
        }
    }

    /// `log det Σ` for `d`-dimensional inputs.
    pub fn log_det(&self, d: usize) -> Result<f64> {
        self.check_dim(d)?;
        Ok(match self {
            Bandwidth::Isotropic { log_scale } => d as f64 * log_scale,
            Bandwidth::Diagonal { log_scales } => log_scales.iter().sum(),
        })
    }

    /// Log-scales as a flat vector (one entry for isotropic).
    pub fn log_params(&self) -> Vec<f64> {
        match self {
            Bandwidth::Isotropic { log_scale } => vec![*log_scale],
            Bandwidth::Diagonal { log_scales } => log_scales.clone(),
        }
    }

    pub fn with_log_params(&self, params: &[f64]) -> Self {
        match self {
            Bandwidth::Isotropic { .. } => Bandwidth::Isotropic {
                log_scale: params[0],
            },
            Bandwidth::Diagonal { .. } => Bandwidth::Diagonal {
                log_scales: params.to_vec(),
            },
        }
    }
}

/// Eigenbasis and nonnegative spectrum, sorted descending.
///
/// For heteroscedastic decompositions the columns of `vectors` are
/// rescaled rows of an orthonormal basis and are not orthonormal themselves.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl EigenPair {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `U diag(Λ) Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (mut col, &l) in scaled.column_iter_mut().zip(self.values.iter()) {
            col *= l;
        }
        &scaled * self.vectors.transpose()
    }

    /// `U diag(g) Uᵀ` for an arbitrary spectral filter `g`.
    pub fn filtered(&self, g: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (mut col, &gi) in scaled.column_iter_mut().zip(g.iter()) {
            col *= gi;
        }
        &scaled * self.vectors.transpose()
    }
}

fn scaled_inputs(x: &DMatrix<f64>, inv_scales: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut col, &s) in out.column_iter_mut().zip(inv_scales) {
        col *= s;
    }
    out
}

/// `‖Σ⁻¹(xᵢ − zⱼ)‖²` for all pairs.
pub fn squared_distances(x: &DMatrix<f64>, z: &DMatrix<f64>, bw: &Bandwidth) -> Result<DMatrix<f64>> {
    if x.ncols() != z.ncols() {
        return Err(SaberError::dims(format!(
            "inputs have {} and {} columns",
            x.ncols(),
            z.ncols()
        )));
    }
    let inv: Vec<f64> = bw.scales(x.ncols())?.iter().map(|s| 1.0 / s).collect();
    let xs = scaled_inputs(x, &inv);
    let zs = scaled_inputs(z, &inv);
    let xn: Vec<f64> = xs.row_iter().map(|r| r.norm_squared()).collect();
    let zn: Vec<f64> = zs.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = &xs * zs.transpose();
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            d[(i, j)] = (xn[i] + zn[j] - 2.0 * d[(i, j)]).max(0.0);
        }
    }
    Ok(d)
}

/// Unscaled squared differences along one coordinate, `(x_ik − z_jk)²`.
pub fn coordinate_squared_distances(x: &DMatrix<f64>, z: &DMatrix<f64>, coord: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
        let g = x[(i, coord)] - z[(j, coord)];
        g * g
    })
}

/// Gaussian kernel `exp(−½‖Σ⁻¹(xᵢ − zⱼ)‖²)`.
pub fn kernel_matrix(x: &DMatrix<f64>, z: &DMatrix<f64>, bw: &Bandwidth) -> Result<DMatrix<f64>> {
    let mut k = squared_distances(x, z, bw)?;
    k.apply(|v| *v = (-0.5 * *v).exp());
    Ok(k)
}

fn check_square_finite(k: &DMatrix<f64>, what: &str) -> Result<()> {
    if !k.is_square() {
        return Err(SaberError::dims(format!(
            "{what}: expected square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(SaberError::non_finite(what.to_string()));
    }
    Ok(())
}

static SEQUENTIAL: std::sync::Once = std::sync::Once::new();

fn symmetric_eigen(k: &DMatrix<f64>) -> Result<EigenPair> {
    // Parallelism lives at the expert/gate level; keep the solver sequential
    // so results do not depend on the thread count.
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
    let n = k.nrows();
    if n == 0 {
        return Ok(EigenPair {
            vectors: DMatrix::zeros(0, 0),
            values: DVector::zeros(0),
        });
    }
    let sym = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (k[(i, j)] + k[(j, i)]));
    let eig = sym
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| SaberError::Singular(format!("eigensolver failed: {e:?}")));
    clear_upper_avx_state();
    let eig = eig?;
    let u = eig.U();
    let s = eig.S().column_vector();
    // faer returns ascending eigenvalues; flip to descending.
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    let values = DVector::from_fn(n, |j, _| s[n - 1 - j].max(0.0));
    Ok(EigenPair { vectors, values })
}

/// The eigensolver can return with dirty upper AVX registers, after which
/// SSE-encoded libm calls (`exp`) on the same thread run an order of
/// magnitude slower.
fn clear_upper_avx_state() {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was detected at runtime.
        unsafe { zero_upper() }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn zero_upper() {
    std::arch::x86_64::_mm256_zeroupper();
}

/// Eigendecomposition of a symmetric PSD matrix with negative round-off
/// eigenvalues clamped to zero.
pub fn eigendecompose(k: &DMatrix<f64>) -> Result<EigenPair> {
    check_square_finite(k, "eigendecompose")?;
    symmetric_eigen(k)
}

/// Decomposes `Σε⁻¹ K Σε⁻¹ = Ũ Λ Ũᵀ` and returns `(Σε⁻¹ Ũ, Λ)`, so that
/// `U (e^λ Λ + I)⁻¹ Uᵀ = (e^λ K + Σε²)⁻¹`.
pub fn pseudo_eigendecompose(k: &DMatrix<f64>, noise_var: &DVector<f64>) -> Result<EigenPair> {
    check_square_finite(k, "pseudo_eigendecompose")?;
    if noise_var.len() != k.nrows() {
        return Err(SaberError::dims(format!(
            "noise variance has length {}, kernel is {}x{}",
            noise_var.len(),
            k.nrows(),
            k.ncols()
        )));
    }
    if noise_var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(SaberError::invalid("noise variance must be strictly positive"));
    }
    let inv_sd: DVector<f64> = noise_var.map(|v| 1.0 / v.sqrt());
    let whitened = DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| inv_sd[i] * k[(i, j)] * inv_sd[j]);
    let mut pair = symmetric_eigen(&whitened)?;
    for (i, mut row) in pair.vectors.row_iter_mut().enumerate() {
        row *= inv_sd[i];
    }
    Ok(pair)
}

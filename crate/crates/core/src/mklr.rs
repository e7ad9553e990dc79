//! Multinomial kernel logistic regression gate trained by bound
//! optimization with a fixed quadratic upper bound on the Hessian.
//!
//! Class `L` is the reference class with logit fixed to zero. The
//! regularizer is `(λ_g/2) Σ αⱼᵀ K αⱼ`, whose gradient `λ_g K αⱼ` matches the
//! update equations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaberError};
use crate::kernels::{eigendecompose, kernel_matrix, Bandwidth, EigenPair};

/// Gate bandwidth and ridge strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateHyper {
    pub bandwidth: Bandwidth,
    pub reg: f64,
}

impl GateHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0) || !self.reg.is_finite() {
            return Err(SaberError::invalid("gate regularizer must be positive"));
        }
        self.bandwidth.validate()
    }
}

/// Trained gate: dual weights `α` (n×(L−1)) and biases `b` (L−1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    pub alpha: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub train_x: DMatrix<f64>,
    pub hyper: GateHyper,
}

impl GateModel {
    pub fn classes(&self) -> usize {
        self.bias.len() + 1
    }
}

/// Stopping rule of the bound iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MklrOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

/// Iterations without objective decrease after which the bound iterations
/// are considered to sit at the round-off floor.
const STALL_LIMIT: usize = 10;

impl Default for MklrOptions {
    fn default() -> Self {
        MklrOptions {
            grad_tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MklrReport {
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// Row-wise softmax over `[logits, 0]`.
fn softmax_with_reference(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, lm1) = logits.shape();
    let mut out = DMatrix::zeros(t, lm1 + 1);
    for i in 0..t {
        let top = logits.row(i).iter().fold(0.0f64, |a, &v| a.max(v));
        let mut total = (-top).exp();
        for j in 0..lm1 {
            let e = (logits[(i, j)] - top).exp();
            out[(i, j)] = e;
            total += e;
        }
        out[(i, lm1)] = (-top).exp();
        for j in 0..=lm1 {
            out[(i, j)] /= total;
        }
    }
    out
}

fn logits_from(k_alpha: DMatrix<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    let mut z = k_alpha;
    for (mut col, b) in z.column_iter_mut().zip(bias.iter()) {
        col.add_scalar_mut(*b);
    }
    z
}

/// Class probabilities at the test inputs, one row per input.
pub fn mklr_predict(xtest: &DMatrix<f64>, model: &GateModel) -> Result<DMatrix<f64>> {
    if xtest.ncols() != model.train_x.ncols() {
        return Err(SaberError::dims(format!(
            "gate trained on {} columns, queried with {}",
            model.train_x.ncols(),
            xtest.ncols()
        )));
    }
    if model.bias.is_empty() {
        return Ok(DMatrix::from_element(xtest.nrows(), 1, 1.0));
    }
    let ks = kernel_matrix(xtest, &model.train_x, &model.hyper.bandwidth)?;
    Ok(softmax_with_reference(&logits_from(ks * &model.alpha, &model.bias)))
}

/// Gate kernel on the training inputs with its cached eigendecomposition.
#[derive(Clone, Debug)]
pub struct GateKernel {
    pub x: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub eig: EigenPair,
}

impl GateKernel {
    pub fn new(x: &DMatrix<f64>, bw: &Bandwidth) -> Result<Self> {
        let k = kernel_matrix(x, x, bw)?;
        let eig = eigendecompose(&k)?;
        Ok(GateKernel { x: x.clone(), k, eig })
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    /// Same kernel with input `i` removed.
    pub fn without(&self, i: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n()).filter(|&r| r != i).collect();
        let k = self.k.select_rows(&idx).select_columns(&idx);
        let eig = eigendecompose(&k)?;
        Ok(GateKernel {
            x: self.x.select_rows(&idx),
            k,
            eig,
        })
    }
}

fn check_assignments(p: &DMatrix<f64>, n: usize) -> Result<()> {
    if p.nrows() != n {
        return Err(SaberError::dims(format!("{} assignment rows for {n} inputs", p.nrows())));
    }
    if p.ncols() == 0 {
        return Err(SaberError::invalid("at least one class is required"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < -1e-12 || *v > 1.0 + 1e-12) {
        return Err(SaberError::invalid("assignment probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// Regularized negentropy at the given parameters.
pub fn mklr_objective(kernel: &DMatrix<f64>, alpha: &DMatrix<f64>, bias: &DVector<f64>, p: &DMatrix<f64>, reg: f64) -> f64 {
    let k_alpha = kernel * alpha;
    0.5 * reg * alpha.dot(&k_alpha) + data_term(&k_alpha, bias, p)
}

/// Multinomial negative log-likelihood for logits `Kα + b`.
fn data_term(k_alpha: &DMatrix<f64>, bias: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
    let lm1 = bias.len();
    let mut acc = 0.0;
    for i in 0..k_alpha.nrows() {
        let z: Vec<f64> = (0..lm1).map(|j| k_alpha[(i, j)] + bias[j]).collect();
        let top = z.iter().fold(0.0f64, |a, &v| a.max(v));
        let lse = top + ((-top).exp() + z.iter().map(|v| (v - top).exp()).sum::<f64>()).ln();
        acc += lse - z.iter().enumerate().map(|(j, v)| p[(i, j)] * v).sum::<f64>();
    }
    acc
}

/// Gradient `(K(Q − P + λα), 𝟙ᵀ(Q − P))` of the objective.
pub fn mklr_gradient(
    kernel: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    bias: &DVector<f64>,
    p: &DMatrix<f64>,
    reg: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let k_alpha = kernel * alpha;
    let q = softmax_with_reference(&logits_from(k_alpha, bias));
    let lm1 = bias.len();
    let diff = q.columns(0, lm1) - p.columns(0, lm1);
    let g_alpha = kernel * (&diff + alpha * reg);
    let g_bias = DVector::from_fn(lm1, |j, _| diff.column(j).sum());
    (g_alpha, g_bias)
}

/// Kronecker-structured solver for the bound system, built once per kernel.
///
/// Works in the eigenbasis `U` of the gate kernel, optionally truncated to
/// the leading eigenpairs; then `α` is restricted to their span.
pub struct BoundSolver {
    basis: DMatrix<f64>,
    values: DVector<f64>,
    ones_proj: DVector<f64>,
    bound: DMatrix<f64>,
    bound_inv: DMatrix<f64>,
    bound_vecs: DMatrix<f64>,
    denom: DMatrix<f64>,
    bias_mat: DMatrix<f64>,
}

/// The curvature bound `½(I − 𝟙𝟙ᵀ/L)` on the free classes.
pub fn class_bound(classes: usize) -> DMatrix<f64> {
    let m = classes - 1;
    DMatrix::from_fn(m, m, |i, j| {
        0.5 * (if i == j { 1.0 } else { 0.0 } - 1.0 / classes as f64)
    })
}

/// Eigenvalues below this fraction of the largest are dropped by the
/// truncated solver; they sit at the eigensolver's round-off level.
const SPECTRUM_CUTOFF: f64 = 1e-12;

impl BoundSolver {
    /// Solver on the full eigenbasis.
    pub fn new(kernel: &GateKernel, classes: usize, reg: f64) -> Result<Self> {
        Self::with_rank(kernel, classes, reg, kernel.n())
    }

    /// Solver on the eigenpairs above round-off.
    pub fn truncated(kernel: &GateKernel, classes: usize, reg: f64) -> Result<Self> {
        let top = kernel.eig.values.iter().copied().fold(0.0, f64::max);
        let rank = kernel.eig.values.iter().filter(|v| **v > SPECTRUM_CUTOFF * top).count().max(1);
        Self::with_rank(kernel, classes, reg, rank)
    }

    fn with_rank(kernel: &GateKernel, classes: usize, reg: f64, rank: usize) -> Result<Self> {
        if classes < 2 {
            return Err(SaberError::invalid("bound solver needs at least two classes"));
        }
        if !(reg > 0.0) {
            return Err(SaberError::invalid("gate regularizer must be positive"));
        }
        let m = classes - 1;
        let n = kernel.n();
        let bound = class_bound(classes);
        let bound_inv = bound
            .clone()
            .try_inverse()
            .ok_or_else(|| SaberError::Singular("class bound".into()))?;
        let se = SymmetricEigen::new(bound.clone());
        let basis = kernel.eig.vectors.columns(0, rank).into_owned();
        let values = kernel.eig.values.rows(0, rank).into_owned();
        let ones_proj = basis.tr_mul(&DVector::from_element(n, 1.0));
        let denom = DMatrix::from_fn(rank, m, |i, c| values[i] * se.eigenvalues[c] + reg);
        // S = Σ_i t_i² Λ_i (Λ_i B + λ)⁻¹, diagonal in the eigenbasis of B
        let s_diag = DVector::from_fn(m, |c, _| {
            (0..rank).map(|i| ones_proj[i] * ones_proj[i] * values[i] / denom[(i, c)]).sum::<f64>()
        });
        let s_mat = &se.eigenvectors * DMatrix::from_diagonal(&s_diag) * se.eigenvectors.transpose();
        let bias_sys = DMatrix::identity(m, m) * n as f64 - s_mat * &bound;
        let bias_mat = bias_sys
            .try_inverse()
            .ok_or_else(|| SaberError::Singular("bias system of the bound step".into()))?;
        Ok(BoundSolver {
            basis,
            values,
            ones_proj,
            bound,
            bound_inv,
            bound_vecs: se.eigenvectors,
            denom,
            bias_mat,
        })
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// `(UᵀXV) ⊘ (Λ Dᵀ + λ)` in the joint eigenbasis.
    fn spectral(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        (self.basis.tr_mul(x) * &self.bound_vecs).component_div(&self.denom)
    }

    /// Applies `M̃⁻¹` to the columns-stacked matrix `x`.
    pub fn apply_inverse(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.basis * self.spectral(x) * self.bound_vecs.transpose()
    }

    /// Bound step `(Δα, Δb)` for residual `R = Q − P₋L + λα`.
    pub fn step(&self, residual: &DMatrix<f64>, alpha: &DMatrix<f64>, reg: f64) -> (DMatrix<f64>, DVector<f64>) {
        let colsum = residual.row_sum().transpose() - alpha.row_sum().transpose() * reg;
        let (d_beta, d_bias) = self.spectral_step(&self.basis.tr_mul(residual), &colsum);
        (&self.basis * d_beta, d_bias)
    }

    /// The bound step in eigen-coordinates: takes `UᵀR` and the column sums
    /// `𝟙ᵀ(Q − P₋L)`, returns `(UᵀΔα, Δb)`.
    fn spectral_step(&self, ut_residual: &DMatrix<f64>, colsum: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let spec = (ut_residual * &self.bound_vecs).component_div(&self.denom);
        let weights = self.ones_proj.component_mul(&self.values);
        let rhs = &self.bound_inv * colsum - &self.bound_vecs * spec.tr_mul(&weights);
        let delta_b = &self.bias_mat * rhs;
        let shift = &self.bound * &delta_b;
        let adjusted = ut_residual - &self.ones_proj * shift.transpose();
        let d_beta = (adjusted * &self.bound_vecs).component_div(&self.denom) * self.bound_vecs.transpose();
        (d_beta, delta_b)
    }
}

/// Starting point of the bound iterations.
#[derive(Clone, Debug)]
pub struct GateInit {
    pub alpha: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Default start: `α = 0` and biases at the log class-frequency ratios
/// against the reference class, where uniform targets are stationary.
pub fn default_init(p: &DMatrix<f64>) -> GateInit {
    let (n, l) = p.shape();
    let mean = |j: usize| (p.column(j).sum() / n as f64).max(1e-12);
    let reference = mean(l - 1).ln();
    GateInit {
        alpha: DMatrix::zeros(n, l - 1),
        bias: DVector::from_fn(l - 1, |j, _| mean(j).ln() - reference),
    }
}

/// Trains a gate on a prepared kernel.
pub fn mklr_train_kernel(
    kernel: &GateKernel,
    p: &DMatrix<f64>,
    hyper: &GateHyper,
    init: Option<GateInit>,
    opts: &MklrOptions,
) -> Result<(GateModel, MklrReport)> {
    hyper.validate()?;
    check_assignments(p, kernel.n())?;
    let classes = p.ncols();
    if classes == 1 {
        let model = GateModel {
            alpha: DMatrix::zeros(kernel.n(), 0),
            bias: DVector::zeros(0),
            train_x: kernel.x.clone(),
            hyper: hyper.clone(),
        };
        return Ok((
            model,
            MklrReport {
                iterations: 0,
                converged: true,
                objective_trace: vec![0.0],
            },
        ));
    }
    let solver = BoundSolver::truncated(kernel, classes, hyper.reg)?;
    let GateInit { alpha, mut bias } = init.unwrap_or_else(|| default_init(p));
    if alpha.shape() != (kernel.n(), classes - 1) || bias.len() != classes - 1 {
        return Err(SaberError::dims("gate initialization shape"));
    }
    let p_free = p.columns(0, classes - 1).into_owned();
    // iterate on β = Uᵀα so each step costs two products with U
    let u = &solver.basis;
    let lam = &solver.values;
    let mut beta = u.tr_mul(&alpha);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut best: Option<(f64, DMatrix<f64>, DVector<f64>)> = None;
    let mut stale = 0;
    for it in 0..=opts.max_iter {
        let lam_beta = DMatrix::from_fn(beta.nrows(), beta.ncols(), |i, j| lam[i] * beta[(i, j)]);
        let k_alpha = u * &lam_beta;
        let penalty = 0.5 * hyper.reg * beta.dot(&lam_beta);
        let obj = penalty + data_term(&k_alpha, &bias, p);
        if !obj.is_finite() {
            return Err(SaberError::non_finite("gate objective"));
        }
        trace.push(obj);
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, beta.clone(), bias.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let q = softmax_with_reference(&logits_from(k_alpha, &bias));
        let diff = q.columns(0, classes - 1) - &p_free;
        let ut_residual = u.tr_mul(&diff) + &beta * hyper.reg;
        iterations = it;
        let g_bias = diff.row_sum().amax();
        // ‖K R‖₂ = ‖Λ UᵀR‖₂ bounds the largest gradient entry; the exact
        // max-norm costs another product with U and is taken only near the end
        let bound = ut_residual
            .row_iter()
            .zip(lam.iter())
            .map(|(r, l)| l * l * r.norm_squared())
            .sum::<f64>()
            .sqrt();
        let g_alpha = if bound < opts.grad_tol || bound > opts.grad_tol * (kernel.n() as f64).sqrt() {
            bound
        } else {
            let lam_res = DMatrix::from_fn(beta.nrows(), beta.ncols(), |i, j| lam[i] * ut_residual[(i, j)]);
            (u * lam_res).amax()
        };
        if g_alpha.max(g_bias) < opts.grad_tol {
            converged = true;
            break;
        }
        if it == opts.max_iter || stale >= STALL_LIMIT {
            break;
        }
        let (d_beta, d_bias) = solver.spectral_step(&ut_residual, &diff.row_sum().transpose());
        beta -= d_beta;
        bias -= d_bias;
    }
    if !converged {
        if stale >= STALL_LIMIT {
            log::debug!("gate objective stalled at round-off after {iterations} iterations");
        } else {
            log::warn!("gate training stopped after {iterations} iterations without reaching the gradient tolerance");
        }
    }
    let (_, beta, bias) = best.expect("at least one objective evaluation");
    let model = GateModel {
        alpha: u * beta,
        bias,
        train_x: kernel.x.clone(),
        hyper: hyper.clone(),
    };
    Ok((
        model,
        MklrReport {
            iterations,
            converged,
            objective_trace: trace,
        },
    ))
}

/// Trains a gate from the prescribed initialization.
pub fn mklr_train(x: &DMatrix<f64>, p: &DMatrix<f64>, hyper: &GateHyper) -> Result<(GateModel, MklrReport)> {
    if p.ncols() >= 2 && x.nrows() < p.ncols() {
        return Err(SaberError::invalid("gate training needs at least as many points as classes"));
    }
    let kernel = GateKernel::new(x, &hyper.bandwidth)?;
    mklr_train_kernel(&kernel, p, hyper, None, &MklrOptions::default())
}

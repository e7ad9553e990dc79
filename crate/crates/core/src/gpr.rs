//! Gaussian process experts tuned by the weighted leave-one-out predictive
//! likelihood.
//!
//! Conventions: the covariance is `C = σε²(e^λ K + Σε²)` and
//! `D̄ = σε² C⁻¹ = (e^λ K + Σε²)⁻¹`. Leave-one-out residuals are stored as
//! `looR = D̄(Y − m𝟙) ⊘ W`, which equals `yᵢ − μ₋ᵢ(xᵢ)`; the objective and its
//! gradients only depend on this sign through products with itself.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, SaberError};
use crate::kernels::{
    coordinate_squared_distances, kernel_matrix, pseudo_eigendecompose, squared_distances, Bandwidth,
    EigenPair,
};

/// Lower bound on the noise scale.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Hyperparameters shared by all experts of a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedHyper {
    pub mean: f64,
    pub log_amplitude: f64,
    pub noise_scale: f64,
}

impl SharedHyper {
    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.log_amplitude.is_finite() && self.noise_scale.is_finite()
    }
}

/// Hyperparameters of a single GPR expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GprHyper {
    pub mean: f64,
    pub log_amplitude: f64,
    pub noise_scale: f64,
    pub bandwidth: Bandwidth,
}

impl GprHyper {
    pub fn new(shared: SharedHyper, bandwidth: Bandwidth) -> Self {
        GprHyper {
            mean: shared.mean,
            log_amplitude: shared.log_amplitude,
            noise_scale: shared.noise_scale,
            bandwidth,
        }
    }

    pub fn shared(&self) -> SharedHyper {
        SharedHyper {
            mean: self.mean,
            log_amplitude: self.log_amplitude,
            noise_scale: self.noise_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shared().is_finite() {
            return Err(SaberError::non_finite("GPR hyperparameters"));
        }
        if !(self.noise_scale > 0.0) {
            return Err(SaberError::invalid("noise scale must be positive"));
        }
        self.bandwidth.validate()
    }
}

/// Closed-form leave-one-out quantities of one expert.
#[derive(Clone, Debug)]
pub struct LooQuantities {
    pub w: DVector<f64>,
    pub loo_one: DVector<f64>,
    pub loo_y: DVector<f64>,
    pub loo_r: DVector<f64>,
    pub a_one: DVector<f64>,
    pub a_y: DVector<f64>,
    pub d_a: DVector<f64>,
}

fn regularized_system(data: &Dataset, hyper: &GprHyper) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let k = kernel_matrix(&data.x, &data.x, &hyper.bandwidth)?;
    let v = data.noise_var_or_ones();
    let amp = hyper.log_amplitude.exp();
    let mut d = k * amp;
    for i in 0..d.nrows() {
        d[(i, i)] += v[i];
    }
    d.cholesky()
        .ok_or_else(|| SaberError::Singular("GPR covariance is not positive definite".into()))
}

fn check_predict_inputs(xtest: &DMatrix<f64>, data: &Dataset, hyper: &GprHyper) -> Result<()> {
    if data.is_empty() {
        return Err(SaberError::invalid("GPR needs at least one training point"));
    }
    if xtest.ncols() != data.dim() {
        return Err(SaberError::dims(format!(
            "test inputs have {} columns, training inputs {}",
            xtest.ncols(),
            data.dim()
        )));
    }
    hyper.validate()
}

/// Predictive mean `m + c*C⁻¹(Y − m𝟙)`.
pub fn gpr_predict(xtest: &DMatrix<f64>, data: &Dataset, hyper: &GprHyper) -> Result<DVector<f64>> {
    check_predict_inputs(xtest, data, hyper)?;
    let chol = regularized_system(data, hyper)?;
    let resid = data.y.add_scalar(-hyper.mean);
    let alpha = chol.solve(&resid);
    let ks = kernel_matrix(xtest, &data.x, &hyper.bandwidth)?;
    let mut out = ks * alpha * hyper.log_amplitude.exp();
    out.add_scalar_mut(hyper.mean);
    Ok(out)
}

/// Predictive variance `c** − c*C⁻¹c*ᵀ`. `test_noise_var` gives `v(x*)`,
/// defaulting to one.
pub fn gpr_predict_var(
    xtest: &DMatrix<f64>,
    data: &Dataset,
    hyper: &GprHyper,
    test_noise_var: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    check_predict_inputs(xtest, data, hyper)?;
    if let Some(v) = test_noise_var {
        if v.len() != xtest.nrows() {
            return Err(SaberError::dims("test noise variance length"));
        }
    }
    let chol = regularized_system(data, hyper)?;
    let amp = hyper.log_amplitude.exp();
    let ks = kernel_matrix(xtest, &data.x, &hyper.bandwidth)?;
    let solved = chol.solve(&ks.transpose());
    let out = DVector::from_fn(xtest.nrows(), |t, _| {
        let quad: f64 = ks.row(t).iter().zip(solved.column(t).iter()).map(|(a, b)| a * b).sum();
        let vt = test_noise_var.map_or(1.0, |v| v[t]);
        (hyper.noise_scale * (amp + vt - amp * amp * quad)).max(f64::MIN_POSITIVE)
    });
    Ok(out)
}

/// Help variables of `L` experts, one column per expert.
#[derive(Clone, Debug)]
pub struct HelpVariables {
    pub w: DMatrix<f64>,
    pub loo_one: DMatrix<f64>,
    pub loo_y: DMatrix<f64>,
    pub a_one: DMatrix<f64>,
    pub a_y: DMatrix<f64>,
    pub d_a: DMatrix<f64>,
}

struct ExpertColumns {
    w: DVector<f64>,
    loo_one: DVector<f64>,
    loo_y: DVector<f64>,
    a_one: DVector<f64>,
    a_y: DVector<f64>,
    d_a: DVector<f64>,
}

fn expert_columns(eig: &EigenPair, y: &DVector<f64>, log_amplitude: f64) -> ExpertColumns {
    let n = y.len();
    let amp = log_amplitude.exp();
    let u = &eig.vectors;
    let g: Vec<f64> = eig.values.iter().map(|l| 1.0 / (amp * l + 1.0)).collect();
    let h: Vec<f64> = g.iter().map(|gi| gi * (1.0 - gi)).collect();

    let mut rhs = DMatrix::zeros(n, 2);
    rhs.column_mut(0).fill(1.0);
    rhs.set_column(1, y);
    let proj = u.tr_mul(&rhs);
    let mut spec = DMatrix::zeros(n, 4);
    for k in 0..n {
        spec[(k, 0)] = g[k] * proj[(k, 0)];
        spec[(k, 1)] = g[k] * proj[(k, 1)];
        spec[(k, 2)] = h[k] * proj[(k, 0)];
        spec[(k, 3)] = h[k] * proj[(k, 1)];
    }
    let back = u * spec;

    let mut w = DVector::zeros(n);
    let mut d_a = DVector::zeros(n);
    for (k, col) in u.column_iter().enumerate() {
        for (i, c) in col.iter().enumerate() {
            let c2 = c * c;
            w[i] += g[k] * c2;
            d_a[i] += h[k] * c2;
        }
    }
    ExpertColumns {
        loo_one: back.column(0).component_div(&w),
        loo_y: back.column(1).component_div(&w),
        a_one: back.column(2).into_owned(),
        a_y: back.column(3).into_owned(),
        w,
        d_a,
    }
}

impl HelpVariables {
    /// Evaluates the help variables of every expert at log-amplitude `λ`.
    pub fn compute(eigs: &[EigenPair], y: &DVector<f64>, log_amplitude: f64) -> Result<Self> {
        let n = y.len();
        if eigs.is_empty() {
            return Err(SaberError::invalid("at least one expert is required"));
        }
        if let Some(e) = eigs.iter().find(|e| e.len() != n) {
            return Err(SaberError::dims(format!(
                "eigendecomposition of size {} for {} labels",
                e.len(),
                n
            )));
        }
        let cols: Vec<ExpertColumns> = eigs
            .par_iter()
            .map(|e| expert_columns(e, y, log_amplitude))
            .collect();
        let l = eigs.len();
        let gather = |f: &dyn Fn(&ExpertColumns) -> &DVector<f64>| {
            DMatrix::from_fn(n, l, |i, j| f(&cols[j])[i])
        };
        let hv = HelpVariables {
            w: gather(&|c| &c.w),
            loo_one: gather(&|c| &c.loo_one),
            loo_y: gather(&|c| &c.loo_y),
            a_one: gather(&|c| &c.a_one),
            a_y: gather(&|c| &c.a_y),
            d_a: gather(&|c| &c.d_a),
        };
        let finite = [&hv.w, &hv.loo_one, &hv.loo_y, &hv.a_one, &hv.a_y, &hv.d_a]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite || hv.w.iter().any(|w| !(*w > 0.0)) {
            return Err(SaberError::non_finite("help variables"));
        }
        Ok(hv)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn experts(&self) -> usize {
        self.w.ncols()
    }

    pub fn loo_residuals(&self, mean: f64) -> DMatrix<f64> {
        &self.loo_y - &self.loo_one * mean
    }

    /// The quantities of expert `j` with residuals at the given mean.
    pub fn column(&self, j: usize, mean: f64) -> LooQuantities {
        LooQuantities {
            w: self.w.column(j).into_owned(),
            loo_one: self.loo_one.column(j).into_owned(),
            loo_y: self.loo_y.column(j).into_owned(),
            loo_r: self.loo_y.column(j) - self.loo_one.column(j) * mean,
            a_one: self.a_one.column(j).into_owned(),
            a_y: self.a_y.column(j).into_owned(),
            d_a: self.d_a.column(j).into_owned(),
        }
    }

    fn check_weights(&self, p: &DMatrix<f64>) -> Result<()> {
        if p.shape() != self.w.shape() {
            return Err(SaberError::dims(format!(
                "weights are {}x{}, help variables {}x{}",
                p.nrows(),
                p.ncols(),
                self.n(),
                self.experts()
            )));
        }
        Ok(())
    }

    /// Weighted-mean closed form; `None` when every weight vanishes.
    pub fn optimal_mean(&self, p: &DMatrix<f64>) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..p.len() {
            let l1 = self.loo_one[i];
            let pw = p[i] * self.w[i];
            num += l1 * pw * self.loo_y[i];
            den += l1 * pw * l1;
        }
        (den > 0.0).then(|| num / den)
    }

    /// Weighted mean squared standardized residual, floored.
    pub fn optimal_noise(&self, p: &DMatrix<f64>, mean: f64) -> f64 {
        let mut num = 0.0;
        let mut total = 0.0;
        for i in 0..p.len() {
            let r = self.loo_y[i] - mean * self.loo_one[i];
            num += r * r * p[i] * self.w[i];
            total += p[i];
        }
        if total > 0.0 {
            (num / total).max(NOISE_FLOOR)
        } else {
            NOISE_FLOOR
        }
    }

    /// Weighted leave-one-out negative log predictive likelihood summed over
    /// experts (without the constant `log 2π` term).
    pub fn objective(&self, p: &DMatrix<f64>, shared: &SharedHyper) -> f64 {
        let s2 = shared.noise_scale;
        let ls2 = s2.ln();
        let mut acc = 0.0;
        for i in 0..p.len() {
            if p[i] == 0.0 {
                continue;
            }
            let r = self.loo_y[i] - shared.mean * self.loo_one[i];
            acc += 0.5 * p[i] * (r * r * self.w[i] / s2 - self.w[i].ln() + ls2);
        }
        acc
    }

    pub fn grad_mean(&self, p: &DMatrix<f64>, shared: &SharedHyper) -> f64 {
        let mut acc = 0.0;
        for i in 0..p.len() {
            let r = self.loo_y[i] - shared.mean * self.loo_one[i];
            acc -= p[i] * r * self.loo_one[i] * self.w[i];
        }
        acc / shared.noise_scale
    }

    pub fn grad_noise(&self, p: &DMatrix<f64>, shared: &SharedHyper) -> f64 {
        let s2 = shared.noise_scale;
        let mut acc = 0.0;
        for i in 0..p.len() {
            let r = self.loo_y[i] - shared.mean * self.loo_one[i];
            acc += 0.5 * p[i] * (1.0 / s2 - r * r * self.w[i] / (s2 * s2));
        }
        acc
    }

    /// Derivative of the summed objective with respect to `λ`.
    pub fn grad_log_amplitude(&self, p: &DMatrix<f64>, shared: &SharedHyper) -> f64 {
        let s2 = shared.noise_scale;
        let m = shared.mean;
        let mut acc = 0.0;
        for i in 0..p.len() {
            let r = self.loo_y[i] - m * self.loo_one[i];
            let ar = self.a_y[i] - m * self.a_one[i];
            acc += p[i] * self.d_a[i] * (s2 / self.w[i] + r * r) - 2.0 * r * p[i] * ar;
        }
        acc / (2.0 * s2)
    }
}

/// Leave-one-out quantities of one expert from its (pseudo) eigendecomposition.
pub fn loo_quantities(eig: &EigenPair, y: &DVector<f64>, hyper: &GprHyper) -> Result<LooQuantities> {
    let hv = HelpVariables::compute(std::slice::from_ref(eig), y, hyper.log_amplitude)?;
    Ok(hv.column(0, hyper.mean))
}

/// `Σ Pᵢ/2 [looRᵢ² Wᵢ/σε² − log Wᵢ + log σε²]`.
pub fn loo_objective(q: &LooQuantities, p: &DVector<f64>, noise_scale: f64) -> Result<f64> {
    if p.len() != q.w.len() {
        return Err(SaberError::dims("weight vector length"));
    }
    let ls2 = noise_scale.ln();
    let val: f64 = (0..p.len())
        .filter(|&i| p[i] != 0.0)
        .map(|i| 0.5 * p[i] * (q.loo_r[i] * q.loo_r[i] * q.w[i] / noise_scale - q.w[i].ln() + ls2))
        .sum();
    if val.is_finite() {
        Ok(val)
    } else {
        Err(SaberError::non_finite("leave-one-out objective"))
    }
}

/// Step schedule and stopping rule of the hyperparameter descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentOptions {
    pub initial_step: f64,
    pub decay: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Largest accepted change of any log-parameter in one step.
    pub max_step: f64,
    pub max_halvings: usize,
    /// Upper bound on `λ`. Beyond it the leave-one-out objective is nearly
    /// flat while the mean drifts without bound.
    pub max_log_amplitude: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            initial_step: 0.1,
            decay: 20.0,
            tolerance: 1e-4,
            max_iter: 200,
            max_step: 2.0,
            max_halvings: 40,
            max_log_amplitude: 10.0,
        }
    }
}

/// Outcome of a descent run.
#[derive(Clone, Debug)]
pub struct DescentReport {
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// Closed-form re-solve of mean and noise at fixed help variables.
pub fn closed_form_update(hv: &HelpVariables, p: &DMatrix<f64>, log_amplitude: f64, fallback_mean: f64) -> SharedHyper {
    let mean = hv.optimal_mean(p).unwrap_or(fallback_mean);
    SharedHyper {
        mean,
        log_amplitude,
        noise_scale: hv.optimal_noise(p, mean),
    }
}

/// Gradient descent on the shared `λ` of a set of experts with fixed
/// bandwidths; mean and noise are re-solved in closed form after each step.
pub fn descend_log_amplitude(
    eigs: &[EigenPair],
    y: &DVector<f64>,
    p: &DMatrix<f64>,
    start: SharedHyper,
    opts: &DescentOptions,
) -> Result<(SharedHyper, HelpVariables, DescentReport)> {
    let lam0 = start.log_amplitude.min(opts.max_log_amplitude);
    let mut hv = HelpVariables::compute(eigs, y, lam0)?;
    hv.check_weights(p)?;
    let mut cur = closed_form_update(&hv, p, lam0, start.mean);
    let mut obj = hv.objective(p, &cur);
    if !obj.is_finite() {
        return Err(SaberError::Divergence {
            message: "initial objective is not finite".into(),
            last_stable: None,
        });
    }
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    for t in 0..opts.max_iter {
        iterations = t + 1;
        let grad = hv.grad_log_amplitude(p, &cur);
        if !grad.is_finite() {
            return Err(SaberError::Divergence {
                message: "non-finite λ gradient".into(),
                last_stable: Some(cur),
            });
        }
        let eta = opts.initial_step / (1.0 + t as f64 / opts.decay);
        let mut step = (eta * grad).clamp(-opts.max_step, opts.max_step);
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            step = cur.log_amplitude - (cur.log_amplitude - step).min(opts.max_log_amplitude);
            if step.abs() < f64::EPSILON * (1.0 + cur.log_amplitude.abs()) {
                break;
            }
            let lam = cur.log_amplitude - step;
            if let Ok(trial_hv) = HelpVariables::compute(eigs, y, lam) {
                let trial = closed_form_update(&trial_hv, p, lam, cur.mean);
                let trial_obj = trial_hv.objective(p, &trial);
                if trial_obj.is_finite() && trial_obj <= obj {
                    accepted = Some((trial, trial_hv, trial_obj));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((next, next_hv, next_obj)) => {
                cur = next;
                hv = next_hv;
                obj = next_obj;
                trace.push(obj);
                if step.abs() < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent direction left at machine precision.
                converged = true;
                break;
            }
        }
    }
    Ok((
        cur,
        hv,
        DescentReport {
            iterations,
            converged,
            objective_trace: trace,
        },
    ))
}

/// Leave-one-out quantities computed from a dense inverse, together with
/// `D̄` and the scaled kernel `e^λ K`. Independent of the eigen route.
pub struct DenseLoo {
    pub loo: LooQuantities,
    pub dbar: DMatrix<f64>,
    pub scaled_kernel: DMatrix<f64>,
}

pub fn dense_loo(x: &DMatrix<f64>, noise_var: &DVector<f64>, y: &DVector<f64>, hyper: &GprHyper) -> Result<DenseLoo> {
    let n = y.len();
    let amp = hyper.log_amplitude.exp();
    let scaled_kernel = kernel_matrix(x, x, &hyper.bandwidth)? * amp;
    let mut d = scaled_kernel.clone();
    for i in 0..n {
        d[(i, i)] += noise_var[i];
    }
    let dbar = d
        .cholesky()
        .ok_or_else(|| SaberError::Singular("GPR covariance is not positive definite".into()))?
        .inverse();
    let w = dbar.diagonal();
    let ones = DVector::from_element(n, 1.0);
    let d1 = &dbar * &ones;
    let dy = &dbar * y;
    let ad = &dbar * &scaled_kernel;
    let a = &ad * &dbar;
    let loo_one = d1.component_div(&w);
    let loo_y = dy.component_div(&w);
    let loo_r = &loo_y - &loo_one * hyper.mean;
    let loo = LooQuantities {
        a_one: &a * &ones,
        a_y: &a * y,
        d_a: a.diagonal(),
        w,
        loo_one,
        loo_y,
        loo_r,
    };
    Ok(DenseLoo {
        loo,
        dbar,
        scaled_kernel,
    })
}

/// Generic gradient term for `A_p = D̄ (dD/dp) D̄` given `dD/dp`.
fn grad_from_derivative(
    dense: &DenseLoo,
    dd: &DMatrix<f64>,
    y: &DVector<f64>,
    p: &DVector<f64>,
    hyper: &GprHyper,
) -> f64 {
    let q = &dense.loo;
    let s2 = hyper.noise_scale;
    let resid = y.add_scalar(-hyper.mean);
    let dr = &dense.dbar * resid;
    let a_r = &dense.dbar * (dd * dr);
    let left = &dense.dbar * dd;
    let n = y.len();
    let mut acc = 0.0;
    for i in 0..n {
        let diag_a: f64 = left.row(i).iter().zip(dense.dbar.column(i).iter()).map(|(a, b)| a * b).sum();
        acc += -q.loo_r[i] * p[i] * a_r[i] / s2
            + 0.5 / s2 * p[i] * diag_a * (s2 / q.w[i] + q.loo_r[i] * q.loo_r[i]);
    }
    acc
}

/// Gradient of the weighted objective with respect to `λ` and each
/// log-bandwidth parameter, via dense matrices.
pub fn dense_gradient(data: &Dataset, p: &DVector<f64>, hyper: &GprHyper) -> Result<(f64, Vec<f64>)> {
    let v = data.noise_var_or_ones();
    let dense = dense_loo(&data.x, &v, &data.y, hyper)?;
    let d_lambda = grad_from_derivative(&dense, &dense.scaled_kernel, &data.y, p, hyper);
    let d = data.dim();
    let scales = hyper.bandwidth.scales(d)?;
    let bw_grads = match &hyper.bandwidth {
        Bandwidth::Isotropic { log_scale } => {
            let unit = Bandwidth::Isotropic { log_scale: 0.0 };
            let dist = squared_distances(&data.x, &data.x, &unit)?;
            let dd = dist.component_mul(&dense.scaled_kernel) * (-2.0 * log_scale).exp();
            vec![grad_from_derivative(&dense, &dd, &data.y, p, hyper)]
        }
        Bandwidth::Diagonal { .. } => (0..d)
            .map(|k| {
                let dist = coordinate_squared_distances(&data.x, &data.x, k);
                let dd = dist.component_mul(&dense.scaled_kernel) / (scales[k] * scales[k]);
                grad_from_derivative(&dense, &dd, &data.y, p, hyper)
            })
            .collect(),
    };
    Ok((d_lambda, bw_grads))
}

/// Objective value via the dense route with closed-form mean and noise.
fn dense_profile(data: &Dataset, p: &DVector<f64>, hyper: &GprHyper) -> Result<(GprHyper, f64)> {
    let v = data.noise_var_or_ones();
    let dense = dense_loo(&data.x, &v, &data.y, hyper)?;
    let hv = help_from_loo(&dense.loo);
    let pm = DMatrix::from_column_slice(p.len(), 1, p.as_slice());
    let shared = closed_form_update(&hv, &pm, hyper.log_amplitude, hyper.mean);
    let obj = hv.objective(&pm, &shared);
    Ok((GprHyper::new(shared, hyper.bandwidth.clone()), obj))
}

fn help_from_loo(q: &LooQuantities) -> HelpVariables {
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    HelpVariables {
        w: col(&q.w),
        loo_one: col(&q.loo_one),
        loo_y: col(&q.loo_y),
        a_one: col(&q.a_one),
        a_y: col(&q.a_y),
        d_a: col(&q.d_a),
    }
}

/// Which bandwidth parameters a tuning run may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    #[default]
    Fixed,
    Isotropic,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneOptions {
    pub mode: BandwidthMode,
    pub initial_log_amplitude: f64,
    pub descent: DescentOptions,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            mode: BandwidthMode::Fixed,
            initial_log_amplitude: 0.0,
            descent: DescentOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub hyper: GprHyper,
    pub objective: f64,
    pub report: DescentReport,
}

/// Tunes one expert on weighted data by leave-one-out descent.
pub fn tune_gpr(data: &Dataset, bw: &Bandwidth, p: &DVector<f64>, opts: &TuneOptions) -> Result<TuneOutcome> {
    if data.len() < 2 {
        return Err(SaberError::invalid("tuning needs at least two points"));
    }
    if p.len() != data.len() {
        return Err(SaberError::dims("weight vector length"));
    }
    if p.iter().any(|w| !(*w >= 0.0)) {
        return Err(SaberError::invalid("weights must be nonnegative"));
    }
    bw.validate()?;
    bw.check_dim(data.dim())?;
    let bw = match opts.mode {
        BandwidthMode::Diagonal => match bw {
            Bandwidth::Isotropic { log_scale } => Bandwidth::Diagonal {
                log_scales: vec![*log_scale; data.dim()],
            },
            other => other.clone(),
        },
        BandwidthMode::Isotropic => match bw {
            Bandwidth::Diagonal { log_scales } => Bandwidth::Isotropic {
                log_scale: log_scales.iter().sum::<f64>() / log_scales.len() as f64,
            },
            other => other.clone(),
        },
        BandwidthMode::Fixed => bw.clone(),
    };
    let start = SharedHyper {
        mean: data.y.mean(),
        log_amplitude: opts.initial_log_amplitude,
        noise_scale: 1.0,
    };
    let eig = expert_eigen(data, &bw)?;
    let pm = DMatrix::from_column_slice(p.len(), 1, p.as_slice());
    let (shared, _, report) = descend_log_amplitude(std::slice::from_ref(&eig), &data.y, &pm, start, &opts.descent)?;
    let hv = HelpVariables::compute(std::slice::from_ref(&eig), &data.y, shared.log_amplitude)?;
    let objective = hv.objective(&pm, &shared);
    let fixed = TuneOutcome {
        hyper: GprHyper::new(shared, bw),
        objective,
        report,
    };
    match opts.mode {
        BandwidthMode::Fixed => Ok(fixed),
        _ => joint_descent(data, p, fixed, &opts.descent),
    }
}

/// Pseudo-eigendecomposition of one expert's kernel on the training inputs.
pub fn expert_eigen(data: &Dataset, bw: &Bandwidth) -> Result<EigenPair> {
    let k = kernel_matrix(&data.x, &data.x, bw)?;
    pseudo_eigendecompose(&k, &data.noise_var_or_ones())
}

fn joint_descent(data: &Dataset, p: &DVector<f64>, start: TuneOutcome, opts: &DescentOptions) -> Result<TuneOutcome> {
    let mut cur = start.hyper;
    let mut obj = start.objective;
    let mut trace = start.report.objective_trace;
    let mut converged = false;
    let mut iterations = start.report.iterations;
    for t in 0..opts.max_iter {
        iterations += 1;
        let (g_lam, g_bw) = dense_gradient(data, p, &cur)?;
        if !g_lam.is_finite() || g_bw.iter().any(|g| !g.is_finite()) {
            return Err(SaberError::Divergence {
                message: "non-finite bandwidth gradient".into(),
                last_stable: Some(cur.shared()),
            });
        }
        let eta = opts.initial_step / (1.0 + t as f64 / opts.decay);
        let mut steps: Vec<f64> = std::iter::once(g_lam).chain(g_bw).map(|g| eta * g).collect();
        let biggest = steps.iter().fold(0.0f64, |a, s| a.max(s.abs()));
        if biggest > opts.max_step {
            let shrink = opts.max_step / biggest;
            steps.iter_mut().for_each(|s| *s *= shrink);
        }
        let base_bw = cur.bandwidth.log_params();
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            steps[0] = cur.log_amplitude - (cur.log_amplitude - steps[0]).min(opts.max_log_amplitude);
            let size = steps.iter().fold(0.0f64, |a, s| a.max(s.abs()));
            if size < 1e-14 {
                break;
            }
            let bw_params: Vec<f64> = base_bw.iter().zip(&steps[1..]).map(|(b, s)| b - s).collect();
            let trial = GprHyper {
                log_amplitude: cur.log_amplitude - steps[0],
                bandwidth: cur.bandwidth.with_log_params(&bw_params),
                ..cur.clone()
            };
            if let Ok((prof, trial_obj)) = dense_profile(data, p, &trial) {
                if trial_obj.is_finite() && trial_obj <= obj {
                    accepted = Some((prof, trial_obj, size));
                    break;
                }
            }
            steps.iter_mut().for_each(|s| *s *= 0.5);
        }
        match accepted {
            Some((next, next_obj, size)) => {
                cur = next;
                obj = next_obj;
                trace.push(obj);
                if size < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    Ok(TuneOutcome {
        hyper: cur,
        objective: obj,
        report: DescentReport {
            iterations,
            converged,
            objective_trace: trace,
        },
    })
}

/// Median pairwise Euclidean distance of the inputs (0 for fewer than two).
pub fn median_distance(x: &DMatrix<f64>) -> f64 {
    let unit = Bandwidth::Isotropic { log_scale: 0.0 };
    let d = match squared_distances(x, x, &unit) {
        Ok(d) => d,
        Err(_) => return 0.0,
    };
    let n = x.nrows();
    let mut all: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for j in 0..n {
        for i in 0..j {
            all.push(d[(i, j)].sqrt());
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let mid = all.len() / 2;
    *all.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Fits a global GPR: coarse isotropic scale grid around the median distance,
/// then descent on `λ` and the bandwidth under `mode`.
pub fn fit_global_gpr(data: &Dataset, mode: BandwidthMode, descent: &DescentOptions) -> Result<TuneOutcome> {
    if data.len() < 2 {
        return Err(SaberError::invalid("global fit needs at least two points"));
    }
    let med = median_distance(&data.x).max(1e-8);
    let p = DVector::from_element(data.len(), 1.0);
    let coarse = TuneOptions {
        mode: BandwidthMode::Fixed,
        initial_log_amplitude: 0.0,
        descent: descent.clone(),
    };
    let candidates: Vec<f64> = (0..11).map(|k| med * 10f64.powf(-2.0 + 0.25 * k as f64)).collect();
    let fits: Vec<Result<TuneOutcome>> = candidates
        .par_iter()
        .map(|s| tune_gpr(data, &Bandwidth::isotropic(*s), &p, &coarse))
        .collect();
    let mut best: Option<TuneOutcome> = None;
    for fit in fits.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    let best = best.ok_or_else(|| SaberError::Singular("no bandwidth candidate could be fitted".into()))?;
    if mode == BandwidthMode::Fixed {
        return Ok(best);
    }
    let opts = TuneOptions {
        mode,
        initial_log_amplitude: best.hyper.log_amplitude,
        descent: descent.clone(),
    };
    tune_gpr(data, &best.hyper.bandwidth, &p, &opts)
}

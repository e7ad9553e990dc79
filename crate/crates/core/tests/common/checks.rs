//! Worst-case deviations between library routes and independent dense or
//! refit computations. Each function returns the largest observed error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;
use saber::gpr::{
    closed_form_update, dense_gradient, expert_eigen, gpr_predict, gpr_predict_var, GprHyper, HelpVariables,
    SharedHyper,
};
use saber::kernels::{kernel_matrix, pseudo_eigendecompose};
use saber::mklr::{class_bound, mklr_gradient, mklr_objective, mklr_train, BoundSolver, GateHyper, GateKernel};
use saber::saber::geometric_factors;
use saber::{Bandwidth, Dataset};

/// Leave-one-out residuals and variances against 20 explicit refits. The
/// variance error is relative for variances above one.
pub fn loo_refit_error(hetero: bool, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(6..=40);
        let d = rng.random_range(1..=2);
        let data = regression(&mut rng, n, d, 3.0, hetero);
        let bw = Bandwidth::isotropic(rng.random_range(0.3..1.2));
        let hyper = gpr_hyper(&mut rng, bw);
        let eig = expert_eigen(&data, &hyper.bandwidth).unwrap();
        let hv = HelpVariables::compute(std::slice::from_ref(&eig), &data.y, hyper.log_amplitude).unwrap();
        let q = hv.column(0, hyper.mean);
        let v = data.noise_var_or_ones();
        for i in 0..n {
            let rest = data.without(i);
            let xi = data.x.rows(i, 1).into_owned();
            let mu = gpr_predict(&xi, &rest, &hyper).unwrap()[0];
            let var = gpr_predict_var(&xi, &rest, &hyper, Some(&DVector::from_element(1, v[i]))).unwrap()[0];
            worst = worst.max((q.loo_r[i] - (data.y[i] - mu)).abs());
            worst = worst.max((hyper.noise_scale / q.w[i] - var).abs() / var.max(1.0));
        }
    }
    worst
}

fn bank_instance(seed: u64, hetero: bool) -> (Dataset, Vec<saber::EigenPair>, DMatrix<f64>) {
    let mut rng = rng(seed);
    let n = rng.random_range(10..=25);
    let data = regression(&mut rng, n, 1, 4.0, hetero);
    let eigs = [0.3, 0.7, 1.5]
        .iter()
        .map(|s| expert_eigen(&data, &Bandwidth::isotropic(*s)).unwrap())
        .collect();
    let p = assignments(&mut rng, n, 3, 4.0);
    (data, eigs, p)
}

/// Relative error of the λ, mean and noise gradients of the mixture objective.
pub fn mixture_gradient_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..6 {
        let (data, eigs, p) = bank_instance(100 + seed, seed % 2 == 1);
        let mut r = rng(200 + seed);
        let shared = super::shared(&mut r, 0.5);
        let objective = |lam: f64, m: f64, s2: f64| {
            let hv = HelpVariables::compute(&eigs, &data.y, lam).unwrap();
            hv.objective(&p, &SharedHyper { mean: m, log_amplitude: lam, noise_scale: s2 })
        };
        let hv = HelpVariables::compute(&eigs, &data.y, shared.log_amplitude).unwrap();
        let n_lam = derivative(|l| objective(l, shared.mean, shared.noise_scale), shared.log_amplitude, 1e-4);
        let n_mean = derivative(|m| objective(shared.log_amplitude, m, shared.noise_scale), shared.mean, 1e-4);
        let n_noise = derivative(|s| objective(shared.log_amplitude, shared.mean, s), shared.noise_scale, 1e-5);
        worst = worst
            .max(relative_error(hv.grad_log_amplitude(&p, &shared), n_lam, 1e-6))
            .max(relative_error(hv.grad_mean(&p, &shared), n_mean, 1e-6))
            .max(relative_error(hv.grad_noise(&p, &shared), n_noise, 1e-6));
    }
    worst
}

/// Objective of one expert through the eigen route at fixed mean and noise.
fn eigen_objective(data: &Dataset, p: &DVector<f64>, hyper: &GprHyper) -> f64 {
    let eig = expert_eigen(data, &hyper.bandwidth).unwrap();
    let hv = HelpVariables::compute(std::slice::from_ref(&eig), &data.y, hyper.log_amplitude).unwrap();
    let pm = DMatrix::from_column_slice(p.len(), 1, p.as_slice());
    hv.objective(&pm, &hyper.shared())
}

/// Relative error of the dense amplitude and log-bandwidth gradients against
/// differences of the eigen-route objective, isotropic and diagonal.
pub fn gpr_gradient_error() -> f64 {
    let mut rng = rng(300);
    let mut worst = 0.0f64;
    for case in 0..8 {
        let diagonal = case % 2 == 1;
        let d = if diagonal { 2 } else { 1 + case % 3 / 2 };
        let n = rng.random_range(10..=25);
        let data = regression(&mut rng, n, d, 3.0, case % 4 >= 2);
        let bw = if diagonal {
            Bandwidth::diagonal(&[rng.random_range(0.4..1.2), rng.random_range(0.4..1.2)])
        } else {
            Bandwidth::isotropic(rng.random_range(0.4..1.2))
        };
        let hyper = gpr_hyper(&mut rng, bw);
        let p = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
        let (g_lam, g_bw) = dense_gradient(&data, &p, &hyper).unwrap();
        let n_lam = derivative(
            |l| eigen_objective(&data, &p, &GprHyper { log_amplitude: l, ..hyper.clone() }),
            hyper.log_amplitude,
            1e-4,
        );
        worst = worst.max(relative_error(g_lam, n_lam, 1e-6));
        let params = hyper.bandwidth.log_params();
        for (k, g) in g_bw.iter().enumerate() {
            let numeric = derivative(
                |t| {
                    let mut q = params.clone();
                    q[k] = t;
                    let h = GprHyper { bandwidth: hyper.bandwidth.with_log_params(&q), ..hyper.clone() };
                    eigen_objective(&data, &p, &h)
                },
                params[k],
                1e-4,
            );
            worst = worst.max(relative_error(*g, numeric, 1e-6));
        }
    }
    worst
}

/// Relative error of the gate gradient in `α` and `b`; components are
/// compared on a floor of 1e-3 times the largest component.
pub fn gate_gradient_error() -> f64 {
    let mut rng = rng(400);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let n = rng.random_range(6..=12);
        let l = rng.random_range(2..=4);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 3.0);
        let k = kernel_matrix(&x, &x, &Bandwidth::isotropic(0.8)).unwrap();
        let p = assignments(&mut rng, n, l, 3.0);
        let alpha = DMatrix::from_fn(n, l - 1, |_, _| rng.random::<f64>() - 0.5);
        let bias = DVector::from_fn(l - 1, |_, _| rng.random::<f64>() - 0.5);
        let reg = 0.05;
        let (g_alpha, g_bias) = mklr_gradient(&k, &alpha, &bias, &p, reg);
        let floor = 1e-3 * g_alpha.amax().max(g_bias.amax());
        for idx in 0..alpha.len() {
            let numeric = derivative(
                |t| {
                    let mut a = alpha.clone();
                    a[idx] = t;
                    mklr_objective(&k, &a, &bias, &p, reg)
                },
                alpha[idx],
                1e-4,
            );
            worst = worst.max(relative_error(g_alpha[idx], numeric, floor));
        }
        for c in 0..l - 1 {
            let numeric = derivative(
                |t| {
                    let mut b = bias.clone();
                    b[c] = t;
                    mklr_objective(&k, &alpha, &b, &p, reg)
                },
                bias[c],
                1e-4,
            );
            worst = worst.max(relative_error(g_bias[c], numeric, floor));
        }
    }
    worst
}

/// Largest numeric partial in the mean and noise scale at the closed forms.
pub fn stationarity_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..6 {
        let (data, eigs, p) = bank_instance(500 + seed, seed % 2 == 0);
        let lam = 0.3 * seed as f64 - 0.5;
        let hv = HelpVariables::compute(&eigs, &data.y, lam).unwrap();
        let s = closed_form_update(&hv, &p, lam, 0.0);
        let obj = |m: f64, s2: f64| hv.objective(&p, &SharedHyper { mean: m, log_amplitude: lam, noise_scale: s2 });
        let dm = derivative(|m| obj(m, s.noise_scale), s.mean, 1e-3);
        let ds = derivative(|v| obj(s.mean, v), s.noise_scale, 1e-3 * s.noise_scale);
        worst = worst.max(dm.abs()).max(ds.abs());
    }
    worst
}

/// Dense solve of `(B ⊗ [K;𝟙ᵀ][K,𝟙] + λ K ⊕ 0) Δ = (K R, 𝟙ᵀ(Q − P₋L))`.
fn dense_bound_step(
    k: &DMatrix<f64>,
    classes: usize,
    reg: f64,
    residual: &DMatrix<f64>,
    colsum: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let (n, m) = residual.shape();
    let b = class_bound(classes);
    let design = {
        let mut z = DMatrix::zeros(n + 1, n + 1);
        let kk = k * k;
        let k1 = k.column_sum();
        z.view_mut((0, 0), (n, n)).copy_from(&kk);
        for i in 0..n {
            z[(i, n)] = k1[i];
            z[(n, i)] = k1[i];
        }
        z[(n, n)] = n as f64;
        z
    };
    // unknowns ordered (α_1, b_1, α_2, b_2, …)
    let size = m * (n + 1);
    let mut h = b.kronecker(&design);
    for c in 0..m {
        for i in 0..n {
            for j in 0..n {
                h[(c * (n + 1) + i, c * (n + 1) + j)] += reg * k[(i, j)];
            }
        }
    }
    let kr = k * residual;
    let g = DVector::from_fn(size, |r, _| {
        let (c, i) = (r / (n + 1), r % (n + 1));
        if i < n {
            kr[(i, c)]
        } else {
            colsum[c]
        }
    });
    let sol = h.lu().solve(&g).expect("bound system is nonsingular");
    (
        DMatrix::from_fn(n, m, |i, c| sol[c * (n + 1) + i]),
        DVector::from_fn(m, |c, _| sol[c * (n + 1) + n]),
    )
}

/// Bound steps against the dense solve for n ≤ 30 and L ≤ 4, relative to
/// the step size when it exceeds one.
pub fn bound_step_error() -> f64 {
    let mut rng = rng(600);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(4..=30);
        let classes = rng.random_range(2..=4);
        let reg = rng.random_range(1e-3..0.1);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 5.0);
        let kernel = GateKernel::new(&x, &Bandwidth::isotropic(rng.random_range(0.3..0.6))).unwrap();
        let alpha = DMatrix::from_fn(n, classes - 1, |_, _| rng.random::<f64>() - 0.5);
        let diff = DMatrix::from_fn(n, classes - 1, |_, _| 0.4 * (rng.random::<f64>() - 0.5));
        let residual = &diff + &alpha * reg;
        let solver = BoundSolver::new(&kernel, classes, reg).unwrap();
        let (da, db) = solver.step(&residual, &alpha, reg);
        let (da_ref, db_ref) = dense_bound_step(&kernel.k, classes, reg, &residual, &diff.row_sum().transpose());
        let scale = da_ref.amax().max(db_ref.amax()).max(1.0);
        worst = worst.max(max_abs_diff(&da, &da_ref) / scale).max((&db - &db_ref).amax() / scale);
    }
    worst
}

/// Largest relative objective increase between gate iterations over 50
/// random instances.
pub fn gate_objective_increase() -> f64 {
    let mut rng = rng(700);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let n = rng.random_range(8..=40);
        let l = rng.random_range(2..=5);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 6.0);
        let p = assignments(&mut rng, n, l, 6.0);
        let hyper = GateHyper {
            bandwidth: Bandwidth::isotropic(rng.random_range(0.3..2.0)),
            reg: rng.random_range(1e-3..1e-1),
        };
        let (_, report) = mklr_train(&x, &p, &hyper).unwrap();
        for w in report.objective_trace.windows(2) {
            worst = worst.max((w[1] - w[0]) / w[0].abs().max(1.0));
        }
    }
    worst
}

/// `U(e^λΛ + I)⁻¹Uᵀ` against the explicit inverse of `e^λK + Σε²`, relative
/// to the inverse's largest entry when above one.
pub fn pseudo_eigen_error() -> f64 {
    let mut rng = rng(800);
    let mut worst = 0.0f64;
    for lam in [-1.0, 0.0, 2.0] {
        for _ in 0..10 {
            let n = rng.random_range(5..=30);
            let data = regression(&mut rng, n, 2, 3.0, true);
            let k = kernel_matrix(&data.x, &data.x, &Bandwidth::isotropic(rng.random_range(0.3..1.5))).unwrap();
            let v = data.noise_var.clone().unwrap();
            let eig = pseudo_eigendecompose(&k, &v).unwrap();
            let amp = f64::exp(lam);
            let g = eig.values.map(|l| 1.0 / (amp * l + 1.0));
            let left = eig.filtered(&g);
            let mut c = &k * amp;
            for i in 0..n {
                c[(i, i)] += v[i];
            }
            let right = c.try_inverse().unwrap();
            worst = worst.max(max_abs_diff(&left, &right) / right.amax().max(1.0));
        }
    }
    worst
}

/// Whether one-hot gates return the selected scale bit for bit, and the
/// deviation of a uniform two-expert gate from the geometric mean.
pub fn field_reduction() -> (bool, f64) {
    let scales = [0.3, 0.7, 1.9, 4.2];
    let shared = Bandwidth::diagonal(&[0.5, 2.0]);
    let exact = (0..scales.len()).all(|j| {
        let q = DMatrix::from_fn(1, scales.len(), |_, c| if c == j { 1.0 } else { 0.0 });
        let s = geometric_factors(&q, &scales).unwrap()[0];
        s == scales[j] && shared.scaled(s) == shared.scaled(scales[j])
    });
    let q = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
    let s = geometric_factors(&q, &[0.4, 2.5]).unwrap()[0];
    (exact, (s - 1.0).abs())
}

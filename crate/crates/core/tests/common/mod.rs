#![allow(dead_code)]

pub mod checks;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saber::gpr::{GprHyper, SharedHyper};
use saber::{Bandwidth, Dataset};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inputs in `[0, width]^d` with a smooth noisy target; optional noise
/// variances in `[0.5, 2]`.
pub fn regression(rng: &mut ChaCha8Rng, n: usize, d: usize, width: f64, hetero: bool) -> Dataset {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * width);
    let y = DVector::from_fn(n, |i, _| {
        let s: f64 = x.row(i).iter().map(|v| (1.7 * v).sin()).sum();
        s + 0.2 * (rng.random::<f64>() - 0.5)
    });
    let data = Dataset::new(x, y).unwrap();
    if hetero {
        let v = DVector::from_fn(n, |_, _| 0.5 + 1.5 * rng.random::<f64>());
        data.with_noise_var(v).unwrap()
    } else {
        data
    }
}

pub fn shared(rng: &mut ChaCha8Rng, log_amplitude: f64) -> SharedHyper {
    SharedHyper {
        mean: rng.random::<f64>() - 0.5,
        log_amplitude,
        noise_scale: 0.2 + 1.8 * rng.random::<f64>(),
    }
}

pub fn gpr_hyper(rng: &mut ChaCha8Rng, bw: Bandwidth) -> GprHyper {
    let lam = -1.0 + 3.0 * rng.random::<f64>();
    GprHyper::new(shared(rng, lam), bw)
}

/// Row-stochastic `n×l` matrix from softmaxed random logits.
pub fn assignments(rng: &mut ChaCha8Rng, n: usize, l: usize, spread: f64) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(n, l, |_, _| (spread * (rng.random::<f64>() - 0.5)).exp());
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Five-point central difference.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// Relative error with a floor on the denominator, so components that are
/// zero up to round-off compare on the scale of the whole gradient.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

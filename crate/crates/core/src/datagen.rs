//! Synthetic data: the one-dimensional toy problem and two 2-d fields.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, SaberError};
use crate::lls::FieldSpec;

/// Input domain of the toy problem.
pub const TOY_DOMAIN: (f64, f64) = (0.0, 10.0);
const CDF_GRID: usize = 10_000;

fn phase(x: f64, c1: f64) -> (f64, f64, f64) {
    let a = 2.0 * PI * (10.0 * c1 + 10.0);
    let u = c1 * x + 10.0;
    (a / u, -a * c1 / (u * u), 2.0 * a * c1 * c1 / (u * u * u))
}

/// Chirp-like target whose frequency grows towards small x for `c1 > 0`.
pub fn toy_f(x: f64, c1: f64) -> f64 {
    phase(x, c1).0.sin()
}

pub fn toy_f_derivative(x: f64, c1: f64) -> f64 {
    let (p, dp, _) = phase(x, c1);
    p.cos() * dp
}

pub fn toy_f_second_derivative(x: f64, c1: f64) -> f64 {
    let (p, dp, ddp) = phase(x, c1);
    -p.sin() * dp * dp + p.cos() * ddp
}

/// Normalized sawtooth density on `[0, 10]`.
pub fn toy_density(x: f64, c2: f64) -> f64 {
    if !(TOY_DOMAIN.0..=TOY_DOMAIN.1).contains(&x) {
        return 0.0;
    }
    let raw = 10.0 * (c2 + 1.0) - c2 * (x + 3.5).rem_euclid(10.0);
    raw / (100.0 + 50.0 * c2)
}

/// `log₁₀ v(x)`.
pub fn toy_noise_log10(x: f64, c3: f64) -> f64 {
    -2.0 + 0.5 * c3 * (1.0 - (2.0 * PI * (x - 5.0) / 5.0).cos())
}

pub fn toy_noise_var(x: f64, c3: f64) -> f64 {
    10f64.powf(toy_noise_log10(x, c3))
}

/// Toy generator settings. `c2` sets the density contrast (max/min = 1 + c2)
/// and `c3` the noise contrast in decades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub n: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(SaberError::Config("sample size must be positive".into()));
        }
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !v.is_finite() {
                return Err(SaberError::Config(format!("{name} must be finite")));
            }
        }
        if self.c1 < 0.0 {
            return Err(SaberError::Config("c1 must be non-negative".into()));
        }
        if self.c2 < 0.0 {
            return Err(SaberError::Config("c2 must be non-negative so the density stays positive".into()));
        }
        Ok(())
    }

    pub fn field(&self) -> FieldSpec {
        toy_field(self.c1, self.c2, self.c3)
    }
}

pub fn toy_field(c1: f64, c2: f64, c3: f64) -> FieldSpec {
    FieldSpec {
        name: "toy".into(),
        dim: 1,
        f: Arc::new(move |x| toy_f(x[0], c1)),
        curvature: Arc::new(move |x| toy_f_second_derivative(x[0], c1)),
        gradient: Arc::new(move |x| vec![toy_f_derivative(x[0], c1)]),
        density: Arc::new(move |x| toy_density(x[0], c2)),
        noise_var: Arc::new(move |x| toy_noise_var(x[0], c3)),
    }
}

/// Tabulated inverse CDF of a density on an interval.
#[derive(Clone, Debug)]
pub struct InverseCdf {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseCdf {
    pub fn new(density: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points < 2 || !(hi > lo) {
            return Err(SaberError::invalid("inverse CDF needs an interval and two grid points"));
        }
        let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&x| density(x).max(0.0)).collect();
        let mut cdf = vec![0.0; points];
        for i in 1..points {
            cdf[i] = cdf[i - 1] + 0.5 * (vals[i] + vals[i - 1]) * (grid[i] - grid[i - 1]);
        }
        let total = cdf[points - 1];
        if !(total > 0.0) || !total.is_finite() {
            return Err(SaberError::invalid("density has no mass on the interval"));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(InverseCdf { grid, cdf })
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.grid[k - 1] + t * (self.grid[k] - self.grid[k - 1])
    }
}

/// Draws `n` toy samples carrying the true target, noise variance and density.
pub fn toy_sample(cfg: &ToyConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let icdf = InverseCdf::new(|x| toy_density(x, cfg.c2), TOY_DOMAIN.0, TOY_DOMAIN.1, CDF_GRID)?;
    let xs: Vec<f64> = (0..cfg.n).map(|_| icdf.quantile(rng.random::<f64>())).collect();
    let f = DVector::from_iterator(cfg.n, xs.iter().map(|&x| toy_f(x, cfg.c1)));
    let v = DVector::from_iterator(cfg.n, xs.iter().map(|&x| toy_noise_var(x, cfg.c3)));
    let p = DVector::from_iterator(cfg.n, xs.iter().map(|&x| toy_density(x, cfg.c2)));
    let y = DVector::from_fn(cfg.n, |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        f[i] + v[i].sqrt() * z
    });
    Dataset::new(DMatrix::from_column_slice(cfg.n, 1, &xs), y)?
        .with_truth(f)?
        .with_noise_var(v)?
        .with_density(p)
}

pub const FIELD_NAMES: [&str; 2] = ["ridge", "two-bumps"];

/// Noise variance of the 2-d fields.
pub const FIELD_NOISE_VAR: f64 = 1e-3;

const RIDGE_CENTER: f64 = 0.35;
const RIDGE_WIDTH: f64 = 0.05;

/// Box `[x_lo, x_hi] × [y_lo, y_hi]` around the ridge's high-curvature band.
pub const RIDGE_BOX: [(f64, f64); 2] = [(0.25, 0.45), (0.0, 1.0)];

struct Bump {
    center: [f64; 2],
    width: f64,
    height: f64,
}

impl Bump {
    fn eval(&self, x: &[f64]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let w2 = self.width * self.width;
        let dx = [x[0] - self.center[0], x[1] - self.center[1]];
        let g = self.height * (-(dx[0] * dx[0] + dx[1] * dx[1]) / (2.0 * w2)).exp();
        let grad = [-g * dx[0] / w2, -g * dx[1] / w2];
        let mut h = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let delta = if a == b { 1.0 } else { 0.0 };
                h[a][b] = g * (dx[a] * dx[b] / (w2 * w2) - delta / w2);
            }
        }
        (g, grad, h)
    }
}

const BUMPS: [Bump; 2] = [
    Bump {
        center: [0.3, 0.3],
        width: 0.08,
        height: 1.0,
    },
    Bump {
        center: [0.7, 0.65],
        width: 0.12,
        height: 0.6,
    },
];

fn ridge_parts(x: &[f64]) -> (f64, f64, f64) {
    let u = x[0] - RIDGE_CENTER;
    let w2 = RIDGE_WIDTH * RIDGE_WIDTH;
    let g = (-u * u / (2.0 * w2)).exp();
    (g, -g * u / w2, g * (u * u / (w2 * w2) - 1.0 / w2))
}

/// Analytic 2-d fields on the unit square with uniform input density.
///
/// `ridge` is a Gaussian ridge along `x₁ = 0.35` plus a gentle linear slope in
/// `x₂`, so all curvature sits in a thin vertical band. `two-bumps` has two
/// Gaussian bumps of different widths.
pub fn synth_field_2d(name: &str) -> Result<FieldSpec> {
    let density: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> = Arc::new(|x: &[f64]| {
        if x.iter().all(|v| (0.0..=1.0).contains(v)) {
            1.0
        } else {
            0.0
        }
    });
    let noise: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> = Arc::new(|_: &[f64]| FIELD_NOISE_VAR);
    match name {
        "ridge" => Ok(FieldSpec {
            name: name.into(),
            dim: 2,
            f: Arc::new(|x| ridge_parts(x).0 + 0.5 * x[1]),
            curvature: Arc::new(|x| ridge_parts(x).2),
            gradient: Arc::new(|x| vec![ridge_parts(x).1, 0.5]),
            density,
            noise_var: noise,
        }),
        "two-bumps" => Ok(FieldSpec {
            name: name.into(),
            dim: 2,
            f: Arc::new(|x| BUMPS.iter().map(|b| b.eval(x).0).sum()),
            curvature: Arc::new(|x| {
                BUMPS
                    .iter()
                    .map(|b| {
                        let h = b.eval(x).2;
                        h[0][0] + h[0][1] + h[1][0] + h[1][1]
                    })
                    .sum()
            }),
            gradient: Arc::new(|x| {
                let mut g = vec![0.0; 2];
                for b in &BUMPS {
                    let gb = b.eval(x).1;
                    g[0] += gb[0];
                    g[1] += gb[1];
                }
                g
            }),
            density,
            noise_var: noise,
        }),
        other => Err(SaberError::Config(format!(
            "unknown field '{other}', expected one of {}",
            FIELD_NAMES.join(", ")
        ))),
    }
}

/// Labels `f(x) + ε` for the given inputs, carrying truth and noise variance.
pub fn label_field(spec: &FieldSpec, x: DMatrix<f64>, rng: &mut impl Rng) -> Result<Dataset> {
    if x.ncols() != spec.dim {
        return Err(SaberError::dims("inputs do not match field dimension"));
    }
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let f = DVector::from_iterator(n, rows.iter().map(|r| (spec.f)(r)));
    let v = DVector::from_iterator(n, rows.iter().map(|r| (spec.noise_var)(r)));
    let y = DVector::from_fn(n, |i, _| {
        let z: f64 = StandardNormal.sample(rng);
        f[i] + v[i].sqrt() * z
    });
    Dataset::new(x, y)?.with_truth(f)?.with_noise_var(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn toy_values() {
        // c1 = 0 gives sin(2π) at every x
        for x in [0.0, 3.3, 10.0] {
            assert!(toy_f(x, 0.0).abs() < 1e-12);
        }
        assert_relative_eq!(toy_f(0.0, 2.5), (2.0 * PI * 35.0 / 10.0).sin(), epsilon = 1e-12);
        assert_relative_eq!(toy_noise_log10(5.0, 1.0), -2.0, epsilon = 1e-12);
        assert_relative_eq!(toy_noise_log10(7.5, 1.0), -1.0, epsilon = 1e-12);
        assert_relative_eq!(toy_density(4.0, 0.0), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_settings() {
        assert!(toy_f(0.0, 3.5).abs() < 1e-12);
        for c1 in [0.0, 1.0, 3.5, 12.0] {
            assert!(toy_f(10.0, c1).abs() < 1e-12);
        }
        for x in [0.0, 2.2, 9.9] {
            assert_relative_eq!(toy_noise_var(x, 0.0), 1e-2, max_relative = 1e-14);
            assert_relative_eq!(toy_density(x, 0.0), 0.1, epsilon = 1e-15);
        }
        for c3 in [0.5, 2.0, 4.0] {
            assert_relative_eq!(toy_noise_log10(5.0, c3), -2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_inputs_pass_ks() {
        let n = 10_000;
        let d = toy_sample(&ToyConfig { c1: 3.5, c2: 0.0, c3: 0.0, n, seed: 11 }).unwrap();
        let mut xs: Vec<f64> = d.x.iter().map(|x| x / 10.0).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &u)| (u - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - u))
            .fold(0.0, f64::max);
        // asymptotic 1% critical value
        assert!(ks < 1.628 / (n as f64).sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn label_residual_variance_matches_noise() {
        let d = toy_sample(&ToyConfig { c1: 3.5, c2: 0.0, c3: 0.0, n: 100_000, seed: 3 }).unwrap();
        let f = d.f.as_ref().unwrap();
        let var = (&d.y - f).norm_squared() / d.len() as f64;
        assert!((var / 1e-2 - 1.0).abs() < 0.1, "residual variance {var}");
    }

    #[test]
    fn derivatives_match_differences() {
        let h = 1e-5;
        for &x in &[0.5, 2.0, 7.3] {
            let d1 = (toy_f(x + h, 3.5) - toy_f(x - h, 3.5)) / (2.0 * h);
            assert_relative_eq!(toy_f_derivative(x, 3.5), d1, epsilon = 1e-5, max_relative = 1e-6);
            let d2 = (toy_f_derivative(x + h, 3.5) - toy_f_derivative(x - h, 3.5)) / (2.0 * h);
            assert_relative_eq!(toy_f_second_derivative(x, 3.5), d2, epsilon = 1e-4, max_relative = 1e-6);
        }
    }

    #[test]
    fn density_is_normalized() {
        for c2 in [0.0, 0.5, 9.0] {
            let m = 100_000;
            let s: f64 = (0..m).map(|i| toy_density(10.0 * (i as f64 + 0.5) / m as f64, c2)).sum::<f64>() * 10.0 / m as f64;
            assert_relative_eq!(s, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn sample_is_seeded_and_in_domain() {
        let cfg = ToyConfig {
            c1: 3.5,
            c2: 0.5,
            c3: 1.0,
            n: 200,
            seed: 4,
        };
        let a = toy_sample(&cfg).unwrap();
        let b = toy_sample(&cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert!(a.x.iter().all(|x| (0.0..=10.0).contains(x)));
        let c = toy_sample(&ToyConfig { seed: 5, ..cfg.clone() }).unwrap();
        assert_ne!(a.x, c.x);
        assert!(toy_sample(&ToyConfig { c2: -0.5, ..cfg }).is_err());
    }

    #[test]
    fn sampler_follows_density() {
        let cfg = ToyConfig {
            c1: 0.0,
            c2: 4.0,
            c3: 0.0,
            n: 40_000,
            seed: 1,
        };
        let d = toy_sample(&cfg).unwrap();
        for (lo, hi) in [(0.0, 2.0), (6.0, 6.5), (6.5, 7.0), (8.0, 10.0)] {
            let frac = d.x.iter().filter(|x| (lo..hi).contains(*x)).count() as f64 / cfg.n as f64;
            let m = 2000;
            let mass: f64 = (0..m).map(|i| toy_density(lo + (hi - lo) * (i as f64 + 0.5) / m as f64, 4.0)).sum::<f64>() * (hi - lo) / m as f64;
            assert!((frac - mass).abs() < 0.01, "[{lo},{hi}) {frac} vs {mass}");
        }
    }

    #[test]
    fn field_derivatives() {
        let h = 1e-5;
        for name in FIELD_NAMES {
            let spec = synth_field_2d(name).unwrap();
            for x in [[0.31, 0.4], [0.5, 0.7], [0.69, 0.62]] {
                let g = (spec.gradient)(&x);
                for k in 0..2 {
                    let (mut a, mut b) = (x, x);
                    a[k] += h;
                    b[k] -= h;
                    let fd = ((spec.f)(&a) - (spec.f)(&b)) / (2.0 * h);
                    assert_relative_eq!(g[k], fd, epsilon = 1e-6);
                }
                // 𝟙ᵀH𝟙 is the second derivative along the diagonal
                let e = 1e-4;
                let fd2 = ((spec.f)(&[x[0] + e, x[1] + e]) - 2.0 * (spec.f)(&x) + (spec.f)(&[x[0] - e, x[1] - e])) / (e * e);
                assert_relative_eq!((spec.curvature)(&x), fd2, epsilon = 1e-3, max_relative = 1e-4);
            }
        }
        assert!(synth_field_2d("spiral").is_err());
    }

    #[test]
    fn ridge_curvature_sits_in_box() {
        let spec = synth_field_2d("ridge").unwrap();
        let on = (spec.curvature)(&[RIDGE_CENTER, 0.5]).abs();
        assert!(on > 100.0);
        assert!((spec.curvature)(&[0.8, 0.5]).abs() < 1e-6 * on);
        let outside = (spec.curvature)(&[RIDGE_BOX[0].1 + 0.1, 0.5]).abs();
        assert!(outside < 0.05 * on);
    }

    #[test]
    fn inverse_cdf_uniform() {
        let icdf = InverseCdf::new(|_| 1.0, 2.0, 4.0, 11).unwrap();
        assert_relative_eq!(icdf.quantile(0.0), 2.0);
        assert_relative_eq!(icdf.quantile(0.25), 2.5, epsilon = 1e-12);
        assert_relative_eq!(icdf.quantile(1.0), 4.0);
    }
}

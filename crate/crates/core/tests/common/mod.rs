//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here works with explicit inverses (LU via nalgebra) and
//! straightforward loops so it shares no numerical path with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vegcast_core::GridPanel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle independent of rand_distr.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn panel(name: &str, values: DMatrix<f64>, first_year: i32) -> GridPanel {
    let k = values.nrows();
    let n = values.ncols();
    GridPanel::new(
        name,
        (0..k).map(|i| (i as f64 * 0.05, 0.0)).collect(),
        (0..n as i32).map(|j| first_year + j).collect(),
        values,
    )
    .unwrap()
}

pub fn matern_oracle(d: f64, gamma: f64) -> f64 {
    let r = 5f64.sqrt() * d / gamma;
    (1.0 + r + r * r / 3.0) * (-r).exp()
}

pub fn matern_matrix(design: &DMatrix<f64>, gammas: &[f64]) -> DMatrix<f64> {
    let n = design.nrows();
    DMatrix::from_fn(n, n, |a, b| {
        (0..design.ncols())
            .map(|l| matern_oracle((design[(a, l)] - design[(b, l)]).abs(), gammas[l]))
            .product()
    })
}

pub fn matern_cross(design: &DMatrix<f64>, x: &[f64], gammas: &[f64]) -> DVector<f64> {
    DVector::from_fn(design.nrows(), |a, _| {
        (0..design.ncols())
            .map(|l| matern_oracle((design[(a, l)] - x[l]).abs(), gammas[l]))
            .product()
    })
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible oracle matrix")
}

/// Closed-form quantities of one series under `K~`, from an explicit inverse.
#[derive(Debug, Clone, Copy)]
pub struct DenseFit {
    pub mu: f64,
    pub sigma2: f64,
    pub mean: f64,
    pub kstar: f64,
}

impl DenseFit {
    pub fn scale(&self) -> f64 {
        self.sigma2 * self.kstar
    }
}

pub fn dense_fit(ktilde: &DMatrix<f64>, y: &DVector<f64>, k: &DVector<f64>, nugget: f64) -> DenseFit {
    let n = y.len();
    let inv = inverse(ktilde);
    let one = DVector::from_element(n, 1.0);
    let a = (one.transpose() * &inv * &one)[(0, 0)];
    let mu = (one.transpose() * &inv * y)[(0, 0)] / a;
    let r = y - &one * mu;
    let sigma2 = (r.transpose() * &inv * &r)[(0, 0)] / (n as f64 - 1.0);
    let mean = mu + (k.transpose() * &inv * &r)[(0, 0)];
    // K* is the reciprocal of the new point's precision once the constant
    // mean is profiled out of the joint inverse. This avoids the cancellation
    // in 1 + eta - k'K~^-1 k.
    let mut joint = DMatrix::zeros(n + 1, n + 1);
    joint.view_mut((0, 0), (n, n)).copy_from(ktilde);
    joint.view_mut((0, n), (n, 1)).copy_from(k);
    joint.view_mut((n, 0), (1, n)).copy_from(&k.transpose());
    joint[(n, n)] = 1.0 + nugget;
    let p = inverse(&joint);
    let p1 = p.column_sum();
    let kstar = 1.0 / (p[(n, n)] - p1[n] * p1[n] / p1.sum());
    DenseFit {
        mu,
        sigma2,
        mean,
        kstar,
    }
}

/// Integrated log likelihood from the dense formula, for one series.
pub fn dense_integrated_lml(ktilde: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let inv = inverse(ktilde);
    let one = DVector::from_element(y.len(), 1.0);
    let a = (one.transpose() * &inv * &one)[(0, 0)];
    let mu = (one.transpose() * &inv * y)[(0, 0)] / a;
    let r = y - &one * mu;
    let s2 = (r.transpose() * &inv * &r)[(0, 0)];
    let h = (n - 1.0) / 2.0;
    -h * (2.0 * std::f64::consts::PI).ln() - 0.5 * ktilde.determinant().ln() - 0.5 * a.ln()
        + ln_gamma_oracle(h)
        - h * (s2 / 2.0).ln()
}

/// `ln Gamma(x)` for half-integers `x > 0`, by the recursion.
pub fn ln_gamma_oracle(x: f64) -> f64 {
    let twice = (2.0 * x).round() as i64;
    assert!((2.0 * x - twice as f64).abs() < 1e-12 && twice > 0);
    let (mut acc, mut z) = if twice % 2 == 0 {
        (0.0, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    while z < x - 1e-9 {
        acc += z.ln();
        z += 1.0;
    }
    acc
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Ordinary least squares by normal equations with an explicit inverse.
pub fn ols_oracle(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xtx = x.transpose() * x;
    inverse(&xtx) * x.transpose() * y
}

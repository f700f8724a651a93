mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use vegcast_core::hyperopt::{
    estimate_covariate_params, estimate_gppgp_params, subsample, CvConfig, SearchStrategy,
};
use vegcast_core::kernel::KernelFamily;

/// Validation MSE for a one-covariate G-PPGP, computed with explicit inverses.
fn cv_mse_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, nu: usize, gamma: f64, eta: f64) -> f64 {
    let (k, n) = (x.nrows(), x.ncols());
    let m = n - nu;
    let train = x.columns(0, m);
    let (lo, hi) = (train.min(), train.max());
    let s = |v: f64| (v - lo) / (hi - lo);
    let mut sse = 0.0;
    for i in 0..k {
        let d = DMatrix::from_fn(m, 1, |t, _| s(x[(i, t)]));
        let kt = matern_matrix(&d, &[gamma]) + DMatrix::identity(m, m) * eta;
        let yi = DVector::from_fn(m, |t, _| y[(i, t)]);
        for t in m..n {
            let kx = matern_cross(&d, &[s(x[(i, t)])], &[gamma]);
            let fit = dense_fit(&kt, &yi, &kx, eta);
            sse += (fit.mean - y[(i, t)]).powi(2);
        }
    }
    sse / (k * nu) as f64
}

fn config(s: usize, nu: usize, seed: u64) -> CvConfig {
    CvConfig {
        subsample_size: s,
        validation_years: nu,
        seed,
        search: SearchStrategy::default(),
    }
}

#[test]
fn paper_configurations_accepted() {
    let g = CvConfig::gppgp_default();
    assert_eq!((g.subsample_size, g.validation_years), (500, 2));
    let p = CvConfig::precip_default();
    let v = CvConfig::vpd_default();
    assert_eq!((p.subsample_size, p.validation_years), (10, 2));
    assert_eq!((v.subsample_size, v.validation_years), (10, 3));
}

#[test]
fn subsample_is_reproducible_and_without_replacement() {
    let a = subsample(1000, 50, 9);
    assert_eq!(a, subsample(1000, 50, 9));
    assert_ne!(a, subsample(1000, 50, 10));
    let mut d = a.clone();
    d.dedup();
    assert_eq!(d.len(), 50);
    assert!(a.iter().all(|&i| i < 1000));
    assert_eq!(subsample(7, 500, 1), (0..7).collect::<Vec<_>>());
}

#[test]
fn subsample_is_roughly_uniform() {
    let mut hits = vec![0usize; 20];
    for seed in 0..2000 {
        for i in subsample(20, 5, seed) {
            hits[i] += 1;
        }
    }
    // Expected 500 each; binomial sd is about 19.
    assert!(hits.iter().all(|&h| (400..=600).contains(&h)), "{hits:?}");
}

#[test]
fn validation_too_long_is_a_config_error() {
    let mut r = rng(1);
    let x = panel("p", DMatrix::from_fn(4, 5, |_, _| normal(&mut r)), 2000);
    let y = panel("y", DMatrix::from_fn(4, 5, |_, _| normal(&mut r)), 2000);
    assert!(estimate_gppgp_params(&[x], &y, &config(4, 3, 0)).is_err());
}

#[test]
fn smooth_noise_free_outputs_select_small_nugget() {
    let mut r = rng(31);
    let (k, n, nu) = (20, 12, 2);
    let x = DMatrix::from_fn(k, n, |_, _| r.random::<f64>());
    let y = x.map(|v| (3.0 * v).sin() + 0.5 * v);
    let est = estimate_gppgp_params(&[panel("p", x.clone(), 2000)], &panel("y", y.clone(), 2000), &config(k, nu, 0))
        .unwrap();
    let (g, eta) = (est.params.gammas[0], est.params.nugget);
    assert!(eta <= 1e-3, "eta {eta}");
    assert!(cv_mse_oracle(&x, &y, nu, g, 1e-6) < cv_mse_oracle(&x, &y, nu, g, 10.0));
    // K~ is badly conditioned at this nugget, so only round-off agreement is expected.
    let o = cv_mse_oracle(&x, &y, nu, g, eta);
    assert!((est.objective - o).abs() <= 1e-6 * est.objective.max(1e-12), "{} vs {o} at g {g} eta {eta}", est.objective);
}

#[test]
fn pure_noise_nugget_close_to_grid_oracle() {
    let mut r = rng(32);
    let (k, n, nu) = (40, 12, 2);
    let x = DMatrix::from_fn(k, n, |_, _| r.random::<f64>());
    let y = DMatrix::from_fn(k, n, |_, _| normal(&mut r));
    let est = estimate_gppgp_params(&[panel("p", x.clone(), 2000)], &panel("y", y.clone(), 2000), &config(k, nu, 0))
        .unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for a in 0..=16 {
        for b in 0..=28 {
            let g = 10f64.powf(-2.0 + 0.25 * a as f64);
            let eta = 10f64.powf(-6.0 + 0.25 * b as f64);
            let v = cv_mse_oracle(&x, &y, nu, g, eta);
            if v < best.0 - 1e-12 || ((v - best.0).abs() <= 1e-12 && eta > best.1) {
                best = (v, eta);
            }
        }
    }
    let ratio = est.params.nugget / best.1;
    assert!((1.0 / 3.0..=3.0).contains(&ratio), "eta {} vs oracle {}", est.params.nugget, best.1);
    assert!(est.objective <= best.0 + 1e-9);
}

#[test]
fn estimates_are_deterministic_and_beat_every_grid_node() {
    let mut r = rng(33);
    let x1 = DMatrix::from_fn(30, 9, |_, _| normal(&mut r));
    let x2 = DMatrix::from_fn(30, 9, |_, _| normal(&mut r));
    let y = DMatrix::from_fn(30, 9, |i, t| 0.3 * x1[(i, t)] - 0.2 * x2[(i, t)] + 0.1 * normal(&mut r));
    let covs = [panel("p", x1, 2000), panel("v", x2, 2000)];
    let out = panel("y", y, 2000);
    let cfg = config(12, 2, 5);
    let a = estimate_gppgp_params(&covs, &out, &cfg).unwrap();
    let b = estimate_gppgp_params(&covs, &out, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.grid_objectives.len(), 8 * 8 * 8);
    let min = a.grid_objectives.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(a.objective <= min);

    let grid = CvConfig {
        search: SearchStrategy::GridSearch { levels: 6 },
        ..cfg
    };
    let g = estimate_gppgp_params(&covs, &out, &grid).unwrap();
    let gmin = g.grid_objectives.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(g.objective, gmin);
}

#[test]
fn alternating_series_gives_negative_rho() {
    let mut r = rng(34);
    let v = DMatrix::from_fn(15, 10, |_, t| if t % 2 == 0 { 1.0 } else { -1.0 } + 0.05 * normal(&mut r));
    let est = estimate_covariate_params(&panel("precip", v, 2000), KernelFamily::Ar1Power, &CvConfig::precip_default())
        .unwrap();
    assert!(est.params.value < -0.5, "rho {}", est.params.value);
}

#[test]
fn constant_series_breaks_ties_toward_zero_rho() {
    let v = DMatrix::from_element(12, 8, 4.2);
    let est = estimate_covariate_params(&panel("precip", v, 2000), KernelFamily::Ar1Power, &CvConfig::precip_default())
        .unwrap();
    assert!(est.objective < 1e-20);
    assert_eq!(est.params.value, 0.0);
    assert!((est.params.nugget - 10.0).abs() < 1e-9);
}

#[test]
fn covariate_estimates_are_deterministic() {
    let mut r = rng(35);
    let v = DMatrix::from_fn(40, 10, |_, _| normal(&mut r));
    let p = panel("vpd", v, 2000);
    let a = estimate_covariate_params(&p, KernelFamily::Matern25, &CvConfig::vpd_default()).unwrap();
    let b = estimate_covariate_params(&p, KernelFamily::Matern25, &CvConfig::vpd_default()).unwrap();
    assert_eq!(a, b);
    let min = a.grid_objectives.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(a.objective <= min);
}

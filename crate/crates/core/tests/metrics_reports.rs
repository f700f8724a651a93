mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use vegcast_core::metrics::{coverage_and_length, gross_series, gross_totals, rmse, EvalReport, MethodResult};

fn result(method: &str, truth: DMatrix<f64>, mean: DMatrix<f64>, interval: Option<(DMatrix<f64>, DMatrix<f64>)>) -> MethodResult {
    let years = (0..truth.ncols() as i32).map(|j| 2013 + j).collect();
    MethodResult {
        method: method.into(),
        variable: "ndvi".into(),
        years,
        truth,
        mean,
        interval,
    }
}

#[test]
fn report_rows_per_year_plus_pooled() {
    let truth = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    let mean = DMatrix::from_row_slice(3, 2, &[0.1, 0.1, 0.3, 0.3, 0.5, 0.5]);
    let lo = &mean - DMatrix::from_element(3, 2, 0.05);
    let hi = &mean + DMatrix::from_element(3, 2, 0.05);
    let report = EvalReport::from_results(&[
        result("gppgp", truth.clone(), mean.clone(), Some((lo, hi))),
        result("location_mean", truth, mean, None),
    ])
    .unwrap();
    assert_eq!(report.rows.len(), 6);
    let mut buf = Vec::new();
    report.write_report_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,variable,year,rmse,p95,l95,gross_true,gross_pred,residual");
    assert_eq!(lines[1], "gppgp,ndvi,2013,0,1,0.1,0.9,0.9,0");
    assert!(lines[3].starts_with("gppgp,ndvi,all,0.07071067812,0.5,0.1,,,"));
    assert!(lines[6].starts_with("location_mean,ndvi,all,0.07071067812,,,"));

    let mut buf = Vec::new();
    report.write_gross_csv(&mut buf, "ndvi").unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("method,year,gross_true,gross_pred,residual\ngppgp,2013,"));
    assert_eq!(text.lines().count(), 5);
    let g = report.gross_rmse("gppgp", "ndvi").unwrap();
    assert!((g - (0.3f64.powi(2) / 2.0).sqrt()).abs() < 1e-12);
}

#[test]
fn shape_and_interval_errors() {
    let a = DMatrix::zeros(2, 2);
    assert!(rmse(&a, &DMatrix::zeros(2, 3)).is_err());
    let lo = DMatrix::from_element(2, 2, 1.0);
    assert!(coverage_and_length(&a, &lo, &a).is_err());
    assert!(gross_series(&a, &a, &[2000]).is_err());
}

proptest! {
    #[test]
    fn rmse_of_constant_shift(seed in any::<u64>(), c in -5.0f64..5.0, k in 1usize..6, n in 1usize..5) {
        let mut r = rng(seed);
        let a = DMatrix::from_fn(k, n, |_, _| normal(&mut r));
        let b = a.map(|v| v + c);
        prop_assert!((rmse(&a, &b).unwrap() - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn coverage_ignores_grid_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (k, n) = (7, 3);
        let y = DMatrix::from_fn(k, n, |_, _| normal(&mut r));
        let c = DMatrix::from_fn(k, n, |_, _| normal(&mut r));
        let w = DMatrix::from_fn(k, n, |_, _| normal(&mut r).abs());
        let lo = &c - &w;
        let hi = &c + &w;
        let perm = [6usize, 3, 1, 0, 5, 2, 4];
        let pm = |m: &DMatrix<f64>| DMatrix::from_fn(k, n, |i, j| m[(perm[i], j)]);
        let a = coverage_and_length(&y, &lo, &hi).unwrap();
        let b = coverage_and_length(&pm(&y), &pm(&lo), &pm(&hi)).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert!((a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn gross_residual_is_sum_of_cell_residuals(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (k, n) = (5, 4);
        let y = DMatrix::from_fn(k, n, |_, _| normal(&mut r));
        let p = DMatrix::from_fn(k, n, |_, _| normal(&mut r));
        let rows = gross_series(&y, &p, &[1, 2, 3, 4]).unwrap();
        let diff = gross_totals(&(&y - &p));
        for (row, d) in rows.iter().zip(diff) {
            prop_assert!((row.residual - d).abs() < 1e-12);
            prop_assert_eq!(row.residual, row.gross_true - row.gross_pred);
        }
    }
}

//! Reference forecasters: per-grid linear model on covariates, location
//! mean, previous year, per-grid AR(1) and per-grid linear time trend.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ols::{ols, with_intercept};
use crate::panel::GridPanel;
use crate::ppgp::PredictiveT;

/// Per-grid predictive forecasts of a regression baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineForecast {
    pub predictive: Vec<PredictiveT>,
    /// Grids whose design was singular and fell back to the location mean.
    pub fallback_grids: Vec<usize>,
}

impl BaselineForecast {
    pub fn means(&self) -> Vec<f64> {
        self.predictive.iter().map(|p| p.mean).collect()
    }
}

fn check_target(panel: &GridPanel, target_year: i32) -> Result<()> {
    if target_year <= panel.last_year() {
        return Err(Error::Domain(format!(
            "target year {target_year} must follow the last training year {}",
            panel.last_year()
        )));
    }
    Ok(())
}

/// Intercept-only regression forecast: sample mean with a `t_{n-1}` interval.
fn intercept_only(y: &DVector<f64>) -> PredictiveT {
    let n = y.len();
    let mean = y.mean();
    let var = if n > 1 {
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    PredictiveT {
        mean,
        scale: var * (1.0 + 1.0 / n as f64),
        dof: n.saturating_sub(1).max(1),
    }
}

/// Per-grid historical average.
pub fn location_mean(panel: &GridPanel, target_year: i32) -> Result<Vec<f64>> {
    check_target(panel, target_year)?;
    Ok(panel.values().row_iter().map(|r| r.mean()).collect())
}

/// Per-grid value of the last training year.
pub fn previous_year(panel: &GridPanel, target_year: i32) -> Result<Vec<f64>> {
    check_target(panel, target_year)?;
    Ok(panel.values().column(panel.n() - 1).iter().copied().collect())
}

/// Per-grid least squares of `y(t)` on `y(t-1)` with a regression prediction
/// interval on `m - 2` degrees of freedom, `m` being the number of lag pairs.
pub fn ar1_baseline(panel: &GridPanel, target_year: i32) -> Result<BaselineForecast> {
    check_target(panel, target_year)?;
    if target_year != panel.last_year() + 1 {
        return Err(Error::Domain(format!(
            "AR(1) baseline forecasts one year ahead; target {target_year} is not {}",
            panel.last_year() + 1
        )));
    }
    let years = panel.years();
    let pairs: Vec<usize> = (1..panel.n()).filter(|&j| years[j] - years[j - 1] == 1).collect();
    if pairs.len() < 3 {
        return Err(Error::Shape(format!(
            "AR(1) baseline needs at least 3 consecutive-year pairs, got {}",
            pairs.len()
        )));
    }
    let results: Vec<(PredictiveT, bool)> = (0..panel.k())
        .into_par_iter()
        .map(|i| {
            let y = panel.series(i);
            let lag = DVector::from_iterator(pairs.len(), pairs.iter().map(|&j| y[j - 1]));
            let cur = DVector::from_iterator(pairs.len(), pairs.iter().map(|&j| y[j]));
            let x = with_intercept(pairs.len(), &[lag]);
            match ols(&x, &cur) {
                Some(fit) => {
                    let z = [1.0, y[panel.n() - 1]];
                    let pred = PredictiveT {
                        mean: fit.predict(&z),
                        scale: fit.sigma2() * (1.0 + fit.leverage(&z)),
                        dof: fit.residual_dof(),
                    };
                    (pred, false)
                }
                None => (intercept_only(&y), true),
            }
        })
        .collect();
    Ok(collect_forecast(results))
}

fn collect_forecast(results: Vec<(PredictiveT, bool)>) -> BaselineForecast {
    let fallback_grids = results
        .iter()
        .enumerate()
        .filter_map(|(i, (_, f))| f.then_some(i))
        .collect::<Vec<_>>();
    if !fallback_grids.is_empty() {
        log::warn!(
            "{} grids fell back to the location mean (singular design)",
            fallback_grids.len()
        );
    }
    BaselineForecast {
        predictive: results.into_iter().map(|(p, _)| p).collect(),
        fallback_grids,
    }
}

/// Pixel-wise linear model `y = b0 + sum_l b_l x_l` fitted per grid by OLS and
/// evaluated at `new_covariates` (`k x p`, one row per grid).
pub fn fit_predict_lm(
    covariates: &[GridPanel],
    outputs: &GridPanel,
    new_covariates: &DMatrix<f64>,
) -> Result<BaselineForecast> {
    let p = covariates.len();
    for c in covariates {
        c.check_same_layout(outputs)?;
    }
    if new_covariates.nrows() != outputs.k() || new_covariates.ncols() != p {
        return Err(Error::Shape(format!(
            "new covariates are {}x{}, expected {}x{p}",
            new_covariates.nrows(),
            new_covariates.ncols(),
            outputs.k()
        )));
    }
    let n = outputs.n();
    if n < p + 2 {
        return Err(Error::Shape(format!(
            "linear model with {} coefficients needs at least {} years, got {n}",
            p + 1,
            p + 2
        )));
    }
    let results: Vec<(PredictiveT, bool)> = (0..outputs.k())
        .into_par_iter()
        .map(|i| {
            let y = outputs.series(i);
            let cols: Vec<DVector<f64>> = covariates.iter().map(|c| c.series(i)).collect();
            let x = with_intercept(n, &cols);
            match ols(&x, &y) {
                Some(fit) => {
                    let mut z = vec![1.0];
                    z.extend(new_covariates.row(i).iter());
                    let pred = PredictiveT {
                        mean: fit.predict(&z),
                        scale: fit.sigma2() * (1.0 + fit.leverage(&z)),
                        dof: fit.residual_dof(),
                    };
                    (pred, false)
                }
                None => (intercept_only(&y), true),
            }
        })
        .collect();
    Ok(collect_forecast(results))
}

/// Per-grid straight-line trend in the year label, extrapolated to `target_year`.
/// Used to forecast covariates for the linear-model pipeline.
pub fn linear_trend_forecast(panel: &GridPanel, target_year: i32) -> Result<BaselineForecast> {
    check_target(panel, target_year)?;
    if panel.n() < 3 {
        return Err(Error::Shape(format!(
            "linear trend needs at least 3 years, got {}",
            panel.n()
        )));
    }
    let origin = panel.years()[0] as f64;
    let t = DVector::from_iterator(panel.n(), panel.years().iter().map(|&y| y as f64 - origin));
    let x = with_intercept(panel.n(), &[t]);
    let z = [1.0, target_year as f64 - origin];
    let results = (0..panel.k())
        .into_par_iter()
        .map(|i| {
            let y = panel.series(i);
            match ols(&x, &y) {
                Some(fit) => (
                    PredictiveT {
                        mean: fit.predict(&z),
                        scale: fit.sigma2() * (1.0 + fit.leverage(&z)),
                        dof: fit.residual_dof(),
                    },
                    false,
                ),
                None => (intercept_only(&y), true),
            }
        })
        .collect();
    Ok(collect_forecast(results))
}

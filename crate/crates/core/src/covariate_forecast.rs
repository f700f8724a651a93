//! One-year-ahead covariate forecasts: shared-design PPGP per variable, and
//! for precipitation an optional blend with a within-year spatial regression
//! on the first `r` months of the target year.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fmt::float10;
use crate::hyperopt::CovariateParams;
use crate::metrics::csv_err;
use crate::ols::{ols, with_intercept};
use crate::panel::GridPanel;
use crate::ppgp::{fit_ppgp_shared, PredictiveT};

/// Clip range of the blend weight.
pub const WEIGHT_BOUNDS: (f64, f64) = (0.001, 0.999);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateMethod {
    Ppgp,
    Spatial,
    Weighted,
}

impl CovariateMethod {
    pub fn name(self) -> &'static str {
        match self {
            CovariateMethod::Ppgp => "ppgp",
            CovariateMethod::Spatial => "spatial",
            CovariateMethod::Weighted => "weighted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateForecast {
    pub variable: String,
    pub year: i32,
    pub coords: Vec<(f64, f64)>,
    pub means: Vec<f64>,
    /// Predictive distributions; `None` for point-only methods.
    pub predictive: Option<Vec<PredictiveT>>,
    pub method: CovariateMethod,
    pub params: Option<CovariateParams>,
    pub weight: Option<f64>,
}

/// PPGP forecast of the year after the panel's last year.
pub fn forecast_covariate(panel: &GridPanel, params: &CovariateParams) -> Result<CovariateForecast> {
    if panel.n() < 3 {
        return Err(Error::Shape(format!(
            "covariate forecast needs at least 3 years, got {}",
            panel.n()
        )));
    }
    let kernel = params.kernel()?;
    let model = fit_ppgp_shared(panel, &kernel, params.nugget)?;
    let year = panel.last_year() + 1;
    let predictive = model.predict(year)?;
    Ok(CovariateForecast {
        variable: panel.variable().to_string(),
        year,
        coords: panel.coords().to_vec(),
        means: predictive.iter().map(|p| p.mean).collect(),
        predictive: Some(predictive),
        method: CovariateMethod::Ppgp,
        params: Some(*params),
        weight: None,
    })
}

/// `x = b0 + b1 * x_r` across grids, with coefficients averaged over years.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialRegression {
    pub r: u8,
    /// Per training year, `None` when the regressor had no spread.
    pub per_year: Vec<(i32, Option<(f64, f64)>)>,
    pub b0: f64,
    pub b1: f64,
}

impl SpatialRegression {
    pub fn predict(&self, partial: &[f64]) -> Vec<f64> {
        partial.iter().map(|x| self.b0 + self.b1 * x).collect()
    }
}

fn check_r(r: u8) -> Result<()> {
    if !(1..=7).contains(&r) {
        return Err(Error::Domain(format!("months observed r must be in 1..7, got {r}")));
    }
    Ok(())
}

/// Per-year OLS of `target` on `partial` across grids, averaged over the
/// years where the regressor varies.
pub fn fit_spatial_regression(
    target: &GridPanel,
    partial: &GridPanel,
    r: u8,
) -> Result<SpatialRegression> {
    check_r(r)?;
    partial.check_same_layout(target)?;
    let k = target.k();
    if k < 3 {
        return Err(Error::Shape(format!("spatial regression needs k >= 3, got {k}")));
    }
    let mut per_year = Vec::with_capacity(target.n());
    let (mut s0, mut s1, mut used) = (0.0, 0.0, 0usize);
    for (j, &year) in target.years().iter().enumerate() {
        let x = partial.values().column(j).clone_owned();
        let y = target.values().column(j).clone_owned();
        let coef = ols(&with_intercept(k, &[x]), &y).map(|f| (f.coef[0], f.coef[1]));
        match coef {
            Some((b0, b1)) => {
                s0 += b0;
                s1 += b1;
                used += 1;
            }
            None => log::warn!("year {year}: regressor has no spatial variance, excluded"),
        }
        per_year.push((year, coef));
    }
    if used == 0 {
        return Err(Error::Estimation(
            "spatial regression: no year with spatial variance in the regressor".into(),
        ));
    }
    Ok(SpatialRegression {
        r,
        per_year,
        b0: s0 / used as f64,
        b1: s1 / used as f64,
    })
}

/// `w * a + (1 - w) * b` element-wise.
pub fn blend_forecast(ppgp: &[f64], spatial: &[f64], w: f64) -> Result<Vec<f64>> {
    if ppgp.len() != spatial.len() {
        return Err(Error::Shape(format!(
            "blend: {} PPGP and {} spatial forecasts",
            ppgp.len(),
            spatial.len()
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("blend weight must lie in [0, 1], got {w}")));
    }
    Ok(ppgp
        .iter()
        .zip(spatial)
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect())
}

/// Minimizer of `sum (x - w a - (1 - w) b)^2`, clipped to [`WEIGHT_BOUNDS`].
/// Identical forecasts give 0.5.
pub fn optimize_blend_weight(truth: &[f64], ppgp: &[f64], spatial: &[f64]) -> Result<f64> {
    if truth.len() != ppgp.len() || truth.len() != spatial.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "blend weight: lengths {}, {}, {}",
            truth.len(),
            ppgp.len(),
            spatial.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((x, a), b) in truth.iter().zip(ppgp).zip(spatial) {
        num += (x - b) * (a - b);
        den += (a - b) * (a - b);
    }
    if den == 0.0 {
        log::warn!("PPGP and spatial training forecasts coincide; using weight 0.5");
        return Ok(0.5);
    }
    Ok((num / den).clamp(WEIGHT_BOUNDS.0, WEIGHT_BOUNDS.1))
}

/// Training-period forecasts for the blend loss: each year from the fourth on
/// is forecast from the years before it only.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendTraining {
    pub truth: Vec<f64>,
    pub ppgp: Vec<f64>,
    pub spatial: Vec<f64>,
}

pub fn blend_training_forecasts(
    target: &GridPanel,
    partial: &GridPanel,
    params: &CovariateParams,
    r: u8,
) -> Result<BlendTraining> {
    check_r(r)?;
    partial.check_same_layout(target)?;
    let years = target.years();
    if years.len() < 4 {
        return Err(Error::Shape(format!(
            "blend training needs at least 4 years, got {}",
            years.len()
        )));
    }
    let kernel = params.kernel()?;
    let mut out = BlendTraining {
        truth: Vec::new(),
        ppgp: Vec::new(),
        spatial: Vec::new(),
    };
    for j in 3..years.len() {
        let past_t = target.select_years(years[0], years[j - 1])?;
        let past_p = partial.select_years(years[0], years[j - 1])?;
        let model = fit_ppgp_shared(&past_t, &kernel, params.nugget)?;
        let pred = model.predict(years[j])?;
        let reg = fit_spatial_regression(&past_t, &past_p, r)?;
        let xr: Vec<f64> = partial.values().column(j).iter().copied().collect();
        out.truth.extend(target.values().column(j).iter());
        out.ppgp.extend(pred.iter().map(|p| p.mean));
        out.spatial.extend(reg.predict(&xr));
    }
    Ok(out)
}

/// Spatial regression and weight fitted on the training years.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendModel {
    pub regression: SpatialRegression,
    pub weight: f64,
}

impl BlendModel {
    pub fn fit(
        target: &GridPanel,
        partial: &GridPanel,
        params: &CovariateParams,
        r: u8,
    ) -> Result<Self> {
        let training = blend_training_forecasts(target, partial, params, r)?;
        let weight = optimize_blend_weight(&training.truth, &training.ppgp, &training.spatial)?;
        Ok(Self {
            regression: fit_spatial_regression(target, partial, r)?,
            weight,
        })
    }

    /// Blend a PPGP forecast with the spatial regression on the target
    /// year's first `r` months.
    pub fn forecast(&self, ppgp: &CovariateForecast, partial: &[f64]) -> Result<CovariateForecast> {
        let spatial = self.regression.predict(partial);
        Ok(CovariateForecast {
            variable: ppgp.variable.clone(),
            year: ppgp.year,
            coords: ppgp.coords.clone(),
            means: blend_forecast(&ppgp.means, &spatial, self.weight)?,
            predictive: None,
            method: CovariateMethod::Weighted,
            params: ppgp.params,
            weight: Some(self.weight),
        })
    }
}

/// `variable,lon,lat,year,mean,lower95,upper95,method`.
pub fn write_covariate_csv<W: Write>(w: W, forecasts: &[CovariateForecast]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variable", "lon", "lat", "year", "mean", "lower95", "upper95", "method"])
        .map_err(csv_err)?;
    for f in forecasts {
        for (i, (lon, lat)) in f.coords.iter().enumerate() {
            let (lo, hi) = match &f.predictive {
                Some(p) => {
                    let (l, h) = p[i].ci95();
                    (float10(l), float10(h))
                }
                None => (String::new(), String::new()),
            };
            out.write_record([
                f.variable.clone(),
                float10(*lon),
                float10(*lat),
                f.year.to_string(),
                float10(f.means[i]),
                lo,
                hi,
                f.method.name().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

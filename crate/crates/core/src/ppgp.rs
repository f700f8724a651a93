//! Closed-form parallel partial Gaussian processes.
//!
//! Each grid cell `i` carries its own mean `mu_i` and variance `sigma_i^2`,
//! while the correlation parameters are shared by all cells. Integrating out
//! `mu_i` and `sigma_i^2` leaves a Student-t predictive distribution with
//! `n - 1` degrees of freedom whose location and scale are computed from a
//! Cholesky factor of `K + eta I`; no explicit inverse is ever formed.
//!
//! Two flavours are provided:
//!
//! * [`GppgpModel`]: every cell has its own design (its own covariate
//!   history), so every cell factorizes its own matrix.
//! * [`PpgpModel`]: every cell shares the design (the year index), so a single
//!   factorization serves the whole panel.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernel::{correlation_unchecked, cross_correlation, CholeskyFactor, KernelSpec};
use crate::panel::GridPanel;

/// Largest negative round-off tolerated in the predictive scale factor.
const KSTAR_ROUNDOFF: f64 = 1e-10;

/// Student-t predictive distribution for one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveT {
    pub mean: f64,
    /// Squared scale, `sigma_hat^2 * K*`.
    pub scale: f64,
    pub dof: usize,
}

impl PredictiveT {
    pub fn sd(&self) -> f64 {
        self.scale.sqrt()
    }

    /// Central interval with the given probability content.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let half = t_quantile(self.dof, 0.5 + level / 2.0) * self.sd();
        (self.mean - half, self.mean + half)
    }

    pub fn ci95(&self) -> (f64, f64) {
        self.interval(0.95)
    }
}

/// Upper quantile of the standard Student-t distribution.
pub fn t_quantile(dof: usize, p: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}

/// Which marginal likelihood to report after dealing with `mu_i, sigma_i^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodForm {
    /// `mu_i` and `sigma_i^2` integrated out under the prior `1 / sigma^2`.
    Integrated,
    /// `mu_i` and `sigma_i^2` replaced by their maximum-likelihood values.
    Profile,
}

/// Affine map of every covariate coordinate onto `[0, 1]` using training
/// minima and maxima pooled over all grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    mins: Vec<f64>,
    spans: Vec<f64>,
}

impl InputScaler {
    pub fn fit(covariates: &[GridPanel]) -> Self {
        let (mins, spans) = covariates
            .iter()
            .map(|p| {
                let lo = p.values().min();
                let hi = p.values().max();
                let span = hi - lo;
                (lo, if span > 0.0 { span } else { 1.0 })
            })
            .unzip();
        Self { mins, spans }
    }

    pub fn identity(dims: usize) -> Self {
        Self {
            mins: vec![0.0; dims],
            spans: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mins.len()
    }

    #[inline]
    pub fn apply(&self, coord: usize, x: f64) -> f64 {
        (x - self.mins[coord]) / self.spans[coord]
    }
}

/// Quantities shared by every series that uses a given factor.
#[derive(Debug, Clone)]
struct FactorStats {
    kinv_one: DVector<f64>,
    one_kinv_one: f64,
}

impl FactorStats {
    fn new(factor: &CholeskyFactor) -> Self {
        let ones = DVector::from_element(factor.dim(), 1.0);
        let kinv_one = factor.solve(&ones);
        let one_kinv_one = kinv_one.sum();
        Self {
            kinv_one,
            one_kinv_one,
        }
    }
}

/// Per-series closed-form estimates.
#[derive(Debug, Clone)]
struct SeriesStats {
    mu: f64,
    sigma2: f64,
    /// `K~^{-1} (y - mu 1)`.
    alpha: DVector<f64>,
}

impl SeriesStats {
    fn new(factor: &CholeskyFactor, stats: &FactorStats, y: &DVector<f64>) -> Self {
        let n = y.len();
        let mu = stats.kinv_one.dot(y) / stats.one_kinv_one;
        let resid = y.add_scalar(-mu);
        let alpha = factor.solve(&resid);
        let quad = resid.dot(&alpha);
        let sigma2 = (quad / (n as f64 - 1.0)).max(0.0);
        Self { mu, sigma2, alpha }
    }

    fn quad_form(&self, n: usize) -> f64 {
        self.sigma2 * (n as f64 - 1.0)
    }
}

fn predictive(
    factor: &CholeskyFactor,
    stats: &FactorStats,
    series: &SeriesStats,
    k: &DVector<f64>,
    nugget: f64,
    grid: usize,
) -> Result<PredictiveT> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite kernel evaluation for grid {grid}"
        )));
    }
    let n = k.len();
    let kinv_k = factor.solve(k);
    let one_kinv_k = stats.kinv_one.dot(k);
    let gap = 1.0 - one_kinv_k;
    let mut kstar = 1.0 + nugget - k.dot(&kinv_k) + gap * gap / stats.one_kinv_one;
    if kstar < 0.0 {
        if kstar >= -KSTAR_ROUNDOFF {
            kstar = 0.0;
        } else {
            return Err(Error::Numeric(format!(
                "negative predictive variance factor {kstar:e} for grid {grid}"
            )));
        }
    }
    let mean = series.mu + k.dot(&series.alpha);
    Ok(PredictiveT {
        mean,
        scale: series.sigma2 * kstar,
        dof: n - 1,
    })
}

fn series_log_likelihood(
    factor: &CholeskyFactor,
    stats: &FactorStats,
    series: &SeriesStats,
    form: LikelihoodForm,
) -> f64 {
    let n = factor.dim() as f64;
    let quad = series.quad_form(factor.dim()).max(f64::MIN_POSITIVE);
    let ln_det = factor.ln_det();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    match form {
        LikelihoodForm::Integrated => {
            let a = (n - 1.0) / 2.0;
            -a * ln_2pi - 0.5 * ln_det - 0.5 * stats.one_kinv_one.ln() + ln_gamma(a)
                - a * (quad / 2.0).ln()
        }
        LikelihoodForm::Profile => {
            let sigma2 = quad / n;
            -0.5 * n * (ln_2pi + sigma2.ln()) - 0.5 * ln_det - 0.5 * n
        }
    }
}

/// Generalized least-squares estimate of a constant mean, `(1'K^-1 1)^-1 1'K^-1 y`.
pub fn gls_mean(y: &DVector<f64>, factor: &CholeskyFactor) -> Result<f64> {
    if y.len() != factor.dim() {
        return Err(Error::Shape(format!(
            "series has {} values but factor is {}x{}",
            y.len(),
            factor.dim(),
            factor.dim()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("series contains non-finite values".into()));
    }
    let stats = FactorStats::new(factor);
    if !(stats.one_kinv_one.is_finite() && stats.one_kinv_one > 0.0) {
        return Err(Error::Numeric("singular factor in GLS mean".into()));
    }
    Ok(stats.kinv_one.dot(y) / stats.one_kinv_one)
}

fn check_nugget(nugget: f64) -> Result<()> {
    if nugget.is_finite() && nugget >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("nugget must be finite and >= 0, got {nugget}")))
    }
}

fn check_years(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::Shape(format!(
            "need at least 3 training years for n - 1 >= 2 degrees of freedom, got {n}"
        )));
    }
    Ok(())
}

/// Stack covariate panels into one scaled `n x p` design per grid cell.
pub fn scaled_designs(covariates: &[GridPanel], scaler: &InputScaler) -> Result<Vec<DMatrix<f64>>> {
    let first = covariates
        .first()
        .ok_or_else(|| Error::Shape("at least one covariate panel is required".into()))?;
    for c in &covariates[1..] {
        c.check_same_layout(first)?;
    }
    if scaler.dims() != covariates.len() {
        return Err(Error::Shape(format!(
            "scaler has {} coordinates for {} covariates",
            scaler.dims(),
            covariates.len()
        )));
    }
    let (k, n, p) = (first.k(), first.n(), covariates.len());
    Ok((0..k)
        .map(|i| {
            DMatrix::from_fn(n, p, |t, l| scaler.apply(l, covariates[l].values()[(i, t)]))
        })
        .collect())
}

/// Generalized PPGP: shared `(gammas, eta)`, one design per grid cell.
#[derive(Debug, Clone)]
pub struct GppgpModel {
    kernel: KernelSpec,
    nugget: f64,
    scaler: InputScaler,
    designs: Vec<DMatrix<f64>>,
    outputs: GridPanel,
    factors: Vec<CholeskyFactor>,
    stats: Vec<FactorStats>,
    series: Vec<SeriesStats>,
}

/// Fit a G-PPGP on covariate panels (one panel per input coordinate).
///
/// Covariates are rescaled to `[0, 1]` with the training extremes, so the
/// ranges `gammas` are expressed on that scale.
pub fn fit_gppgp(
    covariates: &[GridPanel],
    outputs: &GridPanel,
    gammas: &[f64],
    nugget: f64,
) -> Result<GppgpModel> {
    let kernel = KernelSpec::matern(gammas.to_vec())?;
    if kernel.dims() != covariates.len() {
        return Err(Error::Shape(format!(
            "{} ranges for {} covariates",
            kernel.dims(),
            covariates.len()
        )));
    }
    for c in covariates {
        c.check_same_layout(outputs)?;
    }
    let scaler = InputScaler::fit(covariates);
    let designs = scaled_designs(covariates, &scaler)?;
    GppgpModel::fit_designs(designs, outputs.clone(), kernel, nugget, scaler)
}

impl GppgpModel {
    /// Fit on prepared per-grid designs. `scaler` is applied to new inputs at
    /// prediction time and must already have been applied to `designs`.
    pub fn fit_designs(
        designs: Vec<DMatrix<f64>>,
        outputs: GridPanel,
        kernel: KernelSpec,
        nugget: f64,
        scaler: InputScaler,
    ) -> Result<Self> {
        kernel.validate()?;
        check_nugget(nugget)?;
        check_years(outputs.n())?;
        if designs.len() != outputs.k() {
            return Err(Error::Shape(format!(
                "{} designs for {} grids",
                designs.len(),
                outputs.k()
            )));
        }
        for (i, d) in designs.iter().enumerate() {
            if d.nrows() != outputs.n() || d.ncols() != kernel.dims() {
                return Err(Error::Shape(format!(
                    "design of grid {i} is {}x{}, expected {}x{}",
                    d.nrows(),
                    d.ncols(),
                    outputs.n(),
                    kernel.dims()
                )));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("design of grid {i} has non-finite values")));
            }
        }
        let fitted: Vec<Result<(CholeskyFactor, FactorStats, SeriesStats)>> = designs
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                let mut m = correlation_unchecked(d, &kernel);
                for t in 0..m.nrows() {
                    m[(t, t)] += nugget;
                }
                let factor = CholeskyFactor::new(m, &format!("K~ of grid {i}"))?;
                let stats = FactorStats::new(&factor);
                let series = SeriesStats::new(&factor, &stats, &outputs.series(i));
                Ok((factor, stats, series))
            })
            .collect();
        let mut factors = Vec::with_capacity(fitted.len());
        let mut stats = Vec::with_capacity(fitted.len());
        let mut series = Vec::with_capacity(fitted.len());
        for r in fitted {
            let (f, s, e) = r?;
            factors.push(f);
            stats.push(s);
            series.push(e);
        }
        Ok(Self {
            kernel,
            nugget,
            scaler,
            designs,
            outputs,
            factors,
            stats,
            series,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn scaler(&self) -> &InputScaler {
        &self.scaler
    }

    pub fn outputs(&self) -> &GridPanel {
        &self.outputs
    }

    pub fn k(&self) -> usize {
        self.outputs.k()
    }

    pub fn n(&self) -> usize {
        self.outputs.n()
    }

    pub fn mu(&self, grid: usize) -> f64 {
        self.series[grid].mu
    }

    pub fn sigma2(&self, grid: usize) -> f64 {
        self.series[grid].sigma2
    }

    pub fn factor(&self, grid: usize) -> &CholeskyFactor {
        &self.factors[grid]
    }

    pub fn design(&self, grid: usize) -> &DMatrix<f64> {
        &self.designs[grid]
    }

    /// Predict every grid at new raw (unscaled) inputs, one row per grid.
    pub fn predict(&self, new_inputs: &DMatrix<f64>) -> Result<Vec<PredictiveT>> {
        if new_inputs.ncols() != self.scaler.dims() {
            return Err(Error::Shape(format!(
                "new inputs have {} columns, model has {}",
                new_inputs.ncols(),
                self.scaler.dims()
            )));
        }
        let scaled = DMatrix::from_fn(new_inputs.nrows(), new_inputs.ncols(), |i, l| {
            self.scaler.apply(l, new_inputs[(i, l)])
        });
        self.predict_designs(&scaled)
    }

    /// Predict every grid at new inputs already on the design scale.
    pub fn predict_designs(&self, new_inputs: &DMatrix<f64>) -> Result<Vec<PredictiveT>> {
        if new_inputs.nrows() != self.k() || new_inputs.ncols() != self.kernel.dims() {
            return Err(Error::Shape(format!(
                "new inputs are {}x{}, expected {}x{}",
                new_inputs.nrows(),
                new_inputs.ncols(),
                self.k(),
                self.kernel.dims()
            )));
        }
        if new_inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite new inputs".into()));
        }
        (0..self.k())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = new_inputs.row(i).iter().copied().collect();
                let k = cross_correlation(&self.designs[i], &x, &self.kernel);
                predictive(
                    &self.factors[i],
                    &self.stats[i],
                    &self.series[i],
                    &k,
                    self.nugget,
                    i,
                )
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    /// Sum over grids of the per-grid log marginal likelihood.
    pub fn log_marginal_likelihood(&self, form: LikelihoodForm) -> f64 {
        (0..self.k())
            .map(|i| series_log_likelihood(&self.factors[i], &self.stats[i], &self.series[i], form))
            .sum()
    }
}

/// Free-function form of [`GppgpModel::predict`].
pub fn predict_gppgp(model: &GppgpModel, new_inputs: &DMatrix<f64>) -> Result<Vec<PredictiveT>> {
    model.predict(new_inputs)
}

/// Log marginal likelihood of a G-PPGP on covariate panels, summed over grids.
pub fn log_marginal_likelihood(
    covariates: &[GridPanel],
    outputs: &GridPanel,
    gammas: &[f64],
    nugget: f64,
    form: LikelihoodForm,
) -> Result<f64> {
    if !(nugget.is_finite() && nugget > 0.0) {
        return Err(Error::Domain(format!("nugget must be > 0, got {nugget}")));
    }
    Ok(fit_gppgp(covariates, outputs, gammas, nugget)?.log_marginal_likelihood(form))
}

/// Log marginal likelihood on prepared per-grid designs.
pub fn log_marginal_likelihood_designs(
    designs: Vec<DMatrix<f64>>,
    outputs: &GridPanel,
    kernel: &KernelSpec,
    nugget: f64,
    form: LikelihoodForm,
) -> Result<f64> {
    if !(nugget.is_finite() && nugget > 0.0) {
        return Err(Error::Domain(format!("nugget must be > 0, got {nugget}")));
    }
    let dims = kernel.dims();
    Ok(GppgpModel::fit_designs(
        designs,
        outputs.clone(),
        kernel.clone(),
        nugget,
        InputScaler::identity(dims),
    )?
    .log_marginal_likelihood(form))
}

/// PPGP whose cells all share the year-index design and thus one factor.
#[derive(Debug, Clone)]
pub struct PpgpModel {
    kernel: KernelSpec,
    nugget: f64,
    design: DMatrix<f64>,
    outputs: GridPanel,
    factor: CholeskyFactor,
    stats: FactorStats,
    series: Vec<SeriesStats>,
}

/// Year labels as a one-column design.
pub fn year_design(years: &[i32]) -> DMatrix<f64> {
    DMatrix::from_iterator(years.len(), 1, years.iter().map(|&y| y as f64))
}

/// Fit a shared-design PPGP on a panel, using its year labels as the input.
pub fn fit_ppgp_shared(panel: &GridPanel, kernel: &KernelSpec, nugget: f64) -> Result<PpgpModel> {
    kernel.validate()?;
    check_nugget(nugget)?;
    check_years(panel.n())?;
    if kernel.dims() != 1 {
        return Err(Error::Shape("shared-design PPGP uses a one-dimensional kernel".into()));
    }
    let design = year_design(panel.years());
    let mut m = correlation_unchecked(&design, kernel);
    for t in 0..m.nrows() {
        m[(t, t)] += nugget;
    }
    let factor = CholeskyFactor::new(m, &format!("shared K~ of `{}`", panel.variable()))?;
    let stats = FactorStats::new(&factor);
    let series = (0..panel.k())
        .into_par_iter()
        .map(|i| SeriesStats::new(&factor, &stats, &panel.series(i)))
        .collect();
    Ok(PpgpModel {
        kernel: kernel.clone(),
        nugget,
        design,
        outputs: panel.clone(),
        factor,
        stats,
        series,
    })
}

impl PpgpModel {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn outputs(&self) -> &GridPanel {
        &self.outputs
    }

    pub fn mu(&self, grid: usize) -> f64 {
        self.series[grid].mu
    }

    pub fn sigma2(&self, grid: usize) -> f64 {
        self.series[grid].sigma2
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// Predictive distribution of every cell at `year`.
    pub fn predict(&self, year: i32) -> Result<Vec<PredictiveT>> {
        let k = cross_correlation(&self.design, &[year as f64], &self.kernel);
        (0..self.series.len())
            .into_par_iter()
            .map(|i| predictive(&self.factor, &self.stats, &self.series[i], &k, self.nugget, i))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    pub fn log_marginal_likelihood(&self, form: LikelihoodForm) -> f64 {
        self.series
            .iter()
            .map(|s| series_log_likelihood(&self.factor, &self.stats, s, form))
            .sum()
    }
}

/// Free-function form of [`PpgpModel::predict`].
pub fn predict_ppgp_shared(model: &PpgpModel, year: i32) -> Result<Vec<PredictiveT>> {
    model.predict(year)
}

//! Cross-validated estimation of correlation parameters.
//!
//! The last `nu` training years are held out, models are fitted on the
//! remaining years of a random subsample of grid cells, and the mean squared
//! error of the held-out predictions is minimized over the parameters.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::optim::{minimize, NelderMeadSettings, SearchBox};
use crate::panel::GridPanel;
use crate::ppgp::{fit_ppgp_shared, scaled_designs, GppgpModel, InputScaler};

/// log10 bounds of the Matérn ranges.
pub const LOG10_GAMMA_BOUNDS: (f64, f64) = (-2.0, 2.0);
/// log10 bounds of the nugget.
pub const LOG10_NUGGET_BOUNDS: (f64, f64) = (-6.0, 1.0);
/// Bounds of the AR(1) correlation.
pub const RHO_BOUNDS: (f64, f64) = (-0.99, 0.99);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchStrategy {
    /// Exhaustive grid with `levels` nodes per dimension.
    GridSearch { levels: usize },
    /// Grid with `levels` nodes per dimension, refined by Nelder-Mead.
    NelderMead {
        levels: usize,
        max_iters: usize,
        tol: f64,
    },
}

impl Default for SearchStrategy {
    fn default() -> Self {
        SearchStrategy::NelderMead {
            levels: 8,
            max_iters: 200,
            tol: 1e-10,
        }
    }
}

impl SearchStrategy {
    pub(crate) fn levels(&self) -> usize {
        match *self {
            SearchStrategy::GridSearch { levels } | SearchStrategy::NelderMead { levels, .. } => {
                levels
            }
        }
    }

    pub(crate) fn refine(&self) -> Option<NelderMeadSettings> {
        match *self {
            SearchStrategy::GridSearch { .. } => None,
            SearchStrategy::NelderMead { max_iters, tol, .. } => {
                Some(NelderMeadSettings { max_iters, tol })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvConfig {
    /// Number of grid cells in the subsample.
    pub subsample_size: usize,
    /// Number of trailing training years held out.
    pub validation_years: usize,
    pub seed: u64,
    pub search: SearchStrategy,
}

impl CvConfig {
    /// `s = 500`, `nu = 2` for the vegetation-index model.
    pub fn gppgp_default() -> Self {
        Self {
            subsample_size: 500,
            validation_years: 2,
            seed: 0,
            search: SearchStrategy::default(),
        }
    }

    /// `s = 10`, `nu = 2` for precipitation.
    pub fn precip_default() -> Self {
        Self {
            subsample_size: 10,
            validation_years: 2,
            seed: 0,
            search: SearchStrategy::default(),
        }
    }

    /// `s = 10`, `nu = 3` for VPD.
    pub fn vpd_default() -> Self {
        Self {
            subsample_size: 10,
            validation_years: 3,
            seed: 0,
            search: SearchStrategy::default(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.subsample_size == 0 {
            return Err(Error::Config("subsample size must be positive".into()));
        }
        if self.validation_years == 0 {
            return Err(Error::Config("validation years must be positive".into()));
        }
        if self.validation_years + 3 > n {
            return Err(Error::Config(format!(
                "{} validation years leave fewer than 3 of {n} years for training",
                self.validation_years
            )));
        }
        if self.search.levels() == 0 {
            return Err(Error::Config("grid search needs at least one level".into()));
        }
        Ok(())
    }
}

/// Uniform subsample of `min(s, k)` grid indices without replacement, sorted.
pub fn subsample(k: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, k, s.min(k)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct GppgpParams {
    pub gammas: Vec<f64>,
    pub nugget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateParams {
    pub family: KernelFamily,
    /// `rho` for AR(1), range in years for Matérn.
    pub value: f64,
    pub nugget: f64,
}

impl CovariateParams {
    pub fn kernel(&self) -> Result<KernelSpec> {
        match self.family {
            KernelFamily::Ar1Power => KernelSpec::ar1(self.value),
            KernelFamily::Matern25 => KernelSpec::matern(vec![self.value]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<P> {
    pub params: P,
    /// Validation mean squared error at `params`.
    pub objective: f64,
    /// Validation mean squared error at every coarse grid node.
    pub grid_objectives: Vec<f64>,
    pub evaluations: usize,
}

fn split_years(panel: &GridPanel, nu: usize) -> Result<(GridPanel, Vec<i32>)> {
    let years = panel.years();
    let cut = years.len() - nu;
    let train = panel.select_years(years[0], years[cut - 1])?;
    Ok((train, years[cut..].to_vec()))
}

/// Larger nugget wins ties; the nugget is the last coordinate.
fn prefer_larger_nugget(a: &[f64], b: &[f64]) -> Ordering {
    b[b.len() - 1].total_cmp(&a[a.len() - 1])
}

/// Cross-validated `(gammas, eta)` of the G-PPGP.
///
/// Covariates are scaled with the extremes of the training years over all
/// grids, the same convention as [`crate::ppgp::fit_gppgp`].
pub fn estimate_gppgp_params(
    covariates: &[GridPanel],
    outputs: &GridPanel,
    config: &CvConfig,
) -> Result<Estimate<GppgpParams>> {
    config.check(outputs.n())?;
    if covariates.is_empty() {
        return Err(Error::Shape("at least one covariate is required".into()));
    }
    for c in covariates {
        c.check_same_layout(outputs)?;
    }
    let p = covariates.len();
    let nu = config.validation_years;
    let grids = subsample(outputs.k(), config.subsample_size, config.seed);

    let mut train_cov = Vec::with_capacity(p);
    for c in covariates {
        train_cov.push(split_years(c, nu)?.0);
    }
    let scaler = InputScaler::fit(&train_cov);
    let sub_train_cov: Vec<GridPanel> = train_cov
        .iter()
        .map(|c| c.subset_grids(&grids))
        .collect::<Result<_>>()?;
    let designs = scaled_designs(&sub_train_cov, &scaler)?;
    let (train_out, val_years) = split_years(outputs, nu)?;
    let sub_train_out = train_out.subset_grids(&grids)?;
    let sub_out = outputs.subset_grids(&grids)?;
    let sub_cov: Vec<GridPanel> = covariates
        .iter()
        .map(|c| c.subset_grids(&grids))
        .collect::<Result<_>>()?;
    let validation: Vec<(DMatrix<f64>, Vec<f64>)> = val_years
        .iter()
        .map(|&y| {
            let j = sub_out.year_index(y).expect("validation year present");
            let x = DMatrix::from_fn(grids.len(), p, |i, l| sub_cov[l].values()[(i, j)]);
            let truth = sub_out.values().column(j).iter().copied().collect();
            (x, truth)
        })
        .collect();

    let objective = |theta: &[f64]| -> f64 {
        let gammas: Vec<f64> = theta[..p].iter().map(|t| 10f64.powf(*t)).collect();
        let nugget = 10f64.powf(theta[p]);
        let Ok(kernel) = KernelSpec::matern(gammas) else {
            return f64::INFINITY;
        };
        let model = match GppgpModel::fit_designs(
            designs.clone(),
            sub_train_out.clone(),
            kernel,
            nugget,
            scaler.clone(),
        ) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        let mut sse = 0.0;
        let mut count = 0usize;
        for (x, truth) in &validation {
            let Ok(pred) = model.predict(x) else {
                return f64::INFINITY;
            };
            for (p, t) in pred.iter().zip(truth) {
                sse += (p.mean - t) * (p.mean - t);
                count += 1;
            }
        }
        sse / count as f64
    };

    let mut lower = vec![LOG10_GAMMA_BOUNDS.0; p];
    let mut upper = vec![LOG10_GAMMA_BOUNDS.1; p];
    lower.push(LOG10_NUGGET_BOUNDS.0);
    upper.push(LOG10_NUGGET_BOUNDS.1);
    let search = SearchBox::new(lower, upper);
    let best = minimize(
        &search,
        config.search.levels(),
        config.search.refine(),
        objective,
        prefer_larger_nugget,
    )
    .ok_or_else(|| Error::Estimation("every G-PPGP candidate failed numerically".into()))?;
    Ok(Estimate {
        params: GppgpParams {
            gammas: best.x[..p].iter().map(|t| 10f64.powf(*t)).collect(),
            nugget: 10f64.powf(best.x[p]),
        },
        objective: best.value,
        grid_objectives: best.grid_values,
        evaluations: best.evaluations,
    })
}

/// Cross-validated `(rho or gamma, eta)` of a shared-design covariate PPGP.
///
/// All held-out years are forecast from the same fit on the first `n - nu`
/// years.
pub fn estimate_covariate_params(
    panel: &GridPanel,
    family: KernelFamily,
    config: &CvConfig,
) -> Result<Estimate<CovariateParams>> {
    config.check(panel.n())?;
    let nu = config.validation_years;
    let grids = subsample(panel.k(), config.subsample_size, config.seed);
    let sub = panel.subset_grids(&grids)?;
    let (train, val_years) = split_years(&sub, nu)?;
    let truth: Vec<(i32, Vec<f64>)> = val_years
        .iter()
        .map(|&y| (y, sub.year_map(y).expect("year present").iter().copied().collect()))
        .collect();

    let to_param = |t: f64| match family {
        KernelFamily::Ar1Power => t,
        KernelFamily::Matern25 => 10f64.powf(t),
    };
    let objective = |theta: &[f64]| -> f64 {
        let params = CovariateParams {
            family,
            value: to_param(theta[0]),
            nugget: 10f64.powf(theta[1]),
        };
        let Ok(kernel) = params.kernel() else {
            return f64::INFINITY;
        };
        let Ok(model) = fit_ppgp_shared(&train, &kernel, params.nugget) else {
            return f64::INFINITY;
        };
        let mut sse = 0.0;
        let mut count = 0usize;
        for (year, values) in &truth {
            let Ok(pred) = model.predict(*year) else {
                return f64::INFINITY;
            };
            for (p, t) in pred.iter().zip(values) {
                sse += (p.mean - t) * (p.mean - t);
                count += 1;
            }
        }
        sse / count as f64
    };

    let mut search = match family {
        KernelFamily::Ar1Power => SearchBox::new(
            vec![RHO_BOUNDS.0, LOG10_NUGGET_BOUNDS.0],
            vec![RHO_BOUNDS.1, LOG10_NUGGET_BOUNDS.1],
        ),
        KernelFamily::Matern25 => SearchBox::new(
            vec![LOG10_GAMMA_BOUNDS.0, LOG10_NUGGET_BOUNDS.0],
            vec![LOG10_GAMMA_BOUNDS.1, LOG10_NUGGET_BOUNDS.1],
        ),
    };
    if family == KernelFamily::Ar1Power {
        search.extra_nodes[0].push(0.0);
    }
    let prefer = |a: &[f64], b: &[f64]| {
        prefer_larger_nugget(a, b).then_with(|| match family {
            KernelFamily::Ar1Power => a[0].abs().total_cmp(&b[0].abs()),
            KernelFamily::Matern25 => Ordering::Equal,
        })
    };
    let best = minimize(
        &search,
        config.search.levels(),
        config.search.refine(),
        objective,
        prefer,
    )
    .ok_or_else(|| {
        Error::Estimation(format!(
            "every {} candidate for `{}` failed numerically",
            family.name(),
            panel.variable()
        ))
    })?;
    Ok(Estimate {
        params: CovariateParams {
            family,
            value: to_param(best.x[0]),
            nugget: 10f64.powf(best.x[1]),
        },
        objective: best.value,
        grid_objectives: best.grid_values,
        evaluations: best.evaluations,
    })
}

//! Ranking of month-range covariate windows for the August vegetation index.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt::float10;
use crate::hyperopt::{subsample, SearchStrategy, LOG10_GAMMA_BOUNDS, LOG10_NUGGET_BOUNDS};
use crate::kernel::KernelSpec;
use crate::metrics::csv_err;
use crate::ols::{ols, with_intercept};
use crate::optim::{minimize, SearchBox};
use crate::panel::GridPanel;
use crate::ppgp::{scaled_designs, GppgpModel, InputScaler, LikelihoodForm};

/// Last month a covariate window may include (the August peak).
pub const LAST_WINDOW_MONTH: u8 = 8;

/// Inclusive range of calendar months of one variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MonthRange {
    pub variable: String,
    pub start: u8,
    pub end: u8,
}

impl MonthRange {
    pub fn new(variable: impl Into<String>, start: u8, end: u8) -> Result<Self> {
        if !(1..=12).contains(&start) || !(1..=12).contains(&end) || start > end {
            return Err(Error::Domain(format!("invalid month range {start}-{end}")));
        }
        Ok(Self {
            variable: variable.into(),
            start,
            end,
        })
    }

    /// A covariate window, which must end by August.
    pub fn window(variable: impl Into<String>, start: u8, end: u8) -> Result<Self> {
        let r = Self::new(variable, start, end)?;
        if end > LAST_WINDOW_MONTH {
            return Err(Error::Domain(format!(
                "covariate window {start}-{end} extends past month {LAST_WINDOW_MONTH}"
            )));
        }
        Ok(r)
    }

    pub fn months(&self) -> std::ops::RangeInclusive<u8> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        usize::from(self.end - self.start) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for MonthRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}-{}]", self.variable, self.start, self.end)
    }
}

/// Single months, consecutive two-month pairs, and start-month-through-August
/// windows, without duplicates (21 windows).
pub fn default_candidates(variable: &str) -> Vec<MonthRange> {
    let mut out = Vec::new();
    for m in 1..=LAST_WINDOW_MONTH {
        out.push((m, m));
    }
    for m in 1..LAST_WINDOW_MONTH {
        out.push((m, m + 1));
    }
    for m in 1..LAST_WINDOW_MONTH {
        out.push((m, LAST_WINDOW_MONTH));
    }
    out.sort_unstable();
    out.dedup();
    out.into_iter()
        .map(|(s, e)| MonthRange::window(variable, s, e).expect("valid default window"))
        .collect()
}

/// Anything that can average monthly values over a window.
pub trait MonthlySource {
    fn aggregate(&self, window: &MonthRange) -> Result<GridPanel>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Mean over grids of the in-sample R² of the pixel-wise linear model.
    OverallR2,
    /// Maximized integrated marginal likelihood of the G-PPGP.
    MarginalLik,
    /// Maximized profile likelihood of the G-PPGP.
    ProfileLik,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::OverallR2 => "overall_r2",
            Criterion::MarginalLik => "marginal_lik",
            Criterion::ProfileLik => "profile_lik",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall_r2" | "r2" => Ok(Criterion::OverallR2),
            "marginal_lik" | "ml" => Ok(Criterion::MarginalLik),
            "profile_lik" => Ok(Criterion::ProfileLik),
            _ => Err(Error::Config(format!("unknown criterion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2Score {
    pub value: f64,
    /// Grids whose design was rank deficient; they contribute 0.
    pub rank_deficient: usize,
}

/// Mean over grids of `1 - SSE/SST` of per-grid OLS on the covariates.
/// Grids with constant outputs contribute 0.
pub fn overall_r2(outputs: &GridPanel, covariates: &[GridPanel]) -> Result<R2Score> {
    for c in covariates {
        c.check_same_layout(outputs)?;
    }
    let n = outputs.n();
    let p = covariates.len();
    if n < p + 2 {
        return Err(Error::Shape(format!(
            "overall R² with {p} covariates needs at least {} years, got {n}",
            p + 2
        )));
    }
    let per_grid: Vec<Option<f64>> = (0..outputs.k())
        .into_par_iter()
        .map(|i| {
            let y = outputs.series(i);
            let cols: Vec<DVector<f64>> = covariates.iter().map(|c| c.series(i)).collect();
            let fit = ols(&with_intercept(n, &cols), &y)?;
            let mean = y.mean();
            let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            Some(if sst > 0.0 { 1.0 - fit.sse / sst } else { 0.0 })
        })
        .collect();
    let rank_deficient = per_grid.iter().filter(|r| r.is_none()).count();
    if rank_deficient > 0 {
        log::warn!("{rank_deficient} grids with rank-deficient designs scored R² = 0");
    }
    let value = per_grid.iter().map(|r| r.unwrap_or(0.0)).sum::<f64>() / outputs.k() as f64;
    Ok(R2Score {
        value,
        rank_deficient,
    })
}

/// Maximum over `(gammas, eta)` of the G-PPGP log likelihood, plus the maximizer.
pub fn max_log_likelihood(
    outputs: &GridPanel,
    covariates: &[GridPanel],
    form: LikelihoodForm,
    search: SearchStrategy,
) -> Result<(f64, Vec<f64>, f64)> {
    for c in covariates {
        c.check_same_layout(outputs)?;
    }
    let p = covariates.len();
    let scaler = InputScaler::fit(covariates);
    let designs = scaled_designs(covariates, &scaler)?;
    let objective = |theta: &[f64]| -> f64 {
        let gammas: Vec<f64> = theta[..p].iter().map(|t| 10f64.powf(*t)).collect();
        let nugget = 10f64.powf(theta[p]);
        let Ok(kernel) = KernelSpec::matern(gammas) else {
            return f64::INFINITY;
        };
        match GppgpModel::fit_designs(
            designs.clone(),
            outputs.clone(),
            kernel,
            nugget,
            scaler.clone(),
        ) {
            Ok(m) => -m.log_marginal_likelihood(form),
            Err(_) => f64::INFINITY,
        }
    };
    let mut lower = vec![LOG10_GAMMA_BOUNDS.0; p];
    let mut upper = vec![LOG10_GAMMA_BOUNDS.1; p];
    lower.push(LOG10_NUGGET_BOUNDS.0);
    upper.push(LOG10_NUGGET_BOUNDS.1);
    let best = minimize(
        &SearchBox::new(lower, upper),
        search.levels(),
        search.refine(),
        objective,
        |a: &[f64], b: &[f64]| b[p].total_cmp(&a[p]),
    )
    .ok_or_else(|| Error::Estimation("likelihood failed at every candidate".into()))?;
    let gammas = best.x[..p].iter().map(|t| 10f64.powf(*t)).collect();
    Ok((-best.value, gammas, 10f64.powf(best.x[p])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectConfig {
    pub criterion: Criterion,
    pub subsample_size: usize,
    pub seed: u64,
    pub search: SearchStrategy,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::MarginalLik,
            subsample_size: 500,
            seed: 0,
            search: SearchStrategy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub precip: MonthRange,
    pub vpd: MonthRange,
    pub criterion: Criterion,
    pub score: f64,
    /// 1-based position in the table.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
    /// Total rank-deficient grid fits over all pairs (R² criterion only).
    pub rank_deficient: usize,
}

impl RankingTable {
    pub fn best(&self) -> &RankingRow {
        &self.rows[0]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "precip_start",
            "precip_end",
            "vpd_start",
            "vpd_end",
            "criterion",
            "score",
            "rank",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.precip.start.to_string(),
                r.precip.end.to_string(),
                r.vpd.start.to_string(),
                r.vpd.end.to_string(),
                r.criterion.name().to_string(),
                float10(r.score),
                r.rank.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn key(r: &MonthRange) -> (u8, u8) {
    (r.start, r.end)
}

fn aggregate_all<S: MonthlySource + ?Sized>(
    source: &S,
    windows: &[MonthRange],
    grids: &[usize],
) -> Result<BTreeMap<(u8, u8), GridPanel>> {
    let mut out = BTreeMap::new();
    for w in windows {
        if out.contains_key(&key(w)) {
            continue;
        }
        let panel = source.aggregate(w)?.subset_grids(grids)?;
        out.insert(key(w), panel);
    }
    Ok(out)
}

/// Score every (precipitation window, VPD window) pair on a seeded grid
/// subsample and sort by descending score. Ties are broken by the window
/// bounds in lexicographic order.
pub fn rank_windows<S: MonthlySource + Sync + ?Sized>(
    outputs: &GridPanel,
    source: &S,
    precip: &[MonthRange],
    vpd: &[MonthRange],
    config: &SelectConfig,
) -> Result<RankingTable> {
    if precip.is_empty() || vpd.is_empty() {
        return Err(Error::Config("candidate window set is empty".into()));
    }
    if config.subsample_size == 0 {
        return Err(Error::Config("subsample size must be positive".into()));
    }
    let grids = subsample(outputs.k(), config.subsample_size, config.seed);
    let sub_out = outputs.subset_grids(&grids)?;
    let p_panels = aggregate_all(source, precip, &grids)?;
    let v_panels = aggregate_all(source, vpd, &grids)?;
    let precip_name = &precip[0].variable;
    let vpd_name = &vpd[0].variable;

    let pairs: Vec<((u8, u8), (u8, u8))> = p_panels
        .keys()
        .flat_map(|pk| v_panels.keys().map(move |vk| (*pk, *vk)))
        .collect();
    let scored: Vec<Result<(f64, usize)>> = pairs
        .par_iter()
        .map(|(pk, vk)| {
            let covs = [p_panels[pk].clone(), v_panels[vk].clone()];
            match config.criterion {
                Criterion::OverallR2 => {
                    overall_r2(&sub_out, &covs).map(|s| (s.value, s.rank_deficient))
                }
                Criterion::MarginalLik => {
                    max_log_likelihood(&sub_out, &covs, LikelihoodForm::Integrated, config.search)
                        .map(|r| (r.0, 0))
                }
                Criterion::ProfileLik => {
                    max_log_likelihood(&sub_out, &covs, LikelihoodForm::Profile, config.search)
                        .map(|r| (r.0, 0))
                }
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(pairs.len());
    let mut rank_deficient = 0;
    for ((pk, vk), s) in pairs.iter().zip(scored) {
        let (score, rd) = s?;
        if !score.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite score for windows {}-{} / {}-{}",
                pk.0, pk.1, vk.0, vk.1
            )));
        }
        rank_deficient += rd;
        rows.push(RankingRow {
            precip: MonthRange::new(precip_name.clone(), pk.0, pk.1)?,
            vpd: MonthRange::new(vpd_name.clone(), vk.0, vk.1)?,
            criterion: config.criterion,
            score,
            rank: 0,
        });
    }
    rows.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| (key(&a.precip), key(&a.vpd)).cmp(&(key(&b.precip), key(&b.vpd))))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(RankingTable {
        rows,
        rank_deficient,
    })
}

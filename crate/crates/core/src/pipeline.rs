//! Two-phase forecasting pipeline: feature selection, parameter estimation,
//! covariate forecasts, vegetation-index forecasts and evaluation.
//!
//! Every artifact is written to a staging directory inside the output
//! directory and moved into place only when the whole task succeeds.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::baselines::{
    ar1_baseline, fit_predict_lm, linear_trend_forecast, location_mean, previous_year,
    BaselineForecast,
};
use crate::config::{Config, Method, Mode};
use crate::covariate_forecast::{
    forecast_covariate, write_covariate_csv, BlendModel, CovariateForecast, CovariateMethod,
};
use crate::dataio::AlignedStore;
use crate::error::{Error, Result};
use crate::feature_select::{rank_windows, MonthRange, RankingTable, SelectConfig};
use crate::fmt::float10;
use crate::hyperopt::{estimate_covariate_params, estimate_gppgp_params, CovariateParams, CvConfig};
use crate::metrics::{csv_err, EvalReport, MethodResult};
use crate::panel::GridPanel;
use crate::ppgp::{fit_gppgp, PredictiveT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Align the inputs and export the store.
    Ingest,
    /// Rank covariate windows.
    SelectFeatures,
    /// Cross-validated parameters per split.
    Estimate,
    /// Covariate forecasts per split.
    ForecastCovariates,
    /// Vegetation-index forecasts of every method.
    ForecastNdvi,
    /// Forecasts plus report, gross totals and heatmaps.
    Evaluate,
    /// Everything, including feature selection when enabled.
    Pipeline,
}

/// Artifacts are written to a hidden directory inside `out` and renamed into
/// place on commit. Dropping without commit deletes them, and deletes `out`
/// too if this run created it and it is still empty.
struct Staging {
    dir: Option<tempfile::TempDir>,
    out: PathBuf,
    created_out: bool,
    committed: bool,
    files: Vec<PathBuf>,
}

impl Drop for Staging {
    fn drop(&mut self) {
        drop(self.dir.take());
        if !self.committed && self.created_out {
            let _ = fs::remove_dir(&self.out);
        }
    }
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        let created_out = !out.exists();
        fs::create_dir_all(out)?;
        let mut staging = Self {
            dir: None,
            out: out.to_path_buf(),
            created_out,
            committed: false,
            files: Vec::new(),
        };
        staging.dir = Some(tempfile::Builder::new().prefix(".staging-").tempdir_in(out)?);
        Ok(staging)
    }

    fn path(&self) -> &Path {
        self.dir.as_ref().expect("staging directory").path()
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.path().join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(PathBuf::from(rel));
        Ok(BufWriter::new(File::create(path)?))
    }

    fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut moved = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let dest = self.out.join(rel);
            let step = (|| -> std::io::Result<()> {
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::rename(self.path().join(rel), &dest)
            })();
            if let Err(e) = step {
                for m in &moved {
                    let _ = fs::remove_file(m);
                }
                return Err(e.into());
            }
            moved.push(dest);
        }
        self.committed = true;
        Ok(moved)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Build the store from `[data] store` or `[data] inputs`.
pub fn load_store(config: &Config) -> Result<AlignedStore> {
    match &config.data.store {
        Some(path) => AlignedStore::load(path, &config.data.target),
        None if config.data.inputs.is_empty() => Err(Error::Config(
            "[data] needs `store` or `inputs`".into(),
        )),
        None => crate::dataio::ingest(&config.data.inputs, config.grid, &config.data.target),
    }
}

/// Run `task` and return the artifact paths written under `out`.
pub fn run(config: &Config, task: Task, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let mut staging = Staging::new(out)?;
    let store = stage("ingest", load_store(config))?;
    log::info!(
        "store: {} cells, years {}-{}",
        store.k(),
        store.years()[0],
        store.years()[store.years().len() - 1]
    );
    if task == Task::Ingest {
        store.export_csv(staging.create("store.csv")?)?;
        store.write_provenance_csv(staging.create("provenance.csv")?)?;
        return staging.commit();
    }

    let mut config = config.clone();
    let run_selection = task == Task::SelectFeatures || (task == Task::Pipeline && config.features.enabled);
    if run_selection {
        let table = stage("select-features", select_features(&config, &store))?;
        table.write_csv(staging.create("ranking.csv")?)?;
        if task == Task::SelectFeatures {
            return staging.commit();
        }
        if config.features.use_best {
            let best = table.best();
            log::info!("selected windows {} and {}", best.precip, best.vpd);
            config.windows.precip = best.precip.clone();
            config.windows.vpd = best.vpd.clone();
        }
    }

    let panels = stage("ingest", Panels::new(&config, &store))?;
    let mut params = Vec::new();
    let mut cov_forecasts = Vec::new();
    let mut results = Vec::new();
    for (idx, (first, last, tests)) in config.split.splits().into_iter().enumerate() {
        log::info!("split {}: train {first}-{last}, test {tests:?}", idx + 1);
        let out = run_split(&config, &panels, task, idx as u64, first, last, &tests)?;
        params.extend(out.params);
        cov_forecasts.extend(out.cov_forecasts);
        results.extend(out.results);
    }

    write_params(staging.create("params.csv")?, &params)?;
    if task == Task::Estimate {
        return staging.commit();
    }
    if config.mode == Mode::Forecast {
        write_covariate_csv(staging.create("covariate_forecast.csv")?, &cov_forecasts)?;
    }
    if task == Task::ForecastCovariates {
        return staging.commit();
    }
    let merged = merge_results(results);
    let coords = panels.target.coords();
    write_forecast_csv(
        staging.create("forecast_ndvi.csv")?,
        coords,
        merged.iter().filter(|r| r.variable == config.data.target),
    )?;
    if task == Task::ForecastNdvi {
        return staging.commit();
    }

    let report = stage("evaluate", EvalReport::from_results(&merged))?;
    report.write_report_csv(staging.create("report.csv")?)?;
    report.write_gross_csv(staging.create("gross.csv")?, &config.data.target)?;
    for r in merged.iter().filter(|r| r.variable == config.data.target) {
        for (j, year) in r.years.iter().enumerate() {
            let w = staging.create(&format!("heatmaps/heatmap_{}_{year}.csv", r.method))?;
            write_heatmap(w, coords, r.mean.column(j).iter().copied())?;
        }
    }
    if let Some(r) = merged.iter().find(|r| r.variable == config.data.target) {
        for (j, year) in r.years.iter().enumerate() {
            let w = staging.create(&format!("heatmaps/heatmap_truth_{year}.csv"))?;
            write_heatmap(w, coords, r.truth.column(j).iter().copied())?;
        }
    }
    staging.commit()
}

/// Rank windows on the first training period.
pub fn select_features(config: &Config, store: &AlignedStore) -> Result<RankingTable> {
    let s = &config.split;
    let target = store.aggregate(&config.windows.target)?.select_years(s.train_start, s.train_end)?;
    let source = TrainingYears {
        store,
        first: s.train_start,
        last: s.train_end,
    };
    let cfg = SelectConfig {
        criterion: config.features.criterion,
        subsample_size: config.features.subsample_size,
        seed: config.seed,
        search: config.gppgp_cv.search,
    };
    rank_windows(
        &target,
        &source,
        &config.features.precip_candidates,
        &config.features.vpd_candidates,
        &cfg,
    )
}

struct TrainingYears<'a> {
    store: &'a AlignedStore,
    first: i32,
    last: i32,
}

impl crate::feature_select::MonthlySource for TrainingYears<'_> {
    fn aggregate(&self, window: &MonthRange) -> Result<GridPanel> {
        self.store.aggregate(window)?.select_years(self.first, self.last)
    }
}

struct Panels {
    target: GridPanel,
    precip: GridPanel,
    vpd: GridPanel,
    /// First `r` months of precipitation, for the blend.
    partial: Option<GridPanel>,
}

impl Panels {
    fn new(config: &Config, store: &AlignedStore) -> Result<Self> {
        let needed = config.split.splits();
        let first = needed.iter().map(|s| s.0).min().expect("at least one split");
        let last = needed.iter().flat_map(|s| s.2.iter().copied()).max().expect("test years");
        let years = store.years();
        for y in first..=last {
            if !years.contains(&y) {
                return Err(Error::Data(format!("year {y} is not in the store")));
            }
        }
        let get = |w: &MonthRange| store.aggregate(w)?.select_years(first, last);
        let partial = match config.blend_r {
            Some(r) => Some(get(&MonthRange::new(config.data.precip.clone(), 1, r)?)?),
            None => None,
        };
        Ok(Self {
            target: get(&config.windows.target)?,
            precip: get(&config.windows.precip)?,
            vpd: get(&config.windows.vpd)?,
            partial,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    /// First test year of the split.
    pub split: i32,
    pub variable: String,
    pub method: String,
    pub parameter: String,
    pub value: f64,
}

struct SplitOutput {
    params: Vec<ParamRow>,
    cov_forecasts: Vec<CovariateForecast>,
    results: Vec<MethodResult>,
}

fn derive_seed(base: u64, split: u64, tag: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(1_000_003))
        .wrapping_add(tag)
}

fn columns(panel: &GridPanel, years: &[i32]) -> DMatrix<f64> {
    DMatrix::from_fn(panel.k(), years.len(), |i, j| {
        panel.values()[(i, panel.year_index(years[j]).expect("year checked"))]
    })
}

fn from_predictive(preds: &[Vec<PredictiveT>]) -> (DMatrix<f64>, (DMatrix<f64>, DMatrix<f64>)) {
    let k = preds[0].len();
    let n = preds.len();
    let mean = DMatrix::from_fn(k, n, |i, j| preds[j][i].mean);
    let lo = DMatrix::from_fn(k, n, |i, j| preds[j][i].ci95().0);
    let hi = DMatrix::from_fn(k, n, |i, j| preds[j][i].ci95().1);
    (mean, (lo, hi))
}

fn result(
    method: &str,
    variable: &str,
    years: &[i32],
    truth: DMatrix<f64>,
    mean: DMatrix<f64>,
    interval: Option<(DMatrix<f64>, DMatrix<f64>)>,
) -> MethodResult {
    MethodResult {
        method: method.to_string(),
        variable: variable.to_string(),
        years: years.to_vec(),
        truth,
        mean,
        interval,
    }
}

fn cov_params_rows(split: i32, variable: &str, p: &CovariateParams, objective: f64) -> Vec<ParamRow> {
    let name = match p.family {
        crate::kernel::KernelFamily::Ar1Power => "rho",
        crate::kernel::KernelFamily::Matern25 => "gamma",
    };
    [(name, p.value), ("nugget", p.nugget), ("cv_mse", objective)]
        .into_iter()
        .map(|(n, v)| ParamRow {
            split,
            variable: variable.to_string(),
            method: "ppgp".into(),
            parameter: n.into(),
            value: v,
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_split(
    config: &Config,
    panels: &Panels,
    task: Task,
    idx: u64,
    first: i32,
    last: i32,
    tests: &[i32],
) -> Result<SplitOutput> {
    let split = tests[0];
    let target = panels.target.select_years(first, last)?;
    let precip = panels.precip.select_years(first, last)?;
    let vpd = panels.vpd.select_years(first, last)?;
    let covs = [precip.clone(), vpd.clone()];
    let tv = &config.data.target;
    let mut out = SplitOutput {
        params: Vec::new(),
        cov_forecasts: Vec::new(),
        results: Vec::new(),
    };
    let uses_gppgp = config.methods.contains(&Method::Gppgp);
    let forecast_mode = config.mode == Mode::Forecast;

    // covariate inputs of the G-PPGP at the test year(s)
    let mut gppgp_inputs: Option<DMatrix<f64>> = None;
    if uses_gppgp && forecast_mode {
        let seeded = |c: &CvConfig, tag| CvConfig {
            seed: derive_seed(config.seed, idx, tag),
            ..*c
        };
        let pe = stage(
            "estimate",
            estimate_covariate_params(&precip, config.precip_family, &seeded(&config.precip_cv, 1)),
        )?;
        let ve = stage(
            "estimate",
            estimate_covariate_params(&vpd, config.vpd_family, &seeded(&config.vpd_cv, 2)),
        )?;
        out.params
            .extend(cov_params_rows(split, &config.data.precip, &pe.params, pe.objective));
        out.params
            .extend(cov_params_rows(split, &config.data.vpd, &ve.params, ve.objective));
        if task != Task::Estimate {
            let pf = stage("forecast-covariates", forecast_covariate(&precip, &pe.params))?;
            let vf = stage("forecast-covariates", forecast_covariate(&vpd, &ve.params))?;
            let mut precip_input = pf.means.clone();
            let vpd_input = vf.means.clone();
            let (pp, _) = from_predictive(&[pf.predictive.clone().expect("ppgp interval")]);
            let (vp, _) = from_predictive(&[vf.predictive.clone().expect("ppgp interval")]);
            let ptruth = columns(&panels.precip, tests);
            let vtruth = columns(&panels.vpd, tests);
            out.results.push(result(
                "ppgp",
                &config.data.precip,
                tests,
                ptruth.clone(),
                pp,
                Some(ci_of(&pf)),
            ));
            out.results
                .push(result("ppgp", &config.data.vpd, tests, vtruth, vp, Some(ci_of(&vf))));
            if let (Some(r), Some(partial)) = (config.blend_r, &panels.partial) {
                let train_partial = partial.select_years(first, last)?;
                let blend = stage(
                    "forecast-covariates",
                    BlendModel::fit(&precip, &train_partial, &pe.params, r),
                )?;
                let now: Vec<f64> = partial
                    .year_map(split)
                    .expect("year checked")
                    .iter()
                    .copied()
                    .collect();
                let bf = blend.forecast(&pf, &now)?;
                out.params.push(ParamRow {
                    split,
                    variable: config.data.precip.clone(),
                    method: CovariateMethod::Weighted.name().into(),
                    parameter: "weight".into(),
                    value: blend.weight,
                });
                precip_input = bf.means.clone();
                out.results.push(result(
                    CovariateMethod::Weighted.name(),
                    &config.data.precip,
                    tests,
                    ptruth,
                    DMatrix::from_column_slice(bf.means.len(), 1, &bf.means),
                    None,
                ));
                out.cov_forecasts.extend([pf, vf, bf]);
            } else {
                out.cov_forecasts.extend([pf, vf]);
            }
            gppgp_inputs = Some(DMatrix::from_fn(target.k(), 2, |i, l| {
                if l == 0 { precip_input[i] } else { vpd_input[i] }
            }));
        }
    }

    if uses_gppgp {
        let cv = CvConfig {
            seed: derive_seed(config.seed, idx, 0),
            ..config.gppgp_cv
        };
        let est = stage("estimate", estimate_gppgp_params(&covs, &target, &cv))?;
        for (l, g) in est.params.gammas.iter().enumerate() {
            out.params.push(ParamRow {
                split,
                variable: tv.clone(),
                method: "gppgp".into(),
                parameter: format!("gamma_{}", covs[l].variable()),
                value: *g,
            });
        }
        for (name, v) in [("nugget", est.params.nugget), ("cv_mse", est.objective)] {
            out.params.push(ParamRow {
                split,
                variable: tv.clone(),
                method: "gppgp".into(),
                parameter: name.into(),
                value: v,
            });
        }
        if task != Task::Estimate && task != Task::ForecastCovariates {
            let model = stage(
                "forecast-ndvi",
                fit_gppgp(&covs, &target, &est.params.gammas, est.params.nugget),
            )?;
            let preds: Vec<Vec<PredictiveT>> = tests
                .iter()
                .map(|&y| {
                    let x = match &gppgp_inputs {
                        Some(x) => x.clone(),
                        None => DMatrix::from_fn(target.k(), 2, |i, l| {
                            let p = if l == 0 { &panels.precip } else { &panels.vpd };
                            p.values()[(i, p.year_index(y).expect("year checked"))]
                        }),
                    };
                    model.predict(&x)
                })
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("forecast-ndvi"))?;
            let (mean, ci) = from_predictive(&preds);
            out.results.push(result(
                "gppgp",
                tv,
                tests,
                columns(&panels.target, tests),
                mean,
                Some(ci),
            ));
        }
    }
    if task == Task::Estimate || task == Task::ForecastCovariates {
        return Ok(out);
    }

    let truth = columns(&panels.target, tests);
    for &m in &config.methods {
        let r = match m {
            Method::Gppgp => continue,
            Method::Lm => {
                let preds: Vec<BaselineForecast> = tests
                    .iter()
                    .map(|&y| {
                        let x = if forecast_mode {
                            let pt = linear_trend_forecast(&precip, y)?;
                            let vt = linear_trend_forecast(&vpd, y)?;
                            DMatrix::from_fn(target.k(), 2, |i, l| {
                                if l == 0 { pt.predictive[i].mean } else { vt.predictive[i].mean }
                            })
                        } else {
                            DMatrix::from_fn(target.k(), 2, |i, l| {
                                let p = if l == 0 { &panels.precip } else { &panels.vpd };
                                p.values()[(i, p.year_index(y).expect("year checked"))]
                            })
                        };
                        fit_predict_lm(&covs, &target, &x)
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| e.in_stage("forecast-ndvi"))?;
                let p: Vec<Vec<PredictiveT>> = preds.into_iter().map(|f| f.predictive).collect();
                let (mean, ci) = from_predictive(&p);
                result("lm", tv, tests, truth.clone(), mean, Some(ci))
            }
            Method::LocationMean | Method::PreviousYear => {
                let f = if m == Method::LocationMean { location_mean } else { previous_year };
                let cols: Vec<Vec<f64>> = tests
                    .iter()
                    .map(|&y| f(&target, y))
                    .collect::<Result<_>>()
                    .map_err(|e| e.in_stage("forecast-ndvi"))?;
                let mean = DMatrix::from_fn(target.k(), tests.len(), |i, j| cols[j][i]);
                result(m.name(), tv, tests, truth.clone(), mean, None)
            }
            Method::Ar1 => {
                let preds: Vec<Vec<PredictiveT>> = tests
                    .iter()
                    .map(|&y| ar1_baseline(&target, y).map(|f| f.predictive))
                    .collect::<Result<_>>()
                    .map_err(|e| e.in_stage("forecast-ndvi"))?;
                let (mean, ci) = from_predictive(&preds);
                result("ar1", tv, tests, truth.clone(), mean, Some(ci))
            }
        };
        out.results.push(r);
    }
    Ok(out)
}

fn ci_of(f: &CovariateForecast) -> (DMatrix<f64>, DMatrix<f64>) {
    from_predictive(&[f.predictive.clone().expect("ppgp interval")]).1
}

/// Concatenate per-split results of the same method and variable along years.
fn merge_results(results: Vec<MethodResult>) -> Vec<MethodResult> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<MethodResult>> = BTreeMap::new();
    for r in results {
        let key = (r.method.clone(), r.variable.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let parts = groups.remove(&key).expect("grouped");
            let k = parts[0].truth.nrows();
            let years: Vec<i32> = parts.iter().flat_map(|p| p.years.iter().copied()).collect();
            let cat = |f: &dyn Fn(&MethodResult) -> &DMatrix<f64>| {
                let mut m = DMatrix::zeros(k, years.len());
                let mut col = 0;
                for p in &parts {
                    let src = f(p);
                    m.columns_mut(col, src.ncols()).copy_from(src);
                    col += src.ncols();
                }
                m
            };
            let interval = parts.iter().all(|p| p.interval.is_some()).then(|| {
                (
                    cat(&|p| &p.interval.as_ref().expect("checked").0),
                    cat(&|p| &p.interval.as_ref().expect("checked").1),
                )
            });
            MethodResult {
                method: key.0,
                variable: key.1,
                truth: cat(&|p| &p.truth),
                mean: cat(&|p| &p.mean),
                interval,
                years,
            }
        })
        .collect()
}

fn write_params<W: Write>(w: W, rows: &[ParamRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["split", "variable", "method", "parameter", "value"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.split.to_string(),
            r.variable.clone(),
            r.method.clone(),
            r.parameter.clone(),
            float10(r.value),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `variable,lon,lat,year,mean,lower95,upper95,method`, the covariate schema.
fn write_forecast_csv<'a, W: Write>(
    w: W,
    coords: &[(f64, f64)],
    results: impl Iterator<Item = &'a MethodResult>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variable", "lon", "lat", "year", "mean", "lower95", "upper95", "method"])
        .map_err(csv_err)?;
    for r in results {
        for (j, year) in r.years.iter().enumerate() {
            for (i, (lon, lat)) in coords.iter().enumerate() {
                let (lo, hi) = match &r.interval {
                    Some((lo, hi)) => (float10(lo[(i, j)]), float10(hi[(i, j)])),
                    None => (String::new(), String::new()),
                };
                out.write_record([
                    r.variable.clone(),
                    float10(*lon),
                    float10(*lat),
                    year.to_string(),
                    float10(r.mean[(i, j)]),
                    lo,
                    hi,
                    r.method.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn write_heatmap<W: Write>(w: W, coords: &[(f64, f64)], values: impl Iterator<Item = f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lon", "lat", "value"]).map_err(csv_err)?;
    for ((lon, lat), v) in coords.iter().zip(values) {
        out.write_record([float10(*lon), float10(*lat), float10(v)])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

//! Pipeline configuration: an INI-style `key = value` file with sections.
//!
//! ```text
//! [data]
//! inputs = ndvi.csv, precip.csv, vpd.csv
//! [methods]
//! list = gppgp, lm, location_mean, previous_year, ar1
//! mode = forecast
//! [split]
//! scheme = expanding
//! train_start = 2003
//! train_end = 2012
//! test_end = 2020
//! ```
//!
//! Every key is optional; defaults are listed in [`Config::default`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::dataio::{GridDef, DEFAULT_CELL};
use crate::error::{Error, Result};
use crate::feature_select::{default_candidates, Criterion, MonthRange};
use crate::hyperopt::{CvConfig, SearchStrategy};
use crate::kernel::KernelFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Gppgp,
    Lm,
    LocationMean,
    PreviousYear,
    Ar1,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gppgp,
        Method::Lm,
        Method::LocationMean,
        Method::PreviousYear,
        Method::Ar1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gppgp => "gppgp",
            Method::Lm => "lm",
            Method::LocationMean => "location_mean",
            Method::PreviousYear => "previous_year",
            Method::Ar1 => "ar1",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Covariates of the target year are forecast first.
    Forecast,
    /// Covariates of the target year are observed.
    Attribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Train on every year before the target year.
    Expanding,
    /// Train on a fixed-length window right before the target year.
    Rolling,
    /// Train once on the training years and predict every test year.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Previously exported aligned store.
    pub store: Option<PathBuf>,
    /// Raw long-format CSV files.
    pub inputs: Vec<PathBuf>,
    pub target: String,
    pub precip: String,
    pub vpd: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub target: MonthRange,
    pub precip: MonthRange,
    pub vpd: MonthRange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub scheme: Scheme,
    pub train_start: i32,
    pub train_end: i32,
    pub test_end: i32,
}

impl SplitConfig {
    /// `(train_first, train_last, test_years)` per fit.
    pub fn splits(&self) -> Vec<(i32, i32, Vec<i32>)> {
        let len = self.train_end - self.train_start + 1;
        let tests = self.train_end + 1..=self.test_end;
        match self.scheme {
            Scheme::Fixed => vec![(self.train_start, self.train_end, tests.collect())],
            Scheme::Expanding => tests.map(|t| (self.train_start, t - 1, vec![t])).collect(),
            Scheme::Rolling => tests.map(|t| (t - len, t - 1, vec![t])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub enabled: bool,
    pub criterion: Criterion,
    pub subsample_size: usize,
    pub precip_candidates: Vec<MonthRange>,
    pub vpd_candidates: Vec<MonthRange>,
    /// Replace the configured windows by the top-ranked pair.
    pub use_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub grid: Option<GridDef>,
    pub windows: Windows,
    pub methods: Vec<Method>,
    pub mode: Mode,
    /// Months of the target year observed for the precipitation blend.
    pub blend_r: Option<u8>,
    pub gppgp_cv: CvConfig,
    pub precip_cv: CvConfig,
    pub precip_family: KernelFamily,
    pub vpd_cv: CvConfig,
    pub vpd_family: KernelFamily,
    pub split: SplitConfig,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig {
                store: None,
                inputs: Vec::new(),
                target: "ndvi".into(),
                precip: "precip".into(),
                vpd: "vpd".into(),
            },
            grid: None,
            windows: Windows {
                target: MonthRange::new("ndvi", 8, 8).expect("valid"),
                precip: MonthRange::window("precip", 1, 8).expect("valid"),
                vpd: MonthRange::window("vpd", 7, 8).expect("valid"),
            },
            methods: Method::ALL.to_vec(),
            mode: Mode::Forecast,
            blend_r: None,
            gppgp_cv: CvConfig::gppgp_default(),
            precip_cv: CvConfig::precip_default(),
            precip_family: KernelFamily::Ar1Power,
            vpd_cv: CvConfig::vpd_default(),
            vpd_family: KernelFamily::Matern25,
            split: SplitConfig {
                scheme: Scheme::Expanding,
                train_start: 2003,
                train_end: 2012,
                test_end: 2020,
            },
            features: FeatureConfig {
                enabled: false,
                criterion: Criterion::MarginalLik,
                subsample_size: 500,
                precip_candidates: default_candidates("precip"),
                vpd_candidates: default_candidates("vpd"),
                use_best: false,
            },
            seed: 0,
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("data", &["store", "inputs", "target", "precip", "vpd"]),
    ("grid", &["lon0", "lat0", "cell", "nlon", "nlat"]),
    ("windows", &["target", "precip", "vpd"]),
    ("methods", &["list", "mode", "blend_r"]),
    ("cv", &["subsample", "validation", "search", "levels", "max_iters", "tol"]),
    (
        "covariate_cv",
        &[
            "precip_subsample",
            "precip_validation",
            "precip_family",
            "vpd_subsample",
            "vpd_validation",
            "vpd_family",
        ],
    ),
    ("split", &["scheme", "train_start", "train_end", "test_end"]),
    (
        "features",
        &["enabled", "criterion", "subsample", "precip_candidates", "vpd_candidates", "use_best"],
    ),
    ("run", &["seed"]),
];

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{v}`")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected true/false, got `{v}`"))),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// `a-b` or a single month `a`.
fn parse_range(variable: &str, v: &str, window: bool) -> Result<MonthRange> {
    let bad = || Error::Config(format!("invalid month range `{v}` for {variable}"));
    let (a, b) = match v.trim().split_once('-') {
        Some((a, b)) => (a.trim(), b.trim()),
        None => (v.trim(), v.trim()),
    };
    let a: u8 = a.parse().map_err(|_| bad())?;
    let b: u8 = b.parse().map_err(|_| bad())?;
    let r = if window {
        MonthRange::window(variable, a, b)
    } else {
        MonthRange::new(variable, a, b)
    };
    r.map_err(|e| Error::Config(e.to_string()))
}

fn parse_candidates(variable: &str, v: &str) -> Result<Vec<MonthRange>> {
    if v.trim() == "default" {
        return Ok(default_candidates(variable));
    }
    let out: Vec<MonthRange> = list(v)
        .into_iter()
        .map(|s| parse_range(variable, s, true))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("no {variable} candidate windows")));
    }
    Ok(out)
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parse config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside any section")));
                }
                continue;
            };
            let allowed = KEYS
                .iter()
                .find(|(s, _)| *s == name)
                .ok_or_else(|| Error::Config(format!("unknown section [{name}]")))?
                .1;
            let entry = sections.entry(name.to_string()).or_default();
            for (k, v) in props.iter() {
                if !allowed.contains(&k) {
                    return Err(Error::Config(format!("unknown key `{k}` in [{name}]")));
                }
                entry.insert(k.to_string(), v.to_string());
            }
        }
        let get = |s: &str, k: &str| sections.get(s).and_then(|m| m.get(k)).map(String::as_str);

        let mut c = Config::default();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        if let Some(v) = get("data", "store") {
            c.data.store = Some(resolve(v.trim()));
        }
        if let Some(v) = get("data", "inputs") {
            c.data.inputs = list(v).into_iter().map(resolve).collect();
        }
        for (key, slot) in [
            ("target", &mut c.data.target),
            ("precip", &mut c.data.precip),
            ("vpd", &mut c.data.vpd),
        ] {
            if let Some(v) = get("data", key) {
                *slot = v.trim().to_string();
            }
        }

        if sections.contains_key("grid") {
            let num = |k: &str| -> Result<Option<f64>> {
                get("grid", k).map(|v| parse("grid", k, v)).transpose()
            };
            let count = |k: &str| -> Result<usize> {
                get("grid", k)
                    .map(|v| parse("grid", k, v))
                    .transpose()?
                    .ok_or_else(|| Error::Config(format!("[grid] missing `{k}`")))
            };
            let lon0 = num("lon0")?.ok_or_else(|| Error::Config("[grid] missing `lon0`".into()))?;
            let lat0 = num("lat0")?.ok_or_else(|| Error::Config("[grid] missing `lat0`".into()))?;
            let cell = num("cell")?.unwrap_or(DEFAULT_CELL);
            c.grid = Some(GridDef::new(lon0, lat0, cell, count("nlon")?, count("nlat")?)?);
        }

        c.windows = Windows {
            target: match get("windows", "target") {
                Some(v) => parse_range(&c.data.target, v, false)?,
                None => MonthRange::new(c.data.target.clone(), 8, 8)?,
            },
            precip: match get("windows", "precip") {
                Some(v) => parse_range(&c.data.precip, v, true)?,
                None => MonthRange::window(c.data.precip.clone(), 1, 8)?,
            },
            vpd: match get("windows", "vpd") {
                Some(v) => parse_range(&c.data.vpd, v, true)?,
                None => MonthRange::window(c.data.vpd.clone(), 7, 8)?,
            },
        };

        if let Some(v) = get("methods", "list") {
            let mut m: Vec<Method> = list(v).into_iter().map(str::parse).collect::<Result<_>>()?;
            m.sort_unstable();
            m.dedup();
            if m.is_empty() {
                return Err(Error::Config("[methods] list is empty".into()));
            }
            c.methods = m;
        }
        if let Some(v) = get("methods", "mode") {
            c.mode = match v.trim() {
                "forecast" => Mode::Forecast,
                "attribution" => Mode::Attribution,
                o => return Err(Error::Config(format!("unknown mode `{o}`"))),
            };
        }
        if let Some(v) = get("methods", "blend_r") {
            let r: u8 = parse("methods", "blend_r", v)?;
            c.blend_r = match r {
                0 => None,
                1..=7 => Some(r),
                _ => return Err(Error::Config(format!("blend_r must be in 0..7, got {r}"))),
            };
        }

        if let Some(v) = get("cv", "subsample") {
            c.gppgp_cv.subsample_size = parse("cv", "subsample", v)?;
        }
        if let Some(v) = get("cv", "validation") {
            c.gppgp_cv.validation_years = parse("cv", "validation", v)?;
        }
        let levels: usize = get("cv", "levels").map(|v| parse("cv", "levels", v)).transpose()?.unwrap_or(8);
        let max_iters: usize = get("cv", "max_iters")
            .map(|v| parse("cv", "max_iters", v))
            .transpose()?
            .unwrap_or(200);
        let tol: f64 = get("cv", "tol").map(|v| parse("cv", "tol", v)).transpose()?.unwrap_or(1e-10);
        let search = match get("cv", "search").map(str::trim).unwrap_or("nelder_mead") {
            "nelder_mead" => SearchStrategy::NelderMead {
                levels,
                max_iters,
                tol,
            },
            "grid" => SearchStrategy::GridSearch { levels },
            o => return Err(Error::Config(format!("unknown search `{o}`"))),
        };
        c.gppgp_cv.search = search;
        c.precip_cv.search = search;
        c.vpd_cv.search = search;
        for (key, slot) in [
            ("precip_subsample", &mut c.precip_cv.subsample_size),
            ("precip_validation", &mut c.precip_cv.validation_years),
            ("vpd_subsample", &mut c.vpd_cv.subsample_size),
            ("vpd_validation", &mut c.vpd_cv.validation_years),
        ] {
            if let Some(v) = get("covariate_cv", key) {
                *slot = parse("covariate_cv", key, v)?;
            }
        }
        if let Some(v) = get("covariate_cv", "precip_family") {
            c.precip_family = v.trim().parse()?;
        }
        if let Some(v) = get("covariate_cv", "vpd_family") {
            c.vpd_family = v.trim().parse()?;
        }

        if let Some(v) = get("split", "scheme") {
            c.split.scheme = match v.trim() {
                "expanding" => Scheme::Expanding,
                "rolling" => Scheme::Rolling,
                "fixed" => Scheme::Fixed,
                o => return Err(Error::Config(format!("unknown split scheme `{o}`"))),
            };
        }
        for (key, slot) in [
            ("train_start", &mut c.split.train_start),
            ("train_end", &mut c.split.train_end),
            ("test_end", &mut c.split.test_end),
        ] {
            if let Some(v) = get("split", key) {
                *slot = parse("split", key, v)?;
            }
        }

        if let Some(v) = get("features", "enabled") {
            c.features.enabled = parse_bool("features", "enabled", v)?;
        }
        if let Some(v) = get("features", "use_best") {
            c.features.use_best = parse_bool("features", "use_best", v)?;
        }
        if let Some(v) = get("features", "criterion") {
            c.features.criterion = v.trim().parse()?;
        }
        if let Some(v) = get("features", "subsample") {
            c.features.subsample_size = parse("features", "subsample", v)?;
        }
        c.features.precip_candidates = match get("features", "precip_candidates") {
            Some(v) => parse_candidates(&c.data.precip, v)?,
            None => default_candidates(&c.data.precip),
        };
        c.features.vpd_candidates = match get("features", "vpd_candidates") {
            Some(v) => parse_candidates(&c.data.vpd, v)?,
            None => default_candidates(&c.data.vpd),
        };
        if let Some(v) = get("run", "seed") {
            c.seed = parse("run", "seed", v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.split;
        if s.train_end < s.train_start + 2 {
            return Err(Error::Config(format!(
                "training period {}-{} has fewer than 3 years",
                s.train_start, s.train_end
            )));
        }
        if s.test_end <= s.train_end {
            return Err(Error::Config(format!(
                "test_end {} must follow train_end {}",
                s.test_end, s.train_end
            )));
        }
        if s.scheme == Scheme::Fixed {
            if self.mode == Mode::Forecast {
                return Err(Error::Config(
                    "forecast mode predicts one year ahead; use the expanding or rolling scheme".into(),
                ));
            }
            if self.methods.contains(&Method::Ar1) {
                return Err(Error::Config(
                    "the AR(1) baseline forecasts one year ahead and cannot use the fixed scheme".into(),
                ));
            }
        }
        if self.blend_r.is_some() && self.mode == Mode::Attribution {
            return Err(Error::Config("blend_r only applies in forecast mode".into()));
        }
        Ok(())
    }

    /// Key-value dump for logs and the run manifest.
    pub fn summary(&self) -> Vec<(String, String)> {
        vec![
            ("mode".into(), format!("{:?}", self.mode).to_lowercase()),
            (
                "methods".into(),
                self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(";"),
            ),
            ("scheme".into(), format!("{:?}", self.split.scheme).to_lowercase()),
            (
                "train".into(),
                format!("{}-{}", self.split.train_start, self.split.train_end),
            ),
            ("test_end".into(), self.split.test_end.to_string()),
            ("precip_window".into(), format!("{}-{}", self.windows.precip.start, self.windows.precip.end)),
            ("vpd_window".into(), format!("{}-{}", self.windows.vpd.start, self.windows.vpd.end)),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

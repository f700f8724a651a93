//! Long-format CSV ingestion, alignment onto one regular grid, monthly window
//! aggregation, and export of the aligned store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_select::{MonthRange, MonthlySource};
use crate::metrics::csv_err;
use crate::panel::GridPanel;

/// Coordinates closer than this are the same point.
pub const COORD_TOL: f64 = 1e-6;
/// Default cell size of the target grid, in degrees.
pub const DEFAULT_CELL: f64 = 0.05;
const MAX_LISTED: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub variable: String,
    pub lon: f64,
    pub lat: f64,
    pub year: i32,
    pub month: u8,
    pub value: f64,
}

/// Snap to a 1e-9 degree lattice so computed cell centres compare exactly.
pub fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn coord_key(lon: f64, lat: f64) -> (i64, i64) {
    ((lon * 1e9).round() as i64, (lat * 1e9).round() as i64)
}

/// Parse `variable,lon,lat,year,month,value` rows. Column order follows the header.
pub fn read_records<R: Read>(reader: R, label: &str) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{label}: cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{label}: missing column `{name}`")))
    };
    let idx = [
        col("variable")?,
        col("lon")?,
        col("lat")?,
        col("year")?,
        col("month")?,
        col("value")?,
    ];
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Data(format!("{label}:{line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str, v: &str| Error::Data(format!("{label}:{line}: invalid {what} `{v}`"));
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let variable = field(0).to_string();
        if variable.is_empty() {
            return Err(bad("variable", ""));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            let s = field(i);
            let v: f64 = s.parse().map_err(|_| bad(what, s))?;
            if !v.is_finite() {
                return Err(bad(what, s));
            }
            Ok(v)
        };
        let lon = num(1, "lon")?;
        let lat = num(2, "lat")?;
        let value = num(5, "value")?;
        let year: i32 = field(3).parse().map_err(|_| bad("year", field(3)))?;
        let month: u8 = field(4).parse().map_err(|_| bad("month", field(4)))?;
        if !(1..=12).contains(&month) {
            return Err(bad("month", field(4)));
        }
        out.push(RawRecord {
            variable,
            lon,
            lat,
            year,
            month,
            value,
        });
    }
    Ok(out)
}

/// Regular lon/lat grid of cell centres `lon0 + i * dlon`, `lat0 + j * dlat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDef {
    pub lon0: f64,
    pub lat0: f64,
    pub dlon: f64,
    pub dlat: f64,
    pub nlon: usize,
    pub nlat: usize,
}

impl GridDef {
    pub fn new(lon0: f64, lat0: f64, cell: f64, nlon: usize, nlat: usize) -> Result<Self> {
        let g = Self {
            lon0,
            lat0,
            dlon: cell,
            dlat: cell,
            nlon,
            nlat,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.lon0, self.lat0, self.dlon, self.dlat].iter().all(|v| v.is_finite())
            && self.dlon > 0.0
            && self.dlat > 0.0
            && self.nlon > 0
            && self.nlat > 0;
        if !ok {
            return Err(Error::Config(format!("invalid grid definition {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nlon * self.nlat
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell centres, latitude rows outer, longitude inner.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.nlat {
            for i in 0..self.nlon {
                out.push((
                    snap(self.lon0 + i as f64 * self.dlon),
                    snap(self.lat0 + j as f64 * self.dlat),
                ));
            }
        }
        out
    }

    /// Smallest regular grid whose nodes include every point.
    pub fn infer(points: &[(f64, f64)]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("cannot infer a grid from no points".into()));
        }
        let axis = |vals: Vec<f64>, what: &str| -> Result<(f64, f64, usize)> {
            let mut v = vals;
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= COORD_TOL);
            if v.len() == 1 {
                return Ok((v[0], DEFAULT_CELL, 1));
            }
            let step = v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            let span = v[v.len() - 1] - v[0];
            let n = (span / step).round() as usize + 1;
            let step = snap(span / (n - 1) as f64);
            for x in &v {
                let f = (x - v[0]) / step;
                if (f - f.round()).abs() * step > COORD_TOL {
                    return Err(Error::Data(format!("{what} coordinates are not on a regular grid")));
                }
            }
            Ok((v[0], step, n))
        };
        let (lon0, dlon, nlon) = axis(points.iter().map(|p| p.0).collect(), "longitude")?;
        let (lat0, dlat, nlat) = axis(points.iter().map(|p| p.1).collect(), "latitude")?;
        Ok(Self {
            lon0,
            lat0,
            dlon,
            dlat,
            nlon,
            nlat,
        })
    }

    /// Bilinear corners and weights at `(lon, lat)`, or `None` outside the grid.
    pub fn bilinear(&self, lon: f64, lat: f64) -> Option<[(usize, usize, f64); 4]> {
        let locate = |x: f64, x0: f64, d: f64, n: usize| -> Option<(usize, f64)> {
            let f = (x - x0) / d;
            let tol = COORD_TOL / d;
            if f < -tol || f > (n - 1) as f64 + tol {
                return None;
            }
            if n == 1 {
                return Some((0, 0.0));
            }
            let f = f.clamp(0.0, (n - 1) as f64);
            let i = (f.floor() as usize).min(n - 2);
            Some((i, f - i as f64))
        };
        let (i, tx) = locate(lon, self.lon0, self.dlon, self.nlon)?;
        let (j, ty) = locate(lat, self.lat0, self.dlat, self.nlat)?;
        let i1 = (i + 1).min(self.nlon - 1);
        let j1 = (j + 1).min(self.nlat - 1);
        Some([
            (i, j, (1.0 - tx) * (1.0 - ty)),
            (i1, j, tx * (1.0 - ty)),
            (i, j1, (1.0 - tx) * ty),
            (i1, j1, tx * ty),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub path: String,
    pub sha256: String,
    pub variables: Vec<String>,
}

/// Monthly values of one variable on the store grid, `NaN` where absent.
#[derive(Debug, Clone)]
struct MonthlyTensor {
    months: BTreeSet<u8>,
    regridded: bool,
    /// `[(cell * n_years + year) * 12 + month - 1]`.
    data: Vec<f64>,
}

/// Every variable on one shared grid and year axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedStore {
    grid: GridDef,
    coords: Vec<(f64, f64)>,
    years: Vec<i32>,
    variables: BTreeMap<String, MonthlyTensor>,
    provenance: Vec<Provenance>,
    dropped_cells: usize,
}

impl PartialEq for MonthlyTensor {
    // bitwise on values so absent (NaN) slots compare equal
    fn eq(&self, other: &Self) -> bool {
        self.months == other.months
            && self.regridded == other.regridded
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

struct SourceVar {
    records: Vec<RawRecord>,
}

fn find_duplicates(records: &[RawRecord]) -> Result<()> {
    let mut seen = HashMap::with_capacity(records.len());
    let mut dups = Vec::new();
    let mut total = 0usize;
    for r in records {
        let (x, y) = coord_key(r.lon, r.lat);
        let key = (r.variable.as_str(), x, y, r.year, r.month);
        if seen.insert(key, ()).is_some() {
            total += 1;
            if dups.len() < MAX_LISTED {
                dups.push(format!(
                    "({}, {}, {}, {}, {})",
                    r.variable, r.lon, r.lat, r.year, r.month
                ));
            }
        }
    }
    if total > 0 {
        return Err(Error::Data(format!(
            "{total} duplicate records, first: {}",
            dups.join(" ")
        )));
    }
    Ok(())
}

/// Read the files, align every variable onto `grid` (inferred from the
/// `target` variable when absent) and keep the cells valid for all of them.
pub fn ingest(paths: &[PathBuf], grid: Option<GridDef>, target: &str) -> Result<AlignedStore> {
    if paths.is_empty() {
        return Err(Error::Config("no input files".into()));
    }
    let mut records = Vec::new();
    let mut provenance = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", path.display()))
        })?;
        let label = path.display().to_string();
        let recs = read_records(bytes.as_slice(), &label)?;
        let vars: BTreeSet<String> = recs.iter().map(|r| r.variable.clone()).collect();
        provenance.push(Provenance {
            path: label,
            sha256: hex::encode(Sha256::digest(&bytes)),
            variables: vars.into_iter().collect(),
        });
        records.extend(recs);
    }
    let mut store = align(records, grid, target)?;
    store.provenance = provenance;
    Ok(store)
}

/// Alignment of parsed records; see [`ingest`].
pub fn align(records: Vec<RawRecord>, grid: Option<GridDef>, target: &str) -> Result<AlignedStore> {
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    find_duplicates(&records)?;
    let mut by_var: BTreeMap<String, SourceVar> = BTreeMap::new();
    for r in records {
        by_var
            .entry(r.variable.clone())
            .or_insert_with(|| SourceVar { records: Vec::new() })
            .records
            .push(r);
    }
    let grid = match grid {
        Some(g) => {
            g.validate()?;
            g
        }
        None => {
            let src = by_var.get(target).ok_or_else(|| {
                Error::Data(format!("target variable `{target}` not found to infer the grid"))
            })?;
            let pts: Vec<(f64, f64)> = src.records.iter().map(|r| (r.lon, r.lat)).collect();
            GridDef::infer(&pts)?
        }
    };
    let cells = grid.cells();

    let mut years: Option<BTreeSet<i32>> = None;
    for v in by_var.values() {
        let ys: BTreeSet<i32> = v.records.iter().map(|r| r.year).collect();
        years = Some(match years {
            None => ys,
            Some(prev) => prev.intersection(&ys).copied().collect(),
        });
    }
    let years: Vec<i32> = years.unwrap_or_default().into_iter().collect();
    if years.is_empty() {
        return Err(Error::Data("variables share no common year".into()));
    }
    let year_pos: HashMap<i32, usize> = years.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    let ny = years.len();

    let mut variables = BTreeMap::new();
    for (name, src) in &by_var {
        let months: BTreeSet<u8> = src.records.iter().map(|r| r.month).collect();
        let mut points: HashMap<(i64, i64), usize> = HashMap::new();
        let mut point_list = Vec::new();
        for r in &src.records {
            let key = coord_key(r.lon, r.lat);
            if !points.contains_key(&key) {
                points.insert(key, point_list.len());
                point_list.push((r.lon, r.lat));
            }
        }
        let mut raw = vec![f64::NAN; point_list.len() * ny * 12];
        for r in &src.records {
            if let Some(&y) = year_pos.get(&r.year) {
                let p = points[&coord_key(r.lon, r.lat)];
                raw[(p * ny + y) * 12 + usize::from(r.month) - 1] = r.value;
            }
        }
        let on_grid = point_list
            .iter()
            .all(|&(x, y)| grid.bilinear(x, y).is_some_and(|w| is_node(&grid, &w, x, y)));
        let mut data = vec![f64::NAN; cells.len() * ny * 12];
        if on_grid {
            let mut lookup: HashMap<(i64, i64), usize> = HashMap::new();
            for (p, &(x, y)) in point_list.iter().enumerate() {
                let w = grid.bilinear(x, y).expect("on grid");
                let (i, j, _) = nearest_corner(&w);
                lookup.insert((i as i64, j as i64), p);
            }
            for (c, _) in cells.iter().enumerate() {
                let key = ((c % grid.nlon) as i64, (c / grid.nlon) as i64);
                if let Some(&p) = lookup.get(&key) {
                    data[c * ny * 12..(c + 1) * ny * 12]
                        .copy_from_slice(&raw[p * ny * 12..(p + 1) * ny * 12]);
                }
            }
        } else {
            let src_grid = GridDef::infer(&point_list)?;
            let mut node = vec![None; src_grid.len()];
            for (p, &(x, y)) in point_list.iter().enumerate() {
                let w = src_grid.bilinear(x, y).expect("point on its own grid");
                let (i, j, _) = nearest_corner(&w);
                node[j * src_grid.nlon + i] = Some(p);
            }
            let mut outside = 0usize;
            for (c, &(x, y)) in cells.iter().enumerate() {
                let Some(w) = src_grid.bilinear(x, y) else {
                    outside += 1;
                    continue;
                };
                for slot in 0..ny * 12 {
                    let mut acc = 0.0;
                    for &(i, j, wt) in &w {
                        if wt == 0.0 {
                            continue;
                        }
                        acc += wt
                            * match node[j * src_grid.nlon + i] {
                                Some(p) => raw[p * ny * 12 + slot],
                                None => f64::NAN,
                            };
                    }
                    data[c * ny * 12 + slot] = acc;
                }
            }
            if outside > 0 {
                log::info!("{name}: {outside} target cells outside the source grid");
            }
        }
        variables.insert(
            name.clone(),
            MonthlyTensor {
                months,
                regridded: !on_grid,
                data,
            },
        );
    }

    let valid: Vec<usize> = (0..cells.len())
        .filter(|&c| {
            variables.values().all(|t| {
                (0..ny).all(|y| {
                    t.months
                        .iter()
                        .all(|&m| t.data[(c * ny + y) * 12 + usize::from(m) - 1].is_finite())
                })
            })
        })
        .collect();
    let dropped_cells = cells.len() - valid.len();
    if dropped_cells > 0 {
        log::info!("{dropped_cells} of {} cells dropped by the common mask", cells.len());
    }
    if valid.is_empty() {
        return Err(Error::Data("no grid cell is valid for every variable".into()));
    }
    for t in variables.values_mut() {
        let mut kept = Vec::with_capacity(valid.len() * ny * 12);
        for &c in &valid {
            kept.extend_from_slice(&t.data[c * ny * 12..(c + 1) * ny * 12]);
        }
        t.data = kept;
    }
    Ok(AlignedStore {
        grid,
        coords: valid.iter().map(|&c| cells[c]).collect(),
        years,
        variables,
        provenance: Vec::new(),
        dropped_cells,
    })
}

fn nearest_corner(w: &[(usize, usize, f64); 4]) -> (usize, usize, f64) {
    *w.iter().max_by(|a, b| a.2.total_cmp(&b.2)).expect("four corners")
}

fn is_node(grid: &GridDef, w: &[(usize, usize, f64); 4], x: f64, y: f64) -> bool {
    let (i, j, _) = nearest_corner(w);
    (grid.lon0 + i as f64 * grid.dlon - x).abs() <= COORD_TOL
        && (grid.lat0 + j as f64 * grid.dlat - y).abs() <= COORD_TOL
}

impl AlignedStore {
    pub fn grid(&self) -> &GridDef {
        &self.grid
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn k(&self) -> usize {
        self.coords.len()
    }

    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.variables.keys().map(String::as_str)
    }

    pub fn months(&self, variable: &str) -> Option<Vec<u8>> {
        self.variables.get(variable).map(|t| t.months.iter().copied().collect())
    }

    pub fn regridded(&self, variable: &str) -> Option<bool> {
        self.variables.get(variable).map(|t| t.regridded)
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn dropped_cells(&self) -> usize {
        self.dropped_cells
    }

    pub fn value(&self, variable: &str, cell: usize, year: i32, month: u8) -> Option<f64> {
        let t = self.variables.get(variable)?;
        let y = self.years.iter().position(|&v| v == year)?;
        let v = t.data[(cell * self.years.len() + y) * 12 + usize::from(month) - 1];
        v.is_finite().then_some(v)
    }

    /// Per cell and year, the unweighted mean of the window's months.
    pub fn aggregate(&self, window: &MonthRange) -> Result<GridPanel> {
        let t = self.variables.get(&window.variable).ok_or_else(|| {
            Error::Data(format!("variable `{}` not in the store", window.variable))
        })?;
        if let Some(m) = window.months().find(|m| !t.months.contains(m)) {
            return Err(Error::Data(format!(
                "{}: month {m} missing for window {}-{}",
                window.variable, window.start, window.end
            )));
        }
        let ny = self.years.len();
        let len = window.len() as f64;
        let values = DMatrix::from_fn(self.k(), ny, |c, y| {
            window
                .months()
                .map(|m| t.data[(c * ny + y) * 12 + usize::from(m) - 1])
                .sum::<f64>()
                / len
        });
        GridPanel::new(&window.variable, self.coords.clone(), self.years.clone(), values)
    }

    /// Long CSV of every stored value, shortest round-trip float formatting.
    pub fn export_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variable", "lon", "lat", "year", "month", "value"])
            .map_err(csv_err)?;
        let ny = self.years.len();
        for (name, t) in &self.variables {
            for (c, (lon, lat)) in self.coords.iter().enumerate() {
                for (y, year) in self.years.iter().enumerate() {
                    for &m in &t.months {
                        let v = t.data[(c * ny + y) * 12 + usize::from(m) - 1];
                        out.write_record([
                            name.clone(),
                            lon.to_string(),
                            lat.to_string(),
                            year.to_string(),
                            m.to_string(),
                            v.to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// `path,sha256,variables` per source file.
    pub fn write_provenance_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["path", "sha256", "variables", "regridded"])
            .map_err(csv_err)?;
        for p in &self.provenance {
            let regridded: Vec<&str> = p
                .variables
                .iter()
                .filter(|v| self.regridded(v) == Some(true))
                .map(String::as_str)
                .collect();
            out.write_record([
                p.path.clone(),
                p.sha256.clone(),
                p.variables.join(";"),
                regridded.join(";"),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Re-read an exported store.
    pub fn load(path: &Path, target: &str) -> Result<Self> {
        ingest(&[path.to_path_buf()], None, target)
    }
}

impl MonthlySource for AlignedStore {
    fn aggregate(&self, window: &MonthRange) -> Result<GridPanel> {
        AlignedStore::aggregate(self, window)
    }
}

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One annual variable on `k` grid cells over `n` labelled years.
///
/// `values` is `k x n`: row `i` is the series of grid `i`, column `j` the
/// map of year `years[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPanel {
    variable: String,
    coords: Vec<(f64, f64)>,
    years: Vec<i32>,
    values: DMatrix<f64>,
}

impl GridPanel {
    pub fn new(
        variable: impl Into<String>,
        coords: Vec<(f64, f64)>,
        years: Vec<i32>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        let variable = variable.into();
        if coords.is_empty() {
            return Err(Error::Shape(format!("panel `{variable}` has no grid cells")));
        }
        if years.is_empty() {
            return Err(Error::Shape(format!("panel `{variable}` has no years")));
        }
        if values.nrows() != coords.len() || values.ncols() != years.len() {
            return Err(Error::Shape(format!(
                "panel `{variable}`: values are {}x{} but there are {} grids and {} years",
                values.nrows(),
                values.ncols(),
                coords.len(),
                years.len()
            )));
        }
        if years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "panel `{variable}`: years must be strictly increasing"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (i, j) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Data(format!(
                "panel `{variable}`: non-finite value at grid {i}, year {}",
                years[j]
            )));
        }
        Ok(Self {
            variable,
            coords,
            years,
            values,
        })
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Number of grid cells.
    pub fn k(&self) -> usize {
        self.coords.len()
    }

    /// Number of years.
    pub fn n(&self) -> usize {
        self.years.len()
    }

    pub fn last_year(&self) -> i32 {
        *self.years.last().expect("panel has years")
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }

    /// Series of one grid cell.
    pub fn series(&self, grid: usize) -> DVector<f64> {
        self.values.row(grid).transpose()
    }

    /// Map of one year, if present.
    pub fn year_map(&self, year: i32) -> Option<DVector<f64>> {
        self.year_index(year).map(|j| self.values.column(j).into_owned())
    }

    pub fn renamed(mut self, variable: impl Into<String>) -> Self {
        self.variable = variable.into();
        self
    }

    /// Years in `first..=last`.
    pub fn select_years(&self, first: i32, last: i32) -> Result<GridPanel> {
        let idx: Vec<usize> = (0..self.n())
            .filter(|&j| self.years[j] >= first && self.years[j] <= last)
            .collect();
        if idx.is_empty() {
            return Err(Error::Data(format!(
                "panel `{}` has no years in {first}..={last}",
                self.variable
            )));
        }
        let values = self.values.select_columns(idx.iter());
        let years = idx.iter().map(|&j| self.years[j]).collect();
        GridPanel::new(self.variable.clone(), self.coords.clone(), years, values)
    }

    pub fn subset_grids(&self, grids: &[usize]) -> Result<GridPanel> {
        if let Some(&bad) = grids.iter().find(|&&i| i >= self.k()) {
            return Err(Error::Shape(format!(
                "grid index {bad} out of range for panel with {} grids",
                self.k()
            )));
        }
        let values = self.values.select_rows(grids.iter());
        let coords = grids.iter().map(|&i| self.coords[i]).collect();
        GridPanel::new(self.variable.clone(), coords, self.years.clone(), values)
    }

    /// Whether `other` has the same grid cells and years.
    pub fn same_layout(&self, other: &GridPanel) -> bool {
        self.years == other.years && self.coords == other.coords
    }

    pub(crate) fn check_same_layout(&self, other: &GridPanel) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "panels `{}` and `{}` do not share grids and years",
                self.variable, other.variable
            )))
        }
    }
}

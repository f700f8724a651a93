//! Forecast evaluation: RMSE, interval coverage and length, gross totals.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fmt::{float10, opt_float10};

fn check_shapes(what: &str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: empty input")));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what}: non-finite values")));
    }
    Ok(())
}

/// Root mean squared error over every grid cell and test year.
pub fn rmse(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    check_shapes("rmse", truth, pred)?;
    let sse: f64 = truth.iter().zip(pred.iter()).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Fraction of truths inside `[lower, upper]` (inclusive) and mean interval length.
pub fn coverage_and_length(
    truth: &DMatrix<f64>,
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    check_shapes("coverage", truth, lower)?;
    check_shapes("coverage", truth, upper)?;
    if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
        return Err(Error::Domain("coverage: interval with lower > upper".into()));
    }
    let n = truth.len() as f64;
    let covered = truth
        .iter()
        .zip(lower.iter().zip(upper.iter()))
        .filter(|(y, (l, u))| *l <= *y && *y <= *u)
        .count();
    let length: f64 = lower.iter().zip(upper.iter()).map(|(l, u)| u - l).sum();
    Ok((covered as f64 / n, length / n))
}

/// Column sums (one total per year) of a `k x n` matrix.
pub fn gross_totals(values: &DMatrix<f64>) -> Vec<f64> {
    values.column_iter().map(|c| c.sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrossRow {
    pub year: i32,
    pub gross_true: f64,
    pub gross_pred: f64,
    pub residual: f64,
}

/// Per-year gross totals of truth and forecast, residual = truth - forecast.
pub fn gross_series(
    truth: &DMatrix<f64>,
    pred: &DMatrix<f64>,
    years: &[i32],
) -> Result<Vec<GrossRow>> {
    check_shapes("gross", truth, pred)?;
    if years.len() != truth.ncols() {
        return Err(Error::Shape(format!(
            "gross: {} years for {} columns",
            years.len(),
            truth.ncols()
        )));
    }
    Ok(gross_totals(truth)
        .into_iter()
        .zip(gross_totals(pred))
        .zip(years)
        .map(|((t, p), &year)| GrossRow {
            year,
            gross_true: t,
            gross_pred: p,
            residual: t - p,
        })
        .collect())
}

/// Forecasts of one method for one variable over the test years.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: String,
    pub variable: String,
    pub years: Vec<i32>,
    /// `k x n*` observed values.
    pub truth: DMatrix<f64>,
    /// `k x n*` point forecasts.
    pub mean: DMatrix<f64>,
    /// 95% interval bounds, when the method provides them.
    pub interval: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub variable: String,
    /// `None` is the pooled row over all test years.
    pub year: Option<i32>,
    pub rmse: f64,
    pub p95: Option<f64>,
    pub l95: Option<f64>,
    pub gross_true: Option<f64>,
    pub gross_pred: Option<f64>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// `(method, variable, row)` per test year.
    pub gross: Vec<(String, String, GrossRow)>,
}

impl EvalReport {
    pub fn from_results(results: &[MethodResult]) -> Result<Self> {
        let mut report = EvalReport::default();
        for r in results {
            check_shapes(&r.method, &r.truth, &r.mean)?;
            let gross = gross_series(&r.truth, &r.mean, &r.years)?;
            for (j, g) in gross.iter().enumerate() {
                let t = r.truth.columns(j, 1).into_owned();
                let m = r.mean.columns(j, 1).into_owned();
                let (p95, l95) = match &r.interval {
                    Some((lo, hi)) => {
                        let (p, l) = coverage_and_length(
                            &t,
                            &lo.columns(j, 1).into_owned(),
                            &hi.columns(j, 1).into_owned(),
                        )?;
                        (Some(p), Some(l))
                    }
                    None => (None, None),
                };
                report.rows.push(ReportRow {
                    method: r.method.clone(),
                    variable: r.variable.clone(),
                    year: Some(g.year),
                    rmse: rmse(&t, &m)?,
                    p95,
                    l95,
                    gross_true: Some(g.gross_true),
                    gross_pred: Some(g.gross_pred),
                    residual: Some(g.residual),
                });
                report
                    .gross
                    .push((r.method.clone(), r.variable.clone(), *g));
            }
            let (p95, l95) = match &r.interval {
                Some((lo, hi)) => {
                    let (p, l) = coverage_and_length(&r.truth, lo, hi)?;
                    (Some(p), Some(l))
                }
                None => (None, None),
            };
            report.rows.push(ReportRow {
                method: r.method.clone(),
                variable: r.variable.clone(),
                year: None,
                rmse: rmse(&r.truth, &r.mean)?,
                p95,
                l95,
                gross_true: None,
                gross_pred: None,
                residual: None,
            });
        }
        Ok(report)
    }

    /// Pooled row of a method/variable pair.
    pub fn overall(&self, method: &str, variable: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.variable == variable && r.year.is_none())
    }

    /// RMSE of the yearly gross residuals of a method.
    pub fn gross_rmse(&self, method: &str, variable: &str) -> Option<f64> {
        let res: Vec<f64> = self
            .gross
            .iter()
            .filter(|(m, v, _)| m == method && v == variable)
            .map(|(_, _, g)| g.residual)
            .collect();
        (!res.is_empty())
            .then(|| (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt())
    }

    pub fn write_report_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "method",
            "variable",
            "year",
            "rmse",
            "p95",
            "l95",
            "gross_true",
            "gross_pred",
            "residual",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.method.clone(),
                r.variable.clone(),
                r.year.map(|y| y.to_string()).unwrap_or_else(|| "all".into()),
                float10(r.rmse),
                opt_float10(r.p95),
                opt_float10(r.l95),
                opt_float10(r.gross_true),
                opt_float10(r.gross_pred),
                opt_float10(r.residual),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Gross rows of one variable (the forecast target).
    pub fn write_gross_csv<W: Write>(&self, w: W, variable: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "year", "gross_true", "gross_pred", "residual"])
            .map_err(csv_err)?;
        for (m, v, g) in &self.gross {
            if v != variable {
                continue;
            }
            out.write_record([
                m.clone(),
                g.year.to_string(),
                float10(g.gross_true),
                float10(g.gross_pred),
                float10(g.residual),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

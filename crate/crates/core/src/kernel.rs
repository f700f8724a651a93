//! Correlation functions and correlation-matrix construction.
//!
//! Every Gaussian-process model in the crate goes through this module: the
//! Matérn-2.5 product kernel for covariate inputs and the AR(1) power
//! correlation `rho^|t - t'|` on labelled years.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal jitter added on the single retry when a factorization fails.
pub const JITTER: f64 = 1e-10;

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Matern25,
    Ar1Power,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Matern25 => "matern25",
            KernelFamily::Ar1Power => "ar1",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "matern25" | "matern" | "matern2.5" => Ok(KernelFamily::Matern25),
            "ar1" | "ar1power" | "ar1_power" => Ok(KernelFamily::Ar1Power),
            other => Err(Error::Config(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Correlation family together with its parameters.
///
/// Matérn carries one range per input coordinate (product kernel); AR(1)
/// is one-dimensional and carries the lag-one correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Matern25 { gammas: Vec<f64> },
    Ar1Power { rho: f64 },
}

impl KernelSpec {
    pub fn matern(gammas: impl Into<Vec<f64>>) -> Result<Self> {
        let spec = KernelSpec::Matern25 {
            gammas: gammas.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ar1(rho: f64) -> Result<Self> {
        let spec = KernelSpec::Ar1Power { rho };
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self) -> KernelFamily {
        match self {
            KernelSpec::Matern25 { .. } => KernelFamily::Matern25,
            KernelSpec::Ar1Power { .. } => KernelFamily::Ar1Power,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            KernelSpec::Matern25 { gammas } => gammas.len(),
            KernelSpec::Ar1Power { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Matern25 { gammas } => {
                if gammas.is_empty() {
                    return Err(Error::Domain("Matérn kernel needs at least one range".into()));
                }
                for (l, &g) in gammas.iter().enumerate() {
                    if !(g.is_finite() && g > 0.0) {
                        return Err(Error::Domain(format!(
                            "Matérn range for coordinate {l} must be positive and finite, got {g}"
                        )));
                    }
                }
                Ok(())
            }
            KernelSpec::Ar1Power { rho } => {
                if !(rho.is_finite() && rho.abs() < 1.0) {
                    return Err(Error::Domain(format!(
                        "AR(1) correlation must lie in (-1, 1), got {rho}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Correlation between two input rows. Assumes `validate` passed and
    /// both rows have `dims()` entries.
    #[inline]
    pub(crate) fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::Matern25 { gammas } => gammas
                .iter()
                .zip(a.iter().zip(b))
                .map(|(&g, (&x, &y))| matern25_raw((x - y).abs(), g))
                .product(),
            KernelSpec::Ar1Power { rho } => {
                let lag = (a[0] - b[0]).abs().round() as i32;
                rho.powi(lag)
            }
        }
    }
}

#[inline]
fn matern25_raw(d: f64, gamma: f64) -> f64 {
    let r = SQRT5 * d / gamma;
    (1.0 + r + r * r / 3.0) * (-r).exp()
}

/// Matérn correlation with roughness 2.5 at distance `d` and range `gamma`.
pub fn matern25(d: f64, gamma: f64) -> Result<f64> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::Domain(format!("distance must be finite and >= 0, got {d}")));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Domain(format!("range must be finite and > 0, got {gamma}")));
    }
    Ok(matern25_raw(d, gamma))
}

/// AR(1) correlation `rho^dt` at integer lag `dt`.
pub fn ar1_corr(dt: u32, rho: f64) -> Result<f64> {
    if !(rho.is_finite() && rho.abs() < 1.0) {
        return Err(Error::Domain(format!("AR(1) correlation must lie in (-1, 1), got {rho}")));
    }
    Ok(rho.powi(dt as i32))
}

/// Product of per-coordinate Matérn-2.5 correlations.
pub fn product_kernel(x: &[f64], y: &[f64], gammas: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != gammas.len() {
        return Err(Error::Shape(format!(
            "product kernel needs equal lengths, got {}, {} and {} ranges",
            x.len(),
            y.len(),
            gammas.len()
        )));
    }
    let mut acc = 1.0;
    for ((&a, &b), &g) in x.iter().zip(y).zip(gammas) {
        acc *= matern25((a - b).abs(), g)?;
    }
    Ok(acc)
}

/// Lower-triangular Cholesky factor of a `K + eta I` matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    jittered: bool,
}

impl CholeskyFactor {
    /// Factorize a symmetric matrix, retrying once with `JITTER` on the
    /// diagonal. `label` names the matrix in the error message.
    pub fn new(matrix: DMatrix<f64>, label: &str) -> Result<Self> {
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok(Self {
                chol,
                jittered: false,
            });
        }
        let mut jittered = matrix;
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += JITTER;
        }
        Cholesky::new(jittered)
            .map(|chol| Self {
                chol,
                jittered: true,
            })
            .ok_or_else(|| {
                Error::Numeric(format!(
                    "Cholesky factorization of {label} failed after jitter retry"
                ))
            })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jittered(&self) -> bool {
        self.jittered
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solve `K x = b` via forward and back substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Correlation matrix `K` together with the nugget that forms `K + eta I`.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    values: DMatrix<f64>,
    nugget: f64,
}

impl CorrelationMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// `K + eta I`.
    pub fn with_nugget(&self) -> DMatrix<f64> {
        let mut m = self.values.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.nugget;
        }
        m
    }

    pub fn factor(&self, label: &str) -> Result<CholeskyFactor> {
        CholeskyFactor::new(self.with_nugget(), label)
    }
}

/// Build the correlation matrix of the rows of an `n x p` design.
///
/// For the AR(1) family the single column holds year labels, so lags are
/// integer differences of the labels.
pub fn build_correlation(
    inputs: &DMatrix<f64>,
    kernel: &KernelSpec,
    nugget: f64,
) -> Result<CorrelationMatrix> {
    kernel.validate()?;
    if !(nugget.is_finite() && nugget >= 0.0) {
        return Err(Error::Domain(format!("nugget must be finite and >= 0, got {nugget}")));
    }
    if inputs.ncols() != kernel.dims() {
        return Err(Error::Shape(format!(
            "design has {} columns but kernel expects {}",
            inputs.ncols(),
            kernel.dims()
        )));
    }
    if inputs.nrows() < 2 {
        return Err(Error::Shape(format!("need at least 2 design rows, got {}", inputs.nrows())));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("design contains non-finite values".into()));
    }
    Ok(CorrelationMatrix {
        values: correlation_unchecked(inputs, kernel),
        nugget,
    })
}

pub(crate) fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}

pub(crate) fn correlation_unchecked(inputs: &DMatrix<f64>, kernel: &KernelSpec) -> DMatrix<f64> {
    let n = inputs.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row_vec(inputs, i)).collect();
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = kernel.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Correlations between every design row and a new input.
pub(crate) fn cross_correlation(
    inputs: &DMatrix<f64>,
    new_input: &[f64],
    kernel: &KernelSpec,
) -> DVector<f64> {
    DVector::from_iterator(
        inputs.nrows(),
        (0..inputs.nrows()).map(|i| kernel.eval(&row_vec(inputs, i), new_input)),
    )
}

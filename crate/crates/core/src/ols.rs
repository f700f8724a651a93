//! Small ordinary-least-squares helper shared by the linear baselines,
//! the overall-R² feature score, and the within-year spatial regression.

use nalgebra::{DMatrix, DVector};

/// Column-relative threshold below which a QR pivot marks rank deficiency.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub(crate) struct OlsFit {
    pub coef: DVector<f64>,
    pub sse: f64,
    pub n: usize,
    r: DMatrix<f64>,
}

impl OlsFit {
    pub fn predict(&self, z: &[f64]) -> f64 {
        z.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum()
    }

    /// `z' (X'X)^{-1} z`.
    pub fn leverage(&self, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        let u = self
            .r
            .transpose()
            .solve_lower_triangular(&zv)
            .expect("non-singular R");
        u.norm_squared()
    }

    pub fn residual_dof(&self) -> usize {
        self.n - self.coef.len()
    }

    /// Unbiased residual variance; zero when there are no residual degrees of freedom.
    pub fn sigma2(&self) -> f64 {
        match self.residual_dof() {
            0 => 0.0,
            d => self.sse / d as f64,
        }
    }
}

/// Least squares of `y` on the columns of `x` (intercept included by the caller).
/// Returns `None` for rank-deficient designs or fewer rows than columns.
pub(crate) fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<OlsFit> {
    let (n, p) = x.shape();
    if n < p || p == 0 {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..p {
        let col_norm = x.column(j).norm();
        if col_norm == 0.0 || r[(j, j)].abs() <= RANK_TOL * col_norm {
            return None;
        }
    }
    let qty = qr.q().transpose() * y;
    let coef = r.solve_upper_triangular(&qty)?;
    let fitted = x * &coef;
    let sse = (y - fitted).norm_squared();
    Some(OlsFit { coef, sse, n, r })
}

/// Design with a leading intercept column followed by `cols`.
pub(crate) fn with_intercept(n: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len() + 1, |t, j| if j == 0 { 1.0 } else { cols[j - 1][t] })
}

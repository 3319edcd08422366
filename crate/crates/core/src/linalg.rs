//! Small dense helpers shared by the estimators.
//!
//! Everything here works on `nalgebra` dynamic matrices; dimensions in this
//! crate are small (q rarely exceeds a few dozen) so no effort is spent on
//! blocking or in-place factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{OgmmError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative ridge used when a normal-equation matrix fails to factor.
const RIDGE_SCALE: f64 = 1e-10;

/// Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &Matrix) -> Option<Self> {
        if m.nrows() != m.ncols() || m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Cholesky::new(m.clone()).map(|chol| Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        self.chol.solve(b)
    }

    /// `bᵀ M⁻¹ b` through a triangular solve.
    pub fn quad_form(&self, b: &Vector) -> f64 {
        let l = self.chol.l();
        let y = l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    pub fn inverse(&self) -> Matrix {
        symmetrize(&self.chol.inverse())
    }
}

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Solves `a x = b` for symmetric `a`, retrying once with a small ridge
/// `1e-10 (1 + tr(a)/p) I` when the plain factorization fails.
pub fn solve_spd_with_ridge(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if let Some(f) = SpdFactor::new(a) {
        return Ok(f.solve_mat(b));
    }
    let p = a.nrows().max(1) as f64;
    let ridge = RIDGE_SCALE * (1.0 + a.trace().abs() / p);
    let mut shifted = a.clone();
    for i in 0..a.nrows() {
        shifted[(i, i)] += ridge;
    }
    SpdFactor::new(&shifted)
        .map(|f| f.solve_mat(b))
        .ok_or_else(|| OgmmError::SingularSystem(format!("{}x{} normal matrix", a.nrows(), a.ncols())))
}

pub fn solve_spd_vec_with_ridge(a: &Matrix, b: &Vector) -> Result<Vector> {
    let bm = Matrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_spd_with_ridge(a, &bm)?;
    Ok(Vector::from_column_slice(x.as_slice()))
}

/// Inverts an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &Matrix) -> Option<Matrix> {
    SpdFactor::new(m).map(|f| f.inverse())
}

/// `x xᵀ` accumulated into `acc` with weight `w`.
pub fn add_outer(acc: &mut Matrix, x: &[f64], y: &[f64], w: f64) {
    debug_assert_eq!(acc.nrows(), x.len());
    debug_assert_eq!(acc.ncols(), y.len());
    for (c, &yc) in y.iter().enumerate() {
        let s = w * yc;
        if s == 0.0 {
            continue;
        }
        let col = acc.column_mut(c);
        for (a, &xr) in col.into_iter().zip(x) {
            *a += xr * s;
        }
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

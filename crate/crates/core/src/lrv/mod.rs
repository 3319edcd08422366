//! Long-run variance estimation.
//!
//! Three estimators live here: a streaming Welford covariance for
//! independent moments, the recursive kernel estimator whose state stays
//! sublinear in the stream length, and an offline Bartlett estimator with an
//! AR(1) plug-in bandwidth used as the benchmark.

mod bartlett;
mod kernel;
mod welford;

pub use bartlett::{bartlett_offline, andrews_ar1_bandwidth, BandwidthRule, BartlettConfig};
pub use kernel::{KernelLrvConfig, KernelLrvState};
pub use welford::WelfordState;

use nalgebra::SymmetricEigen;

use crate::linalg::{symmetrize, Matrix};

/// Eigenvalue floor applied by [`pd_adjust`], relative to `1 + tr(M)/q`.
pub const PD_FLOOR_SCALE: f64 = 1e-8;

/// Floors the eigenvalues of a symmetric matrix at
/// `1e-8 · (1 + tr(M)/q)`. Matrices already above the floor are returned
/// unchanged.
pub fn pd_adjust(m: &Matrix) -> Matrix {
    let q = m.nrows();
    if q == 0 {
        return m.clone();
    }
    let sym = symmetrize(m);
    let floor = PD_FLOOR_SCALE * (1.0 + sym.trace() / q as f64);
    // A negative trace would give a non-positive floor; fall back to the base scale.
    let floor = if floor > 0.0 { floor } else { PD_FLOOR_SCALE };
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * Matrix::from_diagonal(&clipped) * v.transpose()))
}

/// Centered sample covariance with divisor `n` (rows are observations).
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let n = x.nrows();
    let q = x.ncols();
    if n == 0 {
        return Matrix::zeros(q, q);
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    symmetrize(&(centered.transpose() * &centered / n as f64))
}

//! Wavelet-variance moments for sums of latent AR(1) processes plus white
//! noise.
//!
//! Parameters are laid out as `(ρ_1, σ_1², …, ρ_k, σ_k², σ_wn²)`. Scale `j`
//! (1-based) has `τ_j = 2^j`, the span of the level-`j` Haar MODWT filter;
//! white noise of variance `σ²` then has wavelet variance `σ²/τ_j`.

use crate::error::{OgmmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{Batch, MomentModel, ObsContext, RowVisitor};

/// Feasible box for the AR coefficients.
pub const GMWM_RHO_BOUNDS: (f64, f64) = (1e-4, 0.9999);
/// Feasible box for the innovation variances.
pub const GMWM_VAR_BOUNDS: (f64, f64) = (1e-13, 1e-5);

/// Haar wavelet variance at scale `τ` of a unit-innovation AR(1) with
/// coefficient `ρ`:
/// `(τ/2 − 3ρ − τρ²/2 + 4ρ^{1+τ/2} − ρ^{1+τ}) / (τ²/2 (1−ρ)² (1−ρ²))`.
pub fn haar_ar1_variance(rho: f64, tau: f64) -> f64 {
    let num = 0.5 * tau - 3.0 * rho - 0.5 * tau * rho * rho + 4.0 * rho.powf(1.0 + 0.5 * tau) - rho.powf(1.0 + tau);
    let den = 0.5 * tau * tau * (1.0 - rho).powi(2) * (1.0 - rho * rho);
    num / den
}

fn haar_ar1_variance_drho(rho: f64, tau: f64) -> f64 {
    let num = 0.5 * tau - 3.0 * rho - 0.5 * tau * rho * rho + 4.0 * rho.powf(1.0 + 0.5 * tau) - rho.powf(1.0 + tau);
    let dnum = -3.0 - tau * rho + 4.0 * (1.0 + 0.5 * tau) * rho.powf(0.5 * tau) - (1.0 + tau) * rho.powf(tau);
    let a = (1.0 - rho).powi(2) * (1.0 - rho * rho);
    let den = 0.5 * tau * tau * a;
    // d/dρ [(1−ρ)²(1−ρ²)] = −2(1−ρ)(1−ρ²) − 2ρ(1−ρ)² = −2(1−ρ)²(1+2ρ)
    let dden = 0.5 * tau * tau * (-2.0 * (1.0 - rho).powi(2) * (1.0 + 2.0 * rho));
    (dnum * den - num * dden) / (den * den)
}

fn scale(j: usize) -> f64 {
    2f64.powi(j as i32)
}

fn check_theta(theta: &[f64]) -> Result<()> {
    if theta.len() % 2 != 1 {
        return Err(OgmmError::DimensionMismatch(format!("GMWM parameter length {} is not odd", theta.len())));
    }
    for pair in theta[..theta.len() - 1].chunks_exact(2) {
        if !(pair[0] > 0.0 && pair[0] < 1.0) {
            return Err(OgmmError::Domain(format!("AR coefficient {} outside (0, 1)", pair[0])));
        }
    }
    Ok(())
}

fn nu_unchecked(theta: &[f64], j: usize) -> f64 {
    let tau = scale(j);
    let k = theta.len() / 2;
    let ar: f64 = (0..k).map(|i| haar_ar1_variance(theta[2 * i], tau) * theta[2 * i + 1]).sum();
    ar + theta[2 * k] / tau
}

fn nu_gradient_into(theta: &[f64], j: usize, out: &mut [f64]) {
    let tau = scale(j);
    let k = theta.len() / 2;
    for i in 0..k {
        out[2 * i] = haar_ar1_variance_drho(theta[2 * i], tau) * theta[2 * i + 1];
        out[2 * i + 1] = haar_ar1_variance(theta[2 * i], tau);
    }
    out[2 * k] = 1.0 / tau;
}

/// Model-implied wavelet variance `ν_j(θ)` at scale `j ≥ 1`.
pub fn gmwm_nu(theta: &[f64], j: usize) -> Result<f64> {
    check_theta(theta)?;
    if j == 0 {
        return Err(OgmmError::Domain("wavelet scales start at 1".into()));
    }
    Ok(nu_unchecked(theta, j))
}

/// `∂ν_j/∂θ`.
pub fn gmwm_nu_gradient(theta: &[f64], j: usize) -> Result<Vec<f64>> {
    check_theta(theta)?;
    if j == 0 {
        return Err(OgmmError::Domain("wavelet scales start at 1".into()));
    }
    let mut out = vec![0.0; theta.len()];
    nu_gradient_into(theta, j, &mut out);
    Ok(out)
}

/// `g_j = w_{t,j}² − ν_j(θ)` for scales `j = 1..=q` on rows of wavelet
/// coefficients `(w_{t,1}, …, w_{t,q})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmwmMoment {
    /// Number of latent AR(1) components (1, 2 or 3 in the usual variants).
    pub ar_components: usize,
    pub scales: usize,
}

impl GmwmMoment {
    pub fn new(ar_components: usize, scales: usize) -> Self {
        assert!(ar_components >= 1, "need at least one AR(1) component");
        assert!(scales > 2 * ar_components, "need more scales than parameters");
        Self { ar_components, scales }
    }

    pub fn nu(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (1..=self.scales).map(|j| gmwm_nu(theta, j)).collect()
    }
}

impl MomentModel for GmwmMoment {
    fn param_dim(&self) -> usize {
        2 * self.ar_components + 1
    }

    fn moment_dim(&self) -> usize {
        self.scales
    }

    fn obs_dim(&self) -> usize {
        self.scales
    }

    fn name(&self) -> String {
        format!("gmwm(k={})", self.ar_components)
    }

    fn moment_into(&self, theta: &[f64], w: &[f64], _: ObsContext, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = w[j] * w[j] - nu_unchecked(theta, j + 1);
        }
    }

    fn gradient_into(&self, theta: &[f64], _: &[f64], _: ObsContext, out: &mut Matrix) {
        let mut row = vec![0.0; theta.len()];
        for j in 0..self.scales {
            nu_gradient_into(theta, j + 1, &mut row);
            for (c, v) in row.iter().enumerate() {
                out[(j, c)] = -v;
            }
        }
    }

    // ν(θ) and its gradient do not depend on the row, so both are evaluated
    // once per batch.
    fn accumulate(
        &self,
        theta: &Vector,
        batch: &Batch,
        g_sum: &mut Vector,
        grad_sum: Option<&mut Matrix>,
        visit: Option<RowVisitor<'_>>,
    ) {
        let nu: Vec<f64> = (1..=self.scales).map(|j| nu_unchecked(theta.as_slice(), j)).collect();
        let mut g = vec![0.0; self.scales];
        let mut visit = visit;
        for w in batch.rows() {
            for j in 0..self.scales {
                g[j] = w[j] * w[j] - nu[j];
                g_sum[j] += g[j];
            }
            if let Some(f) = visit.as_deref_mut() {
                f(&g);
            }
        }
        if let Some(gs) = grad_sum {
            let mut jac = Matrix::zeros(self.scales, self.param_dim());
            self.gradient_into(theta.as_slice(), &[], ObsContext::default(), &mut jac);
            *gs += jac * batch.len() as f64;
        }
    }

    fn moment_matrix(&self, theta: &Vector, batch: &Batch) -> Matrix {
        let nu: Vec<f64> = (1..=self.scales).map(|j| nu_unchecked(theta.as_slice(), j)).collect();
        Matrix::from_fn(batch.len(), self.scales, |i, j| {
            let w = batch.row(i)[j];
            w * w - nu[j]
        })
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for _ in 0..self.ar_components {
            lo.extend([GMWM_RHO_BOUNDS.0, GMWM_VAR_BOUNDS.0]);
            hi.extend([GMWM_RHO_BOUNDS.1, GMWM_VAR_BOUNDS.1]);
        }
        lo.push(GMWM_VAR_BOUNDS.0);
        hi.push(GMWM_VAR_BOUNDS.1);
        Some((lo, hi))
    }
}

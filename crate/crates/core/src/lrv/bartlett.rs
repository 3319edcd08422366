//! Offline Bartlett-kernel long-run variance with an AR(1) plug-in bandwidth.

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::linalg::{symmetrize, Matrix};

/// How the Bartlett bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// Plug-in rule from per-coordinate AR(1) fits, no prewhitening.
    AndrewsAr1,
    /// Fixed bandwidth; lags `1..=⌊bw⌋` enter with weight `1 − h/(bw+1)`.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BartlettConfig {
    pub bandwidth_rule: BandwidthRule,
}

impl Default for BartlettConfig {
    fn default() -> Self {
        Self { bandwidth_rule: BandwidthRule::AndrewsAr1 }
    }
}

fn demeaned(x: &Matrix) -> Matrix {
    let mean = x.row_mean();
    let mut e = x.clone();
    for mut row in e.row_iter_mut() {
        row -= &mean;
    }
    e
}

/// Plug-in bandwidth `1.1447 (α̂ N)^{1/3}` from AR(1) fits on each demeaned
/// column, clamped to `[0, N − 1]`.
pub fn andrews_ar1_bandwidth(x: &Matrix) -> f64 {
    let n = x.nrows();
    if n < 3 {
        return 0.0;
    }
    let e = demeaned(x);
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..e.ncols() {
        let col = e.column(c);
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for t in 1..n {
            sxy += col[t] * col[t - 1];
            sxx += col[t - 1] * col[t - 1];
        }
        if sxx <= 0.0 {
            continue;
        }
        // Keep the fitted coefficient away from the unit root.
        let rho = (sxy / sxx).clamp(-0.97, 0.97);
        let sigma2 = (1..n).map(|t| (col[t] - rho * col[t - 1]).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s4 = sigma2 * sigma2;
        num += 4.0 * rho * rho * s4 / ((1.0 - rho).powi(6) * (1.0 + rho).powi(2));
        den += s4 / (1.0 - rho).powi(4);
    }
    if den <= 0.0 {
        return 0.0;
    }
    let alpha = num / den;
    (1.1447 * (alpha * n as f64).cbrt()).clamp(0.0, (n - 1) as f64)
}

/// Bartlett estimate `Γ̂_0 + Σ_{h=1}^{⌊bw⌋} (1 − h/(bw+1)) (Γ̂_h + Γ̂_hᵀ)`
/// with `Γ̂_h = N⁻¹ Σ_t e_t e_{t−h}ᵀ` on demeaned rows.
pub fn bartlett_offline(x: &Matrix, cfg: &BartlettConfig) -> Result<Matrix> {
    let n = x.nrows();
    if n < 3 {
        return Err(OgmmError::Underflow { needed: 3, got: n });
    }
    let first = x.row(0);
    if x.row_iter().all(|r| r == first) {
        return Err(OgmmError::DegenerateSeries);
    }
    let bw = match cfg.bandwidth_rule {
        BandwidthRule::AndrewsAr1 => andrews_ar1_bandwidth(x),
        BandwidthRule::Fixed(b) if b >= 0.0 => b,
        BandwidthRule::Fixed(b) => return Err(OgmmError::Domain(format!("negative bandwidth {b}"))),
    };
    let e = demeaned(x);
    let nf = n as f64;
    let mut sigma = e.transpose() * &e / nf;
    let max_lag = (bw.floor() as usize).min(n - 1);
    for h in 1..=max_lag {
        let lead = e.rows(h, n - h);
        let lag = e.rows(0, n - h);
        let gamma = lead.transpose() * lag / nf;
        let w = 1.0 - h as f64 / (bw + 1.0);
        sigma += (&gamma + gamma.transpose()) * w;
    }
    Ok(symmetrize(&sigma))
}

//! Tests and intervals built from an OGMM state.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_lr;

use crate::error::{OgmmError, Result};
use crate::estimator::{with_model_bandwidth, OgmmState};
use crate::linalg::{spd_inverse, symmetrize, Matrix, SpdFactor, Vector};
use crate::lrv::{pd_adjust, sample_covariance};
use crate::model::{Batch, MomentModel};
use crate::offline::{minimize_gmm, moment_lrv, stacked_moments, twostep_gmm, GmmBlock, GnOptions, TwoStepOptions};

/// `P(χ²_df ≤ x)`.
pub fn chisq_cdf(x: f64, df: usize) -> Result<f64> {
    if df == 0 || x.is_nan() || x < 0.0 {
        return Err(OgmmError::Domain(format!("chi-square cdf at x = {x}, df = {df}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma_lr(df as f64 / 2.0, x / 2.0))
}

/// Inverse of [`chisq_cdf`] to absolute accuracy 1e-10, by safeguarded
/// Newton steps inside a shrinking bracket.
pub fn chisq_quantile(u: f64, df: usize) -> Result<f64> {
    if df == 0 || !(u > 0.0 && u < 1.0) {
        return Err(OgmmError::Domain(format!("chi-square quantile at u = {u}, df = {df}")));
    }
    let k = df as f64;
    let mut lo = 0.0;
    let mut hi = k.max(1.0);
    while chisq_cdf(hi, df)? < u {
        lo = hi;
        hi *= 2.0;
    }
    // Wilson–Hilferty start.
    let z = Normal::standard().inverse_cdf(u);
    let c = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - c + z * c.sqrt()).powi(3)).clamp(lo, hi);
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    let ln_norm = statrs::function::gamma::ln_gamma(k / 2.0) + (k / 2.0) * std::f64::consts::LN_2;
    for _ in 0..200 {
        let f = chisq_cdf(x, df)? - u;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-12 * (1.0 + x) {
            break;
        }
        let density = ((k / 2.0 - 1.0) * x.ln() - x / 2.0 - ln_norm).exp();
        let newton = x - f / density;
        let next = if density > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() < 1e-13 * (1.0 + x) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Standard normal quantile.
pub fn normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(OgmmError::Domain(format!("normal quantile at u = {u}")));
    }
    Ok(Normal::standard().inverse_cdf(u))
}

/// Decision at one significance level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    pub alpha: f64,
    pub reject: bool,
}

/// A χ² test outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub levels: Vec<LevelDecision>,
}

impl TestReport {
    pub fn new(statistic: f64, df: usize, alphas: &[f64]) -> Result<Self> {
        if !statistic.is_finite() {
            return Err(OgmmError::Domain(format!("statistic {statistic}")));
        }
        let statistic = statistic.max(0.0);
        let p_value = (1.0 - chisq_cdf(statistic, df)?).clamp(0.0, 1.0);
        let levels = alphas
            .iter()
            .map(|&alpha| Ok(LevelDecision { alpha, reject: statistic > chisq_quantile(1.0 - alpha, df)? }))
            .collect::<Result<_>>()?;
        Ok(Self { statistic, df, p_value, levels })
    }

    /// Decision at `alpha`, if that level was requested.
    pub fn rejects_at(&self, alpha: f64) -> Option<bool> {
        self.levels.iter().find(|l| (l.alpha - alpha).abs() < 1e-12).map(|l| l.reject)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields are finite")
    }
}

fn factor_sigma(sigma: &Matrix, what: &str) -> Result<SpdFactor> {
    SpdFactor::new(&symmetrize(sigma)).ok_or_else(|| OgmmError::SingularSigma(what.to_string()))
}

/// Online Sargan–Hansen statistic `N U′ᵀ Σ⁻¹ U′` with `q − p` degrees of freedom.
pub fn sargan_hansen(state: &OgmmState, sigma: &Matrix, alphas: &[f64]) -> Result<TestReport> {
    let (q, p) = state.v_prime().shape();
    if q == p {
        return Err(OgmmError::ExactIdentification);
    }
    let f = factor_sigma(sigma, "Σ in the over-identification test")?;
    TestReport::new(state.n() as f64 * f.quad_form(state.u_prime()), q - p, alphas)
}

/// `{θ : N (θ̂ − θ)ᵀ (VᵀΣ⁻¹V) (θ̂ − θ) ≤ χ²_{p,1−α}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub center: Vector,
    pub precision: Matrix,
    pub n: u64,
    pub alpha: f64,
    pub threshold: f64,
}

impl ConfidenceRegion {
    pub fn distance(&self, theta: &Vector) -> f64 {
        let d = &self.center - theta;
        self.n as f64 * (d.transpose() * &self.precision * &d)[(0, 0)]
    }

    pub fn contains(&self, theta: &Vector) -> bool {
        self.distance(theta) <= self.threshold
    }
}

fn precision(v: &Matrix, sigma: &Matrix) -> Result<Matrix> {
    let f = factor_sigma(sigma, "Σ in the confidence region")?;
    let m = symmetrize(&(v.transpose() * f.solve_mat(v)));
    if SpdFactor::new(&m).is_none() {
        return Err(OgmmError::RankDeficientV);
    }
    Ok(m)
}

pub fn confidence_region(state: &OgmmState, sigma: &Matrix, alpha: f64) -> Result<ConfidenceRegion> {
    let m = precision(state.v_prime(), sigma)?;
    let p = m.nrows();
    Ok(ConfidenceRegion {
        center: state.theta().clone(),
        precision: m,
        n: state.n(),
        alpha,
        threshold: chisq_quantile(1.0 - alpha, p)?,
    })
}

/// Interval for `cᵀθ`: `cᵀθ̂ ± z_{1−α/2} sqrt(cᵀ (VᵀΣ⁻¹V)⁻¹ c / N)`.
pub fn linear_interval(state: &OgmmState, sigma: &Matrix, c: &Vector, alpha: f64) -> Result<(f64, f64)> {
    let m = precision(state.v_prime(), sigma)?;
    let f = SpdFactor::new(&m).ok_or(OgmmError::RankDeficientV)?;
    let half = normal_quantile(1.0 - alpha / 2.0)? * (f.quad_form(c) / state.n() as f64).sqrt();
    let center = c.dot(state.theta());
    Ok((center - half, center + half))
}

/// Interval for coordinate `coord`.
pub fn marginal_interval(state: &OgmmState, sigma: &Matrix, coord: usize, alpha: f64) -> Result<(f64, f64)> {
    let p = state.theta().len();
    if coord >= p {
        return Err(OgmmError::DimensionMismatch(format!("coordinate {coord} of {p}")));
    }
    let mut c = Vector::zeros(p);
    c[coord] = 1.0;
    linear_interval(state, sigma, &c, alpha)
}

/// Summary of the reference data used by the anomaly statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySnapshot {
    pub u1: Vector,
    pub v1: Matrix,
    pub theta1: Vector,
    pub sigma1: Matrix,
    pub n1: u64,
}

impl AnomalySnapshot {
    /// Takes `U_1, V_1, θ̂_1, n_1` from a reference state (possibly
    /// cumulative) and `Σ̂_1` from the caller.
    pub fn from_state(state: &OgmmState, sigma1: Matrix) -> Result<Self> {
        if SpdFactor::new(&symmetrize(&sigma1)).is_none() {
            return Err(OgmmError::SingularSigma("reference Σ̂_1".into()));
        }
        let (u1, v1) = state.direct_form();
        Ok(Self { u1, v1, theta1: state.theta().clone(), sigma1, n1: state.n() })
    }

    /// `n_1 (U_1 + V_1 θ)ᵀ Σ̂_1⁻¹ (U_1 + V_1 θ)`.
    fn reference_term(&self, f: &SpdFactor, theta: &Vector) -> f64 {
        self.n1 as f64 * f.quad_form(&(&self.u1 + &self.v1 * theta))
    }
}

/// `T_F = n_1 (U_1 + V_1 θ̂_F)ᵀ Σ̂_1⁻¹ (U_1 + V_1 θ̂_F) + n_b⁻¹ G(θ̂_F; D_b)ᵀ Σ̂_1⁻¹ G(θ̂_F; D_b)`
/// where `θ̂_F` is the estimate of `updated` (the reference state after an
/// update with `batch`). Degrees of freedom `2q − p`.
pub fn anomaly_tf<M: MomentModel + ?Sized>(
    reference: &AnomalySnapshot,
    updated: &OgmmState,
    model: &M,
    batch: &Batch,
    alphas: &[f64],
) -> Result<TestReport> {
    let f = factor_sigma(&reference.sigma1, "reference Σ̂_1")?;
    let theta = updated.theta();
    let n_prev = updated.n().saturating_sub(batch.len() as u64);
    let batch = with_model_bandwidth(model, batch, n_prev);
    let g = model.moment_sum(theta, &batch);
    let stat = reference.reference_term(&f, theta) + f.quad_form(&g) / batch.len() as f64;
    let (q, p) = (model.moment_dim(), model.param_dim());
    TestReport::new(stat, 2 * q - p, alphas)
}

/// `T_U = n_1 (U_1 + V_1 θ̂_1)ᵀ Σ̂_1⁻¹ (U_1 + V_1 θ̂_1) + n_b⁻¹ G(θ̃_U; D_b)ᵀ Σ̃_U⁻¹ G(θ̃_U; D_b)`
/// with `θ̃_U`, `Σ̃_U` from an offline two-step fit on `batch` alone.
/// Degrees of freedom `2(q − p)`.
pub fn anomaly_tu<M: MomentModel + ?Sized>(
    reference: &AnomalySnapshot,
    model: &M,
    batch: &Batch,
    fit: &TwoStepOptions,
    alphas: &[f64],
) -> Result<TestReport> {
    let (q, p) = (model.moment_dim(), model.param_dim());
    if q == p {
        return Err(OgmmError::ExactIdentification);
    }
    let f = factor_sigma(&reference.sigma1, "reference Σ̂_1")?;
    let batches = std::slice::from_ref(batch);
    let res = twostep_gmm(model, batches, fit).map_err(|e| OgmmError::OfflineFitFailed(e.to_string()))?;
    let sigma_u = moment_lrv(model, &res.theta, batches, &fit.lrv).map_err(|e| OgmmError::OfflineFitFailed(e.to_string()))?;
    let fu = factor_sigma(&sigma_u, "batch Σ̃_U")?;
    let g = model.moment_sum(&res.theta, batch);
    let stat = reference.reference_term(&f, &reference.theta1) + fu.quad_form(&g) / batch.len() as f64;
    TestReport::new(stat, 2 * (q - p), alphas)
}

/// Result of the restricted offline fit behind `T_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedFit {
    pub theta: Vector,
    pub report: TestReport,
    pub outer_iterations: usize,
}

/// `T_R = Σ_{i∈{1,b}} n_i⁻¹ G(θ̃_R; D_i)ᵀ C̃_i(θ̃_R)⁻¹ G(θ̃_R; D_i)` at the
/// restricted estimator minimizing the same sum, with `C̃_i(θ)` the centered
/// sample covariance of `g(θ, x)` on `D_i`. Needs both raw batches.
/// Degrees of freedom `2q − p`.
pub fn anomaly_tr<M: MomentModel + ?Sized>(
    model: &M,
    first: &Batch,
    batch: &Batch,
    start: &Vector,
    alphas: &[f64],
) -> Result<RestrictedFit> {
    let (q, p) = (model.moment_dim(), model.param_dim());
    let d1 = [first.clone()];
    let db = [batch.clone()];
    let weights = |theta: &Vector| -> Result<(Matrix, Matrix)> {
        let c1 = pd_adjust(&sample_covariance(&stacked_moments(model, theta, &d1)));
        let cb = pd_adjust(&sample_covariance(&stacked_moments(model, theta, &db)));
        let w1 = spd_inverse(&c1).ok_or_else(|| OgmmError::OptimizerFailed("C̃_1 is singular".into()))?;
        let wb = spd_inverse(&cb).ok_or_else(|| OgmmError::OptimizerFailed("C̃_b is singular".into()))?;
        Ok((w1, wb))
    };
    let mut theta = start.clone();
    let mut outer = 0;
    for it in 1..=50 {
        outer = it;
        let (w1, wb) = weights(&theta)?;
        let blocks = [
            GmmBlock { batches: &d1, weight: first.len() as f64, w: w1 },
            GmmBlock { batches: &db, weight: batch.len() as f64, w: wb },
        ];
        let res = minimize_gmm(model, &blocks, &theta, GnOptions::default())?;
        let moved = (&res.theta - &theta).amax() / (1.0 + theta.amax());
        theta = res.theta;
        if moved < 1e-8 {
            break;
        }
    }
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(OgmmError::OptimizerFailed("restricted estimate is not finite".into()));
    }
    let (w1, wb) = weights(&theta)?;
    let g1 = model.moment_sum(&theta, first);
    let gb = model.moment_sum(&theta, batch);
    let stat = (g1.transpose() * &w1 * &g1)[(0, 0)] / first.len() as f64 + (gb.transpose() * &wb * &gb)[(0, 0)] / batch.len() as f64;
    Ok(RestrictedFit { theta, report: TestReport::new(stat, 2 * q - p, alphas)?, outer_iterations: outer })
}

/// Empirical `1 − α` quantile of null statistics (upper order statistic).
pub fn empirical_critical_value(null_stats: &[f64], alpha: f64) -> Option<f64> {
    let mut s: Vec<f64> = null_stats.iter().copied().filter(|v| v.is_finite()).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let idx = ((1.0 - alpha) * s.len() as f64).ceil() as usize;
    Some(s[idx.clamp(1, s.len()) - 1])
}

/// Share of alternative statistics above the empirical null critical value.
pub fn size_adjusted_rejection(null_stats: &[f64], alt_stats: &[f64], alpha: f64) -> Option<f64> {
    let crit = empirical_critical_value(null_stats, alpha)?;
    let valid: Vec<f64> = alt_stats.iter().copied().filter(|v| v.is_finite()).collect();
    if valid.is_empty() {
        return None;
    }
    Some(valid.iter().filter(|&&v| v > crit).count() as f64 / valid.len() as f64)
}

/// Kolmogorov–Smirnov distance between the sample and `χ²_df`.
pub fn ks_distance_chisq(stats: &[f64], df: usize) -> Result<f64> {
    let mut s: Vec<f64> = stats.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let c = chisq_cdf(x.max(0.0), df)?;
        d = d.max((c - i as f64 / n).abs()).max(((i + 1) as f64 / n - c).abs());
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{UpdateOptions, WeightingMode};
    use crate::moments::OlsMoment;
    use crate::offline::{ols, split_columns};

    #[test]
    fn chisq_reference_values() {
        assert_eq!(chisq_cdf(0.0, 3).unwrap(), 0.0);
        assert!((chisq_quantile(0.95, 1).unwrap() - 3.8415).abs() < 1e-3);
        // Series for df = 2: F(x) = 1 − e^{−x/2}.
        for &x in &[0.1, 1.0, 5.0, 20.0] {
            assert!((chisq_cdf(x, 2).unwrap() - (1.0 - (-x / 2.0f64).exp())).abs() < 1e-14);
        }
        assert!(chisq_cdf(-1.0, 2).is_err());
        assert!(chisq_quantile(1.0, 2).is_err());
    }

    #[test]
    fn chisq_round_trip() {
        for df in [1, 2, 5, 17, 40, 150] {
            for i in 1..=99 {
                let u = i as f64 / 100.0;
                let x = chisq_quantile(u, df).unwrap();
                assert!((chisq_cdf(x, df).unwrap() - u).abs() < 1e-9, "df {df} u {u}");
            }
        }
    }

    #[test]
    fn report_decisions_follow_quantiles() {
        let r = TestReport::new(4.0, 1, &[0.05, 0.01]).unwrap();
        assert_eq!(r.rejects_at(0.05), Some(true));
        assert_eq!(r.rejects_at(0.01), Some(false));
        assert!((r.p_value - (1.0 - chisq_cdf(4.0, 1).unwrap())).abs() < 1e-15);
        let json = r.to_json();
        let back: TestReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    fn identity_state(n: usize) -> OgmmState {
        // y = x exactly with x = ±1: V = −I, θ̂ = 1.
        let rows: Vec<Vec<f64>> = (0..n).map(|i| if i % 2 == 0 { vec![1.0, 1.0] } else { vec![-1.0, -1.0] }).collect();
        let b = Batch::from_rows(&rows).unwrap();
        OgmmState::init(&OlsMoment::new(1), &b, Vector::from_vec(vec![1.0]), WeightingMode::Fixed(Matrix::identity(1, 1)), UpdateOptions::default()).unwrap()
    }

    #[test]
    fn identity_geometry_interval() {
        let st = identity_state(100);
        let (lo, hi) = marginal_interval(&st, &Matrix::identity(1, 1), 0, 0.05).unwrap();
        let z = normal_quantile(0.975).unwrap();
        assert!(((hi - lo) / 2.0 - z / 10.0).abs() < 1e-12);
        assert!(((hi + lo) / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_identification_is_refused() {
        let st = identity_state(10);
        assert_eq!(sargan_hansen(&st, &Matrix::identity(1, 1), &[0.05]), Err(OgmmError::ExactIdentification));
    }

    #[test]
    fn region_membership_matches_grid() {
        let st = {
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|i| {
                    let a = (i as f64).sin();
                    let b = (i as f64 * 0.37).cos();
                    vec![a - b + 0.3 * (i as f64 * 1.7).sin(), a, b]
                })
                .collect();
            let b = Batch::from_rows(&rows).unwrap();
            let (y, x, _) = split_columns(std::slice::from_ref(&b), 2, 0).unwrap();
            let theta = ols(&y, &x).unwrap();
            OgmmState::init(&OlsMoment::new(2), &b, theta, WeightingMode::Welford, UpdateOptions::default()).unwrap()
        };
        let sigma = Matrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let region = confidence_region(&st, &sigma, 0.05).unwrap();
        let fs = SpdFactor::new(&sigma).unwrap();
        let m = st.v_prime().transpose() * fs.solve_mat(st.v_prime());
        let crit = chisq_quantile(0.95, 2).unwrap();
        for i in -20..=20 {
            for j in -20..=20 {
                let t = st.theta() + Vector::from_vec(vec![i as f64 * 0.02, j as f64 * 0.02]);
                let d = st.theta() - &t;
                let q = 50.0 * (d.transpose() * &m * &d)[(0, 0)];
                assert_eq!(region.contains(&t), q <= crit);
            }
        }
    }

    #[test]
    fn size_adjustment_uses_null_quantile() {
        let null: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(empirical_critical_value(&null, 0.05), Some(95.0));
        let alt = [50.0, 96.0, 99.0, 200.0];
        assert_eq!(size_adjusted_rejection(&null, &alt, 0.05), Some(0.75));
    }
}

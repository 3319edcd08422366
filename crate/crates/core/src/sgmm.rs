//! Stochastic-approximation GMM with iterate averaging.
//!
//! ```text
//! θ̌_{k+1} = θ̌_k − η_{k+1} (V̌ᵀW̌V̌)⁻¹ V̌ᵀW̌ g(θ̌_k, x_{k+1}),   η_k = η₀ k^{−a}
//! ```
//!
//! `V̌` is a running mean of `∇g`, `W̌` the inverse running second moment of
//! `g` (kept through Sherman–Morrison updates) and `θ̄_k` the mean of
//! `θ̌_1, …, θ̌_k`.

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::inference::{normal_quantile, TestReport};
use crate::linalg::{all_finite, spd_inverse, symmetrize, Matrix, SpdFactor, Vector};
use crate::lrv::{pd_adjust, KernelLrvConfig, KernelLrvState};
use crate::model::{Batch, MomentModel, ObsContext};

/// Default learning-rate decay exponent.
pub const DEFAULT_DECAY: f64 = 0.501;
/// Default quantile level for learning-rate selection.
pub const DEFAULT_KAPPA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SgmmWeighting {
    /// Inverse uncentered second moment of `g`.
    SecondMoment,
    /// Inverse kernel long-run variance of `g(θ̌_k, x_{k+1})`; falls back to
    /// the second moment until the estimate is available.
    KernelLrv(KernelLrvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgmmConfig {
    pub a: f64,
    pub kappa: f64,
    /// Overrides the selected `η₀`.
    pub eta0: Option<f64>,
    pub weighting: SgmmWeighting,
}

impl Default for SgmmConfig {
    fn default() -> Self {
        Self { a: DEFAULT_DECAY, kappa: DEFAULT_KAPPA, eta0: None, weighting: SgmmWeighting::SecondMoment }
    }
}

impl SgmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.5 && self.a < 1.0) {
            return Err(OgmmError::BadParams(format!("decay exponent {} outside (1/2, 1)", self.a)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(OgmmError::BadParams(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if let Some(e) = self.eta0 {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(OgmmError::BadParams(format!("eta0 {e}")));
            }
        }
        if let SgmmWeighting::KernelLrv(cfg) = &self.weighting {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// `(VᵀWV)⁻¹VᵀW`, or `RankDeficientV` when `VᵀWV` is singular.
fn projector(v: &Matrix, w: &Matrix) -> Result<Matrix> {
    let wv = w * v;
    let f = SpdFactor::new(&symmetrize(&(v.transpose() * &wv))).ok_or(OgmmError::RankDeficientV)?;
    Ok(f.solve_mat(&wv.transpose()))
}

/// Running `V̌` and second moment over `batch` at `theta`.
fn batch_moments<M: MomentModel + ?Sized>(model: &M, theta: &Vector, batch: &Batch) -> (Matrix, Matrix) {
    let (q, p) = (model.moment_dim(), model.param_dim());
    let mut v = Matrix::zeros(q, p);
    let mut m = Matrix::zeros(q, q);
    let mut grad = Matrix::zeros(q, p);
    let mut g = vec![0.0; q];
    let ctx = batch.context();
    for x in batch.rows() {
        model.gradient_into(theta.as_slice(), x, ctx, &mut grad);
        v += &grad;
        model.moment_into(theta.as_slice(), x, ctx, &mut g);
        crate::linalg::add_outer(&mut m, &g, &g, 1.0);
    }
    let n = batch.len() as f64;
    (v / n, m / n)
}

/// `η₀ = 1/Ψ₀(κ)` where `Ψ₀(κ)` is the lower `κ` order statistic of
/// `p⁻¹ ‖(V̌₀ᵀW̌₀V̌₀)⁻¹V̌₀ᵀW̌₀ ∇g(θ̌₀, x)‖₂` over `x ∈ D₀`.
pub fn select_lr<M: MomentModel + ?Sized>(model: &M, d0: &Batch, theta0: &Vector, kappa: f64) -> Result<f64> {
    if d0.is_empty() {
        return Err(OgmmError::Initialization("empty initialization batch".into()));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(OgmmError::BadParams(format!("kappa {kappa} outside [0, 1]")));
    }
    model.check_dims(theta0, d0)?;
    let (v0, m0) = batch_moments(model, theta0, d0);
    let w0 = spd_inverse(&pd_adjust(&m0)).ok_or_else(|| OgmmError::SingularSigma("initial second moment".into()))?;
    let a = projector(&v0, &w0)?;
    let p = model.param_dim() as f64;
    let ctx = d0.context();
    let mut grad = Matrix::zeros(model.moment_dim(), model.param_dim());
    let mut norms: Vec<f64> = d0
        .rows()
        .map(|x| {
            model.gradient_into(theta0.as_slice(), x, ctx, &mut grad);
            (&a * &grad).singular_values().max() / p
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    let psi = norms[(kappa * (norms.len() - 1) as f64).floor() as usize];
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(OgmmError::DegenerateScale(psi));
    }
    Ok(1.0 / psi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgmmState {
    theta_check: Vector,
    theta_bar: Vector,
    v_check: Matrix,
    /// Inverse of the summed second moment `Σ g gᵀ`.
    m_inv: Matrix,
    w_check: Matrix,
    eta0: f64,
    a: f64,
    /// Stochastic steps taken.
    k: u64,
    /// Observations behind `V̌` and the second moment, including `D₀`.
    seen: u64,
    g_sum: Vector,
    kernel: Option<KernelLrvState>,
}

impl SgmmState {
    /// Initializes from `D₀` at `theta0` and selects `η₀` unless the config
    /// fixes it.
    pub fn init<M: MomentModel + ?Sized>(model: &M, d0: &Batch, theta0: Vector, cfg: &SgmmConfig) -> Result<Self> {
        cfg.validate()?;
        if d0.is_empty() {
            return Err(OgmmError::Initialization("empty initialization batch".into()));
        }
        model.check_dims(&theta0, d0)?;
        let eta0 = match cfg.eta0 {
            Some(e) => e,
            None => select_lr(model, d0, &theta0, cfg.kappa)?,
        };
        let n0 = d0.len() as f64;
        let (v0, m0) = batch_moments(model, &theta0, d0);
        let m_inv = spd_inverse(&pd_adjust(&(m0 * n0)))
            .ok_or_else(|| OgmmError::SingularSigma("initial second moment".into()))?;
        let kernel = match &cfg.weighting {
            SgmmWeighting::SecondMoment => None,
            SgmmWeighting::KernelLrv(c) => Some(KernelLrvState::new(model.moment_dim(), c.clone())?),
        };
        let p = model.param_dim();
        Ok(Self {
            theta_check: theta0,
            theta_bar: Vector::zeros(p),
            v_check: v0,
            w_check: &m_inv * n0,
            m_inv,
            eta0,
            a: cfg.a,
            k: 0,
            seen: d0.len() as u64,
            g_sum: Vector::zeros(model.moment_dim()),
            kernel,
        })
    }

    pub fn theta_check(&self) -> &Vector {
        &self.theta_check
    }

    /// The averaged iterate; the initial value before the first step.
    pub fn theta_bar(&self) -> &Vector {
        if self.k == 0 {
            &self.theta_check
        } else {
            &self.theta_bar
        }
    }

    pub fn v_check(&self) -> &Matrix {
        &self.v_check
    }

    pub fn w_check(&self) -> &Matrix {
        &self.w_check
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn steps(&self) -> u64 {
        self.k
    }

    pub fn learning_rate(&self, k: u64) -> f64 {
        self.eta0 * (k as f64).powf(-self.a)
    }

    /// `ǧ_N = N⁻¹ Σ g(θ̄_k, x_k)`.
    pub fn g_bar(&self) -> Vector {
        if self.k == 0 {
            return self.g_sum.clone();
        }
        &self.g_sum / self.k as f64
    }

    /// One stochastic step on observation `x`. The state is unchanged on
    /// error.
    pub fn step<M: MomentModel + ?Sized>(&mut self, model: &M, x: &[f64], ctx: ObsContext) -> Result<()> {
        let (q, p) = (model.moment_dim(), model.param_dim());
        if x.len() != model.obs_dim() {
            return Err(OgmmError::DimensionMismatch(format!("observation of length {}, expected {}", x.len(), model.obs_dim())));
        }
        let mut g = vec![0.0; q];
        let mut grad = Matrix::zeros(q, p);
        model.moment_into(self.theta_check.as_slice(), x, ctx, &mut g);
        model.gradient_into(self.theta_check.as_slice(), x, ctx, &mut grad);
        let k = self.k + 1;
        let direction = projector(&self.v_check, &self.w_check)? * Vector::from_column_slice(&g);
        let theta_check = &self.theta_check - direction * self.learning_rate(k);
        if !all_finite(theta_check.as_slice()) || !all_finite(&g) {
            return Err(OgmmError::NonFiniteUpdate);
        }
        let theta_bar = if k == 1 { theta_check.clone() } else { &self.theta_bar + (&theta_check - &self.theta_bar) / k as f64 };
        let mut g_avg = vec![0.0; q];
        model.moment_into(theta_bar.as_slice(), x, ctx, &mut g_avg);
        if !all_finite(&g_avg) {
            return Err(OgmmError::NonFiniteUpdate);
        }

        // Sherman–Morrison: (M + ggᵀ)⁻¹ = M⁻¹ − M⁻¹g gᵀM⁻¹ / (1 + gᵀM⁻¹g).
        let gv = Vector::from_column_slice(&g);
        let mg = &self.m_inv * &gv;
        let denom = 1.0 + gv.dot(&mg);
        let m_inv = symmetrize(&(&self.m_inv - (&mg * mg.transpose()) / denom));
        let seen = self.seen + 1;
        let v_check = &self.v_check + (grad - &self.v_check) / seen as f64;
        let mut kernel = self.kernel.clone();
        let w_check = match kernel.as_mut() {
            Some(kst) => {
                kst.push(&g);
                match kst.query().ok().and_then(|s| spd_inverse(&s)) {
                    Some(w) => w,
                    None => &m_inv * seen as f64,
                }
            }
            None => &m_inv * seen as f64,
        };

        self.theta_check = theta_check;
        self.theta_bar = theta_bar;
        self.m_inv = m_inv;
        self.w_check = w_check;
        self.v_check = v_check;
        self.seen = seen;
        self.k = k;
        self.g_sum += Vector::from_column_slice(&g_avg);
        self.kernel = kernel;
        Ok(())
    }

    /// Steps through every row of `batch`.
    pub fn step_batch<M: MomentModel + ?Sized>(&mut self, model: &M, batch: &Batch) -> Result<()> {
        let ctx = batch.context();
        for x in batch.rows() {
            self.step(model, x, ctx)?;
        }
        Ok(())
    }

    /// Variance estimate behind `W̌`.
    pub fn sigma(&self) -> Result<Matrix> {
        spd_inverse(&self.w_check).ok_or_else(|| OgmmError::SingularSigma("SGMM weighting".into()))
    }

    /// `N ǧ_Nᵀ W̌_N ǧ_N` with `q − p` degrees of freedom.
    pub fn overident(&self, alphas: &[f64]) -> Result<TestReport> {
        let (q, p) = self.v_check.shape();
        if q == p {
            return Err(OgmmError::ExactIdentification);
        }
        if self.k == 0 {
            return Err(OgmmError::Underflow { needed: 1, got: 0 });
        }
        let g = self.g_bar();
        let stat = self.k as f64 * (g.transpose() * &self.w_check * &g)[(0, 0)];
        TestReport::new(stat, q - p, alphas)
    }

    /// Plug-in interval for `cᵀθ` around `cᵀθ̄` with covariance
    /// `(V̌ᵀW̌V̌)⁻¹/N`.
    pub fn linear_interval(&self, c: &Vector, alpha: f64) -> Result<(f64, f64)> {
        let p = self.theta_check.len();
        if c.len() != p {
            return Err(OgmmError::DimensionMismatch(format!("contrast of length {} for p = {p}", c.len())));
        }
        let m = symmetrize(&(self.v_check.transpose() * &self.w_check * &self.v_check));
        let f = SpdFactor::new(&m).ok_or(OgmmError::RankDeficientV)?;
        let n = self.k.max(1) as f64;
        let half = normal_quantile(1.0 - alpha / 2.0)? * (f.quad_form(c) / n).sqrt();
        let center = c.dot(self.theta_bar());
        Ok((center - half, center + half))
    }

    pub fn marginal_interval(&self, coord: usize, alpha: f64) -> Result<(f64, f64)> {
        let p = self.theta_check.len();
        if coord >= p {
            return Err(OgmmError::DimensionMismatch(format!("coordinate {coord} of {p}")));
        }
        let mut c = Vector::zeros(p);
        c[coord] = 1.0;
        self.linear_interval(&c, alpha)
    }
}

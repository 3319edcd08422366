//! The OGMM state machine in telescoping form.
//!
//! The state keeps the cumulative sample size `N`, the estimate `θ̂`, and
//! the two running averages
//!
//! ```text
//! U′_b = N_b⁻¹ Σ_{i≤b} { G(θ̂_i; D_i) + Σ_{i<l≤b} ∇G(θ̂_i; D_i)(θ̂_l − θ̂_{l−1}) }   (≈ E g(θ̂_b, x))
//! V′_b = N_b⁻¹ Σ_{i≤b} ∇G(θ̂_i; D_i)
//! ```
//!
//! so that a new batch only needs `G` and `∇G` evaluated on that batch.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::linalg::{all_finite, solve_spd_vec_with_ridge, spd_inverse, Matrix, SpdFactor, Vector};
use crate::lrv::{pd_adjust, KernelLrvConfig, KernelLrvState, WelfordState};
use crate::model::{Batch, MomentModel, RowVisitor};

/// Version tag written into every snapshot.
pub const SNAPSHOT_VERSION: u32 = 1;

/// How the weighting matrix `Ŵ` is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightingMode {
    /// A caller-supplied matrix kept for the whole stream.
    Fixed(Matrix),
    /// Inverse of the running sample covariance of the moments.
    Welford,
    /// Inverse of the recursive kernel long-run variance.
    KernelLrv(KernelLrvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum VarianceState {
    Fixed,
    Welford(WelfordState),
    Kernel(Box<KernelLrvState>),
}

/// The current weighting matrix plus whatever streaming variance estimate
/// backs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weighting {
    variance: VarianceState,
    w: Matrix,
}

impl Weighting {
    pub fn new(mode: WeightingMode, q: usize) -> Result<Self> {
        match mode {
            WeightingMode::Fixed(w) => {
                if w.nrows() != q || w.ncols() != q {
                    return Err(OgmmError::DimensionMismatch(format!(
                        "weighting matrix is {}x{}, expected {q}x{q}",
                        w.nrows(),
                        w.ncols()
                    )));
                }
                Ok(Self { variance: VarianceState::Fixed, w })
            }
            WeightingMode::Welford => Ok(Self {
                variance: VarianceState::Welford(WelfordState::new(q)),
                w: Matrix::identity(q, q),
            }),
            WeightingMode::KernelLrv(cfg) => Ok(Self {
                variance: VarianceState::Kernel(Box::new(KernelLrvState::new(q, cfg)?)),
                w: Matrix::identity(q, q),
            }),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.variance, VarianceState::Fixed)
    }

    pub fn kernel(&self) -> Option<&KernelLrvState> {
        match &self.variance {
            VarianceState::Kernel(k) => Some(k),
            _ => None,
        }
    }

    fn observe(&mut self, g: &[f64]) {
        match &mut self.variance {
            VarianceState::Fixed => {}
            VarianceState::Welford(s) => s.push(g),
            VarianceState::Kernel(s) => s.push(g),
        }
    }

    /// The pd-adjusted variance estimate behind `Ŵ`, when one exists and
    /// enough observations were seen.
    pub fn sigma(&self) -> Option<Matrix> {
        let raw = match &self.variance {
            VarianceState::Fixed => return None,
            VarianceState::Welford(s) => s.variance().ok()?,
            VarianceState::Kernel(s) => s.query_raw().ok()?,
        };
        Some(pd_adjust(&raw))
    }

    /// Re-inverts the variance estimate; keeps the old matrix while the
    /// estimate is unavailable.
    fn refresh(&mut self) {
        if let Some(inv) = self.sigma().and_then(|s| spd_inverse(&s)) {
            self.w = inv;
        }
    }
}

/// Stopping rule of the implicit update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-6 }
    }
}

impl ImplicitConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters >= 1 && self.tol > 0.0 {
            Ok(())
        } else {
            Err(OgmmError::Config(format!("invalid implicit update settings {self:?}")))
        }
    }
}

/// Per-stream switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateOptions {
    /// Refresh `Ŵ` after every batch.
    pub update_weighting: bool,
    /// Split a batch larger than the current `N` into pieces of at most `N`.
    pub split_large_batches: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self { update_weighting: true, split_large_batches: false }
    }
}

/// Bookkeeping from the most recent update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Newton–Raphson iterations used by the last batch (1 for explicit updates).
    pub iterations: usize,
    /// Set when the implicit update hit `max_iters` above tolerance.
    pub no_convergence: bool,
    /// Last quadratic form seen by the implicit stopping rule.
    pub last_criterion: Option<f64>,
}

/// Constant-size summary of a stream processed by OGMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OgmmState {
    batch_index: u64,
    n: u64,
    theta: Vector,
    u_prime: Vector,
    v_prime: Matrix,
    weighting: Weighting,
    options: UpdateOptions,
    diagnostics: Diagnostics,
}

/// Attaches the model's bandwidth to a batch that does not carry one.
pub fn with_model_bandwidth<'a, M: MomentModel + ?Sized>(
    model: &M,
    batch: &'a Batch,
    n_prev: u64,
) -> Cow<'a, Batch> {
    if batch.context().bandwidth.is_some() {
        return Cow::Borrowed(batch);
    }
    let basis = if n_prev == 0 { batch.len() as u64 } else { n_prev };
    match model.bandwidth_for(basis) {
        Some(h) => Cow::Owned(batch.clone().with_bandwidth(h)),
        None => Cow::Borrowed(batch),
    }
}

/// Splits `batch` so every piece satisfies `n_i ≤ N_{i−1}` given `n_prev`
/// observations already seen.
pub fn split_batch(batch: &Batch, n_prev: u64) -> Result<Vec<Batch>> {
    if n_prev == 0 {
        return Ok(vec![batch.clone()]);
    }
    let mut out = Vec::new();
    let mut seen = n_prev as usize;
    let mut start = 0;
    while start < batch.len() {
        let end = (start + seen).min(batch.len());
        out.push(batch.slice(start, end)?);
        seen += end - start;
        start = end;
    }
    Ok(out)
}

impl OgmmState {
    /// Starts a stream from the first batch and a caller-supplied `θ̂_1`.
    pub fn init<M: MomentModel + ?Sized>(
        model: &M,
        first: &Batch,
        theta1: Vector,
        mode: WeightingMode,
        options: UpdateOptions,
    ) -> Result<Self> {
        model.check_dims(&theta1, first)?;
        let (p, q) = (model.param_dim(), model.moment_dim());
        if q < p {
            return Err(OgmmError::DimensionMismatch(format!("q = {q} < p = {p}")));
        }
        if first.len() < p {
            return Err(OgmmError::Initialization(format!(
                "first batch has {} rows, need at least p = {p}",
                first.len()
            )));
        }
        if !all_finite(theta1.as_slice()) {
            return Err(OgmmError::Initialization("initial estimate is not finite".into()));
        }
        let first = with_model_bandwidth(model, first, 0);
        let mut weighting = Weighting::new(mode, q)?;
        let mut g = Vector::zeros(q);
        let mut jac = Matrix::zeros(q, p);
        let track = !weighting.is_fixed();
        {
            let mut visit = |m: &[f64]| weighting.observe(m);
            let visit: Option<RowVisitor<'_>> = if track { Some(&mut visit) } else { None };
            model.accumulate(&theta1, &first, &mut g, Some(&mut jac), visit);
        }
        weighting.refresh();
        let n = first.len() as f64;
        let v_prime = jac / n;
        let normal = v_prime.transpose() * weighting.matrix() * &v_prime;
        if SpdFactor::new(&normal).is_none() {
            return Err(OgmmError::Initialization("V′ᵀŴV′ is singular at the initial estimate".into()));
        }
        Ok(Self {
            batch_index: 1,
            n: first.len() as u64,
            theta: theta1,
            u_prime: g / n,
            v_prime,
            weighting,
            options,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn batch_index(&self) -> u64 {
        self.batch_index
    }

    pub fn u_prime(&self) -> &Vector {
        &self.u_prime
    }

    pub fn v_prime(&self) -> &Matrix {
        &self.v_prime
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    pub fn weight_matrix(&self) -> &Matrix {
        self.weighting.matrix()
    }

    pub fn options(&self) -> UpdateOptions {
        self.options
    }

    pub fn set_options(&mut self, options: UpdateOptions) {
        self.options = options;
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    /// `(U_b, V_b)` with `U_b = U′_b − V′_b θ̂_b` and `V_b = V′_b`.
    pub fn direct_form(&self) -> (Vector, Matrix) {
        (&self.u_prime - &self.v_prime * &self.theta, self.v_prime.clone())
    }

    /// Explicit update; returns the new state and leaves `self` untouched.
    pub fn update<M: MomentModel + ?Sized>(&self, model: &M, batch: &Batch) -> Result<Self> {
        let mut next = self.clone();
        next.step(model, batch)?;
        Ok(next)
    }

    /// Implicit (Newton–Raphson) update; pure counterpart of [`Self::step_implicit`].
    pub fn update_implicit<M: MomentModel + ?Sized>(
        &self,
        model: &M,
        batch: &Batch,
        cfg: ImplicitConfig,
    ) -> Result<Self> {
        let mut next = self.clone();
        next.step_implicit(model, batch, cfg)?;
        Ok(next)
    }

    /// Explicit update in place. On error the state is unchanged.
    pub fn step<M: MomentModel + ?Sized>(&mut self, model: &M, batch: &Batch) -> Result<()> {
        self.step_with(model, batch, ImplicitConfig { max_iters: 1, tol: f64::INFINITY })
    }

    /// Implicit update in place. On error the state is unchanged; hitting
    /// `max_iters` is reported through [`Diagnostics::no_convergence`].
    pub fn step_implicit<M: MomentModel + ?Sized>(
        &mut self,
        model: &M,
        batch: &Batch,
        cfg: ImplicitConfig,
    ) -> Result<()> {
        cfg.validate()?;
        self.step_with(model, batch, cfg)
    }

    fn step_with<M: MomentModel + ?Sized>(&mut self, model: &M, batch: &Batch, cfg: ImplicitConfig) -> Result<()> {
        model.check_dims(&self.theta, batch)?;
        if self.options.split_large_batches && batch.len() as u64 > self.n {
            let pieces = split_batch(batch, self.n)?;
            let mut next = self.clone();
            for piece in &pieces {
                next.step_one(model, piece, cfg)?;
            }
            *self = next;
            return Ok(());
        }
        self.step_one(model, batch, cfg)
    }

    fn step_one<M: MomentModel + ?Sized>(&mut self, model: &M, batch: &Batch, cfg: ImplicitConfig) -> Result<()> {
        let batch = with_model_bandwidth(model, batch, self.n);
        let (p, q) = (model.param_dim(), model.moment_dim());
        let n_old = self.n as f64;
        let n_new = n_old + batch.len() as f64;
        let w = self.weighting.matrix().clone();
        let theta_prev = self.theta.clone();

        let mut theta = theta_prev.clone();
        let mut iterations = 0;
        let mut criterion = None;
        let mut converged = false;
        while iterations < cfg.max_iters {
            let (g, jac) = model.batch_sums(&theta, &batch);
            let v_hat = (&self.v_prime * n_old + jac) / n_new;
            let u_hat = (&self.u_prime * n_old + &self.v_prime * ((&theta - &theta_prev) * n_old) + g) / n_new;
            let vtw = v_hat.transpose() * &w;
            let normal = &vtw * &v_hat;
            let score = &vtw * &u_hat;
            if iterations > 0 {
                let value = SpdFactor::new(&normal).map(|f| f.quad_form(&score));
                criterion = value;
                if value.is_some_and(|v| v < cfg.tol) {
                    converged = true;
                    break;
                }
            }
            let delta = solve_spd_vec_with_ridge(&normal, &score)?;
            theta -= delta;
            iterations += 1;
            if !all_finite(theta.as_slice()) {
                return Err(OgmmError::NonFiniteUpdate);
            }
        }
        if cfg.tol.is_infinite() {
            converged = true;
        }

        // Weighting update and refresh of U′, V′ share one pass at θ̂_b.
        let mut weighting = self.weighting.clone();
        let track = self.options.update_weighting && !weighting.is_fixed();
        let mut g = Vector::zeros(q);
        let mut jac = Matrix::zeros(q, p);
        {
            let mut visit = |m: &[f64]| weighting.observe(m);
            let visit: Option<RowVisitor<'_>> = if track { Some(&mut visit) } else { None };
            model.accumulate(&theta, &batch, &mut g, Some(&mut jac), visit);
        }
        if track {
            weighting.refresh();
        }
        let u_prime = (&self.u_prime * n_old + &self.v_prime * ((&theta - &theta_prev) * n_old) + g) / n_new;
        let v_prime = (&self.v_prime * n_old + jac) / n_new;
        if !all_finite(u_prime.as_slice()) || !all_finite(v_prime.as_slice()) {
            return Err(OgmmError::NonFiniteUpdate);
        }

        self.theta = theta;
        self.u_prime = u_prime;
        self.v_prime = v_prime;
        self.weighting = weighting;
        self.n += batch.len() as u64;
        self.batch_index += 1;
        self.diagnostics = Diagnostics { iterations, no_convergence: !converged, last_criterion: criterion };
        Ok(())
    }

    /// Versioned JSON snapshot.
    pub fn to_snapshot(&self) -> Result<String> {
        serde_json::to_string(&Snapshot { version: SNAPSHOT_VERSION, state: Cow::Borrowed(self) })
            .map_err(|e| OgmmError::Io(e.to_string()))
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let snap: Snapshot<'static> = serde_json::from_str(text).map_err(|e| OgmmError::Io(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(OgmmError::Io(format!("unsupported snapshot version {}", snap.version)));
        }
        Ok(snap.state.into_owned())
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot<'a> {
    version: u32,
    state: Cow<'a, OgmmState>,
}

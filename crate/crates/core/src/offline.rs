//! Offline estimators used as initializers, benchmarks and test oracles.

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::linalg::{spd_inverse, symmetrize, Matrix, SpdFactor, Vector};
use crate::lrv::{bartlett_offline, pd_adjust, sample_covariance, BartlettConfig, KernelLrvConfig, KernelLrvState};
use crate::model::{Batch, MomentModel};
use crate::moments::{smooth_indicator, smooth_indicator_deriv};

/// Splits rows laid out as `[y, x_1..x_p, z_1..z_q]` into `(y, X, Z)`.
/// With `q = 0` the instrument matrix is empty.
pub fn split_columns(batches: &[Batch], p: usize, q: usize) -> Result<(Vector, Matrix, Matrix)> {
    let n: usize = batches.iter().map(Batch::len).sum();
    if batches.iter().any(|b| b.dim() != 1 + p + q) {
        return Err(OgmmError::DimensionMismatch(format!("rows must have width {}", 1 + p + q)));
    }
    let mut y = Vector::zeros(n);
    let mut x = Matrix::zeros(n, p);
    let mut z = Matrix::zeros(n, q);
    for (i, row) in batches.iter().flat_map(|b| b.rows()).enumerate() {
        y[i] = row[0];
        for j in 0..p {
            x[(i, j)] = row[1 + j];
        }
        for j in 0..q {
            z[(i, j)] = row[1 + p + j];
        }
    }
    Ok((y, x, z))
}

fn spd_solve(a: &Matrix, b: &Vector, what: &str) -> Result<Vector> {
    SpdFactor::new(&symmetrize(a))
        .map(|f| f.solve_vec(b))
        .ok_or_else(|| OgmmError::RankDeficient(what.to_string()))
}

/// Ordinary least squares `(XᵀX)⁻¹ Xᵀy`.
pub fn ols(y: &Vector, x: &Matrix) -> Result<Vector> {
    spd_solve(&(x.transpose() * x), &(x.transpose() * y), "XᵀX is singular")
}

/// Two-stage least squares with `X̂ = Z (ZᵀZ)⁻¹ ZᵀX`.
pub fn tsls(y: &Vector, x: &Matrix, z: &Matrix) -> Result<Vector> {
    let ztz = SpdFactor::new(&symmetrize(&(z.transpose() * z)))
        .ok_or_else(|| OgmmError::RankDeficient("ZᵀZ is singular".into()))?;
    let zx = z.transpose() * x;
    let zy = z.transpose() * y;
    // X̂ᵀX̂ = XᵀZ (ZᵀZ)⁻¹ ZᵀX and X̂ᵀy = XᵀZ (ZᵀZ)⁻¹ Zᵀy.
    let proj = ztz.solve_mat(&zx);
    spd_solve(&(zx.transpose() * &proj), &(proj.transpose() * zy), "fitted design is rank deficient")
}

/// Closed-form linear GMM `(XᵀZ W ZᵀX)⁻¹ XᵀZ W Zᵀy`.
pub fn linear_gmm(y: &Vector, x: &Matrix, z: &Matrix, w: &Matrix) -> Result<Vector> {
    let zx = z.transpose() * x;
    let zy = z.transpose() * y;
    let xzw = zx.transpose() * w;
    spd_solve(&(&xzw * &zx), &(&xzw * zy), "XᵀZ W ZᵀX is singular")
}

/// One term `weight · ḡᵀ W ḡ` of a GMM objective, `ḡ` averaged over `batches`.
#[derive(Debug, Clone)]
pub struct GmmBlock<'a> {
    pub batches: &'a [Batch],
    pub weight: f64,
    pub w: Matrix,
}

impl GmmBlock<'_> {
    fn len(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

/// Settings of the Gauss–Newton minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnOptions {
    pub max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    pub rel_tol: f64,
    /// Stop when every scaled step component falls below this.
    pub step_tol: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self { max_iters: 200, rel_tol: 1e-14, step_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnResult {
    pub theta: Vector,
    pub objective: f64,
    pub iterations: usize,
}

fn block_means<M: MomentModel + ?Sized>(model: &M, theta: &Vector, block: &GmmBlock, with_grad: bool) -> (Vector, Option<Matrix>) {
    let (p, q) = (model.param_dim(), model.moment_dim());
    let mut g = Vector::zeros(q);
    let mut jac = with_grad.then(|| Matrix::zeros(q, p));
    for b in block.batches {
        model.accumulate(theta, b, &mut g, jac.as_mut(), None);
    }
    let n = block.len() as f64;
    (g / n, jac.map(|j| j / n))
}

fn objective<M: MomentModel + ?Sized>(model: &M, theta: &Vector, blocks: &[GmmBlock]) -> f64 {
    blocks
        .iter()
        .map(|b| {
            let (g, _) = block_means(model, theta, b, false);
            b.weight * (g.transpose() * &b.w * &g)[(0, 0)]
        })
        .sum()
}

fn project(theta: &mut Vector, bounds: &Option<(Vec<f64>, Vec<f64>)>) {
    if let Some((lo, hi)) = bounds {
        for i in 0..theta.len() {
            theta[i] = theta[i].clamp(lo[i], hi[i]);
        }
    }
}

/// Minimizes `Σ_b weight_b ḡ_b(θ)ᵀ W_b ḡ_b(θ)` by Gauss–Newton with
/// backtracking, diagonal equilibration of the normal matrix, projection on
/// the model's box, and a steepest-descent fallback.
pub fn minimize_gmm<M: MomentModel + ?Sized>(
    model: &M,
    blocks: &[GmmBlock],
    theta0: &Vector,
    opts: GnOptions,
) -> Result<GnResult> {
    let p = model.param_dim();
    if theta0.len() != p {
        return Err(OgmmError::DimensionMismatch(format!("start has length {}, expected {p}", theta0.len())));
    }
    if blocks.iter().any(|b| b.len() == 0) {
        return Err(OgmmError::OptimizerFailed("empty block".into()));
    }
    let bounds = model.bounds();
    let mut theta = theta0.clone();
    project(&mut theta, &bounds);
    let mut f = objective(model, &theta, blocks);
    if !f.is_finite() {
        return Err(OgmmError::OptimizerFailed("objective is not finite at the start".into()));
    }
    for it in 0..opts.max_iters {
        let mut h = Matrix::zeros(p, p);
        let mut grad = Vector::zeros(p);
        for b in blocks {
            let (g, jac) = block_means(model, &theta, b, true);
            let jac = jac.expect("gradient requested");
            let jtw = jac.transpose() * &b.w * b.weight;
            h += &jtw * &jac;
            grad += &jtw * &g;
        }
        if grad.iter().all(|v| *v == 0.0) {
            return Ok(GnResult { theta, objective: f, iterations: it });
        }
        // Equilibrate: D H D with D = diag(1/sqrt(H_ii)).
        let d = Vector::from_fn(p, |i, _| {
            let v = h[(i, i)];
            if v > 0.0 && v.is_finite() {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        });
        let hs = Matrix::from_fn(p, p, |i, j| d[i] * h[(i, j)] * d[j]);
        let gs = grad.component_mul(&d);
        let gn_dir = SpdFactor::new(&symmetrize(&hs))
            .or_else(|| {
                let mut r = hs.clone();
                for i in 0..p {
                    r[(i, i)] += 1e-8;
                }
                SpdFactor::new(&symmetrize(&r))
            })
            .map(|fac| -fac.solve_vec(&gs).component_mul(&d));
        let sd_dir = -gs.component_mul(&d);

        let mut accepted = None;
        for dir in gn_dir.iter().chain(std::iter::once(&sd_dir)) {
            let mut step = 1.0;
            for _ in 0..40 {
                let mut cand = &theta + dir * step;
                project(&mut cand, &bounds);
                let fc = objective(model, &cand, blocks);
                if fc.is_finite() && fc < f {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((cand, fc)) = accepted else {
            // No descent along either direction: at a (box-constrained) stationary point.
            return Ok(GnResult { theta, objective: f, iterations: it });
        };
        let small_step = (0..p).all(|i| ((cand[i] - theta[i]) / d[i].max(f64::MIN_POSITIVE)).abs() <= opts.step_tol * (1.0 + (theta[i] / d[i]).abs()));
        let rel = (f - fc) / f.abs().max(f64::MIN_POSITIVE);
        theta = cand;
        f = fc;
        if rel < opts.rel_tol || small_step || f == 0.0 {
            return Ok(GnResult { theta, objective: f, iterations: it + 1 });
        }
    }
    Ok(GnResult { theta, objective: f, iterations: opts.max_iters })
}

/// First-step weighting of [`twostep_gmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FirstStep {
    Identity,
    Matrix(Matrix),
    /// `diag(1 / Var g_j(θ_0))` evaluated at the start value.
    DiagonalInverseVariance,
    /// Skip the first step and use this estimate.
    Estimate(Vector),
}

/// Long-run variance used for the second-step weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LrvChoice {
    Bartlett(BartlettConfig),
    SampleCovariance,
    KernelRecursive(KernelLrvConfig),
}

impl Default for LrvChoice {
    fn default() -> Self {
        LrvChoice::Bartlett(BartlettConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepOptions {
    pub first_step: FirstStep,
    pub lrv: LrvChoice,
    /// Start value of both Gauss–Newton runs (warm start).
    pub start: Vector,
    pub gn: GnOptions,
}

impl TwoStepOptions {
    pub fn new(start: Vector) -> Self {
        Self { first_step: FirstStep::Identity, lrv: LrvChoice::default(), start, gn: GnOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepResult {
    pub theta: Vector,
    pub theta_first: Vector,
    /// Long-run variance of the moments at the first-step estimate.
    pub sigma: Matrix,
    /// `ḡᵀ Σ⁻¹ ḡ` at the final estimate.
    pub objective: f64,
}

/// Stacks per-observation moments over all batches.
pub fn stacked_moments<M: MomentModel + ?Sized>(model: &M, theta: &Vector, batches: &[Batch]) -> Matrix {
    let q = model.moment_dim();
    let n: usize = batches.iter().map(Batch::len).sum();
    let mut out = Matrix::zeros(n, q);
    let mut r = 0;
    for b in batches {
        let m = model.moment_matrix(theta, b);
        out.rows_mut(r, b.len()).copy_from(&m);
        r += b.len();
    }
    out
}

/// Long-run variance of the moments at `theta` under `choice`.
pub fn moment_lrv<M: MomentModel + ?Sized>(model: &M, theta: &Vector, batches: &[Batch], choice: &LrvChoice) -> Result<Matrix> {
    let g = stacked_moments(model, theta, batches);
    let raw = match choice {
        LrvChoice::Bartlett(cfg) => bartlett_offline(&g, cfg)?,
        LrvChoice::SampleCovariance => sample_covariance(&g),
        LrvChoice::KernelRecursive(cfg) => {
            let mut st = KernelLrvState::new(g.ncols(), cfg.clone())?;
            st.push_rows(&g);
            st.query_raw()?
        }
    };
    Ok(pd_adjust(&raw))
}

/// Two-step GMM on the pooled batches.
pub fn twostep_gmm<M: MomentModel + ?Sized>(model: &M, batches: &[Batch], opts: &TwoStepOptions) -> Result<TwoStepResult> {
    let q = model.moment_dim();
    let n: usize = batches.iter().map(Batch::len).sum();
    if n < model.param_dim().max(3) {
        return Err(OgmmError::Underflow { needed: model.param_dim().max(3), got: n });
    }
    for b in batches {
        model.check_dims(&opts.start, b)?;
    }
    let theta_first = match &opts.first_step {
        FirstStep::Estimate(t) => t.clone(),
        other => {
            let w = match other {
                FirstStep::Identity => Matrix::identity(q, q),
                FirstStep::Matrix(w) => w.clone(),
                FirstStep::DiagonalInverseVariance => {
                    let s = sample_covariance(&stacked_moments(model, &opts.start, batches));
                    Matrix::from_diagonal(&Vector::from_fn(q, |i, _| 1.0 / s[(i, i)].max(f64::MIN_POSITIVE)))
                }
                FirstStep::Estimate(_) => unreachable!(),
            };
            let block = GmmBlock { batches, weight: 1.0, w };
            minimize_gmm(model, &[block], &opts.start, opts.gn)?.theta
        }
    };
    let sigma = moment_lrv(model, &theta_first, batches, &opts.lrv)?;
    let w = spd_inverse(&sigma).ok_or_else(|| OgmmError::SingularSigma("second-step weighting".into()))?;
    let block = GmmBlock { batches, weight: 1.0, w };
    let res = minimize_gmm(model, std::slice::from_ref(&block), &theta_first, opts.gn)?;
    if !res.theta.iter().all(|v| v.is_finite()) {
        return Err(OgmmError::OptimizerFailed("non-finite estimate".into()));
    }
    Ok(TwoStepResult { theta: res.theta, theta_first, sigma, objective: res.objective })
}

/// `∫_{−1}^{u} H(v) dv` (0 below −1, `u` above 1).
fn smooth_indicator_integral(u: f64) -> f64 {
    if u <= -1.0 {
        0.0
    } else if u >= 1.0 {
        u
    } else {
        let u2 = u * u;
        (u + 1.0) / 2.0 + 15.0 / 16.0 * ((u2 - 1.0) / 2.0 - (u2 * u2 - 1.0) / 6.0 + (u2 * u2 * u2 - 1.0) / 30.0)
    }
}

/// Smoothed check loss `Σ [(τ−1) r + h K(r/h)]` whose gradient in `θ` is
/// `−Σ x [H(r/h) + τ − 1]`.
fn smoothed_check_loss(y: &Vector, x: &Matrix, theta: &Vector, tau: f64, h: f64) -> f64 {
    let r = y - x * theta;
    r.iter().map(|&ri| (tau - 1.0) * ri + h * smooth_indicator_integral(ri / h)).sum()
}

/// Initial quantile-regression fit: damped Newton on the smoothed check
/// loss with bandwidth `sqrt(p/n)`, started from least squares and
/// continued from a wide bandwidth down to the target.
pub fn initial_quantile_fit(y: &Vector, x: &Matrix, tau: f64) -> Result<Vector> {
    let (n, p) = x.shape();
    if n < 5 * p {
        return Err(OgmmError::Underflow { needed: 5 * p, got: n });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(OgmmError::Domain(format!("quantile level {tau}")));
    }
    let target = (p as f64 / n as f64).sqrt();
    let mut theta = ols(y, x)?;
    let resid = y - x * &theta;
    let spread = (resid.norm_squared() / n as f64).sqrt();
    let mut h = (4.0 * spread).max(target);
    let tol = 1e-8;
    loop {
        let mut converged = false;
        for _ in 0..200 {
            let r = y - x * &theta;
            let mut grad = Vector::zeros(p);
            let mut hess = Matrix::zeros(p, p);
            for i in 0..n {
                let xi = x.row(i).transpose();
                let u = r[i] / h;
                grad -= &xi * (smooth_indicator(u) + tau - 1.0);
                let k = smooth_indicator_deriv(u) / h;
                if k > 0.0 {
                    hess.ger(k, &xi, &xi, 1.0);
                }
            }
            if grad.amax() / n as f64 <= tol {
                converged = true;
                break;
            }
            let ridge = 1e-10 * (1.0 + hess.trace() / p as f64);
            for i in 0..p {
                hess[(i, i)] += ridge;
            }
            let dir = match SpdFactor::new(&hess) {
                Some(f) => -f.solve_vec(&grad),
                None => -&grad / n as f64,
            };
            let f0 = smoothed_check_loss(y, x, &theta, tau, h);
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand = &theta + &dir * step;
                if smoothed_check_loss(y, x, &cand, tau, h) <= f0 {
                    moved = cand != theta;
                    theta = cand;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(OgmmError::NoConvergence { iterations: 200 });
        }
        if h <= target {
            return Ok(theta);
        }
        h = (h / 2.0).max(target);
    }
}

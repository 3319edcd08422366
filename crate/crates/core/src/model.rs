//! The moment-model abstraction and the batch container it consumes.

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::linalg::{Matrix, Vector};

/// Per-batch side information handed to every moment evaluation.
///
/// Smoothed quantile moments need the bandwidth `h_b`, which is fixed when
/// the batch arrives so that moments stay pure functions of `(θ, x, h)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObsContext {
    pub bandwidth: Option<f64>,
}

/// A block of `n ≥ 1` observations of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    dim: usize,
    values: Vec<f64>,
    context: ObsContext,
}

impl Batch {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(OgmmError::DimensionMismatch("observation dimension is zero".into()));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(OgmmError::DimensionMismatch(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(OgmmError::Domain(format!(
                "non-finite entry in row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { dim, values, context: ObsContext::default() })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(OgmmError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.context.bandwidth = Some(h);
        self
    }

    pub fn set_bandwidth(&mut self, h: Option<f64>) {
        self.context.bandwidth = h;
    }

    pub fn context(&self) -> ObsContext {
        self.context
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column `c` copied out.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    /// Rows `[start, end)` as a new batch sharing this batch's context.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(OgmmError::DimensionMismatch(format!(
                "row range {start}..{end} outside batch of {}",
                self.len()
            )));
        }
        Ok(Self {
            dim: self.dim,
            values: self.values[start * self.dim..end * self.dim].to_vec(),
            context: self.context,
        })
    }

    /// Concatenates batches of equal width; the context of the first batch is kept.
    pub fn concat(batches: &[Batch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| OgmmError::DimensionMismatch("no batches to concatenate".into()))?;
        if batches.iter().any(|b| b.dim != first.dim) {
            return Err(OgmmError::DimensionMismatch("batches differ in width".into()));
        }
        let values = batches.iter().flat_map(|b| b.values.iter().copied()).collect();
        Ok(Self { dim: first.dim, values, context: first.context })
    }
}

/// Callback receiving each per-observation moment vector.
pub type RowVisitor<'a> = &'a mut dyn FnMut(&[f64]);

/// Pluggable definition of a moment function `g(θ, x) ∈ R^q` with its
/// Jacobian `∇g(θ, x) ∈ R^{q×p}`.
///
/// Implementations must keep `q ≥ p`. The analytic Jacobian is expected to
/// agree with central finite differences of `moment_into`.
pub trait MomentModel: Send + Sync {
    fn param_dim(&self) -> usize;
    fn moment_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn name(&self) -> String {
        "moment-model".to_string()
    }

    /// Writes `g(θ, x)` into `out` (length `q`).
    fn moment_into(&self, theta: &[f64], x: &[f64], ctx: ObsContext, out: &mut [f64]);

    /// Overwrites `out` (q × p) with `∇g(θ, x)`.
    fn gradient_into(&self, theta: &[f64], x: &[f64], ctx: ObsContext, out: &mut Matrix);

    /// Bandwidth to attach to a batch arriving after `n_prev` observations
    /// (the first batch passes its own size). `None` for models without one.
    fn bandwidth_for(&self, _n_prev: u64) -> Option<f64> {
        None
    }

    /// Optional feasible box used by offline optimizers.
    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    fn moment(&self, theta: &Vector, x: &[f64], ctx: ObsContext) -> Vector {
        let mut out = Vector::zeros(self.moment_dim());
        self.moment_into(theta.as_slice(), x, ctx, out.as_mut_slice());
        out
    }

    fn gradient(&self, theta: &Vector, x: &[f64], ctx: ObsContext) -> Matrix {
        let mut out = Matrix::zeros(self.moment_dim(), self.param_dim());
        self.gradient_into(theta.as_slice(), x, ctx, &mut out);
        out
    }

    /// Accumulates `G(θ; D) = Σ g` and `∇G(θ; D) = Σ ∇g` over a batch,
    /// handing every per-observation moment to `visit` when given.
    fn accumulate(
        &self,
        theta: &Vector,
        batch: &Batch,
        g_sum: &mut Vector,
        grad_sum: Option<&mut Matrix>,
        visit: Option<RowVisitor<'_>>,
    ) {
        let q = self.moment_dim();
        let p = self.param_dim();
        let ctx = batch.context();
        let mut g = vec![0.0; q];
        let mut jac = Matrix::zeros(q, p);
        let mut visit = visit;
        let mut grad_sum = grad_sum;
        for x in batch.rows() {
            self.moment_into(theta.as_slice(), x, ctx, &mut g);
            for (s, v) in g_sum.iter_mut().zip(&g) {
                *s += v;
            }
            if let Some(gs) = grad_sum.as_deref_mut() {
                self.gradient_into(theta.as_slice(), x, ctx, &mut jac);
                *gs += &jac;
            }
            if let Some(f) = visit.as_deref_mut() {
                f(&g);
            }
        }
    }

    /// `(G(θ; D), ∇G(θ; D))`.
    fn batch_sums(&self, theta: &Vector, batch: &Batch) -> (Vector, Matrix) {
        let mut g = Vector::zeros(self.moment_dim());
        let mut jac = Matrix::zeros(self.moment_dim(), self.param_dim());
        self.accumulate(theta, batch, &mut g, Some(&mut jac), None);
        (g, jac)
    }

    fn moment_sum(&self, theta: &Vector, batch: &Batch) -> Vector {
        let mut g = Vector::zeros(self.moment_dim());
        self.accumulate(theta, batch, &mut g, None, None);
        g
    }

    /// Per-observation moments stacked as an `n × q` matrix.
    fn moment_matrix(&self, theta: &Vector, batch: &Batch) -> Matrix {
        let q = self.moment_dim();
        let mut out = Matrix::zeros(batch.len(), q);
        let mut g = vec![0.0; q];
        let ctx = batch.context();
        for (i, x) in batch.rows().enumerate() {
            self.moment_into(theta.as_slice(), x, ctx, &mut g);
            for (j, v) in g.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }

    fn check_dims(&self, theta: &Vector, batch: &Batch) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(OgmmError::DimensionMismatch(format!(
                "theta has length {}, model expects p = {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if batch.dim() != self.obs_dim() {
            return Err(OgmmError::DimensionMismatch(format!(
                "observations have width {}, model expects d = {}",
                batch.dim(),
                self.obs_dim()
            )));
        }
        Ok(())
    }
}

/// Central finite-difference Jacobian of `moment_into`, used by tests and
/// by callers validating a new model.
pub fn finite_difference_jacobian<M: MomentModel + ?Sized>(
    model: &M,
    theta: &Vector,
    x: &[f64],
    ctx: ObsContext,
    step: f64,
) -> Matrix {
    let (q, p) = (model.moment_dim(), model.param_dim());
    let mut out = Matrix::zeros(q, p);
    let mut plus = vec![0.0; q];
    let mut minus = vec![0.0; q];
    for k in 0..p {
        let h = step * (1.0 + theta[k].abs());
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += h;
        tm[k] -= h;
        model.moment_into(tp.as_slice(), x, ctx, &mut plus);
        model.moment_into(tm.as_slice(), x, ctx, &mut minus);
        for r in 0..q {
            out[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    out
}

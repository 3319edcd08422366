use crate::linalg::{solve_spd_vec_with_ridge, Matrix, Vector};
use crate::model::{Batch, MomentModel, ObsContext};

/// Smoothed indicator `H(u) = 1/2 + 15/16 (u − 2u³/3 + u⁵/5)` on `|u| < 1`,
/// 0 below and 1 above.
pub fn smooth_indicator(u: f64) -> f64 {
    if u <= -1.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        let u2 = u * u;
        0.5 + 15.0 / 16.0 * u * (1.0 - 2.0 * u2 / 3.0 + u2 * u2 / 5.0)
    }
}

/// `∇H(u) = 15/16 (1 − u²)²` on `|u| < 1`.
pub fn smooth_indicator_deriv(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let a = 1.0 - u * u;
        15.0 / 16.0 * a * a
    }
}

/// Smoothed quantile-regression moments `g = x [H((y − xᵀθ)/h) + τ − 1]`
/// on rows `[y, x_1, …, x_p]`.
///
/// The bandwidth comes from the batch context (`h_b = sqrt(p / N_{b−1})`
/// when attached by the estimator) or from `fixed_bandwidth`.
///
/// # Panics
///
/// Evaluating a moment without any bandwidth available panics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedQuantileMoment {
    pub p: usize,
    pub tau: f64,
    pub fixed_bandwidth: Option<f64>,
}

impl SmoothedQuantileMoment {
    pub fn new(p: usize, tau: f64) -> Self {
        assert!(tau > 0.0 && tau < 1.0, "quantile level must lie in (0, 1)");
        Self { p, tau, fixed_bandwidth: None }
    }

    fn h(&self, ctx: ObsContext) -> f64 {
        ctx.bandwidth
            .or(self.fixed_bandwidth)
            .expect("smoothed quantile moments need a bandwidth")
    }
}

impl MomentModel for SmoothedQuantileMoment {
    fn param_dim(&self) -> usize {
        self.p
    }

    fn moment_dim(&self) -> usize {
        self.p
    }

    fn obs_dim(&self) -> usize {
        self.p + 1
    }

    fn name(&self) -> String {
        format!("sqr(tau={})", self.tau)
    }

    fn bandwidth_for(&self, n_prev: u64) -> Option<f64> {
        Some((self.p as f64 / n_prev.max(1) as f64).sqrt())
    }

    fn moment_into(&self, theta: &[f64], obs: &[f64], ctx: ObsContext, out: &mut [f64]) {
        let x = &obs[1..];
        let r = obs[0] - x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        let s = smooth_indicator(r / self.h(ctx)) + self.tau - 1.0;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi * s;
        }
    }

    fn gradient_into(&self, theta: &[f64], obs: &[f64], ctx: ObsContext, out: &mut Matrix) {
        let x = &obs[1..];
        let h = self.h(ctx);
        let r = obs[0] - x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        let k = -smooth_indicator_deriv(r / h) / h;
        for j in 0..self.p {
            for i in 0..self.p {
                out[(i, j)] = k * x[i] * x[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct IntervalStats {
    v: Matrix,
    u: Vector,
}

impl IntervalStats {
    fn new(p: usize) -> Self {
        Self { v: Matrix::zeros(p, p), u: Vector::zeros(p) }
    }
}

/// Interval-scheduled linear estimator for quantile regression.
///
/// Observations are grouped into intervals starting at `b_l = ⌊m^{c_{l−1}}⌋ + 1`
/// with `c_{2k−1} = 2^{k−1} + 1/2`, `c_{2k} = 2^{k−1} + 3/4`. Within an
/// interval every observation is linearized at the estimate available when
/// the interval opened, with bandwidth `sqrt(p / (b_l − 1))` (`sqrt(p/m)` for
/// the first interval). The estimate is `V⁻¹ Ǔ` with
///
/// ```text
/// V = Σ x xᵀ ∇H(r/h)/h,   Ǔ = Σ x [H(r/h) + τ − 1 + (y/h) ∇H(r/h)]
/// ```
///
/// summed over the previous and the current interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Leqr {
    p: usize,
    tau: f64,
    m: u64,
    n: u64,
    interval: usize,
    next_start: u64,
    point: Vector,
    h: f64,
    prev: Option<IntervalStats>,
    cur: IntervalStats,
    estimate: Vector,
}

fn schedule_exponent(l: usize) -> f64 {
    // c_{2k−1} = 2^{k−1} + 1/2, c_{2k} = 2^{k−1} + 3/4.
    let k = l.div_ceil(2);
    let base = 2f64.powi(k as i32 - 1);
    if l % 2 == 1 {
        base + 0.5
    } else {
        base + 0.75
    }
}

impl Leqr {
    /// `m` is the memory constraint, `theta0` the initial estimate.
    pub fn new(tau: f64, m: u64, theta0: Vector) -> Self {
        let p = theta0.len();
        let mut s = Self {
            p,
            tau,
            m: m.max(2),
            n: 0,
            interval: 1,
            next_start: 0,
            h: (p as f64 / m.max(1) as f64).sqrt(),
            prev: None,
            cur: IntervalStats::new(p),
            estimate: theta0.clone(),
            point: theta0,
        };
        s.next_start = s.interval_start(2);
        s
    }

    /// First global index (1-based) of interval `l ≥ 1`.
    pub fn interval_start(&self, l: usize) -> u64 {
        if l <= 1 {
            return 1;
        }
        let v = (self.m as f64).powf(schedule_exponent(l - 1)).floor();
        if v >= u64::MAX as f64 {
            u64::MAX
        } else {
            v as u64 + 1
        }
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn estimate(&self) -> &Vector {
        &self.estimate
    }

    fn solve(&self) -> Option<Vector> {
        let mut v = self.cur.v.clone();
        let mut u = self.cur.u.clone();
        if let Some(prev) = &self.prev {
            v += &prev.v;
            u += &prev.u;
        }
        solve_spd_vec_with_ridge(&v, &u).ok().filter(|t| t.iter().all(|x| x.is_finite()))
    }

    fn open_next_interval(&mut self) {
        if let Some(t) = self.solve() {
            self.estimate = t;
        }
        self.point = self.estimate.clone();
        let start = self.next_start;
        self.interval += 1;
        self.h = (self.p as f64 / (start - 1) as f64).sqrt();
        self.prev = Some(std::mem::replace(&mut self.cur, IntervalStats::new(self.p)));
        self.next_start = self.interval_start(self.interval + 1);
    }

    /// Adds one row `[y, x_1, …, x_p]`.
    pub fn push(&mut self, obs: &[f64]) {
        assert_eq!(obs.len(), self.p + 1, "row has wrong width");
        let k = self.n + 1;
        if k == self.next_start {
            self.open_next_interval();
        }
        let (y, x) = (obs[0], &obs[1..]);
        let r = y - x.iter().zip(self.point.iter()).map(|(a, b)| a * b).sum::<f64>();
        let u = r / self.h;
        let kernel = smooth_indicator_deriv(u) / self.h;
        let s = smooth_indicator(u) + self.tau - 1.0 + y * kernel;
        for j in 0..self.p {
            self.cur.u[j] += x[j] * s;
            if kernel != 0.0 {
                for i in 0..self.p {
                    self.cur.v[(i, j)] += kernel * x[i] * x[j];
                }
            }
        }
        self.n = k;
    }

    /// Adds a batch and refreshes the estimate.
    pub fn push_batch(&mut self, batch: &Batch) {
        for row in batch.rows() {
            self.push(row);
        }
        if let Some(t) = self.solve() {
            self.estimate = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::finite_difference_jacobian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smoother_shape() {
        assert_eq!(smooth_indicator(-1.0), 0.0);
        assert_eq!(smooth_indicator(1.0), 1.0);
        assert!((smooth_indicator(0.0) - 0.5).abs() < 1e-15);
        assert!((smooth_indicator(-1.0 + 1e-12)).abs() < 1e-10);
        let mut prev = 0.0;
        for i in -100..=100 {
            let v = smooth_indicator(i as f64 / 90.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn derivative_integrates_to_one() {
        // Composite Simpson on [−1, 1]; the integrand is a quartic polynomial.
        let n = 1000;
        let h = 2.0 / n as f64;
        let mut s = smooth_indicator_deriv(-1.0) + smooth_indicator_deriv(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * smooth_indicator_deriv(-1.0 + i as f64 * h);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn saturated_residuals() {
        let m = SmoothedQuantileMoment { fixed_bandwidth: Some(0.1), ..SmoothedQuantileMoment::new(2, 0.3) };
        let ctx = ObsContext::default();
        let theta = Vector::zeros(2);
        let hi = m.moment(&theta, &[50.0, 1.0, 2.0], ctx);
        assert!((hi - Vector::from_vec(vec![0.3, 0.6])).amax() < 1e-15);
        let lo = m.moment(&theta, &[-50.0, 1.0, 2.0], ctx);
        assert!((lo - Vector::from_vec(vec![-0.7, -1.4])).amax() < 1e-15);
        // Context bandwidth takes precedence.
        let g = m.moment(&theta, &[0.05, 1.0, 0.0], ObsContext { bandwidth: Some(0.01) });
        assert!((g[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = SmoothedQuantileMoment::new(3, 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let ctx = ObsContext { bandwidth: Some(rng.gen_range(0.5..2.0)) };
            let theta = Vector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let fd = finite_difference_jacobian(&m, &theta, &x, ctx, 1e-6);
            let an = m.gradient(&theta, &x, ctx);
            assert!((fd - &an).amax() < 1e-5 * (1.0 + an.amax()));
        }
    }

    #[test]
    fn schedule_follows_exponents() {
        let l = Leqr::new(0.5, 100, Vector::zeros(1));
        assert_eq!(l.interval_start(1), 1);
        assert_eq!(l.interval_start(2), 1001);
        assert_eq!(l.interval_start(3), 3163);
        assert_eq!(l.interval_start(4), 100_001);
        assert_eq!(l.interval_start(5), 316_228);
    }

    #[test]
    fn returns_initial_until_first_push() {
        let l = Leqr::new(0.5, 100, Vector::from_vec(vec![1.0, 2.0]));
        assert_eq!(l.estimate().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn rotates_intervals_at_boundaries() {
        let mut l = Leqr::new(0.5, 4, Vector::from_vec(vec![0.0]));
        // Starts: 1, 9, 12, 33, 46.
        for k in 1..=40u64 {
            l.push(&[(k as f64).sin(), 1.0]);
        }
        assert_eq!(l.interval(), 4);
        assert!((l.bandwidth() - (1.0f64 / 32.0).sqrt()).abs() < 1e-15);
    }
}

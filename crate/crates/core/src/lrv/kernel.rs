//! Recursive kernel long-run variance estimator.
//!
//! The estimator is
//!
//! ```text
//! Σ̂_N = N⁻¹ Σ_i Σ_j K_N(i, j) (X_i − X̄_N)(X_j − X̄_N)ᵀ,
//! K_N(i, j) = (1 − |i−j|^λ / t_N^λ) · 1{|i−j| ≤ s'_{max(i,j)}},
//! ```
//!
//! with `s_n = min(⌊Ψ n^ψ⌋, n − 1)`, `t_n = min(⌈Ξ n^ξ⌉, n)` and the
//! truncation `s'_n` following
//!
//! ```text
//! s'_n = s'_{n−1} + 1   if s_{n−1} ≤ s'_{n−1} + 1 < φ s_{n−1}
//! s'_n = s_n            otherwise.
//! ```
//!
//! Because the indicator binds at the later index, every pair `(i, j)` is
//! final once `max(i, j)` has been pushed. The double sum is expanded into
//! running sums
//!
//! ```text
//! A_r = Σ |i−j|^r X_i X_jᵀ,  B_r = Σ |i−j|^r X_i,  c_r = Σ |i−j|^r,   r ∈ {0, λ}
//! ```
//!
//! and recentred around `X̄_N` only at query time. For each push the window
//! sums `Q_m = Σ_{j ∈ window} (k − j)^m X_j`, `m = 0..=λ`, are shifted with
//! binomial coefficients instead of rescanning the window, so the cost per
//! observation is `O(λ² q + q²)` regardless of the window length.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::linalg::{add_outer, symmetrize, Matrix, Vector};

use super::pd_adjust;

/// Tuning of the recursive kernel estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLrvConfig {
    /// Kernel exponent λ ≥ 1.
    pub lambda: u32,
    /// Memory factor φ ≥ 1.
    pub phi: f64,
    /// Ψ in `s_n = ⌊Ψ n^ψ⌋`.
    pub s_scale: f64,
    /// ψ in `s_n = ⌊Ψ n^ψ⌋`.
    pub s_exponent: f64,
    /// Ξ in `t_n = ⌈Ξ n^ξ⌉`.
    pub t_scale: f64,
    /// ξ in `t_n = ⌈Ξ n^ξ⌉`.
    pub t_exponent: f64,
    /// Queries fail until at least this many observations were pushed.
    pub pilot: u64,
}

impl KernelLrvConfig {
    /// Ψ = Ξ = 1 and ψ = ξ = 1/(1 + 2λ).
    pub fn new(lambda: u32, phi: f64) -> Self {
        let e = 1.0 / (1.0 + 2.0 * lambda as f64);
        Self { lambda, phi, s_scale: 1.0, s_exponent: e, t_scale: 1.0, t_exponent: e, pilot: 0 }
    }

    pub fn with_pilot(mut self, pilot: u64) -> Self {
        self.pilot = pilot;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 1
            && self.phi >= 1.0
            && self.s_scale > 0.0
            && self.t_scale > 0.0
            && self.s_exponent > 0.0
            && self.s_exponent < 1.0
            && self.t_exponent > 0.0
            && self.t_exponent < 1.0;
        if ok {
            Ok(())
        } else {
            Err(OgmmError::Config(format!("invalid kernel LRV parameters {self:?}")))
        }
    }

    /// `s_n = min(⌊Ψ n^ψ⌋, n − 1)`.
    pub fn s(&self, n: u64) -> u64 {
        if n == 0 {
            return 0;
        }
        let raw = (self.s_scale * (n as f64).powf(self.s_exponent)).floor();
        (raw.max(0.0) as u64).min(n - 1)
    }

    /// `t_n = min(⌈Ξ n^ξ⌉, n)`.
    pub fn t(&self, n: u64) -> u64 {
        let raw = (self.t_scale * (n as f64).powf(self.t_exponent)).ceil();
        (raw.max(1.0) as u64).min(n.max(1))
    }

    /// `s'_n` from `(s_{n−1}, s'_{n−1})`.
    pub fn next_s_prime(&self, n: u64, s_prev: u64, s_prime_prev: u64) -> u64 {
        let cand = s_prime_prev + 1;
        if s_prev <= cand && (cand as f64) < self.phi * s_prev as f64 {
            cand
        } else {
            self.s(n)
        }
    }
}

impl Default for KernelLrvConfig {
    fn default() -> Self {
        Self::new(1, 1.0)
    }
}

/// Streaming state of the recursive kernel estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLrvState {
    cfg: KernelLrvConfig,
    dim: usize,
    n: u64,
    s: u64,
    s_prime: u64,
    /// Most recent observations; `ring[0]` has index `ring_first`.
    ring: VecDeque<Vec<f64>>,
    ring_first: u64,
    /// First index of the pair window of the latest observation.
    window_start: u64,
    /// `Q_m` for `m = 0..=λ`, distances measured from the latest index.
    window_sums: Vec<Vec<f64>>,
    a0: Matrix,
    a_lambda: Matrix,
    b0: Vector,
    b_lambda: Vector,
    c0: f64,
    c_lambda: f64,
    sum: Vector,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl KernelLrvState {
    pub fn new(dim: usize, cfg: KernelLrvConfig) -> Result<Self> {
        cfg.validate()?;
        let lam = cfg.lambda as usize;
        Ok(Self {
            dim,
            n: 0,
            s: 0,
            s_prime: 0,
            ring: VecDeque::new(),
            ring_first: 1,
            window_start: 1,
            window_sums: vec![vec![0.0; dim]; lam + 1],
            a0: Matrix::zeros(dim, dim),
            a_lambda: Matrix::zeros(dim, dim),
            b0: Vector::zeros(dim),
            b_lambda: Vector::zeros(dim),
            c0: 0.0,
            c_lambda: 0.0,
            sum: Vector::zeros(dim),
            cfg,
        })
    }

    pub fn config(&self) -> &KernelLrvConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Current `s'_n`.
    pub fn s_prime(&self) -> u64 {
        self.s_prime
    }

    /// Number of stored moment vectors.
    pub fn buffer_len(&self) -> usize {
        self.ring.len()
    }

    pub fn mean(&self) -> Vector {
        if self.n == 0 {
            Vector::zeros(self.dim)
        } else {
            &self.sum / self.n as f64
        }
    }

    fn stored(&self, idx: u64) -> &[f64] {
        &self.ring[(idx - self.ring_first) as usize]
    }

    fn add_to_window(&mut self, idx: u64, k: u64, sign: f64) {
        let d = (k - idx) as f64;
        let pos = (idx - self.ring_first) as usize;
        let x = &self.ring[pos];
        let mut w = sign;
        for qm in self.window_sums.iter_mut() {
            for (a, v) in qm.iter_mut().zip(x) {
                *a += w * v;
            }
            w *= d;
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "moment vector has wrong length");
        let k = self.n + 1;
        let lam = self.cfg.lambda as usize;

        // Truncation for the new index.
        let (s_k, sp_k) = if k == 1 {
            (0, 0)
        } else {
            (self.cfg.s(k), self.cfg.next_s_prime(k, self.s, self.s_prime))
        };

        if k > 1 {
            // Shift distances by one: (d + 1)^m = Σ_l C(m, l) d^l.
            for m in (1..=lam).rev() {
                let mut shifted = self.window_sums[m].clone();
                for l in 0..m {
                    let c = binomial(m, l);
                    for (a, v) in shifted.iter_mut().zip(&self.window_sums[l]) {
                        *a += c * v;
                    }
                }
                self.window_sums[m] = shifted;
            }
            // Previous observation enters at distance one.
            let prev = k - 1;
            let prev_x = self.stored(prev).to_vec();
            for qm in self.window_sums.iter_mut() {
                for (a, v) in qm.iter_mut().zip(&prev_x) {
                    *a += v;
                }
            }
            let target = k - sp_k;
            while self.window_start < target {
                let idx = self.window_start;
                self.add_to_window(idx, k, -1.0);
                self.window_start += 1;
            }
            while self.window_start > target {
                self.window_start -= 1;
                let idx = self.window_start;
                self.add_to_window(idx, k, 1.0);
            }
        } else {
            self.window_start = 1;
        }

        // Pair contributions (k, j), (j, k) for j in the window plus (k, k).
        let q0 = &self.window_sums[0];
        let ql = &self.window_sums[lam];
        add_outer(&mut self.a0, x, q0, 1.0);
        add_outer(&mut self.a0, q0, x, 1.0);
        add_outer(&mut self.a0, x, x, 1.0);
        add_outer(&mut self.a_lambda, x, ql, 1.0);
        add_outer(&mut self.a_lambda, ql, x, 1.0);
        let power_sum: f64 = (1..=sp_k).map(|d| (d as f64).powi(lam as i32)).sum();
        for i in 0..self.dim {
            self.b0[i] += (sp_k as f64 + 1.0) * x[i] + q0[i];
            self.b_lambda[i] += power_sum * x[i] + ql[i];
            self.sum[i] += x[i];
        }
        self.c0 += 2.0 * sp_k as f64 + 1.0;
        self.c_lambda += 2.0 * power_sum;

        self.ring.push_back(x.to_vec());
        self.n = k;
        self.s = s_k;
        self.s_prime = sp_k;

        // Keep everything the next window could reach back to.
        let next = k + 1;
        let reach = (self.s_prime + 1).max(self.cfg.s(next));
        let keep_from = self.window_start.min(next.saturating_sub(reach)).max(1);
        while self.ring_first < keep_from {
            self.ring.pop_front();
            self.ring_first += 1;
        }
    }

    pub fn push_rows(&mut self, rows: &Matrix) {
        let mut buf = vec![0.0; self.dim];
        for r in 0..rows.nrows() {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = rows[(r, c)];
            }
            self.push(&buf);
        }
    }

    /// The kernel estimate before any positive-definiteness adjustment.
    pub fn query_raw(&self) -> Result<Matrix> {
        let needed = self.cfg.pilot.max(2);
        if self.n < needed {
            return Err(OgmmError::Underflow { needed: needed as usize, got: self.n as usize });
        }
        let n = self.n as f64;
        let t = self.cfg.t(self.n) as f64;
        let inv_t = 1.0 / t.powi(self.cfg.lambda as i32);
        let mean = &self.sum / n;
        let a = &self.a0 - &self.a_lambda * inv_t;
        let b = &self.b0 - &self.b_lambda * inv_t;
        let c = self.c0 - self.c_lambda * inv_t;
        let cross = &b * mean.transpose();
        let out = a - &cross - cross.transpose() + (&mean * mean.transpose()) * c;
        Ok(symmetrize(&(out / n)))
    }

    /// The kernel estimate after [`pd_adjust`].
    pub fn query(&self) -> Result<Matrix> {
        Ok(pd_adjust(&self.query_raw()?))
    }
}

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ogmm_core::model::{Batch, MomentModel, ObsContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `g = z (y − exp(xᵀθ))` on rows `[y, x(p), z(q)]`.
pub struct ExpIv {
    pub p: usize,
    pub q: usize,
}

impl MomentModel for ExpIv {
    fn param_dim(&self) -> usize {
        self.p
    }
    fn moment_dim(&self) -> usize {
        self.q
    }
    fn obs_dim(&self) -> usize {
        1 + self.p + self.q
    }
    fn moment_into(&self, theta: &[f64], x: &[f64], _: ObsContext, out: &mut [f64]) {
        let eta: f64 = (0..self.p).map(|j| x[1 + j] * theta[j]).sum();
        let r = x[0] - eta.exp();
        for k in 0..self.q {
            out[k] = x[1 + self.p + k] * r;
        }
    }
    fn gradient_into(&self, theta: &[f64], x: &[f64], _: ObsContext, out: &mut ogmm_core::Matrix) {
        let eta: f64 = (0..self.p).map(|j| x[1 + j] * theta[j]).sum();
        let e = eta.exp();
        for k in 0..self.q {
            for j in 0..self.p {
                out[(k, j)] = -x[1 + self.p + k] * e * x[1 + j];
            }
        }
    }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Linear IV rows `[y, x(p), z(q)]` with `x = Π z + v` and `y = xᵀθ + e`,
/// `corr(v, e) ≠ 0`.
pub fn linear_iv_rows(rng: &mut ChaCha8Rng, n: usize, theta: &[f64], q: usize) -> Vec<Vec<f64>> {
    let p = theta.len();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..q).map(|_| normal(rng)).collect();
            let e = normal(rng);
            let x: Vec<f64> = (0..p).map(|j| z[j % q] + 0.3 * z[(j + 1) % q] + 0.5 * e + normal(rng)).collect();
            let y: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + e;
            std::iter::once(y).chain(x).chain(z).collect()
        })
        .collect()
}

/// Exponential-mean rows for [`ExpIv`] with exogenous `x` used among the
/// instruments.
pub fn exp_rows(rng: &mut ChaCha8Rng, n: usize, theta: &[f64], q: usize) -> Vec<Vec<f64>> {
    let p = theta.len();
    (0..n)
        .map(|_| {
            let mut x = vec![1.0];
            x.extend((1..p).map(|_| 0.5 * normal(rng)));
            let mut z = x.clone();
            z.extend((p..q).map(|k| 0.5 * x[k % p] + 0.5 * normal(rng)));
            let eta: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
            let y = eta.exp() + 0.3 * normal(rng);
            std::iter::once(y).chain(x).chain(z).collect()
        })
        .collect()
}

pub fn random_sizes(rng: &mut ChaCha8Rng, first: usize, count: usize) -> Vec<usize> {
    let mut sizes = vec![first];
    let mut total = first;
    for _ in 1..count {
        let n = rng.gen_range(5..=total.min(400));
        sizes.push(n);
        total += n;
    }
    sizes
}

pub fn to_batches(rows: &[Vec<f64>], sizes: &[usize]) -> Vec<Batch> {
    let mut out = Vec::new();
    let mut start = 0;
    for &n in sizes {
        out.push(Batch::from_rows(&rows[start..start + n]).unwrap());
        start += n;
    }
    out
}

/// How the direct-form oracle refreshes its weighting matrix.
#[derive(Clone)]
pub enum OracleWeight {
    Fixed(DMatrix<f64>),
    /// Inverse of the divisor-`n` covariance of every stored moment row.
    Covariance,
}

/// Plain transcription of the direct recursion: `U_b`, `V_b`, the lagged
/// `Û_b`, `V̂_b` and the explicit solve, keeping every moment row for the
/// weighting.
pub struct DirectOgmm {
    pub n: f64,
    pub theta: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    mode: OracleWeight,
    rows: Vec<DVector<f64>>,
}

fn sums<M: MomentModel>(m: &M, theta: &DVector<f64>, b: &Batch) -> (DVector<f64>, DMatrix<f64>, Vec<DVector<f64>>) {
    let mut g = DVector::zeros(m.moment_dim());
    let mut j = DMatrix::zeros(m.moment_dim(), m.param_dim());
    let mut rows = Vec::new();
    for x in b.rows() {
        let gi = m.moment(theta, x, ObsContext::default());
        g += &gi;
        j += m.gradient(theta, x, ObsContext::default());
        rows.push(gi);
    }
    (g, j, rows)
}

impl DirectOgmm {
    fn refresh(&mut self) {
        if let OracleWeight::Covariance = self.mode {
            let n = self.rows.len() as f64;
            let mean = self.rows.iter().fold(DVector::zeros(self.u.len()), |a, r| a + r) / n;
            let mut c = DMatrix::zeros(self.u.len(), self.u.len());
            for r in &self.rows {
                let d = r - &mean;
                c += &d * d.transpose();
            }
            c /= n;
            self.w = c.try_inverse().expect("covariance invertible");
        }
    }

    pub fn init<M: MomentModel>(m: &M, first: &Batch, theta1: DVector<f64>, mode: OracleWeight) -> Self {
        let (g, j, rows) = sums(m, &theta1, first);
        let n = first.len() as f64;
        let q = m.moment_dim();
        let w = match &mode {
            OracleWeight::Fixed(w) => w.clone(),
            OracleWeight::Covariance => DMatrix::identity(q, q),
        };
        let v = j / n;
        let u = g / n - &v * &theta1;
        let mut s = Self { n, theta: theta1, u, v, w, mode, rows };
        s.refresh();
        s
    }

    pub fn step<M: MomentModel>(&mut self, m: &M, b: &Batch) {
        let nb = b.len() as f64;
        let n_new = self.n + nb;
        let (g, j, _) = sums(m, &self.theta, b);
        let u_hat = (&self.u * self.n + g - &j * &self.theta) / n_new;
        let v_hat = (&self.v * self.n + j) / n_new;
        let a = v_hat.transpose() * &self.w * &v_hat;
        let rhs = v_hat.transpose() * &self.w * &u_hat;
        let theta = -a.lu().solve(&rhs).expect("solvable");
        let (g, j, rows) = sums(m, &theta, b);
        self.rows.extend(rows);
        self.refresh();
        self.u = (&self.u * self.n + g - &j * &theta) / n_new;
        self.v = (&self.v * self.n + j) / n_new;
        self.theta = theta;
        self.n = n_new;
    }

    /// `U_b + V_b θ̂_b`.
    pub fn u_prime(&self) -> DVector<f64> {
        &self.u + &self.v * &self.theta
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

/// Writes one line straight to stdout so it shows even when the test
/// harness captures output.
pub fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

//! Seeded data generators for the simulation models.
//!
//! All draws come from `ChaCha8Rng::seed_from_u64(seed)` with standard
//! normals from `rand_distr::StandardNormal` (ziggurat), so a seed gives the
//! same stream on every platform. Vector autoregressions and the ARMA
//! recursion start from zero and discard [`BURN_IN`] draws.
//!
//! | model | layout | moments |
//! |---|---|---|
//! | `m1` | `y, x1..x5, z1..z20` | IV, p = 5, q = 20 |
//! | `m2` | `y, x1, x2, z1..z4` | IV, p = 2, q = 4 |
//! | `m3`, `m4`, `m7`, `m8` | `y, x1, z1, z2` | IV, p = 1, q = 2 |
//! | `m5`, `m6` | `y, x1..x10` with `x1 = 1` | smoothed quantile, p = 10 |

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::inference::normal_quantile;
use crate::linalg::{Matrix, Vector};
use crate::model::{Batch, MomentModel};
use crate::moments::{IvMoment, SmoothedQuantileMoment};

/// Draws discarded before any recursive generator emits data.
pub const BURN_IN: usize = 1000;

const M1_P: usize = 5;
const M1_Q: usize = 20;
const M1_RHO: f64 = 0.5;
const M2_AR: [f64; 2] = [1.4, -0.6];
const M2_MA: [f64; 2] = [0.6, -0.3];
const M5_P: usize = 10;
const VAR_COEF: f64 = 0.5;

/// 1-based indices with a parameter change in models 7 and 8.
pub const CHANGE_WINDOWS: [(u64, u64); 2] = [(2001, 2500), (6001, 6500)];
/// 1-based indices with an omitted instrument effect in models 7 and 8.
pub const OMITTED_WINDOWS: [(u64, u64); 2] = [(4001, 4500), (8001, 8500)];

fn in_windows(k: u64, windows: &[(u64, u64)]) -> bool {
    windows.iter().any(|&(a, b)| (a..=b).contains(&k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum SimModel {
    /// Heteroskedastic IV regression with `θ* = 1`.
    M1,
    /// ARMA(2, 2) with lagged outcomes as regressors and instruments.
    M2,
    /// `y = x + θ₂ z₁ + ε` with iid Gaussian drivers.
    M3 {
        #[serde(default)]
        theta2: f64,
    },
    /// As `m3` with VAR(1) drivers.
    M4 {
        #[serde(default)]
        theta2: f64,
    },
    /// Linear quantile regression with Gaussian-copula uniform regressors.
    M5 {
        #[serde(default = "median")]
        tau: f64,
    },
    /// As `m5` with VAR(1) error and regressors.
    M6 {
        #[serde(default = "median")]
        tau: f64,
    },
    /// As `m3` with change and omitted-instrument windows.
    M7 {
        #[serde(default)]
        theta2: f64,
    },
    /// As `m7` with VAR(1) drivers.
    M8 {
        #[serde(default)]
        theta2: f64,
    },
}

fn median() -> f64 {
    0.5
}

impl SimModel {
    /// Parses names such as `m3`, with `extra` supplying `θ₂` or `τ`.
    pub fn from_name(name: &str, extra: Option<f64>) -> Result<Self> {
        let t2 = extra.unwrap_or(0.0);
        let tau = extra.unwrap_or(0.5);
        let m = match name.to_ascii_lowercase().as_str() {
            "m1" => SimModel::M1,
            "m2" => SimModel::M2,
            "m3" => SimModel::M3 { theta2: t2 },
            "m4" => SimModel::M4 { theta2: t2 },
            "m5" => SimModel::M5 { tau },
            "m6" => SimModel::M6 { tau },
            "m7" => SimModel::M7 { theta2: t2 },
            "m8" => SimModel::M8 { theta2: t2 },
            other => return Err(OgmmError::BadParams(format!("unknown simulation model `{other}`"))),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimModel::M1 => "m1",
            SimModel::M2 => "m2",
            SimModel::M3 { .. } => "m3",
            SimModel::M4 { .. } => "m4",
            SimModel::M5 { .. } => "m5",
            SimModel::M6 { .. } => "m6",
            SimModel::M7 { .. } => "m7",
            SimModel::M8 { .. } => "m8",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SimModel::M3 { theta2 } | SimModel::M4 { theta2 } | SimModel::M7 { theta2 } | SimModel::M8 { theta2 } => {
                if !theta2.is_finite() {
                    return Err(OgmmError::BadParams(format!("theta2 = {theta2}")));
                }
            }
            SimModel::M5 { tau } | SimModel::M6 { tau } => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(OgmmError::BadParams(format!("tau = {tau} outside (0, 1)")));
                }
            }
            SimModel::M1 | SimModel::M2 => {}
        }
        Ok(())
    }

    pub fn param_dim(&self) -> usize {
        match self {
            SimModel::M1 => M1_P,
            SimModel::M2 => 2,
            SimModel::M5 { .. } | SimModel::M6 { .. } => M5_P,
            _ => 1,
        }
    }

    pub fn moment_dim(&self) -> usize {
        match self {
            SimModel::M1 => M1_Q,
            SimModel::M2 => 4,
            SimModel::M5 { .. } | SimModel::M6 { .. } => M5_P,
            _ => 2,
        }
    }

    /// Column names of one observation row.
    pub fn columns(&self) -> Vec<String> {
        let (p, z) = match self {
            SimModel::M5 { .. } | SimModel::M6 { .. } => (M5_P, 0),
            _ => (self.param_dim(), self.moment_dim()),
        };
        std::iter::once("y".to_string())
            .chain((1..=p).map(|i| format!("x{i}")))
            .chain((1..=z).map(|i| format!("z{i}")))
            .collect()
    }

    pub fn obs_dim(&self) -> usize {
        self.columns().len()
    }

    pub fn moment_model(&self) -> Box<dyn MomentModel> {
        match *self {
            SimModel::M5 { tau } | SimModel::M6 { tau } => Box::new(SmoothedQuantileMoment::new(M5_P, tau)),
            _ => Box::new(IvMoment::new(self.param_dim(), self.moment_dim())),
        }
    }

    /// The parameter the moment conditions identify (under the null for the
    /// misspecified variants).
    pub fn true_theta(&self) -> Vector {
        match *self {
            SimModel::M1 => Vector::from_element(M1_P, 1.0),
            SimModel::M2 => Vector::from_row_slice(&M2_AR),
            SimModel::M5 { tau } => quantile_theta(tau, 1.0),
            // Stationary variance of a VAR(1) coordinate with unit noise and
            // coefficient 0.5.
            SimModel::M6 { tau } => quantile_theta(tau, (1.0 / (1.0 - VAR_COEF * VAR_COEF)).sqrt()),
            _ => Vector::from_element(1, 1.0),
        }
    }
}

fn quantile_theta(tau: f64, scale: f64) -> Vector {
    let mut t = Vector::from_element(M5_P, 1.0);
    t[0] += scale * normal_quantile(tau).expect("tau validated");
    t
}

/// Lower Cholesky factor of the driver covariance for models 3, 4, 7 and 8:
/// unit variances, correlation 0.5 within `(z₁, z₂)` and within `(ν, ε)`.
fn pair_factor() -> Matrix {
    let mut v = Matrix::identity(4, 4);
    for (i, j) in [(0, 1), (2, 3)] {
        v[(i, j)] = 0.5;
        v[(j, i)] = 0.5;
    }
    v.cholesky().expect("positive definite").l()
}

#[derive(Debug, Clone)]
enum Driver {
    /// iid `N(0, LLᵀ)`.
    Iid(Matrix),
    /// `s_k = 0.5 s_{k−1} + L e_k`.
    Var { l: Matrix, state: Vector },
}

impl Driver {
    fn var(l: Matrix, rng: &mut ChaCha8Rng) -> Self {
        let state = Vector::zeros(l.nrows());
        let mut d = Driver::Var { l, state };
        for _ in 0..BURN_IN {
            d.next(rng);
        }
        d
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vector {
        let e = normals(rng, self.dim());
        match self {
            Driver::Iid(l) => &*l * e,
            Driver::Var { l, state } => {
                *state = &*state * VAR_COEF + &*l * e;
                state.clone()
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            Driver::Iid(l) | Driver::Var { l, .. } => l.nrows(),
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| -> f64 { StandardNormal.sample(rng) }))
}

/// Lower Cholesky factor of `ρ^{|i−j|}`.
fn ar_corr_factor(n: usize, rho: f64) -> Matrix {
    Matrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32)).cholesky().expect("positive definite").l()
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone)]
enum Source {
    M1 { l: Matrix },
    M2 { y: [f64; 7], e: [f64; 2] },
    Pair { driver: Driver, theta2: f64, windows: bool },
    Quantile { driver: Driver, theta: Vector, scale: f64 },
}

/// A running generator; successive calls continue the same stream.
#[derive(Debug, Clone)]
pub struct Generator {
    model: SimModel,
    rng: ChaCha8Rng,
    source: Source,
    /// Observations emitted so far.
    count: u64,
}

impl Generator {
    pub fn new(model: SimModel, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = match model {
            SimModel::M1 => Source::M1 { l: ar_corr_factor(M1_Q, M1_RHO) },
            SimModel::M2 => {
                let mut src = Source::M2 { y: [0.0; 7], e: [0.0; 2] };
                for _ in 0..BURN_IN {
                    arma_step(&mut src, &mut rng);
                }
                src
            }
            SimModel::M3 { theta2 } => Source::Pair { driver: Driver::Iid(pair_factor()), theta2, windows: false },
            SimModel::M4 { theta2 } => Source::Pair { driver: Driver::var(pair_factor(), &mut rng), theta2, windows: false },
            SimModel::M7 { theta2 } => Source::Pair { driver: Driver::Iid(pair_factor()), theta2, windows: true },
            SimModel::M8 { theta2 } => Source::Pair { driver: Driver::var(pair_factor(), &mut rng), theta2, windows: true },
            SimModel::M5 { .. } => Source::Quantile {
                driver: Driver::Iid(ar_corr_factor(M5_P - 1, 0.5)),
                theta: Vector::from_element(M5_P, 1.0),
                scale: 1.0,
            },
            SimModel::M6 { .. } => {
                let mut l = Matrix::zeros(M5_P, M5_P);
                l[(0, 0)] = 1.0;
                l.view_mut((1, 1), (M5_P - 1, M5_P - 1)).copy_from(&ar_corr_factor(M5_P - 1, 0.5));
                Source::Quantile {
                    driver: Driver::var(l, &mut rng),
                    theta: Vector::from_element(M5_P, 1.0),
                    scale: (1.0 / (1.0 - VAR_COEF * VAR_COEF)).sqrt(),
                }
            }
        };
        Ok(Self { model, rng, source, count: 0 })
    }

    pub fn model(&self) -> SimModel {
        self.model
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn next_row(&mut self, out: &mut Vec<f64>) {
        self.count += 1;
        let k = self.count;
        let rng = &mut self.rng;
        match &mut self.source {
            Source::M1 { l } => {
                let z = &*l * normals(rng, M1_Q);
                let nu: f64 = StandardNormal.sample(rng);
                let eps: f64 = StandardNormal.sample(rng);
                let mut x = [0.0; M1_P];
                for j in 1..M1_P {
                    x[j] = z[j - 1];
                }
                // x₁ = 0.1 Σ_{j=2}^p x_j + 0.5 Σ_{j=p}^q z_j + ν (1-based z).
                x[0] = 0.1 * x[1..].iter().sum::<f64>() + 0.5 * z.rows(M1_P - 1, M1_Q - M1_P + 1).sum() + nu;
                let y = x.iter().sum::<f64>() + 5.0 * z[M1_Q - 1].exp() * (nu + eps);
                out.push(y);
                out.extend_from_slice(&x);
                out.extend(z.iter());
            }
            Source::M2 { .. } => {
                arma_step(&mut self.source, rng);
                let Source::M2 { y, .. } = &self.source else { unreachable!() };
                // y[i] = y_{k−i}: outcome, two regressors, four instruments.
                out.extend_from_slice(y);
            }
            Source::Pair { driver, theta2, windows } => {
                let s = driver.next(rng);
                let (z1, z2, nu, eps) = (s[0], s[1], s[2], s[3]);
                let x = z1 + z2 + nu;
                let (change, omitted) = if *windows {
                    (in_windows(k, &CHANGE_WINDOWS), in_windows(k, &OMITTED_WINDOWS))
                } else {
                    (false, true)
                };
                let slope = 1.0 + if change { *theta2 } else { 0.0 };
                let y = slope * x + if omitted { *theta2 * z1 } else { 0.0 } + eps;
                out.extend_from_slice(&[y, x, z1, z2]);
            }
            Source::Quantile { driver, theta, scale } => {
                let s = driver.next(rng);
                let off = s.len() + 1 - M5_P;
                let mut x = [1.0; M5_P];
                for j in 1..M5_P {
                    x[j] = standard_normal_cdf(s[off + j - 1] / *scale);
                }
                let eps: f64 = if off == 1 { s[0] } else { StandardNormal.sample(rng) };
                let y = x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>() + eps;
                out.push(y);
                out.extend_from_slice(&x);
            }
        }
    }

    /// The next `n` observations.
    pub fn next_batch(&mut self, n: usize) -> Result<Batch> {
        let d = self.model.obs_dim();
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            self.next_row(&mut values);
        }
        Batch::new(d, values)
    }

    /// Consecutive batches with the given sizes.
    pub fn batches(&mut self, sizes: &[usize]) -> Result<Vec<Batch>> {
        sizes.iter().map(|&n| self.next_batch(n)).collect()
    }
}

fn arma_step(src: &mut Source, rng: &mut ChaCha8Rng) {
    let Source::M2 { y, e } = src else { return };
    let eps: f64 = StandardNormal.sample(rng);
    let new = M2_AR[0] * y[0] + M2_AR[1] * y[1] + M2_MA[0] * e[0] + M2_MA[1] * e[1] + eps;
    y.rotate_right(1);
    y[0] = new;
    e[1] = e[0];
    e[0] = eps;
}

/// Writes batches as CSV with a header row.
pub fn write_csv<W: Write>(writer: W, columns: &[String], batches: &[Batch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| OgmmError::Io(e.to_string());
    w.write_record(columns).map_err(io)?;
    for b in batches {
        for row in b.rows() {
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
        }
    }
    w.flush().map_err(|e| OgmmError::Io(e.to_string()))
}

/// A sum of latent AR(1) processes plus white noise, with
/// `θ = (ρ_1, σ_1², …, ρ_k, σ_k², σ_wn²)`. Returns the signal and each latent
/// component.
pub fn gmwm_signal_parts(theta: &[f64], n: usize, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if theta.len() % 2 != 1 {
        return Err(OgmmError::BadParams(format!("GMWM parameter length {} is not odd", theta.len())));
    }
    let k = theta.len() / 2;
    let mut max_rho: f64 = 0.0;
    for i in 0..k {
        let (rho, var) = (theta[2 * i], theta[2 * i + 1]);
        if rho.is_nan() || rho.abs() >= 1.0 || var.is_nan() || var < 0.0 {
            return Err(OgmmError::BadParams(format!("component {} has rho = {rho}, variance = {var}", i + 1)));
        }
        max_rho = max_rho.max(rho.abs());
    }
    let wn = theta[2 * k];
    if wn.is_nan() || wn < 0.0 {
        return Err(OgmmError::BadParams(format!("white-noise variance {wn}")));
    }
    let sd: Vec<f64> = (0..k).map(|i| theta[2 * i + 1].sqrt()).collect();
    let burn = (10.0 / (1.0 - max_rho)).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; k];
    let step = |rng: &mut ChaCha8Rng, z: &mut [f64]| {
        for i in 0..k {
            let u: f64 = StandardNormal.sample(rng);
            z[i] = theta[2 * i] * z[i] + sd[i] * u;
        }
    };
    for _ in 0..burn {
        step(&mut rng, &mut z);
    }
    let wn_sd = wn.sqrt();
    let mut y = Vec::with_capacity(n);
    let mut parts = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        step(&mut rng, &mut z);
        let u: f64 = StandardNormal.sample(&mut rng);
        y.push(z.iter().sum::<f64>() + wn_sd * u);
        for (p, v) in parts.iter_mut().zip(&z) {
            p.push(*v);
        }
    }
    Ok((y, parts))
}

pub fn gmwm_signal(theta: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    gmwm_signal_parts(theta, n, seed).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offline::{ols, split_columns};

    #[test]
    fn same_seed_same_stream() {
        for m in [SimModel::M1, SimModel::M2, SimModel::M4 { theta2: 0.2 }, SimModel::M6 { tau: 0.1 }, SimModel::M8 { theta2: 0.2 }] {
            let a = Generator::new(m, 9).unwrap().batches(&[50, 70]).unwrap();
            let b = Generator::new(m, 9).unwrap().batches(&[120]).unwrap();
            assert_eq!(Batch::concat(&a).unwrap(), b[0]);
            let c = Generator::new(m, 10).unwrap().next_batch(120).unwrap();
            assert_ne!(c, b[0]);
            assert_eq!(b[0].dim(), m.obs_dim());
            assert_eq!(m.moment_model().obs_dim(), m.obs_dim());
        }
    }

    #[test]
    fn model1_instrument_correlation() {
        let b = Generator::new(SimModel::M1, 1).unwrap().next_batch(200_000).unwrap();
        let z0 = 1 + M1_P;
        for (i, j) in [(0, 0), (0, 1), (0, 2), (5, 7), (19, 19)] {
            let a = b.column(z0 + i);
            let c = b.column(z0 + j);
            let cov = a.iter().zip(&c).map(|(u, v)| u * v).sum::<f64>() / a.len() as f64;
            assert!((cov - M1_RHO.powi(i.abs_diff(j) as i32)).abs() < 0.02, "({i},{j}) {cov}");
        }
        // x_j = z_{j−1} for j ≥ 2.
        assert_eq!(b.column(2), b.column(z0));
    }

    #[test]
    fn arma_lag_layout() {
        let b = Generator::new(SimModel::M2, 3).unwrap().next_batch(20).unwrap();
        for t in 1..20 {
            let (prev, cur) = (b.row(t - 1), b.row(t));
            assert_eq!(cur[1], prev[0]);
            assert_eq!(&cur[2..7], &prev[1..6]);
        }
    }

    #[test]
    fn change_window_slope() {
        let theta2 = 0.5;
        let mut slopes = Vec::new();
        for seed in 0..40 {
            let all = Generator::new(SimModel::M7 { theta2 }, seed).unwrap().next_batch(8500).unwrap();
            let w = Batch::concat(&[all.slice(2000, 2500).unwrap(), all.slice(6000, 6500).unwrap()]).unwrap();
            let rows: Vec<Vec<f64>> = w.rows().map(|r| vec![r[0], r[2] + r[3]]).collect();
            let (y, x, _) = split_columns(&[Batch::from_rows(&rows).unwrap()], 1, 0).unwrap();
            slopes.push(ols(&y, &x).unwrap()[0]);
        }
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        let sd = (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (slopes.len() - 1) as f64).sqrt();
        // Reduced form: y = (1+θ₂)(z₁+z₂) + (1+θ₂)ν + ε, exogenous in z.
        assert!((mean - (1.0 + theta2)).abs() < 3.0 * sd / (slopes.len() as f64).sqrt(), "{mean} ± {sd}");
    }

    #[test]
    fn quantile_intercepts() {
        assert!((SimModel::M5 { tau: 0.1 }.true_theta()[0] + 0.2816).abs() < 1e-3);
        assert!((SimModel::M6 { tau: 0.1 }.true_theta()[0] + 0.4799).abs() < 1e-3);
        let b = Generator::new(SimModel::M6 { tau: 0.1 }, 5).unwrap().next_batch(100_000).unwrap();
        let theta = SimModel::M6 { tau: 0.1 }.true_theta();
        let below = b.rows().filter(|r| r[0] <= r[1..].iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>()).count();
        assert!((below as f64 / 1e5 - 0.1).abs() < 0.01);
        assert!(b.rows().all(|r| r[1] == 1.0 && r[2..].iter().all(|u| (0.0..=1.0).contains(u))));
    }

    #[test]
    fn gmwm_signal_without_ar_is_white_noise() {
        let (y, parts) = gmwm_signal_parts(&[0.9, 0.0, 0.5, 0.0, 4.0], 50_000, 7).unwrap();
        assert!(parts.iter().flatten().all(|v| *v == 0.0));
        let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((var - 4.0).abs() < 0.1);
        assert!(gmwm_signal(&[1.0, 1.0, 1.0], 10, 0).is_err());
    }

    #[test]
    fn csv_dump_has_header() {
        let m = SimModel::M3 { theta2: 0.0 };
        let b = Generator::new(m, 1).unwrap().next_batch(3).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &m.columns(), &[b]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "y,x1,z1,z2");
        assert_eq!(text.lines().count(), 4);
    }
}

use crate::linalg::Matrix;
use crate::model::{MomentModel, ObsContext};

fn residual(y: f64, x: &[f64], theta: &[f64]) -> f64 {
    y - x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
}

/// Least-squares moments `g = x (y − xᵀθ)` on rows `[y, x_1, …, x_p]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlsMoment {
    pub p: usize,
}

impl OlsMoment {
    pub fn new(p: usize) -> Self {
        Self { p }
    }
}

impl MomentModel for OlsMoment {
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
        "ols".into()
    }

    fn moment_into(&self, theta: &[f64], obs: &[f64], _: ObsContext, out: &mut [f64]) {
        let x = &obs[1..];
        let r = residual(obs[0], x, theta);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi * r;
        }
    }

    fn gradient_into(&self, _: &[f64], obs: &[f64], _: ObsContext, out: &mut Matrix) {
        let x = &obs[1..];
        for j in 0..self.p {
            for i in 0..self.p {
                out[(i, j)] = -x[i] * x[j];
            }
        }
    }
}

/// Instrumental-variable moments `g = z (y − xᵀθ)` on rows
/// `[y, x_1, …, x_p, z_1, …, z_q]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvMoment {
    pub p: usize,
    pub q: usize,
}

impl IvMoment {
    pub fn new(p: usize, q: usize) -> Self {
        assert!(q >= p, "need at least as many instruments as regressors");
        Self { p, q }
    }
}

impl MomentModel for IvMoment {
    fn param_dim(&self) -> usize {
        self.p
    }

    fn moment_dim(&self) -> usize {
        self.q
    }

    fn obs_dim(&self) -> usize {
        1 + self.p + self.q
    }

    fn name(&self) -> String {
        "iv".into()
    }

    fn moment_into(&self, theta: &[f64], obs: &[f64], _: ObsContext, out: &mut [f64]) {
        let x = &obs[1..=self.p];
        let z = &obs[1 + self.p..];
        let r = residual(obs[0], x, theta);
        for (o, zi) in out.iter_mut().zip(z) {
            *o = zi * r;
        }
    }

    fn gradient_into(&self, _: &[f64], obs: &[f64], _: ObsContext, out: &mut Matrix) {
        let x = &obs[1..=self.p];
        let z = &obs[1 + self.p..];
        for j in 0..self.p {
            for i in 0..self.q {
                out[(i, j)] = -z[i] * x[j];
            }
        }
    }
}

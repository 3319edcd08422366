use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::linalg::{add_outer, symmetrize, Matrix, Vector};

/// One-pass mean and covariance (population divisor `n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfordState {
    n: u64,
    mean: Vector,
    m2: Matrix,
}

impl WelfordState {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: Vector::zeros(dim), m2: Matrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.n += 1;
        let inv_n = 1.0 / self.n as f64;
        let delta: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * inv_n;
        }
        let after: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        add_outer(&mut self.m2, &delta, &after, 1.0);
    }

    /// `M2 / n`; zero for a single observation.
    pub fn variance(&self) -> Result<Matrix> {
        if self.n == 0 {
            return Err(OgmmError::Underflow { needed: 1, got: 0 });
        }
        Ok(symmetrize(&(&self.m2 / self.n as f64)))
    }
}

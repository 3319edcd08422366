//! Online Haar maximal overlap discrete wavelet transform.
//!
//! Level `j` (0-based) uses `τ = 2^j`:
//!
//! ```text
//! w_{t,j} = 0.5 y_t − 0.5 y_{t−τ},   v_t = 0.5 y_t + 0.5 y_{t−τ}
//! ```
//!
//! and `v` becomes the input of level `j+1`. The online form keeps, per
//! level, a FIFO of the last `τ` inputs, so every new observation costs
//! `O(q)` and yields one coefficient per level.

use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::model::Batch;

/// Fixed-capacity FIFO where a push always evicts the oldest element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Ring {
    buf: Vec<f64>,
    head: usize,
}

impl Ring {
    fn from_slice(values: &[f64]) -> Self {
        Self { buf: values.to_vec(), head: 0 }
    }

    /// Replaces the oldest value with `y` and returns the evicted value.
    fn rotate(&mut self, y: f64) -> f64 {
        let old = std::mem::replace(&mut self.buf[self.head], y);
        self.head += 1;
        if self.head == self.buf.len() {
            self.head = 0;
        }
        old
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModwtState {
    levels: usize,
    queues: Vec<Ring>,
    n: u64,
}

/// Coefficients from a full pyramid pass: `coefficients[j][t − 2^{j+1}]`
/// holds `w_{t,j}` for `t = 2^{j+1}..=n` (1-based `t`).
pub type Coefficients = Vec<Vec<f64>>;

impl ModwtState {
    /// Runs the pyramid over `y` (length `n > 2^q`) and primes the queues.
    pub fn init(y: &[f64], levels: usize) -> Result<(Self, Coefficients)> {
        if levels == 0 || levels >= 63 {
            return Err(OgmmError::Config(format!("number of levels {levels} out of range")));
        }
        let n = y.len();
        let min = 1usize << levels;
        if n <= min {
            return Err(OgmmError::TooShort { needed: min, got: n });
        }
        // `cur[t − 1]` is the level input at 1-based index t; entries below
        // 2^j are undefined for level j and never read.
        let mut cur = y.to_vec();
        let mut next = vec![0.0; n];
        let mut coefficients = Vec::with_capacity(levels);
        let mut queues = Vec::with_capacity(levels);
        for j in 0..levels {
            let tau = 1usize << j;
            let start = tau << 1;
            let mut w = Vec::with_capacity(n + 1 - start);
            for t in start..=n {
                let a = cur[t - 1];
                let b = cur[t - 1 - tau];
                w.push(0.5 * a - 0.5 * b);
                next[t - 1] = 0.5 * a + 0.5 * b;
            }
            queues.push(Ring::from_slice(&cur[n - tau..n]));
            coefficients.push(w);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok((Self { levels, queues, n: n as u64 }, coefficients))
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Consumes `y_{n+1}` and writes `w_{n+1,j}` for every level into `out`.
    pub fn push_into(&mut self, y: f64, out: &mut [f64]) {
        let mut y = y;
        for (j, queue) in self.queues.iter_mut().enumerate() {
            let lagged = queue.rotate(y);
            out[j] = 0.5 * y - 0.5 * lagged;
            y = 0.5 * y + 0.5 * lagged;
        }
        self.n += 1;
    }

    pub fn push(&mut self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.levels];
        self.push_into(y, &mut out);
        out
    }
}

/// Rows `(w_{t,0}, …, w_{t,q−1})` for `t = 2^q..=n` from a pyramid pass;
/// earlier times are dropped at every level.
pub fn coefficient_rows(coefficients: &Coefficients) -> Vec<Vec<f64>> {
    let q = coefficients.len();
    if q == 0 {
        return Vec::new();
    }
    let n = coefficients[0].len() + 1;
    let first = 1usize << q;
    (first..=n)
        .map(|t| (0..q).map(|j| coefficients[j][t - (2usize << j)]).collect())
        .collect()
}

/// Streams a series in chunks and returns wavelet-coefficient batches ready
/// for [`crate::moments::GmwmMoment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletStream {
    levels: usize,
    state: Option<ModwtState>,
    pending: Vec<f64>,
}

impl WaveletStream {
    pub fn new(levels: usize) -> Self {
        Self { levels, state: None, pending: Vec::new() }
    }

    pub fn state(&self) -> Option<&ModwtState> {
        self.state.as_ref()
    }

    /// Feeds raw values. Returns `None` until more than `2^q` values have
    /// arrived, then one batch of rows per call.
    pub fn feed(&mut self, y: &[f64]) -> Result<Option<Batch>> {
        let q = self.levels;
        match &mut self.state {
            None => {
                self.pending.extend_from_slice(y);
                if self.pending.len() <= 1usize << q {
                    return Ok(None);
                }
                let (state, coefs) = ModwtState::init(&self.pending, q)?;
                self.state = Some(state);
                self.pending = Vec::new();
                let rows = coefficient_rows(&coefs);
                Batch::new(q, rows.concat()).map(Some)
            }
            Some(state) => {
                if y.is_empty() {
                    return Ok(None);
                }
                let mut values = vec![0.0; y.len() * q];
                for (v, out) in y.iter().zip(values.chunks_exact_mut(q)) {
                    state.push_into(*v, out);
                }
                Batch::new(q, values).map(Some)
            }
        }
    }
}

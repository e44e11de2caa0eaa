//! Spectral normalization by power iteration.
//!
//! The left/right vectors persist between calls so one iteration per training
//! step keeps the estimate tight. The normalizing scalar enters the tape as a
//! constant scale: no gradient flows through `u` or `v`.

use crate::error::{Result, TapeError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Power-iteration steps run per call to [`spectral_normalize`].
    pub n_iters: usize,
}

/// Result of normalizing one weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct Normalized {
    pub weight: Var,
    /// Estimated largest singular value the weight was divided by.
    pub sigma: f64,
    /// Set when the input was all zeros and was passed through unchanged.
    pub degenerate: bool,
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SpectralState {
    /// Random unit vectors for a `[rows, cols]` weight, reproducible from `seed`.
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut s = seed;
        let mut draw = |n: usize| {
            let mut x: Vec<f64> = (0..n)
                .map(|_| (splitmix64(&mut s) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
                .collect();
            if normalize(&mut x) == 0.0 && n > 0 {
                x[0] = 1.0;
            }
            x
        };
        let u = draw(rows);
        let v = draw(cols);
        Self { u, v, n_iters: 1 }
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        if self.u.len() != w.rows() || self.v.len() != w.cols() {
            return Err(TapeError::Shape {
                op: "spectral_normalize",
                lhs: w.shape(),
                rhs: [self.u.len(), self.v.len()],
            });
        }
        Ok(())
    }

    /// Runs `iters` steps of `v <- W^T u / |W^T u|`, `u <- W v / |W v|` and
    /// returns `u^T W v`. Returns `None` for an all-zero matrix.
    pub fn power_iterate(&mut self, w: &Tensor, iters: usize) -> Result<Option<f64>> {
        self.check(w)?;
        if w.data().iter().all(|&x| x == 0.0) {
            return Ok(None);
        }
        let (rows, cols) = (w.rows(), w.cols());
        for _ in 0..iters.max(1) {
            let mut v = vec![0.0; cols];
            for r in 0..rows {
                let ur = self.u[r];
                for (vc, wrc) in v.iter_mut().zip(w.row_slice(r)) {
                    *vc += wrc * ur;
                }
            }
            if normalize(&mut v) == 0.0 {
                // u is orthogonal to the column space; restart from the heaviest row.
                let best = (0..rows)
                    .max_by(|&a, &b| {
                        let na: f64 = w.row_slice(a).iter().map(|x| x * x).sum();
                        let nb: f64 = w.row_slice(b).iter().map(|x| x * x).sum();
                        na.total_cmp(&nb)
                    })
                    .unwrap_or(0);
                v.copy_from_slice(w.row_slice(best));
                normalize(&mut v);
            }
            let mut u: Vec<f64> = (0..rows)
                .map(|r| w.row_slice(r).iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            normalize(&mut u);
            self.u = u;
            self.v = v;
        }
        let sigma: f64 = (0..rows)
            .map(|r| {
                self.u[r] * w.row_slice(r).iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        Ok(Some(sigma))
    }
}

/// `W / (u^T W v)` after `state.n_iters` power-iteration steps.
pub fn spectral_normalize(tape: &mut Tape, w: Var, state: &mut SpectralState) -> Result<Normalized> {
    let iters = state.n_iters;
    let sigma = state.power_iterate(tape.value(w), iters)?;
    match sigma {
        Some(sigma) if sigma > f64::EPSILON => Ok(Normalized {
            weight: tape.scale(w, 1.0 / sigma)?,
            sigma,
            degenerate: false,
        }),
        _ => Ok(Normalized {
            weight: w,
            sigma: 0.0,
            degenerate: true,
        }),
    }
}

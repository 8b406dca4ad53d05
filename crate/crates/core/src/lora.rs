//! Low-rank adapters.
//!
//! An adapter attaches a rank-r update A*B to a frozen d_in x d_out weight
//! matrix, scaled by a per-layer allocation weight alpha. A starts as small
//! Gaussian noise and B starts at zero, so a fresh adapter contributes
//! exactly nothing to the forward pass while still receiving gradient
//! through A on the first step.
//!
//! Resizing preserves the current update where it can: growing keeps the
//! old factors as a prefix (new B rows are zero, so the delta is unchanged
//! down to the last bit); shrinking truncates trailing components and
//! reports how much of the delta was lost.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Standard deviation for fresh A-factor entries.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
    d_in: usize,
    d_out: usize,
}

impl LoraAdapter {
    /// Fresh adapter: A ~ N(0, INIT_STD^2), B = 0, alpha = 1.
    pub fn init(d_in: usize, d_out: usize, rank: usize, seed: u64) -> Result<Self> {
        check_rank(rank, d_in, d_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let a = Matrix::from_fn(d_in, rank, |_, _| normal.sample(&mut rng));
        let b = Matrix::zeros(rank, d_out);
        Ok(LoraAdapter {
            a,
            b,
            alpha: 1.0,
            d_in,
            d_out,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    /// Allocation weight; kept in [0, 1] by the importance refresh.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        self.alpha = alpha;
        Ok(())
    }

    /// The unscaled update A*B.
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes consistent")
    }

    /// Effective weight W + alpha * (A*B), for inference export.
    pub fn merge_into(&self, w: &Matrix) -> Result<Matrix> {
        if w.shape() != (self.d_in, self.d_out) {
            return Err(Error::contract(format!(
                "adapter is {}x{} but weight is {}x{}",
                self.d_in,
                self.d_out,
                w.rows(),
                w.cols()
            )));
        }
        w.add(&self.delta().scale(self.alpha))
    }

    /// Number of trainable entries, r * (d_in + d_out).
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_in + self.d_out)
    }

    /// Resize to a new rank. Growing appends Gaussian A columns and zero B
    /// rows, leaving the delta untouched; shrinking drops trailing
    /// components. Alpha carries over. Optimizer state for the factors must
    /// be reset by the caller because shapes change.
    pub fn resize(&self, new_rank: usize, seed: u64) -> Result<Self> {
        check_rank(new_rank, self.d_in, self.d_out)?;
        let old = self.rank();
        if new_rank == old {
            return Ok(self.clone());
        }
        let (a, b) = if new_rank > old {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let a = Matrix::from_fn(self.d_in, new_rank, |r, c| {
                if c < old {
                    self.a.get(r, c)
                } else {
                    normal.sample(&mut rng)
                }
            });
            let b = Matrix::from_fn(new_rank, self.d_out, |r, c| {
                if r < old {
                    self.b.get(r, c)
                } else {
                    0.0
                }
            });
            (a, b)
        } else {
            let a = Matrix::from_fn(self.d_in, new_rank, |r, c| self.a.get(r, c));
            let b = Matrix::from_fn(new_rank, self.d_out, |r, c| self.b.get(r, c));
            (a, b)
        };
        Ok(LoraAdapter {
            a,
            b,
            alpha: self.alpha,
            d_in: self.d_in,
            d_out: self.d_out,
        })
    }

    /// Shape/range consistency, used after deserializing a checkpoint.
    pub fn validate(&self) -> Result<()> {
        let r = self.a.cols();
        if self.a.rows() != self.d_in || self.b.cols() != self.d_out || self.b.rows() != r {
            return Err(Error::contract(format!(
                "inconsistent adapter shapes: A {}x{}, B {}x{} for {}x{}",
                self.a.rows(),
                self.a.cols(),
                self.b.rows(),
                self.b.cols(),
                self.d_in,
                self.d_out
            )));
        }
        check_rank(r, self.d_in, self.d_out)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::contract("non-finite adapter entries".to_string()));
        }
        Ok(())
    }
}

fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    let max = d_in.min(d_out);
    if rank == 0 || rank > max {
        return Err(Error::contract(format!(
            "rank {rank} outside [1, {max}] for a {d_in}x{d_out} layer"
        )));
    }
    Ok(())
}

use rand::Rng;

use super::BaseDistribution;
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

/// Low-rank correction `e_i + B·a_i` over the frozen base table.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `n × rank`, one low-dimensional row per item.
    pub a: DenseMatrix,
    /// `k × rank` projection, zero at construction.
    pub b: DenseMatrix,
}

impl LoraAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if a.cols() != b.cols() || a.cols() == 0 {
            return Err(Error::dim(format!(
                "LoRA rank mismatch: A is {:?}, B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    /// `A` drawn from the base distribution, `B = 0`.
    pub fn init<R: Rng + ?Sized>(n: usize, k: usize, rank: usize, dist: &BaseDistribution, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        Self::new(dist.sample_matrix(n, rank, rng), DenseMatrix::zeros(k, rank))
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `B·a_i`.
    pub fn delta(&self, item: usize) -> Result<Vec<f32>> {
        self.b.matvec(self.a.row(item))
    }
}

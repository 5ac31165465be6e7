use rand::Rng;

use super::{AdapterInit, BaseDistribution};
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

/// Residual-quantized item representation: trainable codebooks indexed by
/// frozen per-item semantic codes.
#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeAdapter {
    /// One `d_R × k` codebook per level.
    pub codebooks: Vec<DenseMatrix>,
    /// Row-major `n × levels`.
    codes: Vec<u32>,
    levels: usize,
}

impl RqVaeAdapter {
    pub fn new(codebooks: Vec<DenseMatrix>, codes: &[Vec<u32>]) -> Result<Self> {
        let levels = codebooks.len();
        if levels == 0 {
            return Err(Error::invalid("RQ-VAE adapter needs at least one codebook"));
        }
        let shape = codebooks[0].shape();
        if shape.0 == 0 || codebooks.iter().any(|c| c.shape() != shape) {
            return Err(Error::dim("codebooks must share a non-empty shape"));
        }
        let mut flat = Vec::with_capacity(codes.len() * levels);
        for (i, c) in codes.iter().enumerate() {
            if c.len() != levels {
                return Err(Error::dim(format!(
                    "item {i} has {} codes, expected {levels}",
                    c.len()
                )));
            }
            if let Some(bad) = c.iter().find(|&&x| x as usize >= shape.0) {
                return Err(Error::invalid(format!(
                    "item {i} code {bad} outside codebook of size {}",
                    shape.0
                )));
            }
            flat.extend_from_slice(c);
        }
        Ok(Self {
            codebooks,
            codes: flat,
            levels,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        k: usize,
        codebook_size: usize,
        codes: &[Vec<u32>],
        init: AdapterInit,
        dist: &BaseDistribution,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = codes.first().map_or(0, Vec::len);
        let books = (0..levels)
            .map(|_| match init {
                AdapterInit::Zero => DenseMatrix::zeros(codebook_size, k),
                AdapterInit::BaseDistribution => dist.sample_matrix(codebook_size, k, rng),
            })
            .collect();
        Self::new(books, codes)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].rows()
    }

    pub fn num_items(&self) -> usize {
        self.codes.len() / self.levels
    }

    pub fn codes(&self, item: usize) -> &[u32] {
        &self.codes[item * self.levels..(item + 1) * self.levels]
    }

    pub fn all_codes(&self) -> &[u32] {
        &self.codes
    }

    /// `Σ_j C_j(c_j)`.
    pub fn quantized(&self, item: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.codebooks[0].cols()];
        for (book, &c) in self.codebooks.iter().zip(self.codes(item)) {
            crate::numerics::axpy(1.0, book.row(c as usize), &mut out);
        }
        out
    }
}

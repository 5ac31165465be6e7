use rand::Rng;

use crate::{Error, Result};

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} values, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `y = self · x`.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::dim(format!(
                "matvec: {}x{} by vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `y = selfᵀ · x`.
    pub fn matvec_t(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.rows {
            return Err(Error::dim(format!(
                "matvec_t: ({}x{})ᵀ by vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0f32; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(xr, self.row(r), &mut out);
            }
        }
        Ok(out)
    }

    /// `self += alpha · a bᵀ`.
    pub fn add_outer(&mut self, alpha: f32, a: &[f32], b: &[f32]) -> Result<()> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(Error::dim(format!(
                "outer product {}x{} into {}x{}",
                a.len(),
                b.len(),
                self.rows,
                self.cols
            )));
        }
        for (r, &ar) in a.iter().enumerate() {
            let s = alpha * ar;
            if s != 0.0 {
                axpy(s, b, self.row_mut(r));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_norm(a: &[f32]) -> f32 {
    a.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "sgd_step: {} params, {} grads",
            params.len(),
            grads.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    axpy(-lr, grads, params);
    Ok(())
}

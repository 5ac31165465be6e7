//! Universal-hash shared tables with mean or squeeze-and-excitation pooling.

use rand::Rng;

use super::{AdapterInit, BaseDistribution};
use crate::numerics::{Activation, DenseMatrix, MlpCache, MlpModel, Mode};
use crate::{Error, Result};

/// One member `(a, b)` of the family `((a·id + b) mod p) mod d_H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashFunction {
    pub a: u64,
    pub b: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashPooling {
    Mean,
    Senet,
}

/// `((a·id + b) mod p) mod table_size`.
#[inline]
pub fn hash_index(id: u64, f: HashFunction, prime: u64, table_size: usize) -> usize {
    let v = (f.a as u128 * id as u128 + f.b as u128) % prime as u128;
    (v % table_size as u128) as usize
}

fn validate(functions: &[HashFunction], prime: u64, table_size: usize) -> Result<()> {
    if table_size == 0 {
        return Err(Error::invalid("hash table size must be at least 1"));
    }
    if prime < table_size as u64 {
        return Err(Error::invalid(format!(
            "hash modulus {prime} smaller than table size {table_size}"
        )));
    }
    if functions.is_empty() {
        return Err(Error::invalid("at least one hash function is required"));
    }
    for (j, f) in functions.iter().enumerate() {
        if f.a == 0 {
            return Err(Error::invalid(format!("hash function {j} has a = 0")));
        }
        if f.a == f.b {
            return Err(Error::invalid(format!("hash function {j} has a = b = {}", f.a)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashAdapter {
    /// `d_H × k` shared table.
    pub table: DenseMatrix,
    functions: Vec<HashFunction>,
    prime: u64,
    /// Excitation network `[h, h·r_h, h]` without biases, present for SENet pooling.
    pub senet: Option<MlpModel>,
}

/// Intermediates of a SENet composition.
#[derive(Debug, Clone)]
pub struct SenetCache {
    pub(crate) weights: Vec<f32>,
    pub(crate) mlp: MlpCache,
}

impl HashAdapter {
    pub fn new(table: DenseMatrix, functions: Vec<HashFunction>, prime: u64, senet: Option<MlpModel>) -> Result<Self> {
        validate(&functions, prime, table.rows())?;
        if let Some(net) = &senet {
            let h = functions.len();
            if net.input_dim() != h || net.output_dim() != h {
                return Err(Error::dim(format!(
                    "excitation network maps {} -> {}, expected {h} -> {h}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        Ok(Self {
            table,
            functions,
            prime,
            senet,
        })
    }

    /// Draws `functions` random members with `1 <= a < p`, `0 <= b < p`, `a != b`.
    pub fn random_functions<R: Rng + ?Sized>(count: usize, prime: u64, rng: &mut R) -> Result<Vec<HashFunction>> {
        if prime < 2 {
            return Err(Error::invalid("hash modulus must be at least 2"));
        }
        Ok((0..count)
            .map(|_| loop {
                let a = rng.random_range(1..prime);
                let b = rng.random_range(0..prime);
                if a != b {
                    break HashFunction { a, b };
                }
            })
            .collect())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        k: usize,
        table_size: usize,
        functions: usize,
        prime: u64,
        pooling: HashPooling,
        expansion: usize,
        init: AdapterInit,
        dist: &BaseDistribution,
        rng: &mut R,
    ) -> Result<Self> {
        let funcs = Self::random_functions(functions, prime, rng)?;
        let table = match init {
            AdapterInit::Zero => DenseMatrix::zeros(table_size, k),
            AdapterInit::BaseDistribution => dist.sample_matrix(table_size, k, rng),
        };
        let senet = match pooling {
            HashPooling::Mean => None,
            HashPooling::Senet => {
                if expansion == 0 {
                    return Err(Error::invalid("SENet expansion ratio must be positive"));
                }
                Some(MlpModel::new(
                    &[functions, functions * expansion, functions],
                    Activation::Relu,
                    Activation::Sigmoid,
                    false,
                    0.0,
                    rng,
                )?)
            }
        };
        Self::new(table, funcs, prime, senet)
    }

    pub fn functions(&self) -> &[HashFunction] {
        &self.functions
    }

    pub fn prime(&self) -> u64 {
        self.prime
    }

    pub fn table_size(&self) -> usize {
        self.table.rows()
    }

    pub fn pooling(&self) -> HashPooling {
        if self.senet.is_some() {
            HashPooling::Senet
        } else {
            HashPooling::Mean
        }
    }

    pub fn indices(&self, item: usize) -> Vec<usize> {
        self.functions
            .iter()
            .map(|&f| hash_index(item as u64, f, self.prime, self.table.rows()))
            .collect()
    }

    /// Pooled hash vector of `item` plus the SENet intermediates if any.
    pub(crate) fn pooled(&self, item: usize) -> Result<(Vec<f32>, Option<SenetCache>)> {
        let idx = self.indices(item);
        let k = self.table.cols();
        let mut out = vec![0.0f32; k];
        match &self.senet {
            None => {
                for &r in &idx {
                    crate::numerics::axpy(1.0, self.table.row(r), &mut out);
                }
                let h = idx.len() as f32;
                out.iter_mut().for_each(|v| *v /= h);
                Ok((out, None))
            }
            Some(net) => {
                let vectors: Vec<&[f32]> = idx.iter().map(|&r| self.table.row(r)).collect();
                let (weights, mlp) = excitation(&vectors, net)?;
                for (w, v) in weights.iter().zip(&vectors) {
                    crate::numerics::axpy(*w, v, &mut out);
                }
                Ok((out, Some(SenetCache { weights, mlp })))
            }
        }
    }
}

fn excitation(vectors: &[&[f32]], net: &MlpModel) -> Result<(Vec<f32>, MlpCache)> {
    let k = vectors.first().map_or(0, |v| v.len());
    if k == 0 || vectors.iter().any(|v| v.len() != k) {
        return Err(Error::dim("hash vectors must share a positive length"));
    }
    let squeezed: Vec<f32> = vectors
        .iter()
        .map(|v| v.iter().sum::<f32>() / k as f32)
        .collect();
    net.forward(&squeezed, Mode::Eval, None)
}

/// Squeeze (mean over components) then excite: `σ(W2·ReLU(W1·s))`.
pub fn senet_weights(vectors: &[Vec<f32>], excitation_net: &MlpModel) -> Result<Vec<f32>> {
    let views: Vec<&[f32]> = vectors.iter().map(Vec::as_slice).collect();
    excitation(&views, excitation_net).map(|(w, _)| w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseLayer;

    #[test]
    fn modular_examples() {
        let f = HashFunction { a: 3, b: 5 };
        assert_eq!(hash_index(10, f, 4096, 256), 35);
        let f = HashFunction { a: 1, b: 0 };
        assert_eq!(hash_index(5000, f, 4096, 256), 136);
    }

    #[test]
    fn constructor_rejects_bad_params() {
        let t = DenseMatrix::zeros(8, 2);
        assert!(HashAdapter::new(t.clone(), vec![HashFunction { a: 3, b: 3 }], 4096, None).is_err());
        assert!(HashAdapter::new(t.clone(), vec![HashFunction { a: 0, b: 3 }], 4096, None).is_err());
        assert!(HashAdapter::new(t.clone(), vec![HashFunction { a: 2, b: 3 }], 4, None).is_err());
        assert!(HashAdapter::new(t, vec![HashFunction { a: 2, b: 3 }], 4096, None).is_ok());
    }

    fn senet(w1: Vec<f32>, w2: Vec<f32>, h: usize, h1: usize) -> MlpModel {
        MlpModel::from_layers(
            vec![
                DenseLayer {
                    weights: DenseMatrix::new(h1, h, w1).unwrap(),
                    bias: None,
                    activation: Activation::Relu,
                },
                DenseLayer {
                    weights: DenseMatrix::new(h, h1, w2).unwrap(),
                    bias: None,
                    activation: Activation::Sigmoid,
                },
            ],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_excitation_gives_half() {
        let net = senet(vec![0.0; 4], vec![0.0; 4], 2, 2);
        let w = senet_weights(&[vec![1.0, 9.0], vec![-3.0, 2.0]], &net).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_computed_weights() {
        // s = (3, 7); W1 = [[1,0],[0,-1]] -> relu([3,-7]) = [3,0];
        // W2 = [[0.1, 5],[-0.2, 1]] -> [0.3, -0.6] -> sigmoid
        let net = senet(vec![1.0, 0.0, 0.0, -1.0], vec![0.1, 5.0, -0.2, 1.0], 2, 2);
        let w = senet_weights(&[vec![2.0, 4.0], vec![6.0, 8.0]], &net).unwrap();
        let expect = [1.0 / (1.0 + (-0.3f64).exp()), 1.0 / (1.0 + 0.6f64.exp())];
        for (a, b) in w.iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_in_open_unit_interval() {
        let net = senet(vec![0.7, -1.2, 2.0, 0.4], vec![1.5, -0.3, 0.8, -2.2], 2, 2);
        let w = senet_weights(&[vec![0.5, -0.25], vec![3.0, 1.0]], &net).unwrap();
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn mismatched_vectors_rejected() {
        let net = senet(vec![0.0; 4], vec![0.0; 4], 2, 2);
        assert!(senet_weights(&[vec![1.0], vec![1.0, 2.0]], &net).is_err());
        assert!(senet_weights(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]], &net).is_err());
    }
}

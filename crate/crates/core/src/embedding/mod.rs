//! Item embeddings: a full base table plus an optional compressed adapter.
//!
//! During warm-up the base table `E` itself is trained and uploaded. Once the
//! adapter is attached, `E` is frozen and only the adapter's parameters are
//! trained, exchanged and aggregated. Composition always adds the adapter's
//! output to the base row, so a zero-output adapter leaves the model exactly
//! where warm-up ended.

pub mod checkpoint;
pub mod cost;
pub mod hash;
pub mod lora;
pub mod rqvae;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{axpy, dot, sgd_step, DenseMatrix, MlpGrads};
use crate::{Error, Result};

pub use cost::{comm_cost, representation_capacity};
pub use hash::{hash_index, senet_weights, HashAdapter, HashFunction, HashPooling};
pub use lora::LoraAdapter;
pub use rqvae::RqVaeAdapter;

/// Which compressed embedding is trained after warm-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// No adapter; `E` keeps training for the whole run.
    Full,
    Lora {
        rank: usize,
    },
    Hash {
        table_size: usize,
        functions: usize,
        prime: u64,
        pooling: HashPooling,
        expansion: usize,
    },
    RqVae {
        levels: usize,
        codebook_size: usize,
    },
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Full => "full".into(),
            Strategy::Lora { rank } => format!("lora(k_L={rank})"),
            Strategy::Hash {
                table_size,
                functions,
                pooling,
                ..
            } => {
                let p = match pooling {
                    HashPooling::Mean => "hash",
                    HashPooling::Senet => "hash_senet",
                };
                format!("{p}(d_H={table_size},h={functions})")
            }
            Strategy::RqVae {
                levels,
                codebook_size,
            } => format!("rqvae(l={levels},d_R={codebook_size})"),
        }
    }

    pub fn is_peft(&self) -> bool {
        !matches!(self, Strategy::Full)
    }
}

/// How adapter tables start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// Shared tables/codebooks at zero: the adapter starts as an identity.
    #[default]
    Zero,
    /// Same element distribution as the base table.
    BaseDistribution,
}

/// Gaussian fitted to the elements of the base table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseDistribution {
    pub mean: f32,
    pub std: f32,
}

impl BaseDistribution {
    pub fn of(table: &DenseMatrix) -> Self {
        let n = table.as_slice().len().max(1) as f64;
        let mean = table.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = table
            .as_slice()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        Self {
            mean: mean as f32,
            std: var.sqrt() as f32,
        }
    }

    pub fn sample_matrix<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
        let normal = Normal::new(self.mean, self.std.max(0.0)).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        DenseMatrix::new(rows, cols, data).expect("sized")
    }
}

/// The `n × k` base table `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullEmbeddingTable {
    table: Arc<DenseMatrix>,
    frozen: bool,
}

impl FullEmbeddingTable {
    pub fn new(table: DenseMatrix) -> Self {
        Self {
            table: Arc::new(table),
            frozen: false,
        }
    }

    pub fn table(&self) -> &DenseMatrix {
        &self.table
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn num_items(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    fn table_mut(&mut self) -> &mut DenseMatrix {
        Arc::make_mut(&mut self.table)
    }

    /// Hex SHA-256 of the little-endian table bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.table.as_slice() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    None,
    Lora(LoraAdapter),
    Hash(HashAdapter),
    RqVae(RqVaeAdapter),
}

impl Adapter {
    /// Builds the adapter for `strategy` over `base` at the start of the
    /// fine-tuning phase.
    pub fn initialize<R: Rng + ?Sized>(
        strategy: &Strategy,
        base: &DenseMatrix,
        codes: Option<&[Vec<u32>]>,
        init: AdapterInit,
        rng: &mut R,
    ) -> Result<Adapter> {
        let dist = BaseDistribution::of(base);
        let (n, k) = base.shape();
        Ok(match strategy {
            Strategy::Full => Adapter::None,
            Strategy::Lora { rank } => Adapter::Lora(LoraAdapter::init(n, k, *rank, &dist, rng)?),
            Strategy::Hash {
                table_size,
                functions,
                prime,
                pooling,
                expansion,
            } => Adapter::Hash(HashAdapter::init(
                k,
                *table_size,
                *functions,
                *prime,
                *pooling,
                *expansion,
                init,
                &dist,
                rng,
            )?),
            Strategy::RqVae {
                levels,
                codebook_size,
            } => {
                let codes = codes.ok_or_else(|| Error::Missing("RQ-VAE adapter needs semantic codes".into()))?;
                if codes.len() != n {
                    return Err(Error::dim(format!("{} code tuples for {n} items", codes.len())));
                }
                if codes.first().map_or(0, Vec::len) != *levels {
                    return Err(Error::dim(format!("semantic codes do not have {levels} levels")));
                }
                Adapter::RqVae(RqVaeAdapter::init(k, *codebook_size, codes, init, &dist, rng)?)
            }
        })
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        match self {
            Adapter::None => vec![],
            Adapter::Lora(l) => vec![l.a.as_slice(), l.b.as_slice()],
            Adapter::Hash(h) => {
                let mut v = vec![h.table.as_slice()];
                if let Some(net) = &h.senet {
                    v.extend(net.tensors());
                }
                v
            }
            Adapter::RqVae(r) => r.codebooks.iter().map(DenseMatrix::as_slice).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Adapter::None => vec![],
            Adapter::Lora(l) => vec![l.a.as_mut_slice(), l.b.as_mut_slice()],
            Adapter::Hash(h) => {
                let mut v = vec![h.table.as_mut_slice()];
                if let Some(net) = &mut h.senet {
                    v.extend(net.tensors_mut());
                }
                v
            }
            Adapter::RqVae(r) => r.codebooks.iter_mut().map(DenseMatrix::as_mut_slice).collect(),
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Adapter::None => 0,
            Adapter::Lora(_) => 1,
            Adapter::Hash(h) if h.senet.is_none() => 2,
            Adapter::Hash(_) => 3,
            Adapter::RqVae(_) => 4,
        }
    }

    /// Bytes of the parts that never change during federation: semantic
    /// codes and hash parameters.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Adapter::Hash(h) => {
                out.extend(h.prime().to_le_bytes());
                for f in h.functions() {
                    out.extend(f.a.to_le_bytes());
                    out.extend(f.b.to_le_bytes());
                }
            }
            Adapter::RqVae(r) => {
                for c in r.all_codes() {
                    out.extend(c.to_le_bytes());
                }
            }
            Adapter::None | Adapter::Lora(_) => {}
        }
        out
    }
}

/// Per-item intermediates needed by [`ItemModel::accumulate_grad`].
#[derive(Debug, Clone)]
pub struct ComposeCache {
    item: usize,
    senet: Option<hash::SenetCache>,
}

/// Sparse gradient of the trainable item-side parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemGrads {
    pub base_rows: BTreeMap<u32, Vec<f32>>,
    pub adapter: AdapterGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterGrads {
    None,
    Lora {
        a_rows: BTreeMap<u32, Vec<f32>>,
        b: DenseMatrix,
    },
    Hash {
        rows: BTreeMap<u32, Vec<f32>>,
        senet: Option<MlpGrads>,
    },
    /// Keyed by `(level, codebook row)`.
    RqVae { rows: BTreeMap<(u32, u32), Vec<f32>> },
}

fn add_row(map: &mut BTreeMap<u32, Vec<f32>>, key: u32, alpha: f32, g: &[f32]) {
    let row = map.entry(key).or_insert_with(|| vec![0.0; g.len()]);
    axpy(alpha, g, row);
}

impl ItemGrads {
    pub fn is_zero(&self) -> bool {
        let rows_zero = |m: &BTreeMap<u32, Vec<f32>>| m.values().all(|r| r.iter().all(|&v| v == 0.0));
        rows_zero(&self.base_rows)
            && match &self.adapter {
                AdapterGrads::None => true,
                AdapterGrads::Lora { a_rows, b } => rows_zero(a_rows) && b.as_slice().iter().all(|&v| v == 0.0),
                AdapterGrads::Hash { rows, senet } => {
                    rows_zero(rows)
                        && senet
                            .as_ref()
                            .is_none_or(|g| g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)))
                }
                AdapterGrads::RqVae { rows } => rows.values().all(|r| r.iter().all(|&v| v == 0.0)),
            }
    }

    /// Dense gradient in [`ItemModel::trainable_tensors`] order.
    pub fn to_dense(&self, model: &ItemModel) -> Vec<Vec<f32>> {
        let mut out: Vec<Vec<f32>> = model.trainable_tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let k = model.dim();
        let mut t = 0;
        if !model.base.frozen {
            for (&r, g) in &self.base_rows {
                out[0][r as usize * k..(r as usize + 1) * k].copy_from_slice(g);
            }
            t = 1;
        }
        match (&self.adapter, &model.adapter) {
            (AdapterGrads::Lora { a_rows, b }, Adapter::Lora(l)) => {
                let r = l.rank();
                for (&i, g) in a_rows {
                    out[t][i as usize * r..(i as usize + 1) * r].copy_from_slice(g);
                }
                out[t + 1].copy_from_slice(b.as_slice());
            }
            (AdapterGrads::Hash { rows, senet }, Adapter::Hash(_)) => {
                for (&i, g) in rows {
                    out[t][i as usize * k..(i as usize + 1) * k].copy_from_slice(g);
                }
                if let Some(sg) = senet {
                    for (j, gt) in sg.tensors().into_iter().enumerate() {
                        out[t + 1 + j].copy_from_slice(gt);
                    }
                }
            }
            (AdapterGrads::RqVae { rows }, Adapter::RqVae(_)) => {
                for (&(level, row), g) in rows {
                    let o = row as usize * k;
                    out[t + level as usize][o..o + k].copy_from_slice(g);
                }
            }
            _ => {}
        }
        out
    }
}

/// Base table plus adapter: the complete item-side model held by a client.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemModel {
    pub base: FullEmbeddingTable,
    pub adapter: Adapter,
}

impl ItemModel {
    /// Warm-up / full-embedding model: trainable base, no adapter.
    pub fn full(table: DenseMatrix) -> Self {
        Self {
            base: FullEmbeddingTable::new(table),
            adapter: Adapter::None,
        }
    }

    pub fn num_items(&self) -> usize {
        self.base.num_items()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Freezes `E` and installs `adapter` as the only trainable item part.
    pub fn freeze_and_attach(&mut self, adapter: Adapter) -> Result<()> {
        self.check_adapter(&adapter)?;
        self.base.freeze();
        self.adapter = adapter;
        Ok(())
    }

    fn check_adapter(&self, adapter: &Adapter) -> Result<()> {
        let (n, k) = self.base.table().shape();
        let ok = match adapter {
            Adapter::None => true,
            Adapter::Lora(l) => l.a.rows() == n && l.b.rows() == k,
            Adapter::Hash(h) => h.table.cols() == k,
            Adapter::RqVae(r) => r.codebooks[0].cols() == k && r.num_items() == n,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!("adapter does not fit a {n}x{k} base table")))
        }
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.num_items() {
            return Err(Error::invalid(format!(
                "item {item} out of range for {} items",
                self.num_items()
            )));
        }
        Ok(())
    }

    /// Final embedding of `item`.
    pub fn compose(&self, item: usize) -> Result<Vec<f32>> {
        self.compose_cached(item).map(|(e, _)| e)
    }

    pub fn compose_cached(&self, item: usize) -> Result<(Vec<f32>, ComposeCache)> {
        self.check_item(item)?;
        let mut e = self.base.table().row(item).to_vec();
        let mut senet = None;
        match &self.adapter {
            Adapter::None => {}
            Adapter::Lora(l) => {
                let d = l.delta(item)?;
                axpy(1.0, &d, &mut e);
            }
            Adapter::Hash(h) => {
                let (d, cache) = h.pooled(item)?;
                axpy(1.0, &d, &mut e);
                senet = cache;
            }
            Adapter::RqVae(r) => {
                let d = r.quantized(item);
                axpy(1.0, &d, &mut e);
            }
        }
        Ok((e, ComposeCache { item, senet }))
    }

    /// All composed embeddings as an `n × k` matrix.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        let rows: Vec<Vec<f32>> = (0..self.num_items())
            .map(|i| self.compose(i))
            .collect::<Result<_>>()?;
        DenseMatrix::from_rows(&rows)
    }

    pub fn zero_grads(&self) -> ItemGrads {
        let adapter = match &self.adapter {
            Adapter::None => AdapterGrads::None,
            Adapter::Lora(l) => AdapterGrads::Lora {
                a_rows: BTreeMap::new(),
                b: DenseMatrix::zeros(l.b.rows(), l.b.cols()),
            },
            Adapter::Hash(h) => AdapterGrads::Hash {
                rows: BTreeMap::new(),
                senet: h.senet.as_ref().map(MlpGrads::zeros_like),
            },
            Adapter::RqVae(_) => AdapterGrads::RqVae { rows: BTreeMap::new() },
        };
        ItemGrads {
            base_rows: BTreeMap::new(),
            adapter,
        }
    }

    /// Chains the upstream gradient `g = ∂L/∂e_item` into the trainable
    /// parameters. The base row receives `g` only while `E` is unfrozen.
    pub fn accumulate_grad(&self, cache: &ComposeCache, g: &[f32], grads: &mut ItemGrads) -> Result<()> {
        let item = cache.item;
        self.check_item(item)?;
        if g.len() != self.dim() {
            return Err(Error::dim(format!("upstream gradient of {} for k = {}", g.len(), self.dim())));
        }
        if !self.base.frozen {
            add_row(&mut grads.base_rows, item as u32, 1.0, g);
        }
        match (&self.adapter, &mut grads.adapter) {
            (Adapter::None, AdapterGrads::None) => {}
            (Adapter::Lora(l), AdapterGrads::Lora { a_rows, b }) => {
                let a_i = l.a.row(item);
                let da = l.b.matvec_t(g)?;
                add_row(a_rows, item as u32, 1.0, &da);
                b.add_outer(1.0, g, a_i)?;
            }
            (Adapter::Hash(h), AdapterGrads::Hash { rows, senet }) => {
                let idx = h.indices(item);
                match (&h.senet, &cache.senet, senet) {
                    (None, _, _) => {
                        let scale = 1.0 / idx.len() as f32;
                        for &r in &idx {
                            add_row(rows, r as u32, scale, g);
                        }
                    }
                    (Some(net), Some(sc), Some(net_grads)) => {
                        let k = self.dim() as f32;
                        let gw: Vec<f32> = idx.iter().map(|&r| dot(g, h.table.row(r))).collect();
                        let (pg, gs) = net.backward(&sc.mlp, &gw)?;
                        net_grads.add_assign(&pg)?;
                        for (j, &r) in idx.iter().enumerate() {
                            let mut gv: Vec<f32> = g.iter().map(|&x| sc.weights[j] * x).collect();
                            let spread = gs[j] / k;
                            gv.iter_mut().for_each(|v| *v += spread);
                            add_row(rows, r as u32, 1.0, &gv);
                        }
                    }
                    _ => return Err(Error::StaleCache("SENet composition cache missing".into())),
                }
            }
            (Adapter::RqVae(r), AdapterGrads::RqVae { rows }) => {
                for (level, &c) in r.codes(item).iter().enumerate() {
                    let row = rows.entry((level as u32, c)).or_insert_with(|| vec![0.0; g.len()]);
                    axpy(1.0, g, row);
                }
            }
            _ => return Err(Error::StaleCache("gradient buffer does not match adapter".into())),
        }
        Ok(())
    }

    /// Convenience: gradient of a single composition.
    pub fn adapter_grad(&self, cache: &ComposeCache, g: &[f32]) -> Result<ItemGrads> {
        let mut grads = self.zero_grads();
        self.accumulate_grad(cache, g, &mut grads)?;
        Ok(grads)
    }

    /// SGD on every trainable item parameter touched by `grads`.
    pub fn apply_grads(&mut self, grads: &ItemGrads, lr: f32) -> Result<()> {
        if !self.base.frozen && !grads.base_rows.is_empty() {
            let table = self.base.table_mut();
            for (&r, g) in &grads.base_rows {
                sgd_step(table.row_mut(r as usize), g, lr)?;
            }
        }
        match (&mut self.adapter, &grads.adapter) {
            (Adapter::None, AdapterGrads::None) => {}
            (Adapter::Lora(l), AdapterGrads::Lora { a_rows, b }) => {
                for (&r, g) in a_rows {
                    sgd_step(l.a.row_mut(r as usize), g, lr)?;
                }
                sgd_step(l.b.as_mut_slice(), b.as_slice(), lr)?;
            }
            (Adapter::Hash(h), AdapterGrads::Hash { rows, senet }) => {
                for (&r, g) in rows {
                    sgd_step(h.table.row_mut(r as usize), g, lr)?;
                }
                if let (Some(net), Some(g)) = (&mut h.senet, senet) {
                    net.apply_grads(g, lr)?;
                }
            }
            (Adapter::RqVae(q), AdapterGrads::RqVae { rows }) => {
                for (&(level, r), g) in rows {
                    sgd_step(q.codebooks[level as usize].row_mut(r as usize), g, lr)?;
                }
            }
            _ => return Err(Error::dim("gradient does not match adapter")),
        }
        Ok(())
    }

    /// Flat views of every trainable tensor: `E` while unfrozen, then the
    /// adapter's tensors.
    pub fn trainable_tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        if !self.base.frozen {
            out.push(self.base.table().as_slice());
        }
        out.extend(self.adapter.tensors());
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        if !self.base.frozen {
            out.push(Arc::make_mut(&mut self.base.table).as_mut_slice());
        }
        out.extend(self.adapter.tensors_mut());
        out
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.base.table().is_finite() && self.adapter.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Little-endian `f32` bytes of every trainable tensor.
    pub fn serialize_upload(&self) -> Vec<u8> {
        encode_tensors(&self.trainable_tensors())
    }

    /// Inverse of [`ItemModel::serialize_upload`] into a model of the same
    /// layout.
    pub fn load_upload(&mut self, bytes: &[u8]) -> Result<()> {
        decode_into(bytes, self.trainable_tensors_mut())
    }
}

pub(crate) fn encode_tensors(tensors: &[&[f32]]) -> Vec<u8> {
    let len: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(len * 4);
    for t in tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode_into(bytes: &[u8], tensors: Vec<&mut [f32]>) -> Result<()> {
    let expected: usize = tensors.iter().map(|t| t.len() * 4).sum();
    if bytes.len() != expected {
        return Err(Error::dim(format!(
            "payload has {} bytes, layout needs {expected}",
            bytes.len()
        )));
    }
    let mut chunks = bytes.chunks_exact(4);
    for t in tensors {
        for v in t.iter_mut() {
            let c = chunks.next().expect("length checked");
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(())
}

//! Binary item-model checkpoint.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic       4 bytes  "FPEB"
//! version     u16      1
//! tag         u8       0 full, 1 lora, 2 hash-mean, 3 hash-senet, 4 rq-vae
//! flags       u8       bit 0: base table frozen
//! config_hash u64
//! seed        u64
//! n, k        u32, u32
//! dims        lora:  rank u32
//!             hash:  d_H u32, h u32, p u64, hidden u32 (0 for mean), h × (a u64, b u64)
//!             rqvae: levels u32, d_R u32, n·levels × code u32
//! base        n·k × f32
//! adapter     trainable adapter tensors, f32, in upload order
//! ```

use std::path::Path;

use super::{decode_into, encode_tensors, Adapter, FullEmbeddingTable, HashAdapter, HashFunction, ItemModel, LoraAdapter, RqVaeAdapter};
use crate::numerics::{Activation, DenseLayer, DenseMatrix, MlpModel};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPEB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub seed: u64,
    pub model: ItemModel,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let (n, k) = m.base.table().shape();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(m.adapter.tag());
        out.push(u8::from(m.base.is_frozen()));
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, n);
        put_u32(&mut out, k);
        match &m.adapter {
            Adapter::None => {}
            Adapter::Lora(l) => put_u32(&mut out, l.rank()),
            Adapter::Hash(h) => {
                put_u32(&mut out, h.table_size());
                put_u32(&mut out, h.functions().len());
                out.extend_from_slice(&h.prime().to_le_bytes());
                put_u32(&mut out, h.senet.as_ref().map_or(0, |s| s.layers()[0].weights.rows()));
                for f in h.functions() {
                    out.extend_from_slice(&f.a.to_le_bytes());
                    out.extend_from_slice(&f.b.to_le_bytes());
                }
            }
            Adapter::RqVae(r) => {
                put_u32(&mut out, r.levels());
                put_u32(&mut out, r.codebook_size());
                for c in r.all_codes() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out.extend(encode_tensors(&[m.base.table().as_slice()]));
        out.extend(encode_tensors(&m.adapter.tensors()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an item-model checkpoint".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = r.u8()?;
        let flags = r.u8()?;
        let config_hash = r.u64()?;
        let seed = r.u64()?;
        let n = r.usize()?;
        let k = r.usize()?;
        let mut adapter = match tag {
            0 => Adapter::None,
            1 => {
                let rank = r.usize()?;
                Adapter::Lora(LoraAdapter::new(DenseMatrix::zeros(n, rank), DenseMatrix::zeros(k, rank))?)
            }
            2 | 3 => {
                let d = r.usize()?;
                let h = r.usize()?;
                let prime = r.u64()?;
                let hidden = r.usize()?;
                let mut funcs = Vec::with_capacity(h);
                for _ in 0..h {
                    funcs.push(HashFunction { a: r.u64()?, b: r.u64()? });
                }
                let senet = if tag == 3 {
                    let layer = |rows, cols, activation| DenseLayer {
                        weights: DenseMatrix::zeros(rows, cols),
                        bias: None,
                        activation,
                    };
                    Some(MlpModel::from_layers(
                        vec![layer(hidden, h, Activation::Relu), layer(h, hidden, Activation::Sigmoid)],
                        0.0,
                    )?)
                } else {
                    None
                };
                Adapter::Hash(HashAdapter::new(DenseMatrix::zeros(d, k), funcs, prime, senet)?)
            }
            4 => {
                let levels = r.usize()?;
                let d_r = r.usize()?;
                let mut codes = Vec::with_capacity(n);
                for _ in 0..n {
                    codes.push((0..levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
                }
                let books = (0..levels).map(|_| DenseMatrix::zeros(d_r, k)).collect();
                Adapter::RqVae(RqVaeAdapter::new(books, &codes)?)
            }
            t => return Err(Error::Checkpoint(format!("unknown strategy tag {t}"))),
        };
        let mut base = DenseMatrix::zeros(n, k);
        decode_into(r.take(n * k * 4)?, vec![base.as_mut_slice()])?;
        let adapter_len: usize = adapter.tensors().iter().map(|t| t.len() * 4).sum();
        decode_into(r.take(adapter_len)?, adapter.tensors_mut())?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut table = FullEmbeddingTable::new(base);
        if flags & 1 == 1 {
            table.freeze();
        }
        let model = ItemModel { base: table, adapter };
        if !model.is_finite() {
            return Err(Error::Checkpoint("checkpoint holds non-finite values".into()));
        }
        Ok(Self {
            config_hash,
            seed,
            model,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! Residual-quantized autoencoder producing frozen per-item semantic codes.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::{diverged, sq_err};
use super::{encoder_decoder, epoch_order, map_chunks, PretrainConfig, RQ_STREAM};
use crate::datasets::{InteractionLog, ItemFeatureMatrix};
use crate::numerics::{kmeans, squared_distance, DenseMatrix, MlpGrads, MlpModel, Mode, Purpose, RngStream, StreamKey};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqVaeConfig {
    pub levels: usize,
    pub codebook_size: usize,
    /// Commitment weight.
    pub beta: f32,
    pub kmeans_iters: usize,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 256,
            beta: 0.25,
            kmeans_iters: crate::numerics::kmeans::DEFAULT_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeModel {
    pub encoder: MlpModel,
    pub decoder: MlpModel,
    /// One `d_R × k` codebook per level.
    pub codebooks: Vec<DenseMatrix>,
    pub beta: f32,
}

/// Result of quantizing one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RqEncoding {
    pub codes: Vec<u32>,
    /// `r_0 = z` through `r_l = z - ẑ` (`levels + 1` entries).
    pub residuals: Vec<Vec<f32>>,
    /// `ẑ`, the sum of the selected codebook rows.
    pub quantized: Vec<f32>,
}

/// Greedy residual quantization: at each level pick the nearest row (ties to
/// the lowest index) and subtract it.
pub fn rq_encode(z: &[f32], codebooks: &[DenseMatrix]) -> Result<RqEncoding> {
    if codebooks.is_empty() || codebooks.iter().any(|c| c.rows() == 0) {
        return Err(Error::invalid("residual quantization needs non-empty codebooks"));
    }
    if let Some(c) = codebooks.iter().find(|c| c.cols() != z.len()) {
        return Err(Error::dim(format!("codebook width {} for latent of {}", c.cols(), z.len())));
    }
    let mut residuals = vec![z.to_vec()];
    let mut quantized = vec![0.0f32; z.len()];
    let mut codes = Vec::with_capacity(codebooks.len());
    for book in codebooks {
        let r = residuals.last().expect("non-empty");
        let mut best = (0usize, f32::INFINITY);
        for row in 0..book.rows() {
            let d = squared_distance(r, book.row(row));
            if d < best.1 {
                best = (row, d);
            }
        }
        let o = book.row(best.0);
        let next: Vec<f32> = r.iter().zip(o).map(|(a, b)| a - b).collect();
        for (q, v) in quantized.iter_mut().zip(o) {
            *q += v;
        }
        codes.push(best.0 as u32);
        residuals.push(next);
    }
    Ok(RqEncoding {
        codes,
        residuals,
        quantized,
    })
}

/// Codebooks fitted level by level with k-means on the residuals of
/// `latents`.
pub fn kmeans_codebooks(latents: &[Vec<f32>], cfg: &RqVaeConfig, seed: u64) -> Result<Vec<DenseMatrix>> {
    let mut residuals = latents.to_vec();
    let mut books = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let mut rng = RngStream::new(seed, StreamKey::new(Purpose::KMeans, RQ_STREAM, level as u64));
        let fit = kmeans(&residuals, cfg.codebook_size, cfg.kmeans_iters, &mut rng)?;
        for (r, &a) in residuals.iter_mut().zip(&fit.assignments) {
            for (v, c) in r.iter_mut().zip(&fit.centroids[a]) {
                *v -= c;
            }
        }
        books.push(DenseMatrix::from_rows(&fit.centroids)?);
    }
    Ok(books)
}

struct Grads {
    enc: MlpGrads,
    dec: MlpGrads,
    books: Vec<DenseMatrix>,
    loss: f64,
}

impl Grads {
    fn zeros(m: &RqVaeModel) -> Self {
        Self {
            enc: MlpGrads::zeros_like(&m.encoder),
            dec: MlpGrads::zeros_like(&m.decoder),
            books: m.codebooks.iter().map(|c| DenseMatrix::zeros(c.rows(), c.cols())).collect(),
            loss: 0.0,
        }
    }

    fn add(&mut self, o: &Grads) -> Result<()> {
        self.enc.add_assign(&o.enc)?;
        self.dec.add_assign(&o.dec)?;
        for (a, b) in self.books.iter_mut().zip(&o.books) {
            a.add_assign(b)?;
        }
        self.loss += o.loss;
        Ok(())
    }

    fn scale(&mut self, s: f32) {
        let mats = self
            .enc
            .weights
            .iter_mut()
            .chain(self.dec.weights.iter_mut())
            .chain(self.books.iter_mut());
        for m in mats {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        for b in self.enc.biases.iter_mut().chain(self.dec.biases.iter_mut()).flatten() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl RqVaeModel {
    pub fn new(input: usize, hidden: &[usize], latent: usize, cfg: &RqVaeConfig, seed: u64) -> Result<Self> {
        if cfg.levels == 0 || cfg.codebook_size == 0 {
            return Err(Error::invalid("RQ-VAE needs at least one level and one code"));
        }
        if cfg.beta < 0.0 {
            return Err(Error::invalid("commitment weight must be non-negative"));
        }
        let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Pretrain, RQ_STREAM, 0));
        let (encoder, decoder) = encoder_decoder(input, hidden, latent, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            codebooks: (0..cfg.levels).map(|_| DenseMatrix::zeros(cfg.codebook_size, latent)).collect(),
            beta: cfg.beta,
        })
    }

    pub fn latent(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.encoder.forward(x, Mode::Eval, None).map(|(z, _)| z)
    }

    pub fn encode(&self, x: &[f32]) -> Result<RqEncoding> {
        rq_encode(&self.latent(x)?, &self.codebooks)
    }

    /// `||x - x̂||² + Σ_j (1 + β)·||r_j - o_j||²` as a value.
    pub fn sample_loss(&self, x: &[f32]) -> Result<f64> {
        let enc = self.encode(x)?;
        let (xh, _) = self.decoder.forward(&enc.quantized, Mode::Eval, None)?;
        Ok(sq_err(x, &xh) + (1.0 + self.beta as f64) * quantization_error(self, &enc))
    }

    /// Accumulates the gradients of one sample.
    ///
    /// Codebook rows see only `||sg[r_j] - o_j||²`. The encoder sees the
    /// reconstruction gradient copied straight through the quantizer plus the
    /// β-weighted commitment term.
    fn sample_grads(&self, x: &[f32], acc: &mut Grads) -> Result<()> {
        let (z, ec) = self.encoder.forward(x, Mode::Eval, None)?;
        let enc = rq_encode(&z, &self.codebooks)?;
        let (xh, dc) = self.decoder.forward(&enc.quantized, Mode::Eval, None)?;
        let g: Vec<f32> = xh.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
        let (dg, mut gz) = self.decoder.backward(&dc, &g)?;
        for (j, &c) in enc.codes.iter().enumerate() {
            let r = &enc.residuals[j];
            let o = self.codebooks[j].row(c as usize);
            let row = acc.books[j].row_mut(c as usize);
            for t in 0..z.len() {
                let diff = r[t] - o[t];
                row[t] -= 2.0 * diff;
                gz[t] += 2.0 * self.beta * diff;
            }
        }
        let (eg, _) = self.encoder.backward(&ec, &gz)?;
        acc.enc.add_assign(&eg)?;
        acc.dec.add_assign(&dg)?;
        acc.loss += sq_err(x, &xh) + (1.0 + self.beta as f64) * quantization_error(self, &enc);
        Ok(())
    }
}

fn quantization_error(m: &RqVaeModel, enc: &RqEncoding) -> f64 {
    enc.codes
        .iter()
        .enumerate()
        .map(|(j, &c)| squared_distance(&enc.residuals[j], m.codebooks[j].row(c as usize)) as f64)
        .sum()
}

#[derive(Debug, Clone)]
pub struct RqVaeOutcome {
    pub model: RqVaeModel,
    pub codes: Vec<Vec<u32>>,
    /// Mean sample loss of every optimizer step.
    pub loss_history: Vec<f64>,
}

/// Trains the encoder, decoder and codebooks jointly, then assigns codes.
///
/// Codebooks are initialized by k-means on the residuals of the first batch.
pub fn train_rqvae(
    features: &ItemFeatureMatrix,
    latent: usize,
    rq: &RqVaeConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<RqVaeOutcome> {
    let model = RqVaeModel::new(features.dim(), &cfg.hidden, latent, rq, seed)?;
    fit_rqvae(model, features, rq, cfg, seed)
}

pub fn fit_rqvae(
    mut model: RqVaeModel,
    features: &ItemFeatureMatrix,
    rq: &RqVaeConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<RqVaeOutcome> {
    let n = features.num_items();
    if n == 0 {
        return Err(Error::invalid("RQ-VAE needs at least one item"));
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::invalid("pre-training needs a positive batch size and learning rate"));
    }
    let x = &features.features;
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut order = Vec::new();
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if pos == 0 {
            let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Shuffle, RQ_STREAM, epoch as u64));
            order = epoch_order(n, &mut rng);
        }
        let batch = &order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(n)];
        if step == 0 {
            let latents: Vec<Vec<f32>> = batch.iter().map(|&i| model.latent(x.row(i))).collect::<Result<_>>()?;
            model.codebooks = kmeans_codebooks(&latents, rq, seed)?;
        }
        let m = &model;
        let parts = map_chunks(batch, |chunk| {
            let mut g = Grads::zeros(m);
            for &i in chunk {
                m.sample_grads(x.row(i), &mut g)?;
            }
            Ok(g)
        })
        .map_err(|e| diverged(e, "rq-vae", epoch))?;
        let mut g = Grads::zeros(&model);
        for p in &parts {
            g.add(p)?;
        }
        if !g.loss.is_finite() {
            return Err(Error::Diverged { stage: "rq-vae", epoch });
        }
        history.push(g.loss / batch.len() as f64);
        g.scale(1.0 / batch.len() as f32);
        model.encoder.apply_grads(&g.enc, cfg.lr)?;
        model.decoder.apply_grads(&g.dec, cfg.lr)?;
        for (book, gb) in model.codebooks.iter_mut().zip(&g.books) {
            crate::numerics::sgd_step(book.as_mut_slice(), gb.as_slice(), cfg.lr)?;
        }
        if !model.encoder.is_finite() || !model.decoder.is_finite() || model.codebooks.iter().any(|c| !c.is_finite()) {
            return Err(Error::Diverged { stage: "rq-vae", epoch });
        }
    }
    if cfg.steps == 0 {
        let latents: Vec<Vec<f32>> = (0..n.min(cfg.batch_size)).map(|i| model.latent(x.row(i))).collect::<Result<_>>()?;
        model.codebooks = kmeans_codebooks(&latents, rq, seed)?;
    }
    let codes = assign_codes(features, &model)?;
    Ok(RqVaeOutcome {
        model,
        codes,
        loss_history: history,
    })
}

/// Semantic code tuple of every item under `model`.
pub fn assign_codes(features: &ItemFeatureMatrix, model: &RqVaeModel) -> Result<Vec<Vec<u32>>> {
    (0..features.num_items())
        .map(|i| model.encode(features.features.row(i)).map(|e| e.codes))
        .collect()
}

/// Writes `item_id<TAB>c_0,...,c_{l-1}` lines under a provenance header.
pub fn write_codes(path: &Path, codes: &[Vec<u32>], item_ids: &[String], config_hash: u64, seed: u64) -> Result<()> {
    if codes.len() != item_ids.len() {
        return Err(Error::dim(format!("{} code tuples for {} items", codes.len(), item_ids.len())));
    }
    let levels = codes.first().map_or(0, Vec::len);
    let mut out = format!("# fedpeft codes v1 config={config_hash:016x} seed={seed} levels={levels}\n");
    for (id, c) in item_ids.iter().zip(codes) {
        let joined: Vec<String> = c.iter().map(u32::to_string).collect();
        out.push_str(&format!("{id}\t{}\n", joined.join(",")));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a codes file and orders the tuples by the log's dense item index.
pub fn read_codes(path: &Path, log: &InteractionLog) -> Result<Vec<Vec<u32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut codes: Vec<Option<Vec<u32>>> = vec![None; log.num_items];
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: origin.clone(),
            line: idx + 1,
            message,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected item_id<TAB>codes".into()))?;
        let tuple = rest
            .split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|e| parse_err(format!("bad code {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(i) = log.item_index(id) {
            codes[i as usize] = Some(tuple);
        }
    }
    codes
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Missing(format!("no semantic codes for item {}", log.item_ids[i]))))
        .collect()
}

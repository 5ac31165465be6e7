//! Autoencoder whose latent codes become the initial item table.

use super::{encoder_decoder, epoch_order, map_chunks, PretrainConfig, AE_STREAM};
use crate::datasets::ItemFeatureMatrix;
use crate::embedding::FullEmbeddingTable;
use crate::numerics::{Activation, DenseMatrix, MlpGrads, MlpModel, Mode, Purpose, RngStream, StreamKey};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub encoder: MlpModel,
    pub decoder: MlpModel,
}

impl AutoencoderModel {
    pub fn new(input: usize, hidden: &[usize], latent: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Pretrain, AE_STREAM, 0));
        let (encoder, decoder) = encoder_decoder(input, hidden, latent, &mut rng)?;
        Ok(Self { encoder, decoder })
    }

    /// Every weight and bias zero.
    pub fn zeros(input: usize, hidden: &[usize], latent: usize) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(latent);
        let encoder = MlpModel::zeros(&sizes, Activation::Relu, Activation::Identity, true, 0.0)?;
        sizes.reverse();
        let decoder = MlpModel::zeros(&sizes, Activation::Relu, Activation::Identity, true, 0.0)?;
        Ok(Self { encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.encoder.forward(x, Mode::Eval, None).map(|(z, _)| z)
    }

    /// Squared reconstruction error `||x - D(E(x))||²`.
    pub fn sample_loss(&self, x: &[f32]) -> Result<f64> {
        let z = self.encode(x)?;
        let (xh, _) = self.decoder.forward(&z, Mode::Eval, None)?;
        Ok(sq_err(x, &xh))
    }

    /// Loss and gradients of one sample.
    fn sample_grads(&self, x: &[f32], enc: &mut MlpGrads, dec: &mut MlpGrads) -> Result<f64> {
        let (z, ec) = self.encoder.forward(x, Mode::Eval, None)?;
        let (xh, dc) = self.decoder.forward(&z, Mode::Eval, None)?;
        let g: Vec<f32> = xh.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
        let (dg, gz) = self.decoder.backward(&dc, &g)?;
        let (eg, _) = self.encoder.backward(&ec, &gz)?;
        dec.add_assign(&dg)?;
        enc.add_assign(&eg)?;
        Ok(sq_err(x, &xh))
    }
}

/// Non-finite activations during training mean the optimizer blew up.
pub(crate) fn diverged(e: Error, stage: &'static str, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { stage, epoch },
        e => e,
    }
}

pub(crate) fn sq_err(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

fn scale(grads: &mut MlpGrads, s: f32) {
    for w in &mut grads.weights {
        w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    }
    for b in grads.biases.iter_mut().flatten() {
        b.iter_mut().for_each(|v| *v *= s);
    }
}

/// Mean reconstruction loss over every item.
pub fn reconstruction_loss(model: &AutoencoderModel, features: &ItemFeatureMatrix) -> Result<f64> {
    let n = features.num_items();
    let mut total = 0.0;
    for i in 0..n {
        total += model.sample_loss(features.features.row(i))?;
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct AutoencoderOutcome {
    pub model: AutoencoderModel,
    /// Encoder latents of every item.
    pub table: FullEmbeddingTable,
    /// Mean sample loss of every epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch SGD on the mean squared reconstruction error, starting from
/// `model`.
pub fn fit_autoencoder(
    mut model: AutoencoderModel,
    features: &ItemFeatureMatrix,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<AutoencoderOutcome> {
    let n = features.num_items();
    if n == 0 {
        return Err(Error::invalid("autoencoder needs at least one item"));
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::invalid("pre-training needs a positive batch size and learning rate"));
    }
    let x = &features.features;
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut history = Vec::new();
    let (mut order, mut epoch_loss, mut epoch_count) = (Vec::new(), 0.0f64, 0usize);
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if pos == 0 {
            let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Shuffle, AE_STREAM, epoch as u64));
            order = epoch_order(n, &mut rng);
        }
        let batch = &order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(n)];
        let m = &model;
        let parts = map_chunks(batch, |chunk| {
            let mut eg = MlpGrads::zeros_like(&m.encoder);
            let mut dg = MlpGrads::zeros_like(&m.decoder);
            let mut loss = 0.0;
            for &i in chunk {
                loss += m.sample_grads(x.row(i), &mut eg, &mut dg)?;
            }
            Ok((eg, dg, loss))
        })
        .map_err(|e| diverged(e, "autoencoder", epoch))?;
        let mut eg = MlpGrads::zeros_like(&model.encoder);
        let mut dg = MlpGrads::zeros_like(&model.decoder);
        let mut loss = 0.0;
        for (e, d, l) in &parts {
            eg.add_assign(e)?;
            dg.add_assign(d)?;
            loss += l;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "autoencoder",
                epoch,
            });
        }
        let inv = 1.0 / batch.len() as f32;
        scale(&mut eg, inv);
        scale(&mut dg, inv);
        model.encoder.apply_grads(&eg, cfg.lr)?;
        model.decoder.apply_grads(&dg, cfg.lr)?;
        if !model.encoder.is_finite() || !model.decoder.is_finite() {
            return Err(Error::Diverged {
                stage: "autoencoder",
                epoch,
            });
        }
        epoch_loss += loss;
        epoch_count += batch.len();
        if pos + 1 == per_epoch || step + 1 == cfg.steps {
            let mean = epoch_loss / epoch_count as f64;
            log::debug!("autoencoder epoch {epoch}: loss {mean:.6}");
            history.push(mean);
            epoch_loss = 0.0;
            epoch_count = 0;
        }
    }
    let rows: Vec<Vec<f32>> = (0..n).map(|i| model.encode(x.row(i))).collect::<Result<_>>()?;
    let table = DenseMatrix::from_rows(&rows)?;
    if !table.is_finite() {
        return Err(Error::Diverged {
            stage: "autoencoder",
            epoch: history.len(),
        });
    }
    Ok(AutoencoderOutcome {
        model,
        table: FullEmbeddingTable::new(table),
        loss_history: history,
    })
}

/// Trains a freshly initialized autoencoder with latent size `k`.
pub fn train_autoencoder(
    features: &ItemFeatureMatrix,
    k: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<AutoencoderOutcome> {
    let model = AutoencoderModel::new(features.dim(), &cfg.hidden, k, seed)?;
    fit_autoencoder(model, features, cfg, seed)
}

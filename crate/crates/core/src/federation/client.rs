//! Local training of one selected client.

use rand::seq::SliceRandom;

use super::GlobalModel;
use crate::backbones::{local_step, BackboneKind, UserState};
use crate::config::UploadMode;
use crate::datasets::sample_negatives;
use crate::numerics::{Purpose, RngStream, StreamKey};
use crate::privacy::{apply_ldp, clip_update, DpConfig};
use crate::Result;

/// A client's private interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    /// Training positives.
    pub train: Vec<u32>,
    /// Every known positive (sorted), excluded from negative sampling.
    pub positives: Vec<u32>,
}

/// Local optimization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub negatives: usize,
    pub upload: UploadMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// Flat upload in [`GlobalModel::upload_tensors`] order: trained
    /// parameters, or their change from the snapshot in delta mode.
    pub params: Vec<f32>,
    pub bytes: u64,
    /// Summed training loss.
    pub loss: f64,
    pub samples: usize,
    pub interactions: usize,
    /// No training data: nothing was trained or uploaded.
    pub empty: bool,
}

/// Trains a private copy of `snapshot` on `data`, updating `user` in place.
///
/// Negatives (`negatives` per positive) are redrawn every epoch. All
/// randomness comes from streams keyed by `(seed, client, round)`.
#[allow(clippy::too_many_arguments)]
pub fn client_round(
    snapshot: &GlobalModel,
    user: &mut UserState,
    client: usize,
    data: &ClientData,
    local: &LocalTraining,
    dp: &DpConfig,
    seed: u64,
    round: usize,
) -> Result<ClientUpdate> {
    let base = snapshot.flat_upload();
    let bytes = snapshot.upload_bytes();
    if data.train.is_empty() {
        return Ok(ClientUpdate {
            client,
            params: base,
            bytes: 0,
            loss: 0.0,
            samples: 0,
            interactions: 0,
            empty: true,
        });
    }
    let key = |p| StreamKey::new(p, client as u64, round as u64);
    let mut neg_rng = RngStream::new(seed, key(Purpose::NegativeSampling));
    let mut shuffle_rng = RngStream::new(seed, key(Purpose::Shuffle));
    let mut drop_rng = RngStream::new(seed, key(Purpose::Dropout));
    let uses_dropout = snapshot.backbone.kind != BackboneKind::FedMf;

    let mut local_model = snapshot.clone();
    let n = local_model.items.num_items();
    let available = n - data.positives.len();
    let per_positive = local.negatives.min(available);
    let (mut loss, mut samples) = (0.0, 0);
    for _ in 0..local.epochs {
        let mut batch: Vec<(u32, f32)> = Vec::with_capacity(data.train.len() * (1 + per_positive));
        for &p in &data.train {
            batch.push((p, 1.0));
            for q in sample_negatives(&data.positives, n, per_positive, &mut neg_rng)? {
                batch.push((q, 0.0));
            }
        }
        batch.shuffle(&mut shuffle_rng);
        for chunk in batch.chunks(local.batch_size.max(1)) {
            let rng = uses_dropout.then_some(&mut drop_rng);
            let GlobalModel { items, backbone, .. } = &mut local_model;
            loss += local_step(backbone, user, items, chunk, local.lr, rng)?;
            samples += chunk.len();
        }
    }

    let mut params = local_model.flat_upload();
    if let Some(bound) = dp.clip {
        clip_update(vec![&mut params], &[&base], bound)?;
    }
    if local.upload == UploadMode::Deltas {
        for (p, b) in params.iter_mut().zip(&base) {
            *p -= b;
        }
    }
    if dp.local_noise() {
        let mut rng = RngStream::new(seed, key(Purpose::LocalNoise));
        apply_ldp(vec![&mut params], dp.delta, &mut rng)?;
    }
    Ok(ClientUpdate {
        client,
        params,
        bytes,
        loss,
        samples,
        interactions: data.train.len(),
        empty: false,
    })
}

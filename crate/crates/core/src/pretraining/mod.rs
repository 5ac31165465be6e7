//! Server-side pre-training of the initial item table and semantic codes.

pub mod autoencoder;
pub mod rqvae;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{Activation, MlpModel, RngStream};
use crate::Result;

pub use autoencoder::{reconstruction_loss, train_autoencoder, AutoencoderModel, AutoencoderOutcome};
pub use rqvae::{assign_codes, read_codes, rq_encode, train_rqvae, write_codes, RqEncoding, RqVaeConfig, RqVaeModel, RqVaeOutcome};

/// Stream client ids reserved for server-side pre-training.
pub(crate) const AE_STREAM: u64 = u64::MAX - 1;
pub(crate) const RQ_STREAM: u64 = u64::MAX - 2;

/// Samples per parallel work unit. Fixed so that the reduction order, and
/// hence every bit of the result, does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Optimizer steps (mini-batches).
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Hidden widths between the feature layer and the latent layer.
    pub hidden: Vec<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            lr: 1e-3,
            batch_size: 256,
            hidden: vec![512, 256, 128],
        }
    }
}

/// `[input, hidden.., latent]` encoder and its mirror image.
pub(crate) fn encoder_decoder(
    input: usize,
    hidden: &[usize],
    latent: usize,
    rng: &mut RngStream,
) -> Result<(MlpModel, MlpModel)> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(latent);
    let encoder = MlpModel::new(&sizes, Activation::Relu, Activation::Identity, true, 0.0, rng)?;
    sizes.reverse();
    let decoder = MlpModel::new(&sizes, Activation::Relu, Activation::Identity, true, 0.0, rng)?;
    Ok((encoder, decoder))
}

/// Runs `f` over fixed-size chunks of `batch` in parallel and returns the
/// per-chunk results in chunk order.
pub(crate) fn map_chunks<T, F>(batch: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[usize]) -> Result<T> + Sync + Send,
{
    batch.par_chunks(CHUNK).map(f).collect()
}

/// Batch order for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut RngStream) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

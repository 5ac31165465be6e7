//! Round orchestration: client sampling, local training, aggregation and
//! the warm-up → fine-tuning schedule.

pub mod artifacts;
pub mod client;
pub mod simulation;

use rand::seq::index;
use serde::Serialize;

use crate::backbones::BackboneModel;
use crate::config::Aggregation;
use crate::embedding::ItemModel;
use crate::numerics::{Purpose, RngStream, StreamKey};
use crate::{Error, Result};

pub use client::{client_round, ClientData, ClientUpdate, LocalTraining};
pub use simulation::{prepare_data, pretrain, run_experiment, ExperimentOutcome, PreparedData, Pretrained, Simulation};

/// Stream client id used for server-side draws.
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Full table trained and uploaded.
    WarmUp,
    /// Base table frozen, adapter trained and uploaded.
    Peft,
    /// Full-embedding baseline after the warm-up rounds.
    Full,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::WarmUp => "warmup",
            Phase::Peft => "peft",
            Phase::Full => "full",
        }
    }
}

/// Server-held trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub items: ItemModel,
    pub backbone: BackboneModel,
    /// Completed rounds.
    pub round: usize,
    pub phase: Phase,
}

impl GlobalModel {
    /// Everything a client uploads: item-side trainable tensors then `W_g`.
    pub fn upload_tensors(&self) -> Vec<&[f32]> {
        let mut t = self.items.trainable_tensors();
        t.extend(self.backbone.shared_tensors());
        t
    }

    pub fn upload_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut t = self.items.trainable_tensors_mut();
        t.extend(self.backbone.shared_tensors_mut());
        t
    }

    pub fn upload_len(&self) -> usize {
        self.items.trainable_len() + self.backbone.shared_len()
    }

    /// Bytes uploaded by one client per round.
    pub fn upload_bytes(&self) -> u64 {
        self.upload_len() as u64 * 4
    }

    pub fn flat_upload(&self) -> Vec<f32> {
        self.upload_tensors().concat()
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.upload_len() {
            return Err(Error::dim(format!("{} values for an upload of {}", flat.len(), self.upload_len())));
        }
        let mut pos = 0;
        for t in self.upload_tensors_mut() {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.items.is_finite() && self.backbone.shared.as_ref().is_none_or(|s| s.is_finite())
    }
}

/// `⌈S·m⌉` distinct clients, uniformly without replacement, sorted.
pub fn select_clients(m: usize, ratio: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("sampling ratio {ratio} outside (0, 1]")));
    }
    let count = ((ratio * m as f64) - 1e-9).ceil().max(0.0) as usize;
    let count = count.min(m);
    let mut rng = RngStream::new(seed, StreamKey::new(Purpose::ClientSelection, SERVER, round as u64));
    let mut ids = index::sample(&mut rng, m, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Running weighted mean accumulated in `f64`. The result depends on the
/// order of [`Aggregator::add`] calls, so callers feed clients sorted by id.
#[derive(Debug, Clone)]
pub struct Aggregator {
    acc: Vec<f64>,
    weight: f64,
    count: usize,
}

impl Aggregator {
    pub fn new(len: usize) -> Self {
        Self {
            acc: vec![0.0; len],
            weight: 0.0,
            count: 0,
        }
    }

    pub fn add(&mut self, params: &[f32], weight: f64) -> Result<()> {
        if params.len() != self.acc.len() {
            return Err(Error::dim(format!("update of {} values, expected {}", params.len(), self.acc.len())));
        }
        for (a, &p) in self.acc.iter_mut().zip(params) {
            *a += weight * p as f64;
        }
        self.weight += weight;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<Vec<f32>> {
        if self.count == 0 || self.weight <= 0.0 {
            return Err(Error::invalid("aggregation over an empty update set"));
        }
        Ok(self.acc.iter().map(|&a| (a / self.weight) as f32).collect())
    }
}

pub(crate) fn weight_of(update: &ClientUpdate, mode: Aggregation) -> f64 {
    match mode {
        Aggregation::Uniform => 1.0,
        Aggregation::Interactions => update.interactions as f64,
    }
}

/// Weighted mean of the uploaded parameters, reduced in client-id order.
/// Flagged (empty) updates are skipped.
pub fn aggregate(updates: &[ClientUpdate], mode: Aggregation) -> Result<Vec<f32>> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().filter(|u| !u.empty).collect();
    sorted.sort_by_key(|u| u.client);
    let len = sorted.first().map_or(0, |u| u.params.len());
    let mut agg = Aggregator::new(len);
    for u in sorted {
        agg.add(&u.params, weight_of(u, mode))?;
    }
    agg.finish()
}

/// Per-round accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub phase: Phase,
    pub clients: Vec<usize>,
    /// Bytes uploaded by each participating client.
    pub bytes_per_client: u64,
    /// Sum over participating clients.
    pub aggregate_bytes: u64,
    /// Mean per-sample training loss.
    pub loss: f64,
    pub wall_ms: u128,
    /// SHA-256 of the base item table after the round.
    pub base_digest: String,
}

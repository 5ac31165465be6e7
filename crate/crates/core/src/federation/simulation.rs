//! End-to-end experiment driver.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::client::{client_round, ClientData, ClientUpdate, LocalTraining};
use super::{select_clients, weight_of, Aggregator, GlobalModel, Phase, RoundReport, SERVER};
use crate::backbones::{BackboneModel, UserState};
use crate::config::{DataSource, ExperimentConfig, UploadMode};
use crate::datasets::{
    build_item_features, leave_one_out_split, load_interactions, synthetic_log, EvalSplit, FeatureSource, InteractionLog,
    ItemFeatureMatrix,
};
use crate::embedding::checkpoint::Checkpoint;
use crate::embedding::{Adapter, ItemModel, Strategy};
use crate::metrics::{evaluate, top_k, MetricTable, Scorer};
use crate::numerics::{DenseMatrix, Mode, Purpose, RngStream, StreamKey};
use crate::pretraining::{read_codes, train_autoencoder, train_rqvae};
use crate::privacy::apply_cdp;
use crate::{Error, Result};

/// Clients trained concurrently before their updates are folded into the
/// aggregate. Fixed so the reduction order never depends on thread count.
const CLIENT_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub log: InteractionLog,
    pub split: EvalSplit,
}

/// Loads or synthesizes the interaction log and splits it.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let log = match cfg.dataset.source {
        DataSource::Synthetic => synthetic_log(&cfg.dataset.synthetic)?,
        DataSource::File => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| Error::config("dataset.path", "required when dataset.source = \"file\""))?;
            load_interactions(path, cfg.dataset.format)?
        }
    };
    let split = leave_one_out_split(&log, cfg.eval.candidates(), cfg.seed)?;
    Ok(PreparedData { log, split })
}

pub fn item_features(cfg: &ExperimentConfig, log: &InteractionLog) -> Result<ItemFeatureMatrix> {
    let source = match cfg.features.source {
        DataSource::Synthetic => FeatureSource::Synthetic {
            dim: cfg.features.dim,
            seed: cfg.seed,
        },
        DataSource::File => FeatureSource::File(
            cfg.features
                .path
                .clone()
                .ok_or_else(|| Error::config("features.path", "required when features.source = \"file\""))?,
        ),
    };
    build_item_features(log, &source)
}

/// Server-side pre-training output.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub table: DenseMatrix,
    pub autoencoder_loss: Vec<f64>,
    pub codes: Option<Vec<Vec<u32>>>,
    pub rqvae_loss: Vec<f64>,
}

/// Produces the initial item table and, when needed (or `force_codes`),
/// semantic codes. Configured checkpoint/codes files are reused instead of
/// training.
pub fn pretrain_with(cfg: &ExperimentConfig, log: &InteractionLog, force_codes: bool) -> Result<Pretrained> {
    let k = cfg.model.k;
    let mut features = None;
    let mut get_features = || -> Result<ItemFeatureMatrix> {
        if features.is_none() {
            features = Some(item_features(cfg, log)?);
        }
        Ok(features.clone().expect("just set"))
    };
    let (table, autoencoder_loss) = match &cfg.pretrain.checkpoint {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let t = ck.model.base.table().clone();
            if t.shape() != (log.num_items, k) {
                return Err(Error::config(
                    "pretrain.checkpoint",
                    format!("table is {:?}, dataset needs ({}, {k})", t.shape(), log.num_items),
                ));
            }
            (t, Vec::new())
        }
        None => {
            let out = train_autoencoder(&get_features()?, k, &cfg.pretrain.train, cfg.seed)?;
            (out.table.table().clone(), out.loss_history)
        }
    };
    let wants_codes = force_codes || matches!(cfg.strategy.strategy(), Strategy::RqVae { .. });
    let (codes, rqvae_loss) = match (&cfg.pretrain.codes, wants_codes) {
        (_, false) => (None, Vec::new()),
        (Some(path), true) => (Some(read_codes(path, log)?), Vec::new()),
        (None, true) => {
            let out = train_rqvae(&get_features()?, k, &cfg.rqvae(), &cfg.pretrain.train, cfg.seed)?;
            (Some(out.codes), out.loss_history)
        }
    };
    Ok(Pretrained {
        table,
        autoencoder_loss,
        codes,
        rqvae_loss,
    })
}

pub fn pretrain(cfg: &ExperimentConfig, log: &InteractionLog) -> Result<Pretrained> {
    pretrain_with(cfg, log, false)
}

/// Server, clients and evaluation data of one run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: ExperimentConfig,
    pub split: EvalSplit,
    pub clients: Vec<ClientData>,
    pub users: Vec<UserState>,
    pub model: GlobalModel,
    pub codes: Option<Vec<Vec<u32>>>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig, split: EvalSplit, base: DenseMatrix, codes: Option<Vec<Vec<u32>>>) -> Result<Self> {
        cfg.validate()?;
        if base.shape() != (split.num_items, cfg.model.k) {
            return Err(Error::dim(format!(
                "base table {:?} for {} items with k = {}",
                base.shape(),
                split.num_items,
                cfg.model.k
            )));
        }
        let backbone = BackboneModel::new(&cfg.model.backbone, cfg.model.k, cfg.seed)?;
        let users = (0..split.num_users())
            .map(|u| backbone.init_user(&cfg.model.backbone, u, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let model = GlobalModel {
            items: ItemModel::full(base),
            backbone,
            round: 0,
            phase: Phase::WarmUp,
        };
        Self::from_parts(cfg, split, model, users, codes)
    }

    pub fn from_parts(
        cfg: ExperimentConfig,
        split: EvalSplit,
        model: GlobalModel,
        users: Vec<UserState>,
        codes: Option<Vec<Vec<u32>>>,
    ) -> Result<Self> {
        if users.len() != split.num_users() {
            return Err(Error::dim(format!("{} user states for {} users", users.len(), split.num_users())));
        }
        let clients = split
            .train
            .iter()
            .zip(&split.positives)
            .map(|(t, p)| ClientData {
                train: t.clone(),
                positives: p.clone(),
            })
            .collect();
        Ok(Self {
            cfg,
            split,
            clients,
            users,
            model,
            codes,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.cfg.strategy.strategy()
    }

    /// Freezes the base table and attaches a freshly initialized adapter.
    pub fn begin_peft(&mut self) -> Result<()> {
        let mut rng = RngStream::new(self.cfg.seed, StreamKey::new(Purpose::AdapterInit, SERVER, 0));
        let adapter = Adapter::initialize(
            &self.strategy(),
            self.model.items.base.table(),
            self.codes.as_deref(),
            self.cfg.strategy.init,
            &mut rng,
        )?;
        self.model.items.freeze_and_attach(adapter)?;
        self.model.phase = Phase::Peft;
        Ok(())
    }

    fn local(&self) -> LocalTraining {
        let f = &self.cfg.federation;
        LocalTraining {
            epochs: f.local_epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            negatives: f.train_negatives,
            upload: f.upload,
        }
    }

    /// Advances the phase schedule for the round about to run.
    fn enter_round(&mut self) -> Result<()> {
        if self.model.phase == Phase::WarmUp && self.model.round >= self.cfg.federation.warmup_rounds {
            if self.strategy().is_peft() {
                self.begin_peft()?;
            } else {
                self.model.phase = Phase::Full;
            }
        }
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        self.enter_round()?;
        let start = Instant::now();
        let t = self.model.round;
        let seed = self.cfg.seed;
        let local = self.local();
        let selected = select_clients(self.users.len(), self.cfg.federation.sample_ratio, seed, t)?;
        let Simulation {
            cfg,
            clients,
            users,
            model,
            ..
        } = self;
        let base = model.flat_upload();
        let mut agg = Aggregator::new(base.len());
        let (mut loss, mut samples, mut bytes) = (0.0, 0usize, 0u64);
        for chunk in selected.chunks(CLIENT_CHUNK) {
            let snapshot = &*model;
            let results: Vec<(ClientUpdate, UserState)> = chunk
                .par_iter()
                .map(|&c| {
                    let mut state = users[c].clone();
                    let u = client_round(snapshot, &mut state, c, &clients[c], &local, &cfg.dp, seed, t)?;
                    Ok((u, state))
                })
                .collect::<Result<_>>()?;
            for (u, state) in results {
                users[u.client] = state;
                if !u.empty {
                    agg.add(&u.params, weight_of(&u, cfg.federation.aggregation))?;
                    loss += u.loss;
                    samples += u.samples;
                    bytes += u.bytes;
                }
            }
        }
        let participants = agg.count();
        if participants > 0 {
            let mut next = agg.finish()?;
            if cfg.federation.upload == UploadMode::Deltas {
                for (p, b) in next.iter_mut().zip(&base) {
                    *p += b;
                }
            }
            if cfg.dp.central_noise() {
                let mut rng = RngStream::new(seed, StreamKey::new(Purpose::CentralNoise, SERVER, t as u64));
                apply_cdp(vec![&mut next], cfg.dp.delta, &mut rng)?;
            }
            model.load_flat(&next)?;
        }
        if !model.is_finite() {
            return Err(Error::NonFiniteRound { round: t });
        }
        model.round += 1;
        Ok(RoundReport {
            round: t,
            phase: model.phase,
            clients: selected,
            bytes_per_client: model.upload_bytes(),
            aggregate_bytes: bytes,
            loss: if samples > 0 { loss / samples as f64 } else { 0.0 },
            wall_ms: start.elapsed().as_millis(),
            base_digest: model.items.base.digest(),
        })
    }

    /// Scores with the composed item table and every user's current state.
    pub fn scorer(&self) -> Result<impl Scorer + '_> {
        let table = self.model.items.materialize()?;
        let backbone = &self.model.backbone;
        let users = &self.users;
        Ok(move |u: usize, items: &[u32]| -> Result<Vec<f32>> {
            items
                .iter()
                .map(|&i| backbone.score(&users[u], table.row(i as usize), Mode::Eval, None).map(|(s, _)| s))
                .collect()
        })
    }

    pub fn evaluate(&self) -> Result<MetricTable> {
        evaluate(&self.scorer()?, &self.split, &self.cfg.eval.ks)
    }

    /// Top-`k` unseen items of every test user, in user order.
    pub fn top_k_lists(&self, k: usize) -> Result<Vec<(usize, Vec<u32>)>> {
        let scorer = self.scorer()?;
        let users: Vec<usize> = self.split.test_users().collect();
        users
            .par_iter()
            .map(|&u| {
                let mut seen = self.split.train[u].clone();
                seen.sort_unstable();
                top_k(&scorer, u, self.split.num_items, k, &seen).map(|l| (u, l))
            })
            .collect()
    }
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Completed rounds at evaluation time.
    pub round: usize,
    pub phase: Phase,
    pub table: MetricTable,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub simulation: Simulation,
    pub pretrained: Pretrained,
    pub reports: Vec<RoundReport>,
    pub evals: Vec<EvalRecord>,
    /// Frozen adapter bytes (codes, hash parameters) when fine-tuning began.
    pub frozen_at_start: Option<Vec<u8>>,
}

/// Runs `cfg` with its configured worker count, writing artifacts to
/// `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, out_dir))
}

fn run_in_pool(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let data = prepare_data(cfg)?;
    let pretrained = pretrain(cfg, &data.log)?;
    let mut sim = Simulation::new(cfg.clone(), data.split, pretrained.table.clone(), pretrained.codes.clone())?;
    let mut evals = vec![EvalRecord {
        round: 0,
        phase: sim.model.phase,
        table: sim.evaluate()?,
    }];
    log::info!("round 0: {}", evals[0].table.csv_row());
    let rounds = cfg.federation.rounds;
    let mut reports = Vec::with_capacity(rounds);
    let mut frozen_at_start = None;
    for t in 0..rounds {
        let report = sim.run_round()?;
        if frozen_at_start.is_none() && sim.model.phase == Phase::Peft {
            frozen_at_start = Some(sim.model.items.adapter.frozen_bytes());
        }
        let done = t + 1;
        let every = cfg.eval.every;
        if (every > 0 && done % every == 0) || done == rounds {
            let table = sim.evaluate()?;
            log::info!("round {done} ({}): {}", sim.model.phase.name(), table.csv_row());
            evals.push(EvalRecord {
                round: done,
                phase: sim.model.phase,
                table,
            });
        }
        reports.push(report);
        if let Some(dir) = out_dir {
            let n = cfg.federation.checkpoint_every;
            if n > 0 && done % n == 0 && done != rounds {
                super::artifacts::write_checkpoint(dir, &format!("-r{done}"), &sim)?;
            }
        }
    }
    let outcome = ExperimentOutcome {
        simulation: sim,
        pretrained,
        reports,
        evals,
        frozen_at_start,
    };
    if let Some(dir) = out_dir {
        super::artifacts::write_run(dir, &outcome, &data.log)?;
    }
    Ok(outcome)
}

//! Run artifacts: CSV reports, checkpoints and the user-state file.
//!
//! Every artifact carries the config hash and seed. `metrics.csv` holds no
//! timing information, so reruns of one config reproduce it byte for byte.
//!
//! User-state file layout (little-endian):
//!
//! ```text
//! magic        4 bytes "FPEU"
//! version      u16     1
//! backbone     u8      0 fedmf, 1 fedncf, 2 pfedrec
//! reserved     u8
//! config_hash  u64
//! seed         u64
//! users, k     u32, u32
//! shared_len   u32     values in W_g
//! user_len     u32     values per user state
//! W_g          shared_len × f32
//! states       users × user_len × f32
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::simulation::{EvalRecord, ExperimentOutcome, Simulation};
use super::{GlobalModel, Phase};
use crate::backbones::{BackboneKind, BackboneModel, UserState};
use crate::config::ExperimentConfig;
use crate::datasets::{EvalSplit, InteractionLog};
use crate::embedding::checkpoint::Checkpoint;
use crate::embedding::{decode_into, encode_tensors, Adapter};
use crate::pretraining::write_codes;
use crate::{Error, Result};

pub const USERS_MAGIC: &[u8; 4] = b"FPEU";

pub fn provenance_line(cfg: &ExperimentConfig) -> String {
    format!(
        "# fedpeft config={} seed={} strategy={} backbone={}",
        cfg.hash_hex(),
        cfg.seed,
        cfg.strategy.strategy().label(),
        cfg.model.backbone.kind.name()
    )
}

/// Evaluation history: `round,phase,n@10,h@10,...` as percentages.
pub fn metrics_csv(cfg: &ExperimentConfig, evals: &[EvalRecord]) -> String {
    let mut out = provenance_line(cfg);
    out.push('\n');
    if let Some(first) = evals.first() {
        let _ = writeln!(out, "round,phase,{}", first.table.csv_header());
    }
    for e in evals {
        let _ = writeln!(out, "{},{},{}", e.round, e.phase.name(), e.table.csv_row());
    }
    out
}

/// One line per round: `round,phase,clients,bytes_per_client,loss,hr10,ndcg10,base_digest,wall_ms`.
/// Metric columns are empty on rounds without an evaluation.
pub fn rounds_csv(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> String {
    let mut out = provenance_line(cfg);
    out.push('\n');
    out.push_str("round,phase,clients,bytes_per_client,loss,hr10,ndcg10,base_digest,wall_ms\n");
    for r in &outcome.reports {
        let eval = outcome.evals.iter().find(|e| e.round == r.round + 1);
        let (hr, ndcg) = match eval.map(|e| (e.table.hr(10), e.table.ndcg(10))) {
            Some((Some(h), Some(n))) => (format!("{:.2}", h * 100.0), format!("{:.2}", n * 100.0)),
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{},{},{}",
            r.round,
            r.phase.name(),
            r.clients.len(),
            r.bytes_per_client,
            r.loss,
            hr,
            ndcg,
            r.base_digest,
            r.wall_ms
        );
    }
    out
}

fn kind_tag(kind: BackboneKind) -> u8 {
    match kind {
        BackboneKind::FedMf => 0,
        BackboneKind::FedNcf => 1,
        BackboneKind::PfedRec => 2,
    }
}

pub fn encode_users(backbone: &BackboneModel, users: &[UserState], config_hash: u64, seed: u64) -> Vec<u8> {
    let shared = backbone.shared_tensors();
    let shared_len: usize = shared.iter().map(|t| t.len()).sum();
    let user_len: usize = users.first().map_or(0, |u| u.tensors().iter().map(|t| t.len()).sum());
    let mut out = Vec::new();
    out.extend_from_slice(USERS_MAGIC);
    out.extend_from_slice(&1u16.to_le_bytes());
    out.push(kind_tag(backbone.kind));
    out.push(0);
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for v in [users.len(), backbone.dim(), shared_len, user_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(encode_tensors(&shared));
    for u in users {
        out.extend(encode_tensors(&u.tensors()));
    }
    out
}

/// Fills `backbone` and `users` (already shaped by the config) from bytes.
pub fn decode_users(bytes: &[u8], backbone: &mut BackboneModel, users: &mut [UserState]) -> Result<(u64, u64)> {
    const HEADER: usize = 4 + 2 + 2 + 8 + 8 + 16;
    if bytes.len() < HEADER || &bytes[..4] != USERS_MAGIC {
        return Err(Error::Checkpoint("not a user-state file".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u16_at(4) != 1 {
        return Err(Error::Checkpoint(format!("unsupported user-state version {}", u16_at(4))));
    }
    if bytes[6] != kind_tag(backbone.kind) {
        return Err(Error::Checkpoint("user-state file was written for another backbone".into()));
    }
    let (hash, seed) = (u64_at(8), u64_at(16));
    let (m, k, shared_len, user_len) = (u32_at(24), u32_at(28), u32_at(32), u32_at(36));
    let expect_user: usize = users.first().map_or(0, |u| u.tensors().iter().map(|t| t.len()).sum());
    if m != users.len() || k != backbone.dim() || shared_len != backbone.shared_len() || user_len != expect_user {
        return Err(Error::Checkpoint(format!(
            "user-state file holds {m} users (k = {k}, W_g {shared_len}, state {user_len}); config expects {} users (k = {}, W_g {}, state {expect_user})",
            users.len(),
            backbone.dim(),
            backbone.shared_len()
        )));
    }
    let body = &bytes[HEADER..];
    if body.len() != 4 * (shared_len + m * user_len) {
        return Err(Error::Checkpoint("user-state payload has the wrong length".into()));
    }
    let (shared, rest) = body.split_at(4 * shared_len);
    decode_into(shared, backbone.shared_tensors_mut())?;
    for (u, chunk) in users.iter_mut().zip(rest.chunks(4 * user_len.max(1))) {
        decode_into(chunk, u.tensors_mut())?;
    }
    Ok((hash, seed))
}

/// Writes `model{suffix}.fpeb` and `users{suffix}.fpeu`.
pub fn write_checkpoint(dir: &Path, suffix: &str, sim: &Simulation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = sim.cfg.hash();
    let ck = Checkpoint {
        config_hash: hash,
        seed: sim.cfg.seed,
        model: sim.model.items.clone(),
    };
    ck.write(&dir.join(format!("model{suffix}.fpeb")))?;
    let users = encode_users(&sim.model.backbone, &sim.users, hash, sim.cfg.seed);
    let path = dir.join(format!("users{suffix}.fpeu"));
    std::fs::write(&path, users).map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pre-training artifacts: `pretrained.fpeb`, `pretrain_loss.csv` and, if
/// present, `codes.tsv`.
pub fn write_pretrain(
    dir: &Path,
    cfg: &ExperimentConfig,
    pre: &super::Pretrained,
    log: &InteractionLog,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck = Checkpoint {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        model: crate::embedding::ItemModel::full(pre.table.clone()),
    };
    ck.write(&dir.join("pretrained.fpeb"))?;
    if let Some(codes) = &pre.codes {
        write_codes(&dir.join("codes.tsv"), codes, &log.item_ids, cfg.hash(), cfg.seed)?;
    }
    let mut csv = provenance_line(cfg);
    csv.push_str("\nstage,step,loss\n");
    for (i, l) in pre.autoencoder_loss.iter().enumerate() {
        let _ = writeln!(csv, "autoencoder_epoch,{i},{l:.6}");
    }
    for (i, l) in pre.rqvae_loss.iter().enumerate() {
        let _ = writeln!(csv, "rqvae_step,{i},{l:.6}");
    }
    write_text(&dir.join("pretrain_loss.csv"), &csv)
}

/// Everything a finished run leaves behind.
pub fn write_run(dir: &Path, outcome: &ExperimentOutcome, log: &InteractionLog) -> Result<()> {
    let cfg = &outcome.simulation.cfg;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(
        &dir.join("config.toml"),
        &format!("{}\n{}", provenance_line(cfg), cfg.to_toml_string()),
    )?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(cfg, &outcome.evals))?;
    write_text(&dir.join("rounds.csv"), &rounds_csv(cfg, outcome))?;
    write_checkpoint(dir, "", &outcome.simulation)?;
    write_pretrain(dir, cfg, &outcome.pretrained, log)
}

/// Rebuilds a simulation from `model.fpeb` and `users.fpeu`.
pub fn load_simulation(cfg: &ExperimentConfig, split: EvalSplit, model_path: &Path, users_path: &Path) -> Result<Simulation> {
    let ck = Checkpoint::read(model_path)?;
    if ck.model.num_items() != split.num_items || ck.model.dim() != cfg.model.k {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {} items × {}, dataset has {} items and k = {}",
            ck.model.num_items(),
            ck.model.dim(),
            split.num_items,
            cfg.model.k
        )));
    }
    let mut backbone = BackboneModel::new(&cfg.model.backbone, cfg.model.k, cfg.seed)?;
    let mut users = (0..split.num_users())
        .map(|u| backbone.init_user(&cfg.model.backbone, u, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let bytes = std::fs::read(users_path).map_err(|e| Error::io(users_path, e))?;
    decode_users(&bytes, &mut backbone, &mut users)?;
    let phase = match (&ck.model.adapter, ck.model.base.is_frozen()) {
        (Adapter::None, false) => Phase::WarmUp,
        (Adapter::None, true) => Phase::Full,
        _ => Phase::Peft,
    };
    let model = GlobalModel {
        items: ck.model,
        backbone,
        round: 0,
        phase,
    };
    Simulation::from_parts(cfg.clone(), split, model, users, None)
}

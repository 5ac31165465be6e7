//! Experiment configuration: TOML schema, overrides, validation, hashing.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Unknown keys are rejected. A full example:
//!
//! ```toml
//! seed = 2024
//! output_dir = "runs/demo"
//! workers = 0            # 0 = one per core
//! unsafe = false         # allow values outside the tuned grids
//!
//! [dataset]
//! source = "synthetic"   # or "file"
//! path = "ratings.dat"
//! format = "ml1m"        # or "amazon_csv"
//! [dataset.synthetic]
//! users = 1826
//! items = 802
//!
//! [features]
//! source = "synthetic"   # or "file"
//! dim = 768
//!
//! [pretrain]
//! steps = 10000
//! lr = 0.001
//! batch_size = 256
//! hidden = [512, 256, 128]
//!
//! [model]
//! k = 32
//! kind = "fedmf"         # fedmf | fedncf | pfedrec
//!
//! [strategy]
//! kind = "lora"          # full | lora | hash | rqvae
//! rank = 4
//!
//! [federation]
//! rounds = 1000
//! warmup_rounds = 10
//! sample_ratio = 0.1
//!
//! [dp]
//! mode = "none"          # none | ldp | cdp
//! delta = 0.0
//!
//! [eval]
//! ks = [10, 20]
//! negatives = 99         # sampled candidates; 0 = rank against all items
//! every = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::BackboneConfig;
use crate::datasets::{CandidateMode, LogFormat, SyntheticConfig};
use crate::embedding::{AdapterInit, HashPooling, Strategy};
use crate::pretraining::{PretrainConfig, RqVaeConfig};
use crate::privacy::DpConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub format: LogFormat,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            format: LogFormat::Ml1m,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Width `k_p` of synthetic features.
    pub dim: usize,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            dim: 768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(flatten)]
    pub train: PretrainConfig,
    /// Reuse an item-table checkpoint instead of training the autoencoder.
    pub checkpoint: Option<PathBuf>,
    /// Reuse a semantic codes file instead of training the RQ-VAE.
    pub codes: Option<PathBuf>,
    pub beta: Option<f32>,
    pub kmeans_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub k: usize,
    #[serde(flatten)]
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 32,
            backbone: BackboneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Full,
    #[default]
    Lora,
    Hash,
    Rqvae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// LoRA rank `k_L`.
    pub rank: usize,
    /// Hash table rows `d_H`.
    pub table_size: usize,
    /// Number of hash functions `h`.
    pub functions: usize,
    /// Hash modulus `p`.
    pub prime: u64,
    pub pooling: HashPooling,
    /// SENet expansion ratio `r_h`.
    pub expansion: usize,
    /// RQ-VAE levels `l`.
    pub levels: usize,
    /// RQ-VAE codebook rows `d_R`.
    pub codebook_size: usize,
    pub init: AdapterInit,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Lora,
            rank: 4,
            table_size: 512,
            functions: 2,
            prime: 4096,
            pooling: HashPooling::Mean,
            expansion: 16,
            levels: 3,
            codebook_size: 256,
            init: AdapterInit::Zero,
        }
    }
}

impl StrategyConfig {
    pub fn strategy(&self) -> Strategy {
        match self.kind {
            StrategyKind::Full => Strategy::Full,
            StrategyKind::Lora => Strategy::Lora { rank: self.rank },
            StrategyKind::Hash => Strategy::Hash {
                table_size: self.table_size,
                functions: self.functions,
                prime: self.prime,
                pooling: self.pooling,
                expansion: self.expansion,
            },
            StrategyKind::Rqvae => Strategy::RqVae {
                levels: self.levels,
                codebook_size: self.codebook_size,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every selected client counts equally.
    #[default]
    Uniform,
    /// Clients weighted by their number of training interactions.
    Interactions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UploadMode {
    /// Clients upload their locally trained parameters.
    #[default]
    Parameters,
    /// Clients upload the change relative to the snapshot; the server adds
    /// the averaged change.
    Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub warmup_rounds: usize,
    /// Fraction `S` of clients selected per round.
    pub sample_ratio: f64,
    pub local_epochs: usize,
    pub lr: f32,
    /// Local mini-batch size (samples, positives and negatives together).
    pub batch_size: usize,
    /// Sampled negatives per training positive, redrawn every epoch.
    pub train_negatives: usize,
    pub aggregation: Aggregation,
    pub upload: UploadMode,
    /// Write a checkpoint every this many rounds (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 1000,
            warmup_rounds: 10,
            sample_ratio: 0.1,
            local_epochs: 2,
            lr: 0.01,
            batch_size: 64,
            train_negatives: 4,
            aggregation: Aggregation::Uniform,
            upload: UploadMode::Parameters,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Sampled negatives per test user; 0 ranks against every item.
    pub negatives: usize,
    /// Evaluate every this many rounds (0 = only at start and end).
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            negatives: 99,
            every: 10,
        }
    }
}

impl EvalConfig {
    pub fn candidates(&self) -> CandidateMode {
        if self.negatives == 0 {
            CandidateMode::Full
        } else {
            CandidateMode::Sampled(self.negatives)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for client training (0 = one per core). Does not
    /// affect results.
    pub workers: usize,
    #[serde(rename = "unsafe")]
    pub allow_unsafe: bool,
    pub dataset: DatasetConfig,
    pub features: FeaturesConfig,
    pub pretrain: PretrainSection,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub federation: FederationConfig,
    pub dp: DpConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            output_dir: PathBuf::from("runs/default"),
            workers: 0,
            allow_unsafe: false,
            dataset: DatasetConfig::default(),
            features: FeaturesConfig::default(),
            pretrain: PretrainSection::default(),
            model: ModelConfig::default(),
            strategy: StrategyConfig::default(),
            federation: FederationConfig::default(),
            dp: DpConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDPEFT_OUTPUT_DIR";

fn toml_error(e: toml::de::Error) -> Error {
    // serde reports unknown fields as "unknown field `x`, expected ..."
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into());
    Error::config(key, msg)
}

fn check_grid<T: PartialEq + std::fmt::Display>(key: &str, value: T, grid: &[T]) -> Result<()> {
    if grid.contains(&value) {
        return Ok(());
    }
    let allowed: Vec<String> = grid.iter().map(T::to_string).collect();
    Err(Error::config(
        key,
        format!("{value} outside {{{}}}; pass --unsafe to allow", allowed.join(", ")),
    ))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies `section.key=value`. The value is read as a TOML literal and
    /// falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("config is always representable");
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(key, format!("`{}` is not a section", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value);
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| {
            let mut err = toml_error(e);
            if let Error::Config { key: k, .. } = &mut err {
                *k = key.to_string();
            }
            err
        })?;
        *self = updated;
        Ok(())
    }

    /// Checks ranges and, unless `unsafe` is set, the tuned hyperparameter
    /// grids. Errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let s = &self.strategy;
        let f = &self.federation;
        if self.model.k == 0 {
            return Err(Error::config("model.k", "must be positive"));
        }
        if !(f.sample_ratio > 0.0 && f.sample_ratio <= 1.0) {
            return Err(Error::config("federation.sample_ratio", format!("{} outside (0, 1]", f.sample_ratio)));
        }
        if f.lr <= 0.0 || !f.lr.is_finite() {
            return Err(Error::config("federation.lr", "must be positive"));
        }
        if f.batch_size == 0 {
            return Err(Error::config("federation.batch_size", "must be positive"));
        }
        if f.warmup_rounds > f.rounds && s.kind != StrategyKind::Full {
            log::warn!("warm-up covers the whole run; the adapter is never trained");
        }
        if !(0.0..=1.0).contains(&self.model.backbone.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1]"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks", "needs at least one positive cutoff"));
        }
        if self.pretrain.train.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if self.pretrain.train.lr <= 0.0 {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if self.dataset.source == DataSource::File && self.dataset.path.is_none() {
            return Err(Error::config("dataset.path", "required when dataset.source = \"file\""));
        }
        if self.features.source == DataSource::File && self.features.path.is_none() {
            return Err(Error::config("features.path", "required when features.source = \"file\""));
        }
        if self.features.dim == 0 {
            return Err(Error::config("features.dim", "must be positive"));
        }
        self.dp.validate()?;
        match s.kind {
            StrategyKind::Full => {}
            StrategyKind::Lora => {
                if s.rank == 0 {
                    return Err(Error::config("strategy.rank", "must be positive"));
                }
                if !self.allow_unsafe {
                    check_grid("strategy.rank", s.rank, &[2, 3, 4, 5, 6])?;
                }
            }
            StrategyKind::Hash => {
                if s.table_size == 0 || s.functions == 0 {
                    return Err(Error::config("strategy.table_size", "table size and function count must be positive"));
                }
                if s.prime < s.table_size as u64 {
                    return Err(Error::config("strategy.prime", "must be at least strategy.table_size"));
                }
                if s.pooling == HashPooling::Senet && s.expansion == 0 {
                    return Err(Error::config("strategy.expansion", "must be positive"));
                }
                if !self.allow_unsafe {
                    check_grid("strategy.table_size", s.table_size, &[256, 512, 1024])?;
                    check_grid("strategy.functions", s.functions, &[1, 2, 3, 4])?;
                }
            }
            StrategyKind::Rqvae => {
                if s.levels == 0 || s.codebook_size == 0 {
                    return Err(Error::config("strategy.levels", "levels and codebook size must be positive"));
                }
                if !self.allow_unsafe {
                    check_grid("strategy.levels", s.levels, &[2, 3, 4, 5, 6])?;
                    check_grid("strategy.codebook_size", s.codebook_size, &[32, 64, 128, 256, 512])?;
                }
            }
        }
        Ok(())
    }

    pub fn rqvae(&self) -> RqVaeConfig {
        let d = RqVaeConfig::default();
        RqVaeConfig {
            levels: self.strategy.levels,
            codebook_size: self.strategy.codebook_size,
            beta: self.pretrain.beta.unwrap_or(d.beta),
            kmeans_iters: self.pretrain.kmeans_iters.unwrap_or(d.kmeans_iters),
        }
    }

    /// SHA-256 over the canonical JSON form, ignoring settings that cannot
    /// change results (`workers`, `output_dir`), truncated to 64 bits.
    pub fn hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.workers = 0;
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config is always serializable");
        let digest = Sha256::digest(&json);
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = ExperimentConfig::default();
        assert_eq!(c.federation.sample_ratio, 0.1);
        assert_eq!(c.federation.local_epochs, 2);
        assert_eq!(c.federation.rounds, 1000);
        assert_eq!(c.model.k, 32);
        assert_eq!(c.strategy.prime, 4096);
        assert_eq!(c.strategy.expansion, 16);
        assert_eq!(c.rqvae().beta, 0.25);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let p = ExperimentConfig::from_toml_str("seed = 5\n[strategy]\nkind = \"hash\"\n").unwrap();
        assert_eq!(p.seed, 5);
        assert_eq!(p.strategy.kind, StrategyKind::Hash);
        assert_eq!(p.federation, FederationConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[strategy]\nrnak = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "rnak"), "{err}");
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.set("strategy.rank=6").unwrap();
        c.set("strategy.kind=rqvae").unwrap();
        c.set("dp.mode = \"ldp\"").unwrap();
        c.set("eval.ks=[5,10]").unwrap();
        assert_eq!(c.strategy.rank, 6);
        assert_eq!(c.strategy.kind, StrategyKind::Rqvae);
        assert_eq!(c.dp.mode, crate::privacy::DpMode::Ldp);
        assert_eq!(c.eval.ks, vec![5, 10]);
        let err = c.set("federation.bogus=1").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "federation.bogus"));
        assert!(c.set("strategy.rank=\"x\"").is_err());
    }

    #[test]
    fn grid_validation_and_unsafe() {
        let mut c = ExperimentConfig::default();
        c.strategy.rank = 8;
        let err = c.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "strategy.rank"));
        c.allow_unsafe = true;
        c.validate().unwrap();

        let mut c = ExperimentConfig::default();
        c.strategy.kind = StrategyKind::Hash;
        c.strategy.table_size = 300;
        assert!(c.validate().unwrap_err().to_string().contains("strategy.table_size"));
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.workers = 7;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_hex().len(), 16);
    }
}

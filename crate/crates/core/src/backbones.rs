//! Scoring models: FedMF, FedNCF and PFedRec.
//!
//! A backbone turns a user's local state and a composed item embedding into
//! a logit trained with binary cross-entropy. User embeddings and PFedRec's
//! personal scorers never leave the client; FedNCF's tower is shared and
//! aggregated like the item parameters.

use serde::{Deserialize, Serialize};

use crate::embedding::{ComposeCache, ItemGrads, ItemModel};
use crate::numerics::{dot, sgd_step, Activation, DenseMatrix, MlpCache, MlpGrads, MlpModel, Mode, Purpose, RngStream, StreamKey};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    FedMf,
    FedNcf,
    PfedRec,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedmf" => Ok(Self::FedMf),
            "fedncf" => Ok(Self::FedNcf),
            "pfedrec" => Ok(Self::PfedRec),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FedMf => "fedmf",
            Self::FedNcf => "fedncf",
            Self::PfedRec => "pfedrec",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden widths of the FedNCF tower after the `2k` input.
    pub ncf_hidden: Vec<usize>,
    /// Hidden widths of PFedRec's personal scorer after the `k` input.
    pub pfedrec_hidden: Vec<usize>,
    pub dropout: f32,
    /// Half-width of the uniform user-embedding initialization.
    pub user_init: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::FedMf,
            ncf_hidden: vec![128, 64],
            pfedrec_hidden: vec![64, 32],
            dropout: 0.5,
            user_init: 0.01,
        }
    }
}

fn tower(input: usize, hidden: &[usize], dropout: f32, rng: &mut RngStream) -> Result<MlpModel> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    MlpModel::new(&sizes, Activation::Relu, Activation::Identity, true, dropout, rng)
}

/// Private per-client state.
#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub embedding: Option<Vec<f32>>,
    pub personal: Option<MlpModel>,
}

impl UserState {
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = self.embedding.iter().map(Vec::as_slice).collect();
        if let Some(p) = &self.personal {
            out.extend(p.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = self.embedding.iter_mut().map(Vec::as_mut_slice).collect();
        if let Some(p) = &mut self.personal {
            out.extend(p.tensors_mut());
        }
        out
    }
}

/// Server-side backbone: the kind plus the shared weights `W_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub kind: BackboneKind,
    /// FedNCF tower; `None` for FedMF and PFedRec.
    pub shared: Option<MlpModel>,
    k: usize,
}

/// Intermediates of one [`BackboneModel::score`] call.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    user: Vec<f32>,
    item: Vec<f32>,
    mlp: Option<MlpCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub user_embedding: Option<Vec<f32>>,
    pub personal: Option<MlpGrads>,
    pub shared: Option<MlpGrads>,
    /// `∂L/∂e` for the item embedding.
    pub item: Vec<f32>,
}

/// Numerically stable BCE on a logit; returns `(loss, ∂loss/∂logit)`.
pub fn bce_loss(logit: f32, label: f32) -> (f32, f32) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, crate::numerics::sigmoid(logit) - label)
}

impl BackboneModel {
    pub fn new(cfg: &BackboneConfig, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let shared = match cfg.kind {
            BackboneKind::FedNcf => {
                let mut rng = RngStream::new(seed, StreamKey::global(Purpose::Init));
                Some(tower(2 * k, &cfg.ncf_hidden, cfg.dropout, &mut rng)?)
            }
            _ => None,
        };
        Ok(Self { kind: cfg.kind, shared, k })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn init_user(&self, cfg: &BackboneConfig, user: usize, seed: u64) -> Result<UserState> {
        let mut rng = RngStream::new(seed, StreamKey::new(Purpose::UserInit, user as u64, 0));
        Ok(match self.kind {
            BackboneKind::FedMf | BackboneKind::FedNcf => UserState {
                embedding: Some(DenseMatrix::uniform(1, self.k, cfg.user_init, &mut rng).into_vec()),
                personal: None,
            },
            BackboneKind::PfedRec => UserState {
                embedding: None,
                personal: Some(tower(self.k, &cfg.pfedrec_hidden, cfg.dropout, &mut rng)?),
            },
        })
    }

    /// Logit of `item` for `user`. Dropout is active only in training mode.
    pub fn score(
        &self,
        user: &UserState,
        item: &[f32],
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<(f32, ScoreCache)> {
        if item.len() != self.k {
            return Err(Error::dim(format!("item embedding of {} for k = {}", item.len(), self.k)));
        }
        match self.kind {
            BackboneKind::FedMf | BackboneKind::FedNcf => {
                let u = user
                    .embedding
                    .as_ref()
                    .ok_or_else(|| Error::invalid("user state has no embedding"))?;
                if u.len() != self.k {
                    return Err(Error::dim(format!("user embedding of {} for k = {}", u.len(), self.k)));
                }
                if self.kind == BackboneKind::FedMf {
                    let cache = ScoreCache {
                        user: u.clone(),
                        item: item.to_vec(),
                        mlp: None,
                    };
                    return Ok((dot(u, item), cache));
                }
                let net = self.shared.as_ref().ok_or_else(|| Error::invalid("FedNCF tower missing"))?;
                let mut input = u.clone();
                input.extend_from_slice(item);
                let (out, c) = net.forward(&input, mode, rng)?;
                Ok((
                    out[0],
                    ScoreCache {
                        user: Vec::new(),
                        item: Vec::new(),
                        mlp: Some(c),
                    },
                ))
            }
            BackboneKind::PfedRec => {
                let net = user
                    .personal
                    .as_ref()
                    .ok_or_else(|| Error::invalid("user state has no personal scorer"))?;
                let (out, c) = net.forward(item, mode, rng)?;
                Ok((
                    out[0],
                    ScoreCache {
                        user: Vec::new(),
                        item: Vec::new(),
                        mlp: Some(c),
                    },
                ))
            }
        }
    }

    /// Gradients of a loss with `∂L/∂logit = dlogit`.
    pub fn backward(&self, user: &UserState, cache: &ScoreCache, dlogit: f32) -> Result<ScoreGrads> {
        match self.kind {
            BackboneKind::FedMf => Ok(ScoreGrads {
                user_embedding: Some(cache.item.iter().map(|v| v * dlogit).collect()),
                personal: None,
                shared: None,
                item: cache.user.iter().map(|v| v * dlogit).collect(),
            }),
            BackboneKind::FedNcf => {
                let net = self.shared.as_ref().ok_or_else(|| Error::invalid("FedNCF tower missing"))?;
                let c = cache.mlp.as_ref().ok_or_else(|| Error::StaleCache("FedNCF cache".into()))?;
                let (g, gin) = net.backward(c, &[dlogit])?;
                Ok(ScoreGrads {
                    user_embedding: Some(gin[..self.k].to_vec()),
                    personal: None,
                    shared: Some(g),
                    item: gin[self.k..].to_vec(),
                })
            }
            BackboneKind::PfedRec => {
                let net = user
                    .personal
                    .as_ref()
                    .ok_or_else(|| Error::invalid("user state has no personal scorer"))?;
                let c = cache.mlp.as_ref().ok_or_else(|| Error::StaleCache("PFedRec cache".into()))?;
                let (g, gin) = net.backward(c, &[dlogit])?;
                Ok(ScoreGrads {
                    user_embedding: None,
                    personal: Some(g),
                    shared: None,
                    item: gin,
                })
            }
        }
    }

    pub fn shared_tensors(&self) -> Vec<&[f32]> {
        self.shared.as_ref().map_or_else(Vec::new, MlpModel::tensors)
    }

    pub fn shared_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.shared.as_mut().map_or_else(Vec::new, MlpModel::tensors_mut)
    }

    pub fn shared_len(&self) -> usize {
        self.shared.as_ref().map_or(0, MlpModel::num_params)
    }
}

/// Summed gradients of a batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    pub user_embedding: Option<Vec<f32>>,
    pub personal: Option<MlpGrads>,
    pub shared: Option<MlpGrads>,
    pub item: ItemGrads,
}

impl BatchGrads {
    pub fn is_zero(&self) -> bool {
        let zero = |t: &[f32]| t.iter().all(|&v| v == 0.0);
        self.user_embedding.as_deref().is_none_or(zero)
            && self.personal.as_ref().is_none_or(|g| g.tensors().into_iter().all(zero))
            && self.shared.as_ref().is_none_or(|g| g.tensors().into_iter().all(zero))
            && self.item.is_zero()
    }
}

/// Loss (summed over the batch) and its gradients with respect to the user
/// state, the shared tower and the item-side trainable parameters.
pub fn batch_gradients(
    backbone: &BackboneModel,
    user: &UserState,
    items: &ItemModel,
    batch: &[(u32, f32)],
    mut rng: Option<&mut RngStream>,
) -> Result<BatchGrads> {
    let mode = if rng.is_some() { Mode::Train } else { Mode::Eval };
    let mut out = BatchGrads {
        loss: 0.0,
        user_embedding: user.embedding.as_ref().map(|e| vec![0.0; e.len()]),
        personal: user.personal.as_ref().map(MlpGrads::zeros_like),
        shared: backbone.shared.as_ref().map(MlpGrads::zeros_like),
        item: items.zero_grads(),
    };
    for &(item, label) in batch {
        let (e, ic): (Vec<f32>, ComposeCache) = items.compose_cached(item as usize)?;
        let (logit, sc) = backbone.score(user, &e, mode, rng.as_deref_mut())?;
        let (loss, dlogit) = bce_loss(logit, label);
        out.loss += loss as f64;
        let g = backbone.backward(user, &sc, dlogit)?;
        if let (Some(acc), Some(gu)) = (&mut out.user_embedding, &g.user_embedding) {
            crate::numerics::axpy(1.0, gu, acc);
        }
        if let (Some(acc), Some(gp)) = (&mut out.personal, &g.personal) {
            acc.add_assign(gp)?;
        }
        if let (Some(acc), Some(gs)) = (&mut out.shared, &g.shared) {
            acc.add_assign(gs)?;
        }
        items.accumulate_grad(&ic, &g.item, &mut out.item)?;
    }
    Ok(out)
}

/// One SGD step on the user state, the shared tower and the item parameters.
/// Returns the batch loss before the step.
pub fn local_step(
    backbone: &mut BackboneModel,
    user: &mut UserState,
    items: &mut ItemModel,
    batch: &[(u32, f32)],
    lr: f32,
    rng: Option<&mut RngStream>,
) -> Result<f64> {
    let g = batch_gradients(backbone, user, items, batch, rng)?;
    if let (Some(e), Some(ge)) = (&mut user.embedding, &g.user_embedding) {
        sgd_step(e, ge, lr)?;
    }
    if let (Some(p), Some(gp)) = (&mut user.personal, &g.personal) {
        p.apply_grads(gp, lr)?;
    }
    if let (Some(s), Some(gs)) = (&mut backbone.shared, &g.shared) {
        s.apply_grads(gs, lr)?;
    }
    items.apply_grads(&g.item, lr)?;
    Ok(g.loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            kind,
            ncf_hidden: vec![6, 4],
            pfedrec_hidden: vec![5, 3],
            dropout: 0.0,
            user_init: 0.5,
        }
    }

    fn mf_user(u: Vec<f32>) -> UserState {
        UserState {
            embedding: Some(u),
            personal: None,
        }
    }

    #[test]
    fn fedmf_dot_examples() {
        let b = BackboneModel::new(&cfg(BackboneKind::FedMf), 2, 0).unwrap();
        let (s, _) = b.score(&mf_user(vec![1.0, 2.0]), &[3.0, 4.0], Mode::Eval, None).unwrap();
        assert_eq!(s, 11.0);
        let (s, _) = b.score(&mf_user(vec![0.0, 0.0]), &[3.0, -4.0], Mode::Eval, None).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn zero_tower_gives_half() {
        let mut b = BackboneModel::new(&cfg(BackboneKind::FedNcf), 3, 0).unwrap();
        for t in b.shared_tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let (s, _) = b.score(&mf_user(vec![1.0, 2.0, 3.0]), &[1.0, -1.0, 0.5], Mode::Eval, None).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(crate::numerics::sigmoid(s), 0.5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let b = BackboneModel::new(&cfg(BackboneKind::FedMf), 2, 0).unwrap();
        assert!(b.score(&mf_user(vec![1.0, 2.0]), &[1.0], Mode::Eval, None).is_err());
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_loss(0.0, 1.0);
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(g, -0.5);
        let (l, g) = bce_loss(20.0, 1.0);
        assert!(l < 1e-8 && g.abs() < 1e-8);
        let (l, _) = bce_loss(-100.0, 1.0);
        assert!((l - 100.0).abs() < 1e-3);
    }

    #[test]
    fn bce_gradient_matches_differences() {
        for s in -3..=3 {
            for y in [0.0f64, 1.0] {
                let s = s as f64;
                let f = |x: f64| -(y * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - y) * (1.0 - 1.0 / (1.0 + (-x).exp())).ln());
                let numeric = (f(s + 1e-4) - f(s - 1e-4)) / 2e-4;
                let (_, g) = bce_loss(s as f32, y as f32);
                assert!((g as f64 - numeric).abs() < 1e-5, "s={s} y={y}");
            }
        }
    }

    #[test]
    fn fedmf_is_bilinear() {
        let b = BackboneModel::new(&cfg(BackboneKind::FedMf), 3, 0).unwrap();
        let e = [0.3, -1.2, 2.0];
        let (s1, _) = b.score(&mf_user(vec![1.0, 0.5, -2.0]), &e, Mode::Eval, None).unwrap();
        let (s2, _) = b.score(&mf_user(vec![2.0, 1.0, -4.0]), &e, Mode::Eval, None).unwrap();
        assert!((s2 - 2.0 * s1).abs() < 1e-6);
    }

    fn setup(kind: BackboneKind, seed: u64) -> (BackboneModel, UserState, ItemModel, Vec<(u32, f32)>) {
        let c = cfg(kind);
        let b = BackboneModel::new(&c, 4, seed).unwrap();
        let u = b.init_user(&c, 0, seed).unwrap();
        let mut r = RngStream::global(seed, Purpose::Synthetic);
        let items = ItemModel::full(DenseMatrix::uniform(6, 4, 0.5, &mut r));
        let batch = vec![(0, 1.0), (3, 0.0), (5, 1.0), (2, 0.0)];
        (b, u, items, batch)
    }

    #[test]
    fn small_step_reduces_loss() {
        for kind in [BackboneKind::FedMf, BackboneKind::FedNcf, BackboneKind::PfedRec] {
            for trial in 0..10 {
                let (mut b, mut u, mut items, batch) = setup(kind, trial);
                let before = local_step(&mut b, &mut u, &mut items, &batch, 0.01, None).unwrap();
                let after = batch_gradients(&b, &u, &items, &batch, None).unwrap().loss;
                assert!(after < before, "{kind:?} trial {trial}: {after} !< {before}");
            }
        }
    }

    #[test]
    fn saturated_batch_changes_nothing() {
        let b = BackboneModel::new(&cfg(BackboneKind::FedMf), 2, 0).unwrap();
        let mut u = mf_user(vec![100.0, 100.0]);
        let mut items = ItemModel::full(DenseMatrix::new(2, 2, vec![5.0, 5.0, -5.0, -5.0]).unwrap());
        let batch = [(0, 1.0), (1, 0.0)];
        let (u0, i0) = (u.clone(), items.clone());
        let mut bb = b.clone();
        let g = batch_gradients(&b, &u, &items, &batch, None).unwrap();
        assert!(g.is_zero());
        local_step(&mut bb, &mut u, &mut items, &batch, 0.1, None).unwrap();
        assert_eq!(u, u0);
        assert_eq!(items, i0);
    }

    #[test]
    fn eval_scoring_is_repeatable() {
        let c = BackboneConfig {
            dropout: 0.5,
            ..cfg(BackboneKind::FedNcf)
        };
        let b = BackboneModel::new(&c, 4, 1).unwrap();
        let u = b.init_user(&c, 3, 1).unwrap();
        let e = [0.1, 0.2, -0.3, 0.4];
        let a = b.score(&u, &e, Mode::Eval, None).unwrap().0;
        let z = b.score(&u, &e, Mode::Eval, None).unwrap().0;
        assert_eq!(a.to_bits(), z.to_bits());
    }
}

//! Helpers shared by the integration tests, including an independent f64
//! reference forward pass used as a finite-difference oracle.

#![allow(dead_code)]

use fedpeft::backbones::{batch_gradients, BackboneConfig, BackboneKind, BackboneModel, UserState};
use fedpeft::embedding::{Adapter, AdapterInit, HashPooling, ItemModel, Strategy};
use fedpeft::numerics::{Activation, DenseMatrix, MlpModel, Purpose, RngStream, StreamKey};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, StreamKey::new(Purpose::Init, 7, 0))
}

/// The small strategies used by gradient checks: k_L=2, d_H=8, h=2, l=2, d_R=4.
pub fn small_strategies() -> Vec<Strategy> {
    vec![
        Strategy::Full,
        Strategy::Lora { rank: 2 },
        Strategy::Hash {
            table_size: 8,
            functions: 2,
            prime: 4093,
            pooling: HashPooling::Mean,
            expansion: 2,
        },
        Strategy::Hash {
            table_size: 8,
            functions: 2,
            prime: 4093,
            pooling: HashPooling::Senet,
            expansion: 2,
        },
        Strategy::RqVae {
            levels: 2,
            codebook_size: 4,
        },
    ]
}

pub const BACKBONES: [BackboneKind; 3] = [BackboneKind::FedMf, BackboneKind::FedNcf, BackboneKind::PfedRec];

#[derive(Clone, Copy)]
struct LayerShape {
    out: usize,
    inp: usize,
    bias: bool,
    act: Activation,
}

fn layer_shapes(net: &MlpModel) -> Vec<LayerShape> {
    net.layers()
        .iter()
        .map(|l| LayerShape {
            out: l.out_dim(),
            inp: l.in_dim(),
            bias: l.bias.is_some(),
            act: l.activation,
        })
        .collect()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Identity => x,
    }
}

/// Sequential reader over a flat f64 parameter vector.
struct Cursor<'a> {
    p: &'a [f64],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.p[self.at..self.at + n];
        self.at += n;
        s
    }
}

type Layer<'a> = (&'a [f64], Option<&'a [f64]>, LayerShape);

fn read_mlp<'a>(c: &mut Cursor<'a>, shapes: &[LayerShape]) -> Vec<Layer<'a>> {
    shapes
        .iter()
        .map(|s| {
            let w = c.take(s.out * s.inp);
            let b = s.bias.then(|| c.take(s.out));
            (w, b, *s)
        })
        .collect()
}

fn run_mlp(layers: &[Layer<'_>], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (w, b, s) in layers {
        h = (0..s.out)
            .map(|o| {
                let z: f64 = (0..s.inp).map(|i| w[o * s.inp + i] * h[i]).sum::<f64>() + b.map_or(0.0, |b| b[o]);
                act(s.act, z)
            })
            .collect();
    }
    h
}

enum ItemForm {
    Full,
    Lora { rank: usize },
    Hash { idx: Vec<Vec<usize>>, d_h: usize, senet: Option<Vec<LayerShape>> },
    Rq { codes: Vec<Vec<u32>>, d_r: usize },
}

/// Independent f64 model of one client's loss as a function of all
/// trainable values (user state, shared tower, item-side tensors).
pub struct Reference {
    kind: BackboneKind,
    k: usize,
    n: usize,
    base: Vec<f64>,
    user_layers: Option<Vec<LayerShape>>,
    shared_layers: Option<Vec<LayerShape>>,
    item: ItemForm,
    pub batch: Vec<(u32, f32)>,
}

impl Reference {
    pub fn loss(&self, p: &[f64]) -> f64 {
        let k = self.k;
        let mut c = Cursor { p, at: 0 };
        let (user_emb, personal) = match &self.user_layers {
            None => (Some(c.take(k)), None),
            Some(s) => (None, Some(read_mlp(&mut c, s))),
        };
        let shared = self.shared_layers.as_ref().map(|s| read_mlp(&mut c, s));
        let compose: Box<dyn Fn(usize) -> Vec<f64>> = match &self.item {
            ItemForm::Full => {
                let t = c.take(self.n * k);
                Box::new(move |i| t[i * k..(i + 1) * k].to_vec())
            }
            ItemForm::Lora { rank } => {
                let r = *rank;
                let a = c.take(self.n * r);
                let b = c.take(k * r);
                let base = &self.base;
                Box::new(move |i| {
                    (0..k)
                        .map(|d| base[i * k + d] + (0..r).map(|j| b[d * r + j] * a[i * r + j]).sum::<f64>())
                        .collect()
                })
            }
            ItemForm::Hash { idx, d_h, senet } => {
                let t = c.take(d_h * k);
                let net = senet.as_ref().map(|s| read_mlp(&mut c, s));
                let base = &self.base;
                Box::new(move |i| {
                    let rows: Vec<&[f64]> = idx[i].iter().map(|&r| &t[r * k..(r + 1) * k]).collect();
                    let h = rows.len() as f64;
                    let w: Vec<f64> = match &net {
                        None => vec![1.0 / h; rows.len()],
                        Some(net) => {
                            let s: Vec<f64> = rows.iter().map(|v| v.iter().sum::<f64>() / k as f64).collect();
                            run_mlp(net, &s)
                        }
                    };
                    (0..k)
                        .map(|d| base[i * k + d] + rows.iter().zip(&w).map(|(v, w)| w * v[d]).sum::<f64>())
                        .collect()
                })
            }
            ItemForm::Rq { codes, d_r } => {
                let books: Vec<&[f64]> = (0..codes[0].len()).map(|_| c.take(d_r * k)).collect();
                let base = &self.base;
                Box::new(move |i| {
                    (0..k)
                        .map(|d| {
                            base[i * k + d]
                                + books
                                .iter()
                                .zip(&codes[i])
                                    .map(|(b, &code)| b[code as usize * k + d])
                                    .sum::<f64>()
                        })
                        .collect()
                })
            }
        };
        assert_eq!(c.at, p.len(), "parameter layout mismatch");
        self.batch
            .iter()
            .map(|&(item, label)| {
                let e = compose(item as usize);
                let s = match self.kind {
                    BackboneKind::FedMf => user_emb.unwrap().iter().zip(&e).map(|(a, b)| a * b).sum(),
                    BackboneKind::FedNcf => {
                        let mut x = user_emb.unwrap().to_vec();
                        x.extend_from_slice(&e);
                        run_mlp(shared.as_ref().unwrap(), &x)[0]
                    }
                    BackboneKind::PfedRec => run_mlp(personal.as_ref().unwrap(), &e)[0],
                };
                let y = label as f64;
                s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
            })
            .sum()
    }
}

/// A randomized small client: model, user state and batch.
pub struct Instance {
    pub backbone: BackboneModel,
    pub user: UserState,
    pub items: ItemModel,
    pub batch: Vec<(u32, f32)>,
}

pub fn fill_normal<R: Rng + ?Sized>(t: &mut [f32], std: f32, rng: &mut R) {
    let d = Normal::new(0.0, std).unwrap();
    t.iter_mut().for_each(|v| *v = d.sample(rng));
}

pub fn random_instance(kind: BackboneKind, strategy: &Strategy, seed: u64) -> Instance {
    let (n, k) = (12, 8);
    let mut r = rng(seed);
    let mut base = DenseMatrix::zeros(n, k);
    fill_normal(base.as_mut_slice(), 0.5, &mut r);
    let cfg = BackboneConfig {
        kind,
        ncf_hidden: vec![16, 8],
        pfedrec_hidden: vec![8, 4],
        ..Default::default()
    };
    let mut backbone = BackboneModel::new(&cfg, k, seed).unwrap();
    let mut user = backbone.init_user(&cfg, 0, seed).unwrap();
    for t in user.tensors_mut() {
        fill_normal(t, 0.5, &mut r);
    }
    for t in backbone.shared_tensors_mut() {
        fill_normal(t, 0.4, &mut r);
    }
    let mut items = ItemModel::full(base.clone());
    if strategy.is_peft() {
        let codes: Vec<Vec<u32>> = (0..n).map(|_| (0..2).map(|_| r.random_range(0..4)).collect()).collect();
        let mut adapter = Adapter::initialize(strategy, &base, Some(&codes), AdapterInit::Zero, &mut r).unwrap();
        for t in adapter.tensors_mut() {
            fill_normal(t, 0.5, &mut r);
        }
        items.freeze_and_attach(adapter).unwrap();
    }
    let batch = (0..6)
        .map(|_| (r.random_range(0..n as u32), if r.random_bool(0.5) { 1.0 } else { 0.0 }))
        .collect();
    Instance {
        backbone,
        user,
        items,
        batch,
    }
}

impl Instance {
    /// Flat trainable values in oracle order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let tensors = self
            .user
            .tensors()
            .into_iter()
            .chain(self.backbone.shared_tensors())
            .chain(self.items.trainable_tensors());
        for t in tensors {
            out.extend(t.iter().map(|&v| v as f64));
        }
        out
    }

    pub fn reference(&self) -> Reference {
        let (n, k) = (self.items.num_items(), self.items.dim());
        let item = match &self.items.adapter {
            Adapter::None => ItemForm::Full,
            Adapter::Lora(l) => ItemForm::Lora { rank: l.rank() },
            Adapter::Hash(h) => ItemForm::Hash {
                idx: (0..n).map(|i| h.indices(i)).collect(),
                d_h: h.table_size(),
                senet: h.senet.as_ref().map(layer_shapes),
            },
            Adapter::RqVae(q) => ItemForm::Rq {
                codes: (0..n).map(|i| q.codes(i).to_vec()).collect(),
                d_r: q.codebook_size(),
            },
        };
        Reference {
            kind: self.backbone.kind,
            k,
            n,
            base: self.items.base.table().as_slice().iter().map(|&v| v as f64).collect(),
            user_layers: self.user.personal.as_ref().map(layer_shapes),
            shared_layers: self.backbone.shared.as_ref().map(layer_shapes),
            item,
            batch: self.batch.clone(),
        }
    }

    /// Analytic gradient from the library, flattened in oracle order.
    pub fn analytic(&self) -> (f64, Vec<f64>) {
        let g = batch_gradients(&self.backbone, &self.user, &self.items, &self.batch, None).unwrap();
        let mut out: Vec<f64> = Vec::new();
        let mut push = |t: &[f32]| out.extend(t.iter().map(|&v| v as f64));
        if let Some(e) = &g.user_embedding {
            push(e);
        }
        if let Some(p) = &g.personal {
            p.tensors().into_iter().for_each(&mut push);
        }
        if let Some(s) = &g.shared {
            s.tensors().into_iter().for_each(&mut push);
        }
        for t in g.item.to_dense(&self.items) {
            push(&t);
        }
        (g.loss, out)
    }
}

/// Central differences of the reference loss.
pub fn numeric_gradient(r: &Reference, p: &[f64], eps: f64) -> Vec<f64> {
    let mut x = p.to_vec();
    (0..p.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + eps;
            let up = r.loss(&x);
            x[i] = v - eps;
            let down = r.loss(&x);
            x[i] = v;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// One gradient trial: `(relative gradient error, |loss_lib − loss_ref| / loss_ref)`.
pub fn gradient_trial(kind: BackboneKind, strategy: &Strategy, seed: u64) -> (f64, f64) {
    let inst = random_instance(kind, strategy, seed);
    let reference = inst.reference();
    let p = inst.params();
    let (loss, analytic) = inst.analytic();
    let ref_loss = reference.loss(&p);
    assert_eq!(analytic.len(), p.len(), "gradient layout");
    let numeric = numeric_gradient(&reference, &p, 1e-6);
    (relative_error(&analytic, &numeric), (loss - ref_loss).abs() / ref_loss.max(1e-12))
}

/// A fast experiment over a 200-user synthetic log; `sets` are `key=value`
/// overrides applied on top.
pub fn small_config(sets: &[&str]) -> fedpeft::config::ExperimentConfig {
    let mut cfg = fedpeft::config::ExperimentConfig::default();
    for s in [
        "dataset.synthetic.users=200",
        "dataset.synthetic.items=300",
        "dataset.synthetic.clusters=8",
        "features.dim=32",
        "pretrain.hidden=[32]",
        "pretrain.steps=200",
        "pretrain.batch_size=32",
        "model.k=16",
        "federation.rounds=6",
        "federation.warmup_rounds=2",
        "federation.sample_ratio=0.2",
        "federation.local_epochs=1",
        "strategy.codebook_size=32",
        "strategy.table_size=256",
        "eval.every=0",
    ]
    .iter()
    .chain(sets)
    {
        cfg.set(s).unwrap_or_else(|e| panic!("{s}: {e}"));
    }
    cfg.validate().unwrap();
    cfg
}

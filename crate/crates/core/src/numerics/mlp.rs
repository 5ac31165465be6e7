//! Small fully connected networks with hand-derived backpropagation.
//!
//! Every network in the simulator (autoencoder halves, the FedNCF tower,
//! PFedRec's personal scorer and the SENet excitation block) is an
//! [`MlpModel`]. The forward pass returns an [`MlpCache`] holding exactly what
//! the backward pass needs, including the dropout masks drawn in training
//! mode.

use rand::Rng;

use super::matrix::{axpy, DenseMatrix};
use super::rng::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f32) -> f32 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: DenseMatrix,
    pub bias: Option<Vec<f32>>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    dropout: f32,
}

/// Everything recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    dims: Vec<usize>,
    inputs: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
    masks: Vec<Option<Vec<f32>>>,
}

impl MlpCache {
    /// Dropout multipliers applied after each layer (`None` when inactive).
    pub fn masks(&self) -> &[Option<Vec<f32>>] {
        &self.masks
    }
}

/// Gradients with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Option<Vec<f32>>>,
}

impl MlpGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| l.bias.as_ref().map(|b| vec![0.0; b.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::dim("gradient layer count differs"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            match (a, b) {
                (Some(a), Some(b)) if a.len() == b.len() => axpy(1.0, b, a),
                (None, None) => {}
                _ => return Err(Error::dim("bias gradient layout differs")),
            }
        }
        Ok(())
    }

    /// Flat views in [`MlpModel::tensors`] order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            if let Some(b) = b {
                out.push(b.as_slice());
            }
        }
        out
    }
}

impl MlpModel {
    /// Builds a network over `sizes` with `hidden` activations between
    /// layers and `output` on the last one.
    ///
    /// Weights are uniform in `±1/sqrt(fan_in)`; biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        bias: bool,
        dropout: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(sizes, hidden, output, bias, dropout, |fan_in, fan_out| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            DenseMatrix::uniform(fan_out, fan_in, bound, rng)
        })
    }

    /// Same topology as [`MlpModel::new`] with every parameter zero.
    pub fn zeros(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        bias: bool,
        dropout: f32,
    ) -> Result<Self> {
        Self::build(sizes, hidden, output, bias, dropout, |fan_in, fan_out| {
            DenseMatrix::zeros(fan_out, fan_in)
        })
    }

    fn build(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        bias: bool,
        dropout: f32,
        mut init: impl FnMut(usize, usize) -> DenseMatrix,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weights: init(w[0], w[1]),
                bias: bias.then(|| vec![0.0; w[1]]),
                activation: if i == last { output } else { hidden },
            })
            .collect();
        Self::from_layers(layers, dropout)
    }

    pub fn from_layers(layers: Vec<DenseLayer>, dropout: f32) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if !(0.0..=1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0,1]")));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer {i} emits {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if let Some(b) = &l.bias {
                if b.len() != l.out_dim() {
                    return Err(Error::dim(format!("layer {i} bias length {}", b.len())));
                }
            }
        }
        Ok(Self { layers, dropout })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f32 {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Weights then bias (if any), layer by layer.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            if let Some(b) = &l.bias {
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            if let Some(b) = &mut l.bias {
                out.push(b.as_mut_slice());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Forward pass. Dropout (inverted, applied after every hidden layer)
    /// is active only in [`Mode::Train`] and then requires `rng`.
    pub fn forward(
        &self,
        input: &[f32],
        mode: Mode,
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Vec<f32>, MlpCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let use_dropout = mode == Mode::Train && self.dropout > 0.0;
        if use_dropout && rng.is_none() {
            return Err(Error::invalid("dropout in training mode needs a random stream"));
        }
        let n = self.layers.len();
        let mut cache = MlpCache {
            dims: self.dims(),
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&x)?;
            if let Some(b) = &layer.bias {
                axpy(1.0, b, &mut z);
            }
            let mut a: Vec<f32> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            let mask = if use_dropout && i + 1 < n {
                let keep = 1.0 - self.dropout;
                let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
                let r = rng.as_deref_mut().expect("checked above");
                let m: Vec<f32> = (0..a.len())
                    .map(|_| if r.random::<f32>() < keep { scale } else { 0.0 })
                    .collect();
                for (ai, mi) in a.iter_mut().zip(&m) {
                    *ai *= mi;
                }
                Some(m)
            } else {
                None
            };
            cache.inputs.push(std::mem::replace(&mut x, a));
            cache.pre.push(z);
            cache.masks.push(mask);
        }
        Ok((x, cache))
    }

    /// Backward pass from `output_grad`, returning parameter gradients and
    /// the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, output_grad: &[f32]) -> Result<(MlpGrads, Vec<f32>)> {
        if cache.dims != self.dims() || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache for {:?}, model is {:?}",
                cache.dims,
                self.dims()
            )));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::dim(format!(
                "output gradient of {} for {} outputs",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(mask) = &cache.masks[i] {
                for (gi, mi) in g.iter_mut().zip(mask) {
                    *gi *= mi;
                }
            }
            for (gi, &p) in g.iter_mut().zip(&cache.pre[i]) {
                *gi *= layer.activation.derivative(p);
            }
            grads.weights[i].add_outer(1.0, &g, &cache.inputs[i])?;
            if let Some(b) = &mut grads.biases[i] {
                axpy(1.0, &g, b);
            }
            g = layer.weights.matvec_t(&g)?;
        }
        Ok((grads, g))
    }

    /// `θ ← θ − lr·∇θ`.
    pub fn apply_grads(&mut self, grads: &MlpGrads, lr: f32) -> Result<()> {
        let g = grads.tensors();
        let mut p = self.tensors_mut();
        if g.len() != p.len() {
            return Err(Error::dim("gradient layout differs from model"));
        }
        for (pt, gt) in p.iter_mut().zip(g) {
            super::matrix::sgd_step(pt, gt, lr)?;
        }
        Ok(())
    }
}

/// Free-function form of [`MlpModel::forward`].
pub fn mlp_forward(
    model: &MlpModel,
    input: &[f32],
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<(Vec<f32>, MlpCache)> {
    model.forward(input, mode, rng)
}

/// Free-function form of [`MlpModel::backward`].
pub fn mlp_backward(
    model: &MlpModel,
    cache: &MlpCache,
    output_grad: &[f32],
) -> Result<(MlpGrads, Vec<f32>)> {
    model.backward(cache, output_grad)
}

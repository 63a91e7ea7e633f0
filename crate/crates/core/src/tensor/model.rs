use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{structural, Result};

/// Bitwidths a quantized layer may carry.
pub const VALID_BITS: [u32; 6] = [1, 2, 4, 8, 16, 32];

/// Bits per stored value when a layer is not quantized.
pub const FULL_PRECISION_BITS: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Output layer whose values are logits; the softmax itself is applied by
    /// the loss and probability helpers, so forward leaves them untouched.
    SoftmaxOutput,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity | Activation::SoftmaxOutput => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity | Activation::SoftmaxOutput => 1.0,
        }
    }
}

/// Factorized replacement for a layer's dense weights: `W ≈ U·V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    /// `out × r`
    pub u: Matrix,
    /// `r × in`
    pub v: Matrix,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len()
    }
}

/// Additive low-rank pathway `B·A`; `B` starts at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `r × in`
    pub a: Matrix,
    /// `out × r`
    pub b: Matrix,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out × in`. Kept even when `lowrank` replaces it in the forward pass.
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
    /// Binary, same shape as `weights`.
    pub mask: Matrix,
    pub activation: Activation,
    pub quant_bits: Option<u32>,
    pub lowrank: Option<LowRank>,
    pub adapter: Option<Adapter>,
    /// Number of shared-value clusters after weight sharing.
    pub share_clusters: Option<usize>,
    /// Frozen layers only train their adapter.
    pub frozen: bool,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Self {
        let mask = Matrix::filled(weights.rows(), weights.cols(), 1.0);
        Self {
            weights,
            bias,
            mask,
            activation,
            quant_bits: None,
            lowrank: None,
            adapter: None,
            share_clusters: None,
            frozen: false,
        }
    }

    /// Scaled-uniform initialisation, `U(-s, s)` with `s = sqrt(6 / (in + out))`.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let s = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Matrix::from_fn(outputs, inputs, |_, _| rng.random_range(-s..=s));
        Self::new(weights, Some(vec![0.0; outputs]), activation)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Number of weights whose mask is 1.
    pub fn alive_weights(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn masked_weights(&self) -> Result<Matrix> {
        self.weights.hadamard(&self.mask)
    }

    /// The matrix the forward pass multiplies by: the low-rank product if one
    /// is attached, else the masked dense weights, plus any adapter pathway.
    pub fn effective_weights(&self) -> Result<Matrix> {
        let base = match &self.lowrank {
            Some(lr) => lr.u.matmul(&lr.v)?,
            None => self.masked_weights()?,
        };
        match &self.adapter {
            Some(ad) => base.add(&ad.b.matmul(&ad.a)?),
            None => Ok(base),
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let (out, inp) = self.weights.shape();
        let ctx = |msg: String| structural(format!("layer {index}: {msg}"));
        if out == 0 || inp == 0 {
            return Err(ctx("zero-sized weight matrix".into()));
        }
        if self.mask.shape() != (out, inp) {
            return Err(ctx(format!("mask shape {:?} != weights {:?}", self.mask.shape(), (out, inp))));
        }
        if self.mask.as_slice().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(ctx("mask entries must be 0 or 1".into()));
        }
        if let Some(b) = &self.bias {
            if b.len() != out {
                return Err(ctx(format!("bias length {} != {out}", b.len())));
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(ctx("non-finite bias".into()));
            }
        }
        if !self.weights.is_finite() {
            return Err(ctx("non-finite weights".into()));
        }
        if let Some(bits) = self.quant_bits {
            if !VALID_BITS.contains(&bits) {
                return Err(ctx(format!("invalid quant_bits {bits}")));
            }
        }
        if let Some(lr) = &self.lowrank {
            let r = lr.u.cols();
            if r == 0 || lr.u.rows() != out || lr.v.shape() != (r, inp) {
                return Err(ctx("lowrank factors do not match layer shape".into()));
            }
            if !lr.u.is_finite() || !lr.v.is_finite() {
                return Err(ctx("non-finite lowrank factors".into()));
            }
        }
        if let Some(ad) = &self.adapter {
            let r = ad.a.rows();
            if r == 0 || ad.a.cols() != inp || ad.b.shape() != (out, r) {
                return Err(ctx("adapter does not match layer shape".into()));
            }
            if !ad.a.is_finite() || !ad.b.is_finite() {
                return Err(ctx("non-finite adapter".into()));
            }
        }
        if self.share_clusters == Some(0) {
            return Err(ctx("share_clusters must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A feed-forward stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Per-layer activations recorded by [`Model::forward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch.
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pub pre: Vec<Matrix>,
    /// Effective weights used for each layer.
    pub weights: Vec<Matrix>,
    pub output: Matrix,
}

impl Model {
    /// Builds a model from layers, checking every structural invariant.
    pub fn from_layers(input_dim: usize, output_dim: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let model = Self { layers, input_dim, output_dim };
        model.validate()?;
        Ok(model)
    }

    /// ReLU hidden layers followed by a softmax output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        if dims.iter().any(|&d| d == 0) {
            return Err(structural(format!("layer sizes must be ≥ 1, got {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::SoftmaxOutput } else { Activation::Relu };
                DenseLayer::init(dims[i], dims[i + 1], act, &mut rng)
            })
            .collect();
        Self::from_layers(input_dim, output_dim, layers)
    }

    /// Checks dimension chaining and each layer's own invariants.
    pub fn validate(&self) -> Result<()> {
        let mut expected_in = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
            if layer.in_dim() != expected_in {
                return Err(structural(format!(
                    "layer {i} expects {} inputs but receives {expected_in}",
                    layer.in_dim()
                )));
            }
            if layer.activation == Activation::SoftmaxOutput && i + 1 != self.layers.len() {
                return Err(structural(format!("layer {i}: softmax output on a hidden layer")));
            }
            expected_in = layer.out_dim();
        }
        if expected_in != self.output_dim {
            return Err(structural(format!(
                "final width {expected_in} does not match output_dim {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Widths of the hidden layers (every layer but the last).
    pub fn hidden_sizes(&self) -> Vec<usize> {
        let n = self.layers.len().saturating_sub(1);
        self.layers[..n].iter().map(DenseLayer::out_dim).collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.output)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim {
            return Err(structural(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let w = layer.effective_weights()?;
            let mut z = x.matmul_t(&w)?;
            if let Some(b) = &layer.bias {
                for r in 0..z.rows() {
                    for (v, bv) in z.row_mut(r).iter_mut().zip(b) {
                        *v += bv;
                    }
                }
            }
            let act = layer.activation;
            let a = z.map(|v| act.apply(v));
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
            weights.push(w);
        }
        Ok(ForwardCache { inputs, pre, weights, output: x })
    }

    pub(crate) fn activation_derivative(&self, layer: usize, z: f64) -> f64 {
        self.layers[layer].activation.derivative(z)
    }
}

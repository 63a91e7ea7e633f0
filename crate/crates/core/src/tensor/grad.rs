//! Reverse-mode gradients for [`Model`] and the plain SGD update.

use super::loss::{loss_with_grad, targets_len, LossKind, Targets};
use super::{ForwardCache, Matrix, Model};
use crate::error::{domain, structural, Result};

/// Gradients for one layer. A field is `None` when the layer has no such
/// parameter (or, for `weights`, when a low-rank factorization replaces them).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Option<Matrix>,
    pub bias: Option<Vec<f64>>,
    /// `(∂U, ∂V)`
    pub lowrank: Option<(Matrix, Matrix)>,
    /// `(∂A, ∂B)`
    pub adapter: Option<(Matrix, Matrix)>,
    /// Gradient with respect to the effective weight matrix.
    pub effective: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    /// Loss value at which the gradients were taken.
    pub loss: f64,
}

/// Gradients of the mean loss over `batch` with respect to every parameter.
pub fn backward(model: &Model, batch: &Matrix, targets: Targets<'_>, kind: LossKind) -> Result<Gradients> {
    if targets_len(&targets) != batch.rows() {
        return Err(structural(format!("{} rows but {} targets", batch.rows(), targets_len(&targets))));
    }
    let cache = model.forward_cached(batch)?;
    let (loss, dlogits) = loss_with_grad(&cache.output, targets, kind)?;
    let mut grads = backward_from_output(model, &cache, dlogits)?;
    grads.loss = loss;
    Ok(grads)
}

/// Back-propagates an arbitrary gradient on the model output.
pub fn backward_from_output(model: &Model, cache: &ForwardCache, doutput: Matrix) -> Result<Gradients> {
    if doutput.shape() != cache.output.shape() {
        return Err(structural("output gradient shape differs from forward output"));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut upstream = doutput;
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let pre = &cache.pre[i];
        let mut dz = upstream;
        for (d, &z) in dz.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *d *= model.activation_derivative(i, z);
        }
        let x = &cache.inputs[i];
        // ∂L/∂W_eff = dzᵀ · x
        let dw_eff = dz.t_matmul(x)?;
        let bias = layer.bias.as_ref().map(|_| {
            let mut db = vec![0.0; dz.cols()];
            for r in 0..dz.rows() {
                for (acc, v) in db.iter_mut().zip(dz.row(r)) {
                    *acc += v;
                }
            }
            db
        });
        let weights = match layer.lowrank {
            Some(_) => None,
            None => Some(dw_eff.hadamard(&layer.mask)?),
        };
        let lowrank = match &layer.lowrank {
            Some(lr) => Some((dw_eff.matmul_t(&lr.v)?, lr.u.t_matmul(&dw_eff)?)),
            None => None,
        };
        let adapter = match &layer.adapter {
            Some(ad) => Some((ad.b.t_matmul(&dw_eff)?, dw_eff.matmul_t(&ad.a)?)),
            None => None,
        };
        upstream = dz.matmul(&cache.weights[i])?;
        layers.push(LayerGrads { weights, bias, lowrank, adapter, effective: dw_eff });
    }
    layers.reverse();
    Ok(Gradients { layers, loss: f64::NAN })
}

/// `p ← p − lr·g` for every trainable parameter of `model`.
///
/// Frozen layers only update their adapter. Masks, quantization metadata and
/// sharing metadata are left as they are. `lr = 0` is a no-op.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(domain(format!("learning rate must be ≥ 0, got {lr}")));
    }
    if grads.layers.len() != model.layers.len() {
        return Err(structural("gradient/model layer count mismatch"));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        if !layer.frozen {
            if let Some(gw) = &g.weights {
                axpy(layer.weights.as_mut_slice(), gw.as_slice(), lr)?;
            }
            if let (Some(b), Some(gb)) = (layer.bias.as_mut(), &g.bias) {
                axpy(b, gb, lr)?;
            }
            if let (Some(lrk), Some((gu, gv))) = (layer.lowrank.as_mut(), &g.lowrank) {
                axpy(lrk.u.as_mut_slice(), gu.as_slice(), lr)?;
                axpy(lrk.v.as_mut_slice(), gv.as_slice(), lr)?;
            }
        }
        if let (Some(ad), Some((ga, gb))) = (layer.adapter.as_mut(), &g.adapter) {
            axpy(ad.a.as_mut_slice(), ga.as_slice(), lr)?;
            axpy(ad.b.as_mut_slice(), gb.as_slice(), lr)?;
        }
    }
    Ok(())
}

fn axpy(p: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
    if p.len() != g.len() {
        return Err(structural(format!("parameter of length {} vs gradient {}", p.len(), g.len())));
    }
    for (pi, gi) in p.iter_mut().zip(g) {
        *pi -= lr * gi;
    }
    Ok(())
}

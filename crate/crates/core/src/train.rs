//! Mini-batch SGD shared by fine-tuning, QAT, distillation and PEFT.
//!
//! Training never changes model structure: masks, ranks, bitwidths and
//! sharing metadata survive untouched, so every cost meter is invariant.
//!
//! * layers with `quant_bits` train latent weights through the quantized
//!   forward (straight-through) and are re-snapped at the end;
//! * shared layers receive the summed gradient of each cluster, keeping
//!   tied weights equal;
//! * frozen layers only update their adapter.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::methods::distillation::kd_loss_with_grad;
use crate::methods::quantization::simulate;
use crate::tensor::loss::loss_with_grad;
use crate::tensor::{backward_from_output, sgd_step, Dataset, Gradients, LossKind, Model, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self { epochs, lr, batch_size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(domain(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be ≥ 1"));
        }
        Ok(())
    }
}

/// What the student minimizes.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Task(LossKind),
    Distill { teacher: &'a Model, temperature: f64, loss_weight: f64 },
}

/// Runs `cfg.epochs` of shuffled mini-batch SGD and returns the trained model.
/// Zero epochs returns an exact copy.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig, objective: Objective<'_>) -> Result<Model> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(domain("training split is empty"));
    }
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    let mut latent = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk);
            let mut grads = gradients(&latent, &batch, objective)?;
            tie_shared(&latent, &mut grads);
            sgd_step(&mut latent, &grads, cfg.lr)?;
        }
    }
    simulate(&latent)
}

/// Gradient of the objective at the quantized view of `latent`.
pub fn gradients(latent: &Model, batch: &Dataset, objective: Objective<'_>) -> Result<Gradients> {
    let view = simulate(latent)?;
    let cache = view.forward_cached(&batch.inputs)?;
    let (loss, dout) = match objective {
        Objective::Task(kind) => loss_with_grad(&cache.output, Targets::Classes(&batch.labels), kind)?,
        Objective::Distill { teacher, temperature, loss_weight } => {
            let teacher_logits = teacher.forward(&batch.inputs)?;
            kd_loss_with_grad(&cache.output, &teacher_logits, &batch.labels, temperature, loss_weight)?
        }
    };
    let mut grads = backward_from_output(&view, &cache, dout)?;
    grads.loss = loss;
    Ok(grads)
}

/// Replaces each shared weight's gradient by its cluster's summed gradient.
fn tie_shared(model: &Model, grads: &mut Gradients) {
    for (layer, g) in model.layers.iter().zip(&mut grads.layers) {
        let (Some(_), Some(gw)) = (layer.share_clusters, g.weights.as_mut()) else {
            continue;
        };
        let mut clusters: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, (&w, &m)) in layer.weights.as_slice().iter().zip(layer.mask.as_slice()).enumerate() {
            if m != 0.0 {
                clusters.entry(w.to_bits()).or_default().push(i);
            }
        }
        let gs = gw.as_mut_slice();
        for members in clusters.values() {
            let total: f64 = members.iter().map(|&i| gs[i]).sum();
            for &i in members {
                gs[i] = total;
            }
        }
    }
}

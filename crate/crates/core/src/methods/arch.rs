//! Architectural rules: low-rank factorization, adapter injection and
//! width/depth rebuilds, plus the adapter-only fine-tuning loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{Knob, KnobDomain, Rule, RuleContext};
use crate::error::{config, domain, Result};
use crate::methods::quantization::quantize_layer;
use crate::methods::svd::svd;
use crate::tensor::{Adapter, Dataset, LossKind, LowRank, Matrix, Model};
use crate::train::{train, Objective, TrainConfig};

pub const KNOB_LOWRANK: &str = "lowrank_rank";
pub const KNOB_ADAPTER: &str = "adapter_rank";
pub const KNOB_DEPTH: &str = "depth";
pub const KNOB_WIDTH: &str = "width";

fn layer_ref(model: &Model, index: usize) -> Result<()> {
    if index >= model.layers.len() {
        return Err(domain(format!("layer {index} out of range for {} layers", model.layers.len())));
    }
    Ok(())
}

fn check_rank(rank: usize, out: usize, inp: usize) -> Result<()> {
    let max = out.min(inp);
    if rank == 0 || rank > max {
        return Err(domain(format!("rank {rank} outside 1..={max}")));
    }
    Ok(())
}

/// Replaces layer `index` by the rank-`rank` truncated SVD of its effective
/// weights. An existing adapter is folded into the factorization.
pub fn lowrank_factorize(model: &Model, index: usize, rank: usize) -> Result<Model> {
    layer_ref(model, index)?;
    let mut out = model.clone();
    let layer = &mut out.layers[index];
    check_rank(rank, layer.out_dim(), layer.in_dim())?;
    let (u, v) = svd(&layer.effective_weights()?)?.truncate(rank);
    layer.lowrank = Some(LowRank { u, v });
    layer.adapter = None;
    layer.share_clusters = None;
    if let Some(bits) = layer.quant_bits {
        quantize_layer(layer, bits)?;
    }
    Ok(out)
}

/// Attaches a zero-output adapter `B·A` and freezes the layer's base weights.
pub fn inject_adapter(model: &Model, index: usize, rank: usize, seed: u64) -> Result<Model> {
    layer_ref(model, index)?;
    let mut out = model.clone();
    let layer = &mut out.layers[index];
    let (o, i) = (layer.out_dim(), layer.in_dim());
    check_rank(rank, o, i)?;
    if layer.adapter.is_some() {
        return Err(domain(format!("layer {index} already carries an adapter")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (i as f64).sqrt();
    let a = Matrix::from_fn(rank, i, |_, _| rng.random_range(-s..=s));
    layer.adapter = Some(Adapter { a, b: Matrix::zeros(o, rank) });
    layer.frozen = true;
    Ok(out)
}

/// Fresh seeded MLP with `depth` hidden layers of `width` units and the same
/// input and output sizes. Weights are not carried over, so quality usually
/// needs fine-tuning to recover.
pub fn resize(model: &Model, depth: usize, width: usize, seed: u64) -> Result<Model> {
    if depth == 0 || width == 0 {
        return Err(domain(format!("depth and width must be ≥ 1, got {depth} and {width}")));
    }
    Model::mlp(model.input_dim, &vec![width; depth], model.output_dim, seed)
}

/// Trains only adapters, low-rank factors and unfrozen layers.
pub fn peft_finetune(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if !model.layers.iter().any(|l| l.adapter.is_some() || !l.frozen) {
        return Err(config("nothing trainable: every layer is frozen and none has an adapter"));
    }
    train(model, data, cfg, Objective::Task(LossKind::CrossEntropy))
}

/// Rule: factorize every layer at rank `min(r, out, in)` wherever that holds
/// fewer values than the layer currently stores.
#[derive(Clone, Debug, Default)]
pub struct LowRankRule {
    pub max_rank: u64,
}

impl LowRankRule {
    pub fn knob(&self) -> Knob {
        Knob::new(KNOB_LOWRANK, KnobDomain::PositiveInteger { max: self.max_rank })
    }
}

impl Rule for LowRankRule {
    fn id(&self) -> &str {
        "lowrank_factorize"
    }

    fn knob_id(&self) -> &str {
        KNOB_LOWRANK
    }

    fn transform(&self, model: &Model, value: f64, _: &RuleContext<'_>) -> Result<Model> {
        let mut out = model.clone();
        for i in 0..model.layers.len() {
            let l = &model.layers[i];
            let r = (value as usize).min(l.out_dim().min(l.in_dim()));
            let current = l.lowrank.as_ref().map_or(l.alive_weights(), LowRank::param_count);
            if r * (l.out_dim() + l.in_dim()) < current {
                out = lowrank_factorize(&out, i, r)?;
            }
        }
        Ok(out)
    }
}

/// Rule: inject adapters of rank `min(r, out, in)` into every layer that has
/// none yet.
#[derive(Clone, Debug, Default)]
pub struct AdapterRule {
    pub max_rank: u64,
    pub seed: u64,
}

impl AdapterRule {
    pub fn knob(&self) -> Knob {
        Knob::new(KNOB_ADAPTER, KnobDomain::PositiveInteger { max: self.max_rank })
    }
}

impl Rule for AdapterRule {
    fn id(&self) -> &str {
        "inject_adapter"
    }

    fn knob_id(&self) -> &str {
        KNOB_ADAPTER
    }

    fn transform(&self, model: &Model, value: f64, _: &RuleContext<'_>) -> Result<Model> {
        let mut out = model.clone();
        for i in 0..model.layers.len() {
            let l = &model.layers[i];
            if l.adapter.is_none() {
                let r = (value as usize).min(l.out_dim().min(l.in_dim()));
                out = inject_adapter(&out, i, r, self.seed.wrapping_add(i as u64))?;
            }
        }
        Ok(out)
    }
}

/// Current width of a model: its widest hidden layer, or the input size for a
/// model with no hidden layer.
pub fn current_width(model: &Model) -> usize {
    model.hidden_sizes().into_iter().max().unwrap_or(model.input_dim)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeAxis {
    Depth,
    Width,
}

/// Rule: rebuild with a new depth (keeping the current width) or a new width
/// (keeping the current depth, at least one hidden layer).
#[derive(Clone, Debug)]
pub struct ResizeRule {
    pub axis: ResizeAxis,
    pub max: u64,
    pub seed: u64,
}

impl ResizeRule {
    pub fn knob(&self) -> Knob {
        Knob::new(self.knob_id(), KnobDomain::PositiveInteger { max: self.max })
    }
}

impl Rule for ResizeRule {
    fn id(&self) -> &str {
        match self.axis {
            ResizeAxis::Depth => "resize_depth",
            ResizeAxis::Width => "resize_width",
        }
    }

    fn knob_id(&self) -> &str {
        match self.axis {
            ResizeAxis::Depth => KNOB_DEPTH,
            ResizeAxis::Width => KNOB_WIDTH,
        }
    }

    fn transform(&self, model: &Model, value: f64, _: &RuleContext<'_>) -> Result<Model> {
        let v = value as usize;
        match self.axis {
            ResizeAxis::Depth => resize(model, v, current_width(model), self.seed),
            ResizeAxis::Width => resize(model, model.hidden_sizes().len().max(1), v, self.seed),
        }
    }
}

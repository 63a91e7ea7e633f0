//! Uniform weight quantization: the value-snapping rule, one-shot PTQ and
//! quantization-aware training with straight-through gradients.
//!
//! Values are snapped to `Δ·round(w/Δ)` with `Δ = (max − min) / (2^b − 1)`
//! taken over each weight matrix separately; only alive (unmasked) weights
//! take part. The grid is the multiples of `Δ`, not offset by `min`. Biases
//! and activations stay full precision.

use serde::{Deserialize, Serialize};

use crate::calculus::{Knob, KnobDomain, Rule, RuleContext};
use crate::error::{config, domain, Result};
use crate::meters::{CostMeter, MeterReading};
use crate::tensor::{DenseLayer, Dataset, Gradients, LossKind, Matrix, Model, Targets, VALID_BITS};
use crate::train::{train, Objective, TrainConfig};

pub const KNOB_BITS: &str = "quant_bits";

pub fn check_bits(bits: u32) -> Result<()> {
    if VALID_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(domain(format!("bitwidth {bits} not in {VALID_BITS:?}")))
    }
}

/// Grid step for `values` at `bits`; zero when all values are equal.
pub fn step_size(values: &[f64], bits: u32) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (hi - lo) / ((1u64 << bits) - 1) as f64
}

/// Snaps every value to `Δ·round(w/Δ)`, rounding half to even.
pub fn quantize_uniform(values: &[f64], bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(domain("cannot quantize an empty array"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(domain("cannot quantize non-finite values"));
    }
    let delta = step_size(values, bits);
    if delta == 0.0 {
        return Ok(values.to_vec());
    }
    Ok(values.iter().map(|&w| delta * (w / delta).round_ties_even()).collect())
}

/// Quantizes only the entries where `mask` is 1.
fn quantize_masked(weights: &mut Matrix, mask: &Matrix, bits: u32) -> Result<()> {
    let alive: Vec<usize> = (0..weights.len()).filter(|&i| mask.as_slice()[i] != 0.0).collect();
    if alive.is_empty() {
        return Ok(());
    }
    let values: Vec<f64> = alive.iter().map(|&i| weights.as_slice()[i]).collect();
    let q = quantize_uniform(&values, bits)?;
    for (&i, v) in alive.iter().zip(q) {
        weights.as_mut_slice()[i] = v;
    }
    Ok(())
}

fn quantize_matrix(m: &mut Matrix, bits: u32) -> Result<()> {
    if m.is_empty() {
        return Ok(());
    }
    let q = quantize_uniform(m.as_slice(), bits)?;
    m.as_mut_slice().copy_from_slice(&q);
    Ok(())
}

/// Snaps a layer's weight-like matrices and records `bits`.
pub fn quantize_layer(layer: &mut DenseLayer, bits: u32) -> Result<()> {
    check_bits(bits)?;
    match &mut layer.lowrank {
        Some(lr) => {
            quantize_matrix(&mut lr.u, bits)?;
            quantize_matrix(&mut lr.v, bits)?;
        }
        None => quantize_masked(&mut layer.weights, &layer.mask, bits)?,
    }
    if let Some(ad) = &mut layer.adapter {
        quantize_matrix(&mut ad.a, bits)?;
        quantize_matrix(&mut ad.b, bits)?;
    }
    layer.quant_bits = Some(bits);
    Ok(())
}

/// Bitwidth for every layer, or one per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BitsSpec {
    Uniform(u32),
    PerLayer(Vec<u32>),
}

impl BitsSpec {
    fn for_layer(&self, i: usize, layers: usize) -> Result<u32> {
        match self {
            BitsSpec::Uniform(b) => Ok(*b),
            BitsSpec::PerLayer(v) if v.len() == layers => Ok(v[i]),
            BitsSpec::PerLayer(v) => Err(config(format!("{} bitwidths for {layers} layers", v.len()))),
        }
    }
}

pub fn quantize_model(model: &Model, bits: &BitsSpec) -> Result<Model> {
    let mut out = model.clone();
    let n = out.layers.len();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        quantize_layer(layer, bits.for_layer(i, n)?)?;
    }
    Ok(out)
}

/// Copy of `model` with every layer that carries `quant_bits` re-snapped at
/// that width: the forward view used during quantization-aware training.
pub fn simulate(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for layer in &mut out.layers {
        if let Some(bits) = layer.quant_bits {
            quantize_layer(layer, bits)?;
        }
    }
    Ok(out)
}

/// Gradients with respect to latent full-precision parameters, taken at the
/// quantized forward with rounding treated as the identity.
pub fn ste_backward(latent: &Model, batch: &Matrix, targets: Targets<'_>, kind: LossKind) -> Result<Gradients> {
    crate::tensor::backward(&simulate(latent)?, batch, targets, kind)
}

#[derive(Clone, Debug, PartialEq)]
pub enum PtqOutcome {
    Quantized { model: Model, meters: MeterReading },
    /// Memory cost at the requested bits exceeds the budget.
    Failure { meters: MeterReading },
}

/// One-shot post-training quantization with a memory-budget check.
///
/// Quality is the argmax accuracy on `calib`.
pub fn ptq(model: &Model, bits: &BitsSpec, calib: &Dataset, budget: f64) -> Result<PtqOutcome> {
    if calib.is_empty() {
        return Err(domain("empty calibration set"));
    }
    let q = quantize_model(model, bits)?;
    let logits = q.forward(&calib.inputs)?;
    let correct = (0..calib.len()).filter(|&r| crate::meters::argmax(logits.row(r)) == calib.labels[r]).count();
    let meters = MeterReading {
        cost: CostMeter::MemoryBytes.measure(&q),
        quality: correct as f64 / calib.len() as f64,
        cost_meter_id: CostMeter::MemoryBytes.id().into(),
        quality_meter_id: "calib_accuracy".into(),
    };
    if meters.cost <= budget {
        Ok(PtqOutcome::Quantized { model: q, meters })
    } else {
        Ok(PtqOutcome::Failure { meters })
    }
}

/// Quantization-aware training: trains latent weights through the quantized
/// forward, then returns the final quantized model.
pub fn qat(model: &Model, bits: &BitsSpec, data: &Dataset, train_cfg: &TrainConfig) -> Result<Model> {
    let mut latent = model.clone();
    let n = latent.layers.len();
    for (i, layer) in latent.layers.iter_mut().enumerate() {
        let b = bits.for_layer(i, n)?;
        check_bits(b)?;
        layer.quant_bits = Some(b);
    }
    let trained = train(&latent, data, train_cfg, Objective::Task(LossKind::CrossEntropy))?;
    quantize_model(&trained, bits)
}

/// Rule: quantize every layer to the knob's bitwidth.
#[derive(Clone, Debug, Default)]
pub struct QuantizeRule;

impl QuantizeRule {
    pub fn knob() -> Knob {
        Knob::new(KNOB_BITS, KnobDomain::DiscreteSet { values: VALID_BITS.iter().map(|&b| b as f64).collect() })
    }
}

impl Rule for QuantizeRule {
    fn id(&self) -> &str {
        "quantize_uniform"
    }

    fn knob_id(&self) -> &str {
        KNOB_BITS
    }

    fn transform(&self, model: &Model, value: f64, _: &RuleContext<'_>) -> Result<Model> {
        quantize_model(model, &BitsSpec::Uniform(value as u32))
    }
}

//! Cost and quality meters.
//!
//! Cost meters are analytic functions of model structure (never timed), so
//! they are exact and reproducible. Quality meters always read a validation
//! split.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::tensor::{loss, Dataset, LossKind, Model, Split, FULL_PRECISION_BITS};

/// Paired cost and quality values together with the meters that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterReading {
    pub cost: f64,
    pub quality: f64,
    pub cost_meter_id: String,
    pub quality_meter_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMeter {
    ParamCount,
    Flops,
    MemoryBytes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMeter {
    ValAccuracy,
    NegValLoss,
}

impl CostMeter {
    pub const ALL: [CostMeter; 3] = [CostMeter::ParamCount, CostMeter::Flops, CostMeter::MemoryBytes];

    pub fn id(self) -> &'static str {
        match self {
            CostMeter::ParamCount => "param_count",
            CostMeter::Flops => "flops",
            CostMeter::MemoryBytes => "memory_bytes",
        }
    }

    pub fn measure(self, model: &Model) -> f64 {
        match self {
            CostMeter::ParamCount => param_count(model) as f64,
            CostMeter::Flops => flops(model) as f64,
            CostMeter::MemoryBytes => memory_bytes(model),
        }
    }
}

impl QualityMeter {
    pub const ALL: [QualityMeter; 2] = [QualityMeter::ValAccuracy, QualityMeter::NegValLoss];

    pub fn id(self) -> &'static str {
        match self {
            QualityMeter::ValAccuracy => "val_accuracy",
            QualityMeter::NegValLoss => "neg_val_loss",
        }
    }

    pub fn measure(self, model: &Model, val: &Dataset) -> Result<f64> {
        match self {
            QualityMeter::ValAccuracy => accuracy(model, val),
            QualityMeter::NegValLoss => neg_val_loss(model, val),
        }
    }
}

impl fmt::Display for CostMeter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl fmt::Display for QualityMeter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CostMeter {
    type Err = crate::KmrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| config(format!("unknown cost meter `{s}`")))
    }
}

impl FromStr for QualityMeter {
    type Err = crate::KmrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| config(format!("unknown quality meter `{s}`")))
    }
}

/// Alive weights + biases + low-rank factors + adapter entries. A factorized
/// layer counts its factors instead of its dense matrix.
pub fn param_count(model: &Model) -> u64 {
    model
        .layers
        .iter()
        .map(|l| {
            let weights = match &l.lowrank {
                Some(lr) => lr.param_count(),
                None => l.alive_weights(),
            };
            let bias = l.bias.as_ref().map_or(0, Vec::len);
            let adapter = l.adapter.as_ref().map_or(0, |a| a.param_count());
            (weights + bias + adapter) as u64
        })
        .sum()
}

/// Twice the multiply-accumulates of one example's forward pass. Masked
/// weights cost nothing; activations and biases are not counted.
pub fn flops(model: &Model) -> u64 {
    model
        .layers
        .iter()
        .map(|l| {
            let macs = match &l.lowrank {
                Some(lr) => lr.param_count(),
                None => l.alive_weights(),
            } + l.adapter.as_ref().map_or(0, |a| a.param_count());
            2 * macs as u64
        })
        .sum()
}

/// Storage in bytes, counting `quant_bits` (or 64) per weight-like value and
/// 64 bits per bias. Shared layers store a codebook of `k` centers plus a
/// `ceil(log2 k)`-bit index per alive weight. Fractional bytes are kept.
pub fn memory_bytes(model: &Model) -> f64 {
    let bits: u64 = model
        .layers
        .iter()
        .map(|l| {
            let b = u64::from(l.quant_bits.unwrap_or(FULL_PRECISION_BITS));
            let alive = l.alive_weights() as u64;
            let weights = match (&l.lowrank, l.share_clusters) {
                (Some(lr), _) => lr.param_count() as u64 * b,
                (None, Some(k)) => k as u64 * b + alive * index_bits(k),
                (None, None) => alive * b,
            };
            let adapter = l.adapter.as_ref().map_or(0, |a| a.param_count() as u64) * b;
            let bias = l.bias.as_ref().map_or(0, |v| v.len() as u64) * u64::from(FULL_PRECISION_BITS);
            weights + adapter + bias
        })
        .sum();
    bits as f64 / 8.0
}

/// Bits needed to address one of `k` codebook entries.
pub fn index_bits(k: usize) -> u64 {
    if k <= 1 {
        0
    } else {
        u64::from(usize::BITS - (k - 1).leading_zeros())
    }
}

fn require_validation(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(domain("quality meter on an empty dataset"));
    }
    if data.split != Split::Validation {
        return Err(domain("quality meters only read the validation split"));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax logit is the true class.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    require_validation(data)?;
    let logits = model.forward(&data.inputs)?;
    let correct = data.labels.iter().enumerate().filter(|&(r, &y)| argmax(logits.row(r)) == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Negative mean cross-entropy on the validation split.
pub fn neg_val_loss(model: &Model, data: &Dataset) -> Result<f64> {
    require_validation(data)?;
    Ok(-loss(model, data, LossKind::CrossEntropy)?)
}

/// Weights for combining several meters into one cost and one quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub cost_weights: BTreeMap<String, f64>,
    pub quality_weights: BTreeMap<String, f64>,
}

impl AggregateSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, weights) in [("cost", &self.cost_weights), ("quality", &self.quality_weights)] {
            if weights.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(config(format!("{name} weights must be finite and ≥ 0")));
            }
            if !weights.values().any(|&w| w > 0.0) {
                return Err(config(format!("{name} weights need at least one nonzero entry")));
            }
        }
        Ok(())
    }

    pub fn cost_meters(&self) -> Result<Vec<CostMeter>> {
        self.cost_weights.keys().map(|k| k.parse()).collect()
    }

    pub fn quality_meters(&self) -> Result<Vec<QualityMeter>> {
        self.quality_weights.keys().map(|k| k.parse()).collect()
    }
}

/// Weighted sums of the readings' costs and qualities.
///
/// Each weighted id is looked up among the readings' cost (or quality) meter
/// ids; the first match is used. A single meter at weight 1 keeps its id.
pub fn aggregate(readings: &[MeterReading], spec: &AggregateSpec) -> Result<MeterReading> {
    spec.validate()?;
    let combine = |weights: &BTreeMap<String, f64>,
                   pick: &dyn Fn(&MeterReading) -> (&str, f64)|
     -> Result<(f64, String)> {
        let mut total = 0.0;
        let mut terms = Vec::with_capacity(weights.len());
        for (id, &w) in weights {
            let value = readings
                .iter()
                .map(pick)
                .find(|(rid, _)| rid == id)
                .map(|(_, v)| v)
                .ok_or_else(|| config(format!("aggregate references meter `{id}` with no reading")))?;
            total += w * value;
            terms.push(if w == 1.0 { id.clone() } else { format!("{w}*{id}") });
        }
        Ok((total, terms.join("+")))
    };
    let (cost, cost_meter_id) = combine(&spec.cost_weights, &|r| (r.cost_meter_id.as_str(), r.cost))?;
    let (quality, quality_meter_id) =
        combine(&spec.quality_weights, &|r| (r.quality_meter_id.as_str(), r.quality))?;
    Ok(MeterReading { cost, quality, cost_meter_id, quality_meter_id })
}

//! Weight sharing by 1-D k-means and the tensor-rank rule.

use crate::calculus::{Knob, KnobDomain, Rule, RuleContext};
use crate::error::{domain, Result};
use crate::meters::index_bits;
use crate::methods::arch::LowRankRule;
use crate::methods::quantization::quantize_layer;
use crate::tensor::{DenseLayer, Model, FULL_PRECISION_BITS};

pub const KNOB_SHARE: &str = "share_clusters";
pub const KNOB_TENSOR_RANK: &str = "tensor_rank";
pub const KMEANS_ITERATIONS: usize = 20;

/// Lloyd's algorithm on scalars. Centers start at the quantiles
/// `sorted[⌊j·(n−1)/(k−1)⌋]`; each point joins its nearest center (lower index
/// on ties); empty clusters keep their previous center.
///
/// Returns `(centers, assignment)`.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(domain(format!("cluster count {k} outside 1..={n}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centers: Vec<f64> = if k == 1 {
        vec![sorted[0]]
    } else {
        (0..k).map(|j| sorted[j * (n - 1) / (k - 1)]).collect()
    };
    let mut assign = vec![0; n];
    for _ in 0..KMEANS_ITERATIONS {
        for (a, &v) in assign.iter_mut().zip(values) {
            *a = nearest(&centers, v);
        }
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (&a, &v) in assign.iter().zip(values) {
            sum[a] += v;
            count[a] += 1;
        }
        for j in 0..k {
            if count[j] > 0 {
                centers[j] = sum[j] / count[j] as f64;
            }
        }
    }
    for (a, &v) in assign.iter_mut().zip(values) {
        *a = nearest(&centers, v);
    }
    Ok((centers, assign))
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (j, c) in centers.iter().enumerate() {
        if (v - c).abs() < (v - centers[best]).abs() {
            best = j;
        }
    }
    best
}

/// Replaces the alive weights of layer `index` by their k-means centers.
pub fn weight_share(model: &Model, index: usize, clusters: usize) -> Result<Model> {
    if index >= model.layers.len() {
        return Err(domain(format!("layer {index} out of range for {} layers", model.layers.len())));
    }
    let mut out = model.clone();
    share_layer(&mut out.layers[index], clusters)?;
    Ok(out)
}

fn share_layer(layer: &mut DenseLayer, clusters: usize) -> Result<()> {
    let alive: Vec<usize> = (0..layer.mask.len()).filter(|&i| layer.mask.as_slice()[i] != 0.0).collect();
    let values: Vec<f64> = alive.iter().map(|&i| layer.weights.as_slice()[i]).collect();
    let (centers, assign) = kmeans_1d(&values, clusters)?;
    for (&i, &a) in alive.iter().zip(&assign) {
        layer.weights.as_mut_slice()[i] = centers[a];
    }
    layer.share_clusters = Some(clusters);
    if let Some(bits) = layer.quant_bits {
        quantize_layer(layer, bits)?;
    }
    Ok(())
}

fn dense_bits(layer: &DenseLayer) -> u64 {
    let b = u64::from(layer.quant_bits.unwrap_or(FULL_PRECISION_BITS));
    let alive = layer.alive_weights() as u64;
    match layer.share_clusters {
        Some(k) => k as u64 * b + alive * index_bits(k),
        None => alive * b,
    }
}

/// Rule: share every dense layer's weights into `min(k, alive)` clusters
/// wherever that stores fewer bits than the layer does now.
#[derive(Clone, Debug, Default)]
pub struct ShareRule {
    pub max_clusters: u64,
}

impl ShareRule {
    pub fn knob(&self) -> Knob {
        Knob::new(KNOB_SHARE, KnobDomain::PositiveInteger { max: self.max_clusters })
    }
}

impl Rule for ShareRule {
    fn id(&self) -> &str {
        "weight_share"
    }

    fn knob_id(&self) -> &str {
        KNOB_SHARE
    }

    fn transform(&self, model: &Model, value: f64, _: &RuleContext<'_>) -> Result<Model> {
        let mut out = model.clone();
        for layer in out.layers.iter_mut().filter(|l| l.lowrank.is_none() && l.alive_weights() > 0) {
            let k = (value as usize).min(layer.alive_weights());
            let mut trial = layer.clone();
            trial.share_clusters = Some(k);
            if dense_bits(&trial) < dense_bits(layer) {
                share_layer(layer, k)?;
            }
        }
        Ok(out)
    }
}

/// Rule: tensor decomposition at a given rank, realized as matrix SVD
/// factorization of every layer.
#[derive(Clone, Debug, Default)]
pub struct TensorRankRule {
    pub max_rank: u64,
}

impl TensorRankRule {
    pub fn knob(&self) -> Knob {
        Knob::new(KNOB_TENSOR_RANK, KnobDomain::PositiveInteger { max: self.max_rank })
    }
}

impl Rule for TensorRankRule {
    fn id(&self) -> &str {
        "tensor_decompose"
    }

    fn knob_id(&self) -> &str {
        KNOB_TENSOR_RANK
    }

    fn transform(&self, model: &Model, value: f64, ctx: &RuleContext<'_>) -> Result<Model> {
        LowRankRule { max_rank: self.max_rank }.transform(model, value, ctx)
    }
}

//! JSON model checkpoints.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! exact. Shared layers also store their codebook (`centers`, sorted) and one
//! index per alive weight in row-major order; loading checks that both agree
//! with the weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KmrError, Result};
use crate::tensor::{Activation, Adapter, DenseLayer, LowRank, Matrix, Model};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    activation: Activation,
    weights: Matrix,
    mask: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lowrank: Option<LowRank>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<Adapter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    share: Option<ShareRecord>,
    #[serde(default)]
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShareRecord {
    clusters: usize,
    centers: Vec<f64>,
    indices: Vec<usize>,
}

fn format(msg: impl Into<String>) -> KmrError {
    KmrError::Format(msg.into())
}

fn alive_values(layer: &DenseLayer) -> impl Iterator<Item = f64> + '_ {
    layer.weights.as_slice().iter().zip(layer.mask.as_slice()).filter(|(_, &m)| m != 0.0).map(|(&w, _)| w)
}

fn encode_share(layer: &DenseLayer) -> Option<ShareRecord> {
    let clusters = layer.share_clusters?;
    let mut centers: Vec<f64> = alive_values(layer).collect();
    centers.sort_by(f64::total_cmp);
    centers.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let indices = alive_values(layer)
        .map(|w| centers.binary_search_by(|c| c.total_cmp(&w)).expect("center present"))
        .collect();
    Some(ShareRecord { clusters, centers, indices })
}

fn check_share(index: usize, layer: &DenseLayer, share: &ShareRecord) -> Result<()> {
    let bad = |msg: &str| format(format!("layer {index}: share {msg}"));
    if share.clusters == 0 || share.centers.len() > share.clusters {
        return Err(bad("codebook larger than its cluster count"));
    }
    if share.indices.len() != layer.alive_weights() {
        return Err(bad("index count differs from alive weights"));
    }
    for (w, &i) in alive_values(layer).zip(&share.indices) {
        match share.centers.get(i) {
            Some(c) if c.to_bits() == w.to_bits() => {}
            _ => return Err(bad("indices do not reproduce the weights")),
        }
    }
    Ok(())
}

pub fn to_json(model: &Model) -> Result<String> {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        input_dim: model.input_dim,
        output_dim: model.output_dim,
        layers: model
            .layers
            .iter()
            .map(|l| LayerRecord {
                activation: l.activation,
                weights: l.weights.clone(),
                mask: l.mask.clone(),
                bias: l.bias.clone(),
                quant_bits: l.quant_bits,
                lowrank: l.lowrank.clone(),
                adapter: l.adapter.clone(),
                share: encode_share(l),
                frozen: l.frozen,
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Decodes and fully validates a checkpoint.
pub fn from_json(text: &str) -> Result<Model> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| format(format!("checkpoint: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(format(format!("unsupported checkpoint version {}", file.format_version)));
    }
    if file.layers.is_empty() {
        return Err(format("checkpoint has no layers"));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    let mut shares = Vec::new();
    for rec in file.layers {
        let mut layer = DenseLayer::new(rec.weights, rec.bias, rec.activation);
        layer.mask = rec.mask;
        layer.quant_bits = rec.quant_bits;
        layer.lowrank = rec.lowrank;
        layer.adapter = rec.adapter;
        layer.frozen = rec.frozen;
        layer.share_clusters = rec.share.as_ref().map(|s| s.clusters);
        shares.push(rec.share);
        layers.push(layer);
    }
    let model = Model::from_layers(file.input_dim, file.output_dim, layers).map_err(|e| format(e.to_string()))?;
    for (i, share) in shares.iter().enumerate() {
        if let Some(s) = share {
            check_share(i, &model.layers[i], s)?;
        }
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_json(&std::fs::read_to_string(path)?)
}

//! Importance scoring plus unstructured (mask) and structured (unit removal)
//! pruning.
//!
//! Unstructured pruning masks `floor(f · alive)` further weights, taking the
//! lowest scores first and breaking ties by flat index. It never resurrects a
//! masked weight, and the fraction is relative to the weights still alive,
//! so repeated pruning compounds. Layers replaced by a low-rank
//! factorization have no dense weights in play and are skipped.
//!
//! Structured pruning removes whole hidden units (a row of the unit's layer
//! and the matching column of the next layer), so matrices physically shrink.

use serde::{Deserialize, Serialize};

use crate::calculus::{Knob, KnobDomain, Rule, RuleContext};
use crate::error::{domain, structural, Result};
use crate::tensor::{Dataset, LossKind, Matrix, Model};
use crate::train::{gradients, Objective};

pub const KNOB_PRUNE_FRAC: &str = "prune_frac";
pub const KNOB_PRUNE_UNITS: &str = "prune_units_frac";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    #[default]
    Magnitude,
    /// `|w · ∂L/∂w|` on a calibration batch.
    GradientMagnitude,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    #[default]
    PerLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneCriterion {
    #[serde(default)]
    pub kind: CriterionKind,
    #[serde(default)]
    pub scope: Scope,
}

impl PruneCriterion {
    pub const MAGNITUDE: PruneCriterion = PruneCriterion { kind: CriterionKind::Magnitude, scope: Scope::PerLayer };
}

/// Which matrix a score set describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    /// Dense weights (masked entries score 0).
    Dense,
    /// Effective weights, as used by the forward pass.
    Effective,
}

fn weight_scores(model: &Model, kind: CriterionKind, data: &Dataset, target: Target) -> Result<Vec<Matrix>> {
    let grads = match kind {
        CriterionKind::Magnitude => None,
        CriterionKind::GradientMagnitude => {
            if data.is_empty() {
                return Err(domain("gradient criterion needs a nonempty calibration set"));
            }
            Some(gradients(model, data, Objective::Task(LossKind::CrossEntropy))?)
        }
    };
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let w = match target {
                Target::Dense => layer.masked_weights()?,
                Target::Effective => layer.effective_weights()?,
            };
            Ok(match &grads {
                None => w.map(f64::abs),
                Some(g) => w.hadamard(&g.layers[i].effective)?.map(f64::abs),
            })
        })
        .collect()
}

/// Per-weight importance, one matrix per layer shaped like its weights.
pub fn importance_scores(model: &Model, criterion: &PruneCriterion, data: &Dataset) -> Result<Vec<Matrix>> {
    weight_scores(model, criterion.kind, data, Target::Dense)
}

/// Per-unit importance for each hidden layer: the summed scores of the unit's
/// incoming row and outgoing column of effective weights.
pub fn unit_scores(model: &Model, criterion: &PruneCriterion, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let s = weight_scores(model, criterion.kind, data, Target::Effective)?;
    Ok((0..model.layers.len().saturating_sub(1))
        .map(|i| {
            (0..model.layers[i].out_dim())
                .map(|u| s[i].row(u).iter().sum::<f64>() + s[i + 1].column(u).iter().sum::<f64>())
                .collect()
        })
        .collect())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(domain(format!("prune fraction {fraction} outside [0, 1]")));
    }
    Ok(())
}

/// Number of items pruned at `fraction` of `n`.
pub fn prune_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).floor() as usize
}

/// Indices of the `k` lowest `(score, index)` pairs.
fn lowest(candidates: &mut [(f64, usize, usize)], k: usize) -> &[(f64, usize, usize)] {
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    &candidates[..k]
}

pub fn prune_unstructured(model: &Model, fraction: f64, criterion: &PruneCriterion, data: &Dataset) -> Result<Model> {
    check_fraction(fraction)?;
    let mut out = model.clone();
    if fraction == 0.0 {
        return Ok(out);
    }
    let scores = importance_scores(model, criterion, data)?;
    // (score, layer, flat index) of every alive dense weight
    let alive_in = |l: usize| -> Vec<(f64, usize, usize)> {
        let layer = &model.layers[l];
        if layer.lowrank.is_some() {
            return Vec::new();
        }
        (0..layer.mask.len())
            .filter(|&i| layer.mask.as_slice()[i] != 0.0)
            .map(|i| (scores[l].as_slice()[i], l, i))
            .collect()
    };
    let mut chosen = Vec::new();
    match criterion.scope {
        Scope::PerLayer => {
            for l in 0..model.layers.len() {
                let mut c = alive_in(l);
                let k = prune_count(fraction, c.len());
                chosen.extend_from_slice(lowest(&mut c, k));
            }
        }
        Scope::Global => {
            let mut c: Vec<_> = (0..model.layers.len()).flat_map(alive_in).collect();
            let k = prune_count(fraction, c.len());
            chosen.extend_from_slice(lowest(&mut c, k));
        }
    }
    for (_, l, i) in chosen {
        out.layers[l].mask.as_mut_slice()[i] = 0.0;
    }
    Ok(out)
}

pub fn prune_structured(model: &Model, fraction: f64, criterion: &PruneCriterion, data: &Dataset) -> Result<Model> {
    check_fraction(fraction)?;
    if model.layers.len() < 2 {
        return Err(structural("structured pruning needs at least one hidden layer"));
    }
    if fraction == 0.0 {
        return Ok(model.clone());
    }
    let scores = unit_scores(model, criterion, data)?;
    let mut out = model.clone();
    for (i, unit_scores) in scores.iter().enumerate() {
        let units = unit_scores.len();
        let requested = prune_count(fraction, units);
        let k = requested.min(units - 1);
        if k < requested {
            log::warn!("layer {i}: clipping unit removal from {requested} to {k} to keep one unit");
        }
        if k == 0 {
            continue;
        }
        let mut c: Vec<_> = unit_scores.iter().enumerate().map(|(u, &s)| (s, u, 0)).collect();
        let mut removed: Vec<usize> = lowest(&mut c, k).iter().map(|&(_, u, _)| u).collect();
        removed.sort_unstable();
        let keep: Vec<usize> = (0..units).filter(|u| removed.binary_search(u).is_err()).collect();
        remove_units(&mut out, i, &keep);
    }
    out.validate()?;
    Ok(out)
}

/// Keeps only output units `keep` of layer `i` and the matching inputs of
/// layer `i + 1`.
pub(crate) fn remove_units(model: &mut Model, i: usize, keep: &[usize]) {
    let layer = &mut model.layers[i];
    layer.weights = layer.weights.select_rows(keep);
    layer.mask = layer.mask.select_rows(keep);
    if let Some(b) = &mut layer.bias {
        *b = keep.iter().map(|&u| b[u]).collect();
    }
    if let Some(lr) = &mut layer.lowrank {
        lr.u = lr.u.select_rows(keep);
    }
    if let Some(ad) = &mut layer.adapter {
        ad.b = ad.b.select_rows(keep);
    }
    let next = &mut model.layers[i + 1];
    next.weights = next.weights.select_cols(keep);
    next.mask = next.mask.select_cols(keep);
    if let Some(lr) = &mut next.lowrank {
        lr.v = lr.v.select_cols(keep);
    }
    if let Some(ad) = &mut next.adapter {
        ad.a = ad.a.select_cols(keep);
    }
}

fn fraction_knob(id: &str) -> Knob {
    Knob::new(id, KnobDomain::ContinuousInterval { lo: 0.0, hi: 1.0 })
}

/// Rule: unstructured pruning at the knob's fraction.
#[derive(Clone, Debug, Default)]
pub struct UnstructuredPruneRule {
    pub criterion: PruneCriterion,
}

impl UnstructuredPruneRule {
    pub fn knob() -> Knob {
        fraction_knob(KNOB_PRUNE_FRAC)
    }
}

impl Rule for UnstructuredPruneRule {
    fn id(&self) -> &str {
        "prune_unstructured"
    }

    fn knob_id(&self) -> &str {
        KNOB_PRUNE_FRAC
    }

    fn transform(&self, model: &Model, value: f64, ctx: &RuleContext<'_>) -> Result<Model> {
        prune_unstructured(model, value, &self.criterion, ctx.train)
    }
}

/// Rule: structured pruning of hidden units at the knob's fraction.
#[derive(Clone, Debug, Default)]
pub struct StructuredPruneRule {
    pub criterion: PruneCriterion,
}

impl StructuredPruneRule {
    pub fn knob() -> Knob {
        fraction_knob(KNOB_PRUNE_UNITS)
    }
}

impl Rule for StructuredPruneRule {
    fn id(&self) -> &str {
        "prune_structured"
    }

    fn knob_id(&self) -> &str {
        KNOB_PRUNE_UNITS
    }

    fn transform(&self, model: &Model, value: f64, ctx: &RuleContext<'_>) -> Result<Model> {
        prune_structured(model, value, &self.criterion, ctx.train)
    }
}

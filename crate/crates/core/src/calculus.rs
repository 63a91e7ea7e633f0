//! Knobs, rules and instantiations: the vocabulary the engine and policies
//! speak.
//!
//! A [`Rule`] is a deterministic map `(model, value) -> model` bound to one
//! knob. Rules never mutate their input; [`apply_rule`] checks the value
//! against the knob's domain before calling the rule and validates the
//! produced model afterwards.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, KmrError, Result};
use crate::meters::{CostMeter, MeterReading, QualityMeter};
use crate::tensor::{Dataset, Model};

/// Permissible values of a knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnobDomain {
    /// Closed interval `[lo, hi]`.
    ContinuousInterval { lo: f64, hi: f64 },
    DiscreteSet { values: Vec<f64> },
    /// Integers `1..=max`.
    PositiveInteger { max: u64 },
}

impl KnobDomain {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(config(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(KnobDomain::ContinuousInterval { lo, hi })
    }

    pub fn discrete(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(config("discrete knob domain is empty"));
        }
        Ok(KnobDomain::DiscreteSet { values })
    }

    pub fn positive_integer(max: u64) -> Result<Self> {
        if max == 0 {
            return Err(config("positive-integer domain needs max ≥ 1"));
        }
        Ok(KnobDomain::PositiveInteger { max })
    }

    pub fn contains(&self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match self {
            KnobDomain::ContinuousInterval { lo, hi } => *lo <= value && value <= *hi,
            KnobDomain::DiscreteSet { values } => values.contains(&value),
            KnobDomain::PositiveInteger { max } => value.fract() == 0.0 && value >= 1.0 && value <= *max as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knob {
    pub id: String,
    pub domain: KnobDomain,
}

impl Knob {
    pub fn new(id: impl Into<String>, domain: KnobDomain) -> Self {
        Self { id: id.into(), domain }
    }
}

pub fn validate_value(knob: &Knob, value: f64) -> bool {
    knob.domain.contains(value)
}

/// What a rule may read besides the model: the training split, used for
/// gradient-based scoring and for rules that train (distillation).
#[derive(Clone, Copy, Debug)]
pub struct RuleContext<'a> {
    pub train: &'a Dataset,
}

/// A deterministic model transformation driven by one knob.
pub trait Rule: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    fn knob_id(&self) -> &str;
    /// Produces a new model. Must be a pure function of its arguments.
    fn transform(&self, model: &Model, value: f64, ctx: &RuleContext<'_>) -> Result<Model>;
}

pub type RuleRef = Arc<dyn Rule>;

/// Checks `value ∈ Dom(knob)`, applies the rule to a copy-on-write view of
/// `model`, and validates the result.
pub fn apply_rule(rule: &dyn Rule, model: &Model, knob: &Knob, value: f64, ctx: &RuleContext<'_>) -> Result<Model> {
    if rule.knob_id() != knob.id {
        return Err(config(format!("rule `{}` is bound to `{}`, not `{}`", rule.id(), rule.knob_id(), knob.id)));
    }
    if !validate_value(knob, value) {
        return Err(domain(format!("value {value} outside the domain of knob `{}`", knob.id)));
    }
    let out = rule.transform(model, value, ctx).map_err(|e| match e {
        KmrError::Rule { .. } | KmrError::Domain(_) | KmrError::Config(_) => e,
        other => KmrError::Rule { rule: rule.id().to_string(), reason: other.to_string() },
    })?;
    out.validate().map_err(|e| KmrError::Rule { rule: rule.id().to_string(), reason: e.to_string() })?;
    Ok(out)
}

/// Finds the unique rule bound to `knob_id`.
pub fn get_rule<'a>(knob_id: &str, rules: &'a [RuleRef]) -> Result<&'a RuleRef> {
    let mut found = rules.iter().filter(|r| r.knob_id() == knob_id);
    match (found.next(), found.next()) {
        (Some(r), None) => Ok(r),
        (None, _) => Err(config(format!("no rule registered for knob `{knob_id}`"))),
        (Some(_), Some(_)) => Err(config(format!("several rules registered for knob `{knob_id}`"))),
    }
}

pub fn is_feasible(model: &Model, budget: f64, meter: CostMeter) -> bool {
    meter.measure(model) <= budget
}

/// One method family packaged as knobs, rules and the meters it reports.
#[derive(Clone, Debug)]
pub struct Instantiation {
    pub name: String,
    pub knobs: Vec<Knob>,
    pub rules: Vec<RuleRef>,
    pub cost_meters: Vec<CostMeter>,
    pub quality_meters: Vec<QualityMeter>,
}

impl Instantiation {
    /// Registers knobs and rules, enforcing unique knob ids and exactly one
    /// rule per knob.
    pub fn new(
        name: impl Into<String>,
        knobs: Vec<Knob>,
        rules: Vec<RuleRef>,
        cost_meters: Vec<CostMeter>,
        quality_meters: Vec<QualityMeter>,
    ) -> Result<Self> {
        let name = name.into();
        let mut seen = BTreeMap::new();
        for k in &knobs {
            if seen.insert(k.id.as_str(), 0usize).is_some() {
                return Err(config(format!("{name}: duplicate knob id `{}`", k.id)));
            }
        }
        for r in &rules {
            let count = seen
                .get_mut(r.knob_id())
                .ok_or_else(|| config(format!("{name}: rule `{}` targets unknown knob `{}`", r.id(), r.knob_id())))?;
            *count += 1;
        }
        for (knob, count) in seen {
            if count != 1 {
                return Err(config(format!("{name}: knob `{knob}` has {count} rules, expected exactly one")));
            }
        }
        Ok(Self { name, knobs, rules, cost_meters, quality_meters })
    }

    pub fn knob(&self, id: &str) -> Option<&Knob> {
        self.knobs.iter().find(|k| k.id == id)
    }
}

/// A registered knob together with its rule and owning instantiation.
#[derive(Clone, Debug)]
pub struct Binding {
    pub knob: Knob,
    pub rule: RuleRef,
    pub instantiation: String,
}

/// The union of one or more instantiations, keyed by knob id.
#[derive(Clone, Debug, Default)]
pub struct RuleSet {
    bindings: BTreeMap<String, Binding>,
}

impl RuleSet {
    pub fn compose(insts: &[Instantiation]) -> Result<Self> {
        if insts.is_empty() {
            return Err(config("no instantiations given"));
        }
        let mut bindings = BTreeMap::new();
        for inst in insts {
            for knob in &inst.knobs {
                let rule = get_rule(&knob.id, &inst.rules)?.clone();
                let binding = Binding { knob: knob.clone(), rule, instantiation: inst.name.clone() };
                if let Some(prev) = bindings.insert(knob.id.clone(), binding) {
                    return Err(config(format!(
                        "knob `{}` is defined by both `{}` and `{}`",
                        knob.id, prev.instantiation, inst.name
                    )));
                }
            }
        }
        Ok(Self { bindings })
    }

    pub fn binding(&self, knob_id: &str) -> Result<&Binding> {
        self.bindings.get(knob_id).ok_or_else(|| config(format!("unknown knob `{knob_id}`")))
    }

    /// Bindings in lexicographic knob-id order.
    pub fn bindings(&self) -> impl Iterator<Item = &Binding> {
        self.bindings.values()
    }

    /// Validates and applies the rule bound to `knob_id`.
    pub fn apply(&self, model: &Model, knob_id: &str, value: f64, ctx: &RuleContext<'_>) -> Result<Model> {
        let b = self.binding(knob_id)?;
        apply_rule(b.rule.as_ref(), model, &b.knob, value, ctx)
    }
}

/// Applies `(knob, value)` steps in order from `m0`.
pub fn apply_sequence(m0: &Model, steps: &[(String, f64)], rules: &RuleSet, ctx: &RuleContext<'_>) -> Result<Model> {
    steps.iter().try_fold(m0.clone(), |m, (k, v)| rules.apply(&m, k, *v, ctx))
}

/// Wall-clock split of one engine iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    /// Policy selection (including candidate simulation) and rule application.
    pub rule_seconds: f64,
    pub finetune_seconds: f64,
    /// Meter evaluation and bookkeeping.
    pub overhead_seconds: f64,
}

/// One accepted step of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformationRecord {
    /// 1-based, contiguous.
    pub step: usize,
    pub knob_id: String,
    pub value: f64,
    pub rule_id: String,
    pub instantiation: String,
    pub pre_meters: MeterReading,
    pub post_meters: MeterReading,
    /// Policy score of the chosen candidate, when the policy computes one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub timing: StepTiming,
}

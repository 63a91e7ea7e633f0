//! The budgeted optimization loop.
//!
//! While the model costs more than the budget and fewer than `N` steps have
//! been accepted, the policy proposes a `(knob, value)`, the bound rule is
//! applied, and the result is accepted only if its cost is strictly lower.
//! A non-improving proposal ends the run without being applied. Fine-tuning
//! after an accepted step may change quality but never cost.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calculus::{validate_value, Instantiation, RuleContext, RuleSet, StepTiming, TransformationRecord};
use crate::error::{config, domain, structural, Result};
use crate::meters::{aggregate, AggregateSpec, CostMeter, MeterReading, QualityMeter};
use crate::policy::{Policy, PolicyContext, Selection};
use crate::tensor::{Dataset, LossKind, Model, Split};
use crate::train::{train, Objective, TrainConfig};

/// Train and validation splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub validation: Dataset,
}

impl TaskData {
    pub fn new(train: Dataset, validation: Dataset) -> Result<Self> {
        if train.split != Split::Train || validation.split != Split::Validation {
            return Err(domain("expected a train split and a validation split"));
        }
        if train.classes != validation.classes || train.dims() != validation.dims() {
            return Err(structural("train and validation splits disagree on dims or classes"));
        }
        Ok(Self { train, validation })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub budget: f64,
    pub max_iterations: usize,
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default = "default_cost")]
    pub cost_meter: CostMeter,
    #[serde(default = "default_quality")]
    pub quality_meter: QualityMeter,
    /// Replaces the single meters by weighted sums when present.
    #[serde(default)]
    pub aggregate: Option<AggregateSpec>,
}

fn default_cost() -> CostMeter {
    CostMeter::ParamCount
}

fn default_quality() -> QualityMeter {
    QualityMeter::ValAccuracy
}

impl EngineConfig {
    pub fn new(budget: f64, max_iterations: usize) -> Self {
        Self {
            budget,
            max_iterations,
            finetune: None,
            cost_meter: default_cost(),
            quality_meter: default_quality(),
            aggregate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) || !self.budget.is_finite() {
            return Err(config(format!("budget must be finite and ≥ 0, got {}", self.budget)));
        }
        if self.max_iterations == 0 {
            return Err(config("max_iterations must be ≥ 1"));
        }
        if let Some(ft) = &self.finetune {
            ft.validate().map_err(|e| config(format!("finetune: {e}")))?;
        }
        if let Some(agg) = &self.aggregate {
            agg.validate()?;
            agg.cost_meters()?;
            agg.quality_meters()?;
        }
        Ok(())
    }

    pub fn evaluator<'a>(&self, validation: &'a Dataset) -> Evaluator<'a> {
        Evaluator { validation, cost: self.cost_meter, quality: self.quality_meter, aggregate: self.aggregate.clone() }
    }
}

/// Reads the configured cost and quality of a model.
#[derive(Clone, Debug)]
pub struct Evaluator<'a> {
    pub validation: &'a Dataset,
    pub cost: CostMeter,
    pub quality: QualityMeter,
    pub aggregate: Option<AggregateSpec>,
}

impl Evaluator<'_> {
    pub fn cost(&self, model: &Model) -> Result<f64> {
        match &self.aggregate {
            None => Ok(self.cost.measure(model)),
            Some(agg) => Ok(agg
                .cost_weights
                .iter()
                .map(|(id, w)| Ok(w * id.parse::<CostMeter>()?.measure(model)))
                .sum::<Result<f64>>()?),
        }
    }

    pub fn measure(&self, model: &Model) -> Result<MeterReading> {
        let Some(agg) = &self.aggregate else {
            return Ok(MeterReading {
                cost: self.cost.measure(model),
                quality: self.quality.measure(model, self.validation)?,
                cost_meter_id: self.cost.id().into(),
                quality_meter_id: self.quality.id().into(),
            });
        };
        let mut readings = Vec::new();
        for c in agg.cost_meters()? {
            readings.push(MeterReading {
                cost: c.measure(model),
                quality: f64::NAN,
                cost_meter_id: c.id().into(),
                quality_meter_id: String::new(),
            });
        }
        for q in agg.quality_meters()? {
            readings.push(MeterReading {
                cost: f64::NAN,
                quality: q.measure(model, self.validation)?,
                cost_meter_id: String::new(),
                quality_meter_id: q.id().into(),
            });
        }
        aggregate(&readings, agg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Success(Model),
    /// The budget was not reached; carries the last accepted model.
    Failure { last: Model },
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success(_))
    }

    pub fn model(&self) -> &Model {
        match self {
            Outcome::Success(m) | Outcome::Failure { last: m } => m,
        }
    }
}

/// A proposal the engine evaluated but did not accept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedStep {
    pub knob_id: String,
    pub value: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    BudgetMet,
    MaxIterations,
    /// The proposal did not lower cost.
    NoProgress { rejected: RejectedStep },
    /// The policy had nothing left to propose.
    PolicyExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub outcome: Outcome,
    pub log: Vec<TransformationRecord>,
    pub initial: MeterReading,
    pub final_reading: MeterReading,
    pub stop_reason: StopReason,
}

impl RunResult {
    /// Costs `C(M₀), C(M₁), …` of the initial and every accepted model.
    pub fn cost_trajectory(&self) -> Vec<f64> {
        std::iter::once(self.initial.cost).chain(self.log.iter().map(|r| r.post_meters.cost)).collect()
    }
}

/// Receives run events as they happen, e.g. to stream a log to disk.
pub trait RunSink {
    fn on_start(&mut self, _initial: &MeterReading) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _record: &TransformationRecord) -> Result<()> {
        Ok(())
    }
    fn on_finish(&mut self, _result: &RunResult) -> Result<()> {
        Ok(())
    }
}

/// Discards every event.
#[derive(Debug, Default)]
pub struct NullSink;

impl RunSink for NullSink {}

/// Mini-batch SGD that keeps structure (and so every cost meter) fixed.
pub fn fine_tune(model: &Model, train_split: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if train_split.is_empty() {
        return Err(domain("fine-tuning needs a nonempty train split"));
    }
    train(model, train_split, cfg, Objective::Task(LossKind::CrossEntropy))
}

/// Single-instantiation run.
pub fn budgeted_kmr(
    m0: &Model,
    cfg: &EngineConfig,
    inst: &Instantiation,
    policy: &mut dyn Policy,
    data: &TaskData,
    sink: &mut dyn RunSink,
) -> Result<RunResult> {
    composed_budgeted_kmr(m0, cfg, std::slice::from_ref(inst), policy, data, sink)
}

/// Run over the union of several instantiations' knobs and rules.
pub fn composed_budgeted_kmr(
    m0: &Model,
    cfg: &EngineConfig,
    insts: &[Instantiation],
    policy: &mut dyn Policy,
    data: &TaskData,
    sink: &mut dyn RunSink,
) -> Result<RunResult> {
    let rules = RuleSet::compose(insts)?;
    run_with_rules(m0, cfg, &rules, policy, data, sink)
}

pub fn run_with_rules(
    m0: &Model,
    cfg: &EngineConfig,
    rules: &RuleSet,
    policy: &mut dyn Policy,
    data: &TaskData,
    sink: &mut dyn RunSink,
) -> Result<RunResult> {
    cfg.validate()?;
    m0.validate()?;
    let eval = cfg.evaluator(&data.validation);
    let rule_ctx = RuleContext { train: &data.train };
    let initial = eval.measure(m0)?;
    sink.on_start(&initial)?;

    let mut current = m0.clone();
    let mut reading = initial.clone();
    let mut log: Vec<TransformationRecord> = Vec::new();
    let stop_reason = loop {
        if reading.cost <= cfg.budget {
            break StopReason::BudgetMet;
        }
        if log.len() >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
        let started = Instant::now();
        let ctx = PolicyContext { model: &current, reading: &reading, rules, evaluator: &eval, rule_ctx, budget: cfg.budget };
        let (knob_id, value, score) = match policy.select(&ctx)? {
            Selection::Exhausted => break StopReason::PolicyExhausted,
            Selection::Apply { knob_id, value, score } => (knob_id, value, score),
        };
        let binding = rules
            .binding(&knob_id)
            .map_err(|_| config(format!("policy proposed unknown knob `{knob_id}`")))?;
        if !validate_value(&binding.knob, value) {
            return Err(config(format!("policy proposed {value} outside the domain of `{knob_id}`")));
        }
        let candidate = rules.apply(&current, &knob_id, value, &rule_ctx)?;
        let rule_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let cost = eval.cost(&candidate)?;
        if cost >= reading.cost {
            break StopReason::NoProgress { rejected: RejectedStep { knob_id, value, cost } };
        }
        let mut overhead_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let step = log.len() + 1;
        let accepted = match &cfg.finetune {
            Some(ft) => {
                let ft = TrainConfig { seed: ft.seed.wrapping_add(step as u64), ..ft.clone() };
                fine_tune(&candidate, &data.train, &ft)?
            }
            None => candidate,
        };
        let finetune_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let post = eval.measure(&accepted)?;
        if post.cost != cost {
            return Err(structural(format!("fine-tuning changed cost from {cost} to {}", post.cost)));
        }
        overhead_seconds += started.elapsed().as_secs_f64();

        let record = TransformationRecord {
            step,
            knob_id,
            value,
            rule_id: binding.rule.id().to_string(),
            instantiation: binding.instantiation.clone(),
            pre_meters: reading,
            post_meters: post.clone(),
            score,
            timing: StepTiming { rule_seconds, finetune_seconds, overhead_seconds },
        };
        sink.on_step(&record)?;
        log.push(record);
        current = accepted;
        reading = post;
    };

    let outcome = if reading.cost <= cfg.budget { Outcome::Success(current) } else { Outcome::Failure { last: current } };
    let result = RunResult { outcome, log, initial, final_reading: reading, stop_reason };
    sink.on_finish(&result)?;
    Ok(result)
}

/// Re-applies a run's accepted steps to `m0` without fine-tuning.
pub fn replay(m0: &Model, log: &[TransformationRecord], rules: &RuleSet, ctx: &RuleContext<'_>) -> Result<Model> {
    log.iter().try_fold(m0.clone(), |m, r| rules.apply(&m, &r.knob_id, r.value, ctx))
}

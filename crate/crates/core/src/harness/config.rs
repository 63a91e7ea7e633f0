//! JSON experiment configuration and the code that turns it into a run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calculus::{Instantiation, Knob, RuleRef, RuleSet};
use crate::engine::{composed_budgeted_kmr, EngineConfig, RunResult, RunSink, TaskData};
use crate::error::{config, Result};
use crate::harness::data::{generate_dataset, DatasetSpec};
use crate::meters::{AggregateSpec, CostMeter, QualityMeter};
use crate::methods::arch::{AdapterRule, LowRankRule, ResizeAxis, ResizeRule};
use crate::methods::distillation::DistillRule;
use crate::methods::pruning::{PruneCriterion, StructuredPruneRule, UnstructuredPruneRule};
use crate::methods::quantization::QuantizeRule;
use crate::methods::sharing::{ShareRule, TensorRankRule};
use crate::policy::PolicySpec;
use crate::tensor::{LossKind, Model};
use crate::train::{train, Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    /// Training applied to the freshly initialised model before the run.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    pub instantiations: Vec<InstantiationSpec>,
    pub policy: PolicySpec,
    pub engine: EngineSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub run_log: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSpec {
    Absolute(f64),
    /// Multiple of the initial model's cost.
    FractionOfInitial(f64),
}

impl BudgetSpec {
    pub fn resolve(self, initial_cost: f64) -> Result<f64> {
        let b = match self {
            BudgetSpec::Absolute(b) => b,
            BudgetSpec::FractionOfInitial(f) => f * initial_cost,
        };
        if !(b >= 0.0) || !b.is_finite() {
            return Err(config(format!("budget resolves to {b}")));
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub budget: BudgetSpec,
    pub max_iterations: usize,
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default = "default_cost")]
    pub cost_meter: CostMeter,
    #[serde(default = "default_quality")]
    pub quality_meter: QualityMeter,
    #[serde(default)]
    pub aggregate: Option<AggregateSpec>,
}

fn default_cost() -> CostMeter {
    CostMeter::ParamCount
}

fn default_quality() -> QualityMeter {
    QualityMeter::ValAccuracy
}

impl EngineSpec {
    pub fn resolve(&self, budget: f64) -> EngineConfig {
        EngineConfig {
            budget,
            max_iterations: self.max_iterations,
            finetune: self.finetune.clone(),
            cost_meter: self.cost_meter,
            quality_meter: self.quality_meter,
            aggregate: self.aggregate.clone(),
        }
    }
}

fn default_max() -> u64 {
    64
}

fn default_temperature() -> f64 {
    2.0
}

fn default_loss_weight() -> f64 {
    0.5
}

fn default_distill_train() -> TrainConfig {
    TrainConfig::new(20, 0.05, 16, 0)
}

/// One method family. Rule seeds are derived from the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstantiationSpec {
    /// Knobs `prune_frac` and `prune_units_frac`.
    Prune {
        #[serde(default)]
        criterion: PruneCriterion,
    },
    /// Knob `quant_bits`.
    Quantize,
    /// Knob `student_width`.
    Distill {
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_loss_weight")]
        loss_weight: f64,
        #[serde(default = "default_distill_train")]
        train: TrainConfig,
        #[serde(default = "default_max")]
        max_width: u64,
    },
    /// Knobs `lowrank_rank`, `adapter_rank`, `depth` and `width`.
    Arch {
        #[serde(default = "default_max")]
        max_rank: u64,
        #[serde(default = "default_max")]
        max_depth: u64,
        #[serde(default = "default_max")]
        max_width: u64,
    },
    /// Knobs `share_clusters` and `tensor_rank`.
    Other {
        #[serde(default = "default_max")]
        max_clusters: u64,
        #[serde(default = "default_max")]
        max_rank: u64,
    },
}

impl InstantiationSpec {
    pub fn name(&self) -> &'static str {
        match self {
            InstantiationSpec::Prune { .. } => "prune",
            InstantiationSpec::Quantize => "quantize",
            InstantiationSpec::Distill { .. } => "distill",
            InstantiationSpec::Arch { .. } => "arch",
            InstantiationSpec::Other { .. } => "other",
        }
    }

    pub fn build(&self, seed: u64) -> Result<Instantiation> {
        let q = vec![QualityMeter::ValAccuracy, QualityMeter::NegValLoss];
        let (knobs, rules, costs): (Vec<Knob>, Vec<RuleRef>, Vec<CostMeter>) = match self {
            InstantiationSpec::Prune { criterion } => (
                vec![UnstructuredPruneRule::knob(), StructuredPruneRule::knob()],
                vec![
                    Arc::new(UnstructuredPruneRule { criterion: *criterion }),
                    Arc::new(StructuredPruneRule { criterion: *criterion }),
                ],
                vec![CostMeter::ParamCount, CostMeter::Flops],
            ),
            InstantiationSpec::Quantize => {
                (vec![QuantizeRule::knob()], vec![Arc::new(QuantizeRule)], vec![CostMeter::MemoryBytes])
            }
            InstantiationSpec::Distill { temperature, loss_weight, train, max_width } => {
                let rule = DistillRule {
                    temperature: *temperature,
                    loss_weight: *loss_weight,
                    train: TrainConfig { seed: seed ^ train.seed, ..train.clone() },
                    max_width: *max_width,
                };
                (vec![rule.knob()], vec![Arc::new(rule)], vec![CostMeter::ParamCount])
            }
            InstantiationSpec::Arch { max_rank, max_depth, max_width } => {
                let lowrank = LowRankRule { max_rank: *max_rank };
                let adapter = AdapterRule { max_rank: *max_rank, seed };
                let depth = ResizeRule { axis: ResizeAxis::Depth, max: *max_depth, seed };
                let width = ResizeRule { axis: ResizeAxis::Width, max: *max_width, seed };
                (
                    vec![lowrank.knob(), adapter.knob(), depth.knob(), width.knob()],
                    vec![Arc::new(lowrank), Arc::new(adapter), Arc::new(depth), Arc::new(width)],
                    vec![CostMeter::ParamCount],
                )
            }
            InstantiationSpec::Other { max_clusters, max_rank } => {
                let share = ShareRule { max_clusters: *max_clusters };
                let tensor = TensorRankRule { max_rank: *max_rank };
                (
                    vec![share.knob(), tensor.knob()],
                    vec![Arc::new(share), Arc::new(tensor)],
                    vec![CostMeter::MemoryBytes],
                )
            }
        };
        Instantiation::new(self.name(), knobs, rules, costs, q)
    }
}

/// Everything a run needs, built from a config.
#[derive(Debug)]
pub struct Prepared {
    pub data: TaskData,
    pub model: Model,
    pub instantiations: Vec<Instantiation>,
    pub rules: RuleSet,
    pub engine: EngineConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build_instantiations(&self) -> Result<Vec<Instantiation>> {
        if self.instantiations.is_empty() {
            return Err(config("no instantiations configured"));
        }
        self.instantiations.iter().map(|s| s.build(self.seed)).collect()
    }

    /// Checks everything that can be checked without generating data or
    /// training.
    pub fn validate(&self) -> Result<RuleSet> {
        self.dataset.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(config("hidden layer sizes must be ≥ 1"));
        }
        if let Some(p) = &self.pretrain {
            p.validate().map_err(|e| config(format!("pretrain: {e}")))?;
        }
        let rules = RuleSet::compose(&self.build_instantiations()?)?;
        self.policy.validate(&rules)?;
        self.engine.resolve(0.0).validate()?;
        let (BudgetSpec::FractionOfInitial(f) | BudgetSpec::Absolute(f)) = self.engine.budget;
        if !(f >= 0.0) || !f.is_finite() {
            return Err(config(format!("budget must be finite and ≥ 0, got {f}")));
        }
        Ok(rules)
    }

    /// Generates data, builds and pretrains the model, and resolves the budget.
    pub fn prepare(&self) -> Result<Prepared> {
        let rules = self.validate()?;
        let data = generate_dataset(&self.dataset, self.seed)?;
        let mut model = Model::mlp(self.dataset.dims, &self.model.hidden, self.dataset.classes, self.seed)?;
        if let Some(p) = &self.pretrain {
            let p = TrainConfig { seed: self.seed ^ p.seed, ..p.clone() };
            model = train(&model, &data.train, &p, Objective::Task(LossKind::CrossEntropy))?;
        }
        let probe = self.engine.resolve(0.0);
        let initial_cost = probe.evaluator(&data.validation).cost(&model)?;
        let engine = self.engine.resolve(self.engine.budget.resolve(initial_cost)?);
        Ok(Prepared { data, model, instantiations: self.build_instantiations()?, rules, engine })
    }

    pub fn run(&self, prepared: &Prepared, sink: &mut dyn RunSink) -> Result<RunResult> {
        let mut policy = self.policy.build()?;
        composed_budgeted_kmr(&prepared.model, &prepared.engine, &prepared.instantiations, policy.as_mut(), &prepared.data, sink)
    }
}

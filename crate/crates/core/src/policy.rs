//! Policies choosing the next `(knob, value)`.
//!
//! Greedy and dual-controller policies simulate every grid candidate on a
//! copy of the model (no fine-tuning) and keep only those that lower cost.
//! Ties are broken by larger cost reduction, then knob id, then smaller value.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calculus::{validate_value, RuleContext, RuleSet};
use crate::engine::Evaluator;
use crate::error::{config, Result};
use crate::meters::MeterReading;
use crate::tensor::Model;

/// Candidate values per knob id.
pub type CandidateGrid = BTreeMap<String, Vec<f64>>;

/// What a policy sees when asked for the next step.
pub struct PolicyContext<'a> {
    pub model: &'a Model,
    pub reading: &'a MeterReading,
    pub rules: &'a RuleSet,
    pub evaluator: &'a Evaluator<'a>,
    pub rule_ctx: RuleContext<'a>,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Apply { knob_id: String, value: f64, score: Option<f64> },
    /// Nothing left to try.
    Exhausted,
}

pub trait Policy {
    fn select(&mut self, ctx: &PolicyContext<'_>) -> Result<Selection>;
}

/// A simulated candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub knob_id: String,
    pub value: f64,
    pub cost: f64,
    pub quality: f64,
}

/// Checks that every grid knob is bound and every value lies in its domain.
pub fn validate_grid(grid: &CandidateGrid, rules: &RuleSet) -> Result<()> {
    if grid.is_empty() {
        return Err(config("candidate grid is empty"));
    }
    for (knob_id, values) in grid {
        let b = rules.binding(knob_id)?;
        if values.is_empty() {
            return Err(config(format!("no candidate values for knob `{knob_id}`")));
        }
        if let Some(v) = values.iter().find(|&&v| !validate_value(&b.knob, v)) {
            return Err(config(format!("candidate {v} outside the domain of `{knob_id}`")));
        }
    }
    Ok(())
}

/// Applies every grid entry to a copy of the model and measures the result.
pub fn simulate_candidates(grid: &CandidateGrid, ctx: &PolicyContext<'_>) -> Result<Vec<Candidate>> {
    validate_grid(grid, ctx.rules)?;
    let mut out = Vec::new();
    for (knob_id, values) in grid {
        for &value in values {
            let m = ctx.rules.apply(ctx.model, knob_id, value, &ctx.rule_ctx)?;
            let r = ctx.evaluator.measure(&m)?;
            out.push(Candidate { knob_id: knob_id.clone(), value, cost: r.cost, quality: r.quality });
        }
    }
    Ok(out)
}

/// Picks the highest-scoring cost-reducing candidate.
///
/// `score` receives a candidate and its cost reduction `ΔC > 0`.
pub fn best_by(current: &MeterReading, cands: &[Candidate], score: impl Fn(&Candidate, f64) -> f64) -> Option<(Candidate, f64)> {
    let mut best: Option<(Candidate, f64, f64)> = None;
    for c in cands {
        let dc = current.cost - c.cost;
        if !(dc > 0.0) {
            continue;
        }
        let s = score(c, dc);
        let better = match &best {
            None => true,
            Some((b, bs, bdc)) => s
                .total_cmp(bs)
                .then(dc.total_cmp(bdc))
                .then(b.knob_id.cmp(&c.knob_id))
                .then(b.value.total_cmp(&c.value))
                == Ordering::Greater,
        };
        if better {
            best = Some((c.clone(), s, dc));
        }
    }
    best.map(|(c, s, _)| (c, s))
}

/// Highest quality change per unit of cost removed, `ΔQ/ΔC`.
#[derive(Clone, Debug)]
pub struct Greedy {
    pub grid: CandidateGrid,
}

impl Greedy {
    pub fn new(grid: CandidateGrid) -> Self {
        Self { grid }
    }
}

impl Policy for Greedy {
    fn select(&mut self, ctx: &PolicyContext<'_>) -> Result<Selection> {
        let cands = simulate_candidates(&self.grid, ctx)?;
        let q0 = ctx.reading.quality;
        Ok(match best_by(ctx.reading, &cands, |c, dc| (c.quality - q0) / dc) {
            Some((c, s)) => Selection::Apply { knob_id: c.knob_id, value: c.value, score: Some(s) },
            None => Selection::Exhausted,
        })
    }
}

/// Replays a fixed list of steps.
#[derive(Clone, Debug)]
pub struct Scheduled {
    steps: Vec<(String, f64)>,
    cursor: usize,
}

impl Scheduled {
    pub fn new(steps: Vec<(String, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(config("schedule is empty"));
        }
        Ok(Self { steps, cursor: 0 })
    }

    pub fn next_step(&mut self) -> Option<(String, f64)> {
        let s = self.steps.get(self.cursor).cloned();
        self.cursor += s.is_some() as usize;
        s
    }
}

impl Policy for Scheduled {
    fn select(&mut self, _: &PolicyContext<'_>) -> Result<Selection> {
        Ok(match self.next_step() {
            Some((knob_id, value)) => Selection::Apply { knob_id, value, score: None },
            None => Selection::Exhausted,
        })
    }
}

/// Maximizes `Q′ − λ·C′`, raising `λ` by `(1 + step)` at each selection made
/// while the model is over budget.
#[derive(Clone, Debug)]
pub struct Dual {
    pub grid: CandidateGrid,
    pub lambda: f64,
    pub lambda_step: f64,
    /// `λ` before each selection.
    pub history: Vec<f64>,
}

impl Dual {
    pub fn new(grid: CandidateGrid, lambda0: f64, lambda_step: f64) -> Result<Self> {
        if !(lambda0 >= 0.0) || !lambda0.is_finite() {
            return Err(config(format!("λ₀ must be finite and ≥ 0, got {lambda0}")));
        }
        if !(lambda_step >= 0.0) || !lambda_step.is_finite() {
            return Err(config(format!("λ step must be finite and ≥ 0, got {lambda_step}")));
        }
        Ok(Self { grid, lambda: lambda0, lambda_step, history: Vec::new() })
    }

    /// Chooses among already-simulated candidates at the current `λ`.
    pub fn choose(&self, current: &MeterReading, cands: &[Candidate]) -> Option<(Candidate, f64)> {
        best_by(current, cands, |c, _| c.quality - self.lambda * c.cost)
    }
}

impl Policy for Dual {
    fn select(&mut self, ctx: &PolicyContext<'_>) -> Result<Selection> {
        let cands = simulate_candidates(&self.grid, ctx)?;
        self.history.push(self.lambda);
        let choice = self.choose(ctx.reading, &cands);
        if ctx.reading.cost > ctx.budget {
            self.lambda *= 1.0 + self.lambda_step;
        }
        Ok(match choice {
            Some((c, s)) => Selection::Apply { knob_id: c.knob_id, value: c.value, score: Some(s) },
            None => Selection::Exhausted,
        })
    }
}

/// Serializable policy description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Greedy { grid: CandidateGrid },
    Scheduled { steps: Vec<(String, f64)> },
    Dual { grid: CandidateGrid, lambda0: f64, lambda_step: f64 },
}

impl PolicySpec {
    pub fn build(&self) -> Result<Box<dyn Policy>> {
        Ok(match self {
            PolicySpec::Greedy { grid } => Box::new(Greedy::new(grid.clone())),
            PolicySpec::Scheduled { steps } => Box::new(Scheduled::new(steps.clone())?),
            PolicySpec::Dual { grid, lambda0, lambda_step } => Box::new(Dual::new(grid.clone(), *lambda0, *lambda_step)?),
        })
    }

    /// Checks every referenced knob and value against `rules`.
    pub fn validate(&self, rules: &RuleSet) -> Result<()> {
        match self {
            PolicySpec::Greedy { grid } | PolicySpec::Dual { grid, .. } => validate_grid(grid, rules)?,
            PolicySpec::Scheduled { steps } => {
                if steps.is_empty() {
                    return Err(config("schedule is empty"));
                }
                for (k, v) in steps {
                    let b = rules.binding(k)?;
                    if !validate_value(&b.knob, *v) {
                        return Err(config(format!("scheduled value {v} outside the domain of `{k}`")));
                    }
                }
            }
        }
        self.build().map(|_| ())
    }
}

//! Logit distillation from a frozen teacher into a freshly initialised student.

use serde::{Deserialize, Serialize};

use crate::calculus::{Knob, KnobDomain, Rule, RuleContext};
use crate::error::{config, domain, structural, Result};
use crate::tensor::loss::{check_batch, cross_entropy_with_grad, softmax_scaled};
use crate::tensor::{kl_div, Dataset, Matrix, Model};
use crate::train::{train, Objective, TrainConfig};

pub const KNOB_STUDENT_WIDTH: &str = "student_width";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillKnobs {
    /// Hidden layer widths of the student.
    pub student_spec: Vec<usize>,
    pub temperature: f64,
    /// Weight of the KL term; `1 − loss_weight` goes to cross-entropy.
    pub loss_weight: f64,
}

impl DistillKnobs {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(domain(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.loss_weight) {
            return Err(domain(format!("loss_weight must lie in [0, 1], got {}", self.loss_weight)));
        }
        if self.student_spec.iter().any(|&w| w == 0) {
            return Err(domain("student layer sizes must be ≥ 1"));
        }
        Ok(())
    }
}

/// `(1 − w)·CE(student, y) + w·KL(σ(student/T) ‖ σ(teacher/T))`, batch-averaged,
/// with no `T²` rescaling.
pub fn kd_loss(student: &Matrix, teacher: &Matrix, labels: &[usize], temperature: f64, loss_weight: f64) -> Result<f64> {
    Ok(kd_loss_with_grad(student, teacher, labels, temperature, loss_weight)?.0)
}

/// [`kd_loss`] and its gradient with respect to the student logits.
pub fn kd_loss_with_grad(
    student: &Matrix,
    teacher: &Matrix,
    labels: &[usize],
    temperature: f64,
    loss_weight: f64,
) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(structural(format!("student logits {:?} vs teacher {:?}", student.shape(), teacher.shape())));
    }
    check_batch(student, labels.len())?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(domain(format!("temperature must be > 0, got {temperature}")));
    }
    if !(0.0..=1.0).contains(&loss_weight) {
        return Err(domain(format!("loss_weight must lie in [0, 1], got {loss_weight}")));
    }
    let (ce, ce_grad) = cross_entropy_with_grad(student, labels)?;
    let (kl, kl_grad) = kl_term(student, teacher, temperature)?;
    let value = (1.0 - loss_weight) * ce + loss_weight * kl;
    let grad = ce_grad.scale(1.0 - loss_weight).add(&kl_grad.scale(loss_weight))?;
    Ok((value, grad))
}

/// Mean temperature-scaled KL and its gradient.
///
/// For `p = σ(z/T)` and a fixed `q`, `∂KL/∂z_j = p_j·(ln p_j − ln q_j − KL)/T`.
fn kl_term(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let n = student.rows() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for r in 0..student.rows() {
        let p = softmax_scaled(student.row(r), temperature);
        let q = softmax_scaled(teacher.row(r), temperature);
        let kl = kl_div(&p, &q)?;
        total += kl;
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            if p[j] > 0.0 {
                let log_ratio = p[j].ln() - q[j].max(crate::tensor::loss::KL_FLOOR).ln();
                *g = p[j] * (log_ratio - kl) / temperature / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Trains a student of shape `knobs.student_spec` against `teacher`.
///
/// The student is initialised from `cfg.seed`; the teacher is only read.
pub fn distill(teacher: &Model, knobs: &DistillKnobs, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    knobs.validate()?;
    if data.classes != teacher.output_dim {
        return Err(config(format!(
            "teacher has {} outputs but the data has {} classes",
            teacher.output_dim, data.classes
        )));
    }
    if data.dims() != teacher.input_dim {
        return Err(config(format!("teacher takes {} inputs, data has {}", teacher.input_dim, data.dims())));
    }
    let student = Model::mlp(teacher.input_dim, &knobs.student_spec, teacher.output_dim, cfg.seed)?;
    let objective = Objective::Distill { teacher, temperature: knobs.temperature, loss_weight: knobs.loss_weight };
    train(&student, data, cfg, objective)
}

/// Rule: replace the model by a distilled student whose hidden layers all have
/// the knob's width (one hidden layer per teacher hidden layer, at least one).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRule {
    pub temperature: f64,
    pub loss_weight: f64,
    pub train: TrainConfig,
    pub max_width: u64,
}

impl DistillRule {
    pub fn knob(&self) -> Knob {
        Knob::new(KNOB_STUDENT_WIDTH, KnobDomain::PositiveInteger { max: self.max_width })
    }

    pub fn student_spec(teacher: &Model, width: usize) -> Vec<usize> {
        vec![width; teacher.hidden_sizes().len().max(1)]
    }
}

impl Rule for DistillRule {
    fn id(&self) -> &str {
        "distill"
    }

    fn knob_id(&self) -> &str {
        KNOB_STUDENT_WIDTH
    }

    fn transform(&self, model: &Model, value: f64, ctx: &RuleContext<'_>) -> Result<Model> {
        let knobs = DistillKnobs {
            student_spec: Self::student_spec(model, value as usize),
            temperature: self.temperature,
            loss_weight: self.loss_weight,
        };
        distill(model, &knobs, ctx.train, &self.train)
    }
}

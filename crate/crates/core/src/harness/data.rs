//! Seeded synthetic classification tasks with a stratified 80/20 split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::TaskData;
use crate::error::{config, Result};
use crate::meters::argmax;
use crate::tensor::{Dataset, Matrix, Model, Split};

/// Fraction of each class held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// One isotropic Gaussian per class around a random mean in `[-4, 4]^d`.
    GaussianBlobs,
    /// Class `c` lies on the sphere of radius `1 + c`.
    ConcentricRings,
    /// Standard-normal inputs labelled by a random network.
    TeacherLabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub dims: usize,
    pub classes: usize,
    #[serde(default)]
    pub noise: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.n < 2 * self.classes {
            return Err(config(format!("n = {} is below 2·classes = {}", self.n, 2 * self.classes)));
        }
        if self.dims == 0 {
            return Err(config("dims must be ≥ 1"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(config(format!("noise must be finite and ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, labels) = match spec.kind {
        DatasetKind::GaussianBlobs => blobs(spec, &mut rng),
        DatasetKind::ConcentricRings => rings(spec, &mut rng),
        DatasetKind::TeacherLabeled => teacher_labeled(spec, &mut rng)?,
    };
    stratified_split(&inputs, &labels, spec.classes, &mut rng)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn blobs(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let means: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| (0..spec.dims).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    let x = Matrix::from_fn(spec.n, spec.dims, |r, c| means[labels[r]][c] + spec.noise * normal(rng));
    (x, labels)
}

fn rings(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    let mut x = Matrix::zeros(spec.n, spec.dims);
    for (r, &y) in labels.iter().enumerate() {
        let dir: Vec<f64> = loop {
            let d: Vec<f64> = (0..spec.dims).map(|_| normal(rng)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break d.into_iter().map(|v| v / norm).collect();
            }
        };
        let radius = 1.0 + y as f64 + spec.noise * normal(rng);
        for (c, d) in dir.into_iter().enumerate() {
            x[(r, c)] = radius * d;
        }
    }
    (x, labels)
}

fn teacher_labeled(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<(Matrix, Vec<usize>)> {
    let teacher = Model::mlp(spec.dims, &[16], spec.classes, rng.random())?;
    let clean = Matrix::from_fn(spec.n, spec.dims, |_, _| normal(rng));
    let logits = teacher.forward(&clean)?;
    let labels = (0..spec.n).map(|r| argmax(logits.row(r))).collect();
    Ok((clean.add(&Matrix::from_fn(spec.n, spec.dims, |_, _| spec.noise * normal(rng)))?, labels))
}

/// Holds out `round(0.2·count)` random examples of every class; both splits
/// keep the original example order.
pub fn stratified_split(inputs: &Matrix, labels: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Result<TaskData> {
    let mut val = vec![false; labels.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let k = (members.len() as f64 * VALIDATION_FRACTION).round() as usize;
        for &i in &members[..k] {
            val[i] = true;
        }
    }
    let pick = |want: bool| -> Vec<usize> { (0..labels.len()).filter(|&i| val[i] == want).collect() };
    let build = |idx: Vec<usize>, split| {
        Dataset::new(inputs.select_rows(&idx), idx.iter().map(|&i| labels[i]).collect(), classes, split)
    };
    TaskData::new(build(pick(false), Split::Train)?, build(pick(true), Split::Validation)?)
}

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{domain, structural, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Labelled examples: one input row per class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(structural(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(domain(format!("label {bad} outside [0, {classes})")));
        }
        if !inputs.is_finite() {
            return Err(domain("non-finite input"));
        }
        Ok(Self { inputs, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.cols()
    }

    /// The examples at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

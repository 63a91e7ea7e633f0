//! Loss primitives: softmax with temperature, KL divergence, cross-entropy and
//! squared error, each paired with its gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use super::{Dataset, Matrix, Model};
use crate::error::{domain, structural, Result};

/// Floor applied to the second distribution of [`kl_div`] before the log.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Supervision for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a Matrix),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }
}

pub fn softmax_temp(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(domain(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax_scaled(logits, temperature))
}

pub(crate) fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `KL(p ‖ q) = Σ p·ln(p/q)`, with `q` floored at [`KL_FLOOR`] and `0·ln 0 = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(structural(format!("kl_div on lengths {} and {}", p.len(), q.len())));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    // Rounding can leave tiny negatives when p ≈ q.
    Ok(kl.max(0.0))
}

/// Mean cross-entropy of `logits` against class labels, and `∂/∂logits`.
pub fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_batch(logits, labels.len())?;
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(domain(format!("label {y} out of range for {} classes", logits.cols())));
        }
        let row = logits.row(r);
        total -= log_softmax(row)[y];
        let p = softmax_scaled(row, 1.0);
        for (c, (g, pc)) in grad.row_mut(r).iter_mut().zip(p).enumerate() {
            *g = (pc - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean over examples of the per-example mean squared error.
pub fn mse_with_grad(outputs: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if outputs.shape() != targets.shape() {
        return Err(structural(format!("mse on {:?} vs {:?}", outputs.shape(), targets.shape())));
    }
    check_batch(outputs, targets.rows())?;
    let (n, k) = (outputs.rows() as f64, outputs.cols() as f64);
    let diff = outputs.sub(targets)?;
    let value = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / (n * k);
    Ok((value, diff.scale(2.0 / (n * k))))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &y) in labels.iter().enumerate() {
        if y < classes {
            m[(r, y)] = 1.0;
        }
    }
    m
}

/// Loss value and logit gradient for any supported pairing of kind and targets.
pub fn loss_with_grad(outputs: &Matrix, targets: Targets<'_>, kind: LossKind) -> Result<(f64, Matrix)> {
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => cross_entropy_with_grad(outputs, labels),
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(domain("cross-entropy needs class targets"))
        }
        (LossKind::Mse, Targets::Values(t)) => mse_with_grad(outputs, t),
        (LossKind::Mse, Targets::Classes(labels)) => mse_with_grad(outputs, &one_hot(labels, outputs.cols())),
    }
}

/// `(1/|D|) Σ ℓ(f(x), y)` over the whole dataset.
pub fn loss(model: &Model, data: &Dataset, kind: LossKind) -> Result<f64> {
    if data.is_empty() {
        return Err(domain("loss over an empty dataset"));
    }
    let logits = model.forward(&data.inputs)?;
    Ok(loss_with_grad(&logits, Targets::Classes(&data.labels), kind)?.0)
}

pub(crate) fn check_batch(outputs: &Matrix, n: usize) -> Result<()> {
    if outputs.rows() != n {
        return Err(structural(format!("{} outputs for {n} targets", outputs.rows())));
    }
    if n == 0 {
        return Err(domain("empty batch"));
    }
    Ok(())
}

pub(crate) fn targets_len(t: &Targets<'_>) -> usize {
    t.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_reference_values() {
        // exp(2,1,0) / (e² + e + 1)
        let denom = 1f64.exp().powi(2) + 1f64.exp() + 1.0;
        let oracle = [2f64.exp() / denom, 1f64.exp() / denom, 1.0 / denom];
        let p = softmax_temp(&[2.0, 1.0, 0.0], 1.0).unwrap();
        for (a, b) in p.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.6652).abs() < 5e-5 && (p[1] - 0.2447).abs() < 5e-5 && (p[2] - 0.0900).abs() < 5e-5);
    }

    #[test]
    fn softmax_limits() {
        let u = softmax_temp(&[3.0; 5], 0.7).unwrap();
        assert!(u.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let hot = softmax_temp(&[4.0, -1.0, 9.0], 1e6).unwrap();
        assert!(hot.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-4));
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -2.0).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(kl_div(&[1.0], &[0.5, 0.5]).is_err());
        // degenerate teacher stays finite
        assert!(kl_div(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_extremes() {
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0, 0.0], vec![0.0, 0.0, 1000.0]]).unwrap();
        let (v, _) = cross_entropy_with_grad(&logits, &[0, 2]).unwrap();
        assert!(v.abs() < 1e-9);
        let (u, _) = cross_entropy_with_grad(&Matrix::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);
        assert!((u - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn mse_zero_at_target() {
        let t = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(mse_with_grad(&t, &t).unwrap().0, 0.0);
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.into_iter().map(|x| (x + 1e-9 / 8.0) / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn gibbs_inequality((p, q) in (2usize..8).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 1..10), t in 1e-2f64..1e3) {
            let p = softmax_temp(&logits, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}

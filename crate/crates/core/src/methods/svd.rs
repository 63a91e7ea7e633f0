//! Thin singular value decomposition by one-sided Jacobi rotations.

use crate::error::{domain, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 100;

/// `A = U·diag(s)·Vᵀ` with `k = min(m, n)` columns in `U` and `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// `m × k`, orthonormal columns
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `n × k`, orthonormal columns
    pub v: Matrix,
}

impl Svd {
    /// Best rank-`r` approximation as `(U_r·diag(s_r), V_rᵀ)`.
    pub fn truncate(&self, rank: usize) -> (Matrix, Matrix) {
        let m = self.u.rows();
        let n = self.v.rows();
        let us = Matrix::from_fn(m, rank, |i, j| self.u[(i, j)] * self.s[j]);
        let vt = Matrix::from_fn(rank, n, |i, j| self.v[(j, i)]);
        (us, vt)
    }

    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let (us, vt) = self.truncate(rank);
        us.matmul(&vt).expect("factor shapes agree")
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.is_empty() {
        return Err(domain("SVD of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(domain("SVD of a non-finite matrix"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose());
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    Ok(svd_tall(a))
}

/// Hestenes iteration on the columns of a matrix with `m ≥ n`.
fn svd_tall(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    // work on columns stored contiguously
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<(f64, usize)> =
        cols.iter().enumerate().map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j)).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u[(i, k)] = if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vm[(i, k)] = v[j][i];
        }
    }
    complete_basis(&mut u, &s);
    Svd { u, s, v: vm }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills columns belonging to zero singular values with unit vectors
/// orthogonal to the rest, so `U` keeps orthonormal columns.
fn complete_basis(u: &mut Matrix, s: &[f64]) {
    let m = u.rows();
    for k in 0..s.len() {
        if s[k] > 0.0 {
            continue;
        }
        for e in 0..m {
            let mut cand: Vec<f64> = (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            for j in 0..u.cols() {
                if j == k || (s[j] == 0.0 && j > k) {
                    continue;
                }
                let d: f64 = (0..m).map(|i| cand[i] * u[(i, j)]).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= d * u[(i, j)];
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, c) in cand.iter().enumerate() {
                    u[(i, k)] = c / norm;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormal_cols(q: &Matrix) -> f64 {
        q.t_matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn full_rank_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = rng.random_range(1..=16);
            let n = rng.random_range(1..=16);
            let a = random(&mut rng, m, n);
            let d = svd(&a).unwrap();
            let k = m.min(n);
            assert!(d.reconstruct(k).sub(&a).unwrap().frobenius_norm() < 1e-8);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(d.s.iter().all(|&x| x >= 0.0));
            assert!(orthonormal_cols(&d.u) < 1e-9);
            assert!(orthonormal_cols(&d.v) < 1e-9);
        }
    }

    #[test]
    fn outer_product_is_rank_one() {
        let a = Matrix::from_fn(5, 4, |i, j| (i as f64 + 1.0) * (2.0 - j as f64 * 0.5));
        let d = svd(&a).unwrap();
        assert!(d.reconstruct(1).sub(&a).unwrap().frobenius_norm() < 1e-8);
        assert!(d.s[1] < 1e-10);
    }

    #[test]
    fn diagonal_values() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0, 3.0], vec![0.0, -5.0, 0.0]]).unwrap();
        let d = svd(&a).unwrap();
        assert!((d.s[0] - 5.0).abs() < 1e-12 && (d.s[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let d = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(d.s, vec![0.0; 3]);
        assert!(orthonormal_cols(&d.u) < 1e-12);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(svd(&Matrix::zeros(0, 3)).is_err());
        assert!(svd(&Matrix::filled(2, 2, f64::NAN)).is_err());
    }

    #[test]
    fn truncation_error_is_tail_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 8, 6);
        let d = svd(&a).unwrap();
        let err = d.reconstruct(3).sub(&a).unwrap().frobenius_norm();
        let tail = d.s[3..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-10);
    }
}

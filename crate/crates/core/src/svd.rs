//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Rotations are applied to the columns of whichever orientation of the
//! matrix has fewer columns, so the accumulated right factor is at most
//! `min(d, k)` square. Arithmetic is done in `f64` regardless of `T`.

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

const MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug)]
pub struct Svd<T> {
    /// `d x r`, orthonormal columns.
    pub u: Tensor<T>,
    /// Descending, non-negative.
    pub s: Vec<T>,
    /// `k x r`, orthonormal columns.
    pub v: Tensor<T>,
}

impl<T: Real> Svd<T> {
    /// `U diag(S) V^T`.
    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let [d, r] = self.u.dims2()?;
        let mut us = self.u.clone();
        for i in 0..d {
            for j in 0..r {
                us.data_mut()[i * r + j] *= self.s[j];
            }
        }
        us.matmul(&self.v.transpose()?)
    }
}

/// Full thin SVD of a column-major working set: returns (U d×n, s, V n×n) for
/// `m` stored row-major `d x n` with `d >= n`.
fn jacobi_tall(m: &[f64], d: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // columns of W, stored column-major for cache-friendly dot products
    let mut w = vec![0.0; d * n];
    for i in 0..d {
        for j in 0..n {
            w[j * d + i] = m[i * n + j];
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let tol = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (&w[p * d..(p + 1) * d], &w[q * d..(q + 1) * d]);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..d {
                    let a = w[p * d + i];
                    let b = w[q * d + i];
                    w[p * d + i] = c * a - s * b;
                    w[q * d + i] = s * a + c * b;
                }
                for i in 0..n {
                    let a = v[p * n + i];
                    let b = v[q * n + i];
                    v[p * n + i] = c * a - s * b;
                    v[q * n + i] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n).map(|j| w[j * d..(j + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    (w, sigma, v)
}

/// Gram-Schmidt completion of column `j` against the earlier columns.
fn complete_column(cols: &mut [Vec<f64>], j: usize, dim: usize) {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for _ in 0..2 {
            for prev in cols.iter().take(j) {
                let dot: f64 = prev.iter().zip(&cand).map(|(a, b)| a * b).sum();
                for (c, p) in cand.iter_mut().zip(prev) {
                    *c -= dot * p;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, cand));
        }
    }
    let (norm, cand) = best.expect("dimension is non-zero");
    cols[j] = cand.into_iter().map(|x| x / norm).collect();
}

pub fn svd_truncated<T: Real>(m: &Tensor<T>, r: usize) -> Result<Svd<T>> {
    let [d, k] = m.dims2()?;
    let small = d.min(k);
    if r < 1 || r > small {
        return Err(invalid!("rank {r} outside 1..={small} for a {d}x{k} matrix"));
    }
    let data: Vec<f64> = m.data().iter().map(|v| v.f64()).collect();
    let transposed = d < k;
    let (rows, cols, work) = if transposed {
        let mut t = vec![0.0; d * k];
        for i in 0..d {
            for j in 0..k {
                t[j * d + i] = data[i * k + j];
            }
        }
        (k, d, t)
    } else {
        (d, k, data)
    };
    let (w, sigma, v) = jacobi_tall(&work, rows, cols);

    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let smax = sigma[order[0]];
    let floor = smax * 1e-13;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut s = Vec::with_capacity(r);
    for (j, &idx) in order.iter().take(r).enumerate() {
        let sv = sigma[idx];
        right.push(v[idx * cols..(idx + 1) * cols].to_vec());
        if sv > floor && sv > 0.0 {
            left.push(w[idx * rows..(idx + 1) * rows].iter().map(|x| x / sv).collect());
            s.push(sv);
        } else {
            left.push(vec![0.0; rows]);
            complete_column(&mut left, j, rows);
            s.push(0.0);
        }
    }

    // (left: rows-dim, right: cols-dim); undo the transpose if needed
    let (ucols, vcols) = if transposed { (right, left) } else { (left, right) };
    let to_tensor = |cols: &[Vec<f64>], dim: usize| {
        Tensor::from_fn([dim, r], |i| T::of(cols[i % r][i / r]))
    };
    Ok(Svd { u: to_tensor(&ucols, d), s: s.into_iter().map(T::of).collect(), v: to_tensor(&vcols, k) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Classical two-sided Jacobi eigenvalue iteration on a symmetric matrix;
    /// written independently of the SVD path.
    fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
        let mut a = a.to_vec();
        for _ in 0..200 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for kk in 0..n {
                        let akp = a[kk * n + p];
                        let akq = a[kk * n + q];
                        a[kk * n + p] = c * akp - s * akq;
                        a[kk * n + q] = s * akp + c * akq;
                    }
                    for kk in 0..n {
                        let apk = a[p * n + kk];
                        let aqk = a[q * n + kk];
                        a[p * n + kk] = c * apk - s * aqk;
                        a[q * n + kk] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn orthonormality_error(m: &Tensor<f64>) -> f64 {
        let g = m.transpose().unwrap().matmul(m).unwrap();
        let r = g.shape()[0];
        (0..r * r).map(|i| (g.data()[i] - if i / r == i % r { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let m = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0f64 } else { 0.0 });
        let svd = svd_truncated(&m, 3).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_top_two() {
        let m = Tensor::new([3, 3], vec![3.0f64, 0., 0., 0., 2., 0., 0., 0., 1.]).unwrap();
        let svd = svd_truncated(&m, 2).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-12 && (svd.s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_out_of_range() {
        let m = Tensor::<f64>::zeros([4, 3]);
        assert!(svd_truncated(&m, 0).is_err());
        assert!(svd_truncated(&m, 4).is_err());
    }

    #[test]
    fn matches_eigen_oracle_on_random_matrices() {
        let mut rng = Rng::new(8);
        for &(d, k) in &[(8, 6), (6, 8), (5, 5), (12, 3)] {
            let m: Tensor<f64> = rng.normal_tensor([d, k], 1.0);
            let small = d.min(k);
            let svd = svd_truncated(&m, small).unwrap();
            // eigenvalues of the smaller Gram matrix
            let gram = if d >= k { m.transpose().unwrap().matmul(&m).unwrap() } else { m.matmul(&m.transpose().unwrap()).unwrap() };
            let ev = symmetric_eigenvalues(gram.data(), small);
            for (s, e) in svd.s.iter().zip(&ev) {
                assert!((s - e.max(0.0).sqrt()).abs() <= 1e-5, "{d}x{k}: {s} vs {}", e.sqrt());
            }
            assert!(orthonormality_error(&svd.u) < 1e-10);
            assert!(orthonormality_error(&svd.v) < 1e-10);
            assert!(svd.reconstruct().unwrap().max_abs_diff(&m).unwrap() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let a = Tensor::new([4, 1], vec![1.0f64, 2.0, 0.0, -1.0]).unwrap();
        let b = Tensor::new([1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let m = a.matmul(&b).unwrap();
        let svd = svd_truncated(&m, 3).unwrap();
        assert!(svd.s[1] < 1e-12 && svd.s[2] < 1e-12);
        assert!(orthonormality_error(&svd.u) < 1e-10);
        assert!(orthonormality_error(&svd.v) < 1e-10);
    }

    #[test]
    fn truncation_beats_random_rank_r_factorizations() {
        let mut rng = Rng::new(9);
        let m: Tensor<f64> = rng.normal_tensor([8, 6], 1.0);
        let r = 2;
        let best = svd_truncated(&m, r).unwrap().reconstruct().unwrap().sub(&m).unwrap().frobenius();
        for _ in 0..100 {
            let p: Tensor<f64> = rng.normal_tensor([8, r], 1.0);
            let q: Tensor<f64> = rng.normal_tensor([r, 6], 1.0);
            let approx = p.matmul(&q).unwrap();
            assert!(best <= approx.sub(&m).unwrap().frobenius());
        }
    }
}

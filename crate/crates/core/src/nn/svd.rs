//! Truncated SVD via one-sided Jacobi, used to factor pretrained linear
//! weights into low-rank pairs.
//!
//! No external linear-algebra dependency: at these model sizes a plain
//! Jacobi sweep converges in a handful of iterations. Computation runs
//! in double precision regardless of the model's scalar type.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Best rank-`z` factorization `w ≈ f1 · f2` with the singular-value
/// scale split evenly between the factors (`f1 = U·√Σ`, `f2 = √Σ·Vᵀ`).
pub fn svd_factorize<S: Scalar>(w: &Tensor<S>, z: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    let (p, q) = (w.rows(), w.cols());
    if z < 1 || z > p.min(q) {
        return Err(Error::config(format!(
            "rank {z} out of range [1, {}] for a {p}×{q} matrix",
            p.min(q)
        )));
    }
    let (u, sigma, vt) = svd(w)?;
    let mut f1 = Tensor::zeros(vec![p, z]);
    let mut f2 = Tensor::zeros(vec![z, q]);
    for k in 0..z {
        let root = sigma[k].sqrt();
        for r in 0..p {
            f1.data_mut()[r * z + k] = S::from_f64(u[r * sigma.len() + k] * root);
        }
        for c in 0..q {
            f2.data_mut()[k * q + c] = S::from_f64(vt[k * q + c] * root);
        }
    }
    Ok((f1, f2))
}

/// Full thin SVD `w = U·diag(σ)·Vᵀ` with σ descending.
/// Returns (U as p×m, σ of length m, Vᵀ as m×q) with m = min(p, q).
fn svd<S: Scalar>(w: &Tensor<S>) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (p, q) = (w.rows(), w.cols());
    // One-sided Jacobi orthogonalizes columns; work on the orientation
    // with no more columns than rows.
    let transposed = q > p;
    let (rows, cols) = if transposed { (q, p) } else { (p, q) };
    let mut a = vec![0.0f64; rows * cols];
    for r in 0..p {
        for c in 0..q {
            let v = w.data()[r * q + c].to_f64();
            if transposed {
                a[c * p + r] = v;
            } else {
                a[r * q + c] = v;
            }
        }
    }
    let mut v = vec![0.0f64; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..rows {
                    let ai = a[r * cols + i];
                    let aj = a[r * cols + j];
                    alpha += ai * ai;
                    beta += aj * aj;
                    gamma += ai * aj;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let ai = a[r * cols + i];
                    let aj = a[r * cols + j];
                    a[r * cols + i] = c * ai - s * aj;
                    a[r * cols + j] = s * ai + c * aj;
                }
                for r in 0..cols {
                    let vi = v[r * cols + i];
                    let vj = v[r * cols + j];
                    v[r * cols + i] = c * vi - s * vj;
                    v[r * cols + j] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    // Column norms are the singular values; sort them descending.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|k| (0..rows).map(|r| a[r * cols + k] * a[r * cols + k]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    // In the working orientation (rows ≥ cols): A = L·diag(σ)·Rᵀ where
    // L has the normalized columns of the rotated A and R = V.
    let m = cols;
    let mut left = vec![0.0f64; rows * m];
    let mut sigma = vec![0.0f64; m];
    let mut right_t = vec![0.0f64; m * cols];
    for (k, &src) in order.iter().enumerate() {
        sigma[k] = norms[src];
        if norms[src] > 0.0 {
            for r in 0..rows {
                left[r * m + k] = a[r * cols + src] / norms[src];
            }
        }
        for r in 0..cols {
            right_t[k * cols + r] = v[r * cols + src];
        }
    }

    if transposed {
        // w = (wᵀ)ᵀ = (L·Σ·Rᵀ)ᵀ = R·Σ·Lᵀ, so U ← R and Vᵀ ← Lᵀ.
        let mut u = vec![0.0f64; p * m];
        for r in 0..p {
            for k in 0..m {
                u[r * m + k] = right_t[k * cols + r];
            }
        }
        let mut vt = vec![0.0f64; m * q];
        for k in 0..m {
            for c in 0..q {
                vt[k * q + c] = left[c * m + k];
            }
        }
        Ok((u, sigma, vt))
    } else {
        Ok((left, sigma, right_t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::mm_nn;

    fn frob(t: &Tensor<f64>) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn reconstruct(f1: &Tensor<f64>, f2: &Tensor<f64>) -> Tensor<f64> {
        mm_nn(f1, f2)
    }

    #[test]
    fn diagonal_matrix_keeps_top_singular_value() {
        let w = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]);
        let (f1, f2) = svd_factorize(&w, 1).unwrap();
        let rec = reconstruct(&f1, &f2);
        let expected = [3.0, 0.0, 0.0, 0.0];
        for (got, want) in rec.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{rec:?}");
        }
    }

    #[test]
    fn full_rank_reconstructs_original() {
        let mut rng = crate::rng::Splitter::new(7).rng();
        use rand::Rng;
        for (p, q) in [(5, 3), (3, 5), (4, 4)] {
            let w = Tensor::new(
                vec![p, q],
                (0..p * q).map(|_| rng.random::<f64>() - 0.5).collect(),
            );
            let (f1, f2) = svd_factorize(&w, p.min(q)).unwrap();
            let rec = reconstruct(&f1, &f2);
            let mut diff = w.clone();
            for (d, &r) in diff.data_mut().iter_mut().zip(rec.data()) {
                *d -= r;
            }
            assert!(frob(&diff) / frob(&w) < 1e-6, "{p}x{q}");
        }
    }

    #[test]
    fn rank_one_matrix_recovered_exactly() {
        let u = [1.0, -2.0, 0.5];
        let v = [2.0, 1.0, -1.0, 0.25];
        let mut data = Vec::new();
        for uu in u {
            for vv in v {
                data.push(uu * vv);
            }
        }
        let w = Tensor::new(vec![3, 4], data);
        let (f1, f2) = svd_factorize(&w, 1).unwrap();
        let rec = reconstruct(&f1, &f2);
        let mut diff = w.clone();
        for (d, &r) in diff.data_mut().iter_mut().zip(rec.data()) {
            *d -= r;
        }
        assert!(frob(&diff) / frob(&w) < 1e-6);
    }

    #[test]
    fn truncation_error_is_optimal() {
        // For diag(3, 2, 1) keeping z=2, the optimal Frobenius error is
        // the dropped singular value.
        let w = Tensor::new(
            vec![3, 3],
            vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0],
        );
        let (f1, f2) = svd_factorize(&w, 2).unwrap();
        let rec = reconstruct(&f1, &f2);
        let mut diff = w.clone();
        for (d, &r) in diff.data_mut().iter_mut().zip(rec.data()) {
            *d -= r;
        }
        assert!((frob(&diff) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let w = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(svd_factorize(&w, 0).is_err());
        assert!(svd_factorize(&w, 3).is_err());
    }
}

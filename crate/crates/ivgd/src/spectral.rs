//! Largest-singular-value estimation by power iteration on a linear
//! operator given as apply / apply-transpose closures. Used both for
//! spectral weight normalization and inside Lipschitz certification.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Estimates the largest singular value of a linear operator.
///
/// Alternates `apply` and `apply_t` starting from a seeded random unit
/// vector of length `dim_in`; stops when successive estimates differ by
/// at most `tol` or after `iters` rounds. The estimate is exact for
/// rank-one operators after one round and converges monotonically up to
/// roundoff otherwise. Errors if a non-finite value appears.
pub fn power_iteration_norm(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    apply_t: &dyn Fn(&[f64]) -> Vec<f64>,
    dim_in: usize,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    if dim_in == 0 {
        return Err(Error::validation("operator input dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim_in).map(|_| rng.gen::<f64>() - 0.5).collect();
    let nv = l2_norm(&v);
    if nv == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= nv);
    }
    let mut sigma = 0.0f64;
    for _ in 0..iters.max(1) {
        let u = apply(&v);
        let nu = l2_norm(&u);
        if !nu.is_finite() {
            return Err(Error::numeric("power iteration produced a non-finite value"));
        }
        if nu == 0.0 {
            return Ok(0.0);
        }
        let u_hat: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let w = apply_t(&u_hat);
        let nw = l2_norm(&w);
        if !nw.is_finite() {
            return Err(Error::numeric("power iteration produced a non-finite value"));
        }
        if nw == 0.0 {
            return Ok(nu);
        }
        let next = nw;
        v = w.iter().map(|x| x / nw).collect();
        if (next - sigma).abs() <= tol * next.max(1.0) {
            return Ok(next);
        }
        sigma = next;
    }
    Ok(sigma)
}

/// Row-major dense matrix-vector product helpers for the small weight
/// matrices in this crate.
pub fn matvec(rows: usize, cols: usize, m: &[f64], x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| (0..cols).map(|c| m[r * cols + c] * x[c]).sum())
        .collect()
}

pub fn matvec_t(rows: usize, cols: usize, m: &[f64], x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m[r * cols + c] * x[r];
        }
    }
    out
}

/// Largest singular value of a dense row-major matrix.
pub fn matrix_spectral_norm(rows: usize, cols: usize, m: &[f64], seed: u64) -> Result<f64> {
    power_iteration_norm(
        &|x| matvec(rows, cols, m, x),
        &|x| matvec_t(rows, cols, m, x),
        cols,
        500,
        1e-13,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_two_one_gives_two() {
        let m = [2.0, 0.0, 0.0, 1.0];
        let s = matrix_spectral_norm(2, 2, &m, 0).unwrap();
        assert!((s - 2.0).abs() < 1e-9, "got {}", s);
    }

    #[test]
    fn ones_row_gives_sqrt_n() {
        for n in [3usize, 7, 34] {
            let m = vec![1.0; n];
            let s = matrix_spectral_norm(1, n, &m, 1).unwrap();
            assert!((s - (n as f64).sqrt()).abs() < 1e-9, "n={} got {}", n, s);
        }
    }

    #[test]
    fn zero_operator_gives_zero() {
        let m = vec![0.0; 12];
        let s = matrix_spectral_norm(3, 4, &m, 2).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn scaled_identity_operator() {
        let s = power_iteration_norm(
            &|x| x.iter().map(|v| 0.5 * v).collect(),
            &|x| x.iter().map(|v| 0.5 * v).collect(),
            6,
            200,
            1e-12,
            3,
        )
        .unwrap();
        assert!((s - 0.5).abs() < 1e-10);
    }

    // Symmetric Jacobi eigenvalue sweep, used only as an independent
    // oracle for singular values of small matrices.
    fn jacobi_max_singular(rows: usize, cols: usize, m: &[f64]) -> f64 {
        let n = cols;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..rows {
                    s += m[r * cols + i] * m[r * cols + j];
                }
                a[i * n + j] = s;
            }
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-30 {
                        continue;
                    }
                    let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / apq;
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max).sqrt()
    }

    #[test]
    fn random_dense_matrices_match_jacobi_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let (rows, cols) = if trial % 2 == 0 { (5, 5) } else { (6, 2) };
            let m: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let want = jacobi_max_singular(rows, cols, &m);
            let got = matrix_spectral_norm(rows, cols, &m, trial as u64).unwrap();
            assert!(
                (want - got).abs() < 1e-7 * want.max(1.0),
                "trial {}: oracle {} power {}",
                trial,
                want,
                got
            );
        }
    }
}

//! Small dense linear-algebra helpers shared by the solver and the learners.
//!
//! Everything here is deterministic: fixed starting vectors for the power
//! iterations and fixed accumulation order for reductions.

use ndarray::{Array1, Array2};

use crate::error::{CateForgeError, Result};

/// Maximum absolute asymmetry |m[i][j] - m[j][i]| of a square matrix.
pub fn max_asymmetry(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

fn power_iteration_start(n: usize) -> Array1<f64> {
    // Fixed, non-uniform start so the iterate is not orthogonal to the
    // leading eigenvector of a permutation-symmetric matrix.
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64 + 1.0).sqrt());
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);
    v
}

/// Largest eigenvalue of a symmetric PSD-ish matrix via power iteration.
pub fn lambda_max(m: &Array2<f64>, iterations: usize) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[[0, 0]];
    }
    let mut v = power_iteration_start(n);
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm <= f64::MIN_POSITIVE {
            return 0.0;
        }
        v = w / norm;
        lambda = v.dot(&m.dot(&v));
    }
    lambda
}

/// Smallest eigenvalue of a symmetric matrix, computed by power iteration on
/// the spectrally shifted matrix `c*I - M` with `c >= lambda_max(M)`.
pub fn lambda_min(m: &Array2<f64>, iterations: usize) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[[0, 0]];
    }
    let lmax = lambda_max(m, iterations);
    // Shift a little past lambda_max so the target eigenvalue stays dominant.
    let shift = lmax.abs() * 1.01 + 1e-12;
    let mut shifted = -m.clone();
    for i in 0..n {
        shifted[[i, i]] += shift;
    }
    let top = lambda_max(&shifted, iterations);
    shift - top
}

/// Solves `(A + ridge*I) x = b` for symmetric positive definite `A` by
/// Cholesky factorization. `ridge` is added to the diagonal verbatim.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>, ridge: f64) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(CateForgeError::invalid("solve_spd: shape mismatch"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            if i == j {
                sum += ridge;
            }
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(CateForgeError::DegenerateInput(
                        "solve_spd: matrix not positive definite".to_string(),
                    ));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lambda_extremes_of_diagonal_matrix() {
        let m = array![[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.25]];
        assert!((lambda_max(&m, 200) - 3.0).abs() < 1e-9);
        assert!((lambda_min(&m, 200) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn lambda_min_detects_indefiniteness() {
        let m = array![[1.0, 2.0], [2.0, 1.0]];
        assert!((lambda_min(&m, 400) - (-1.0)).abs() < 1e-8);
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let x_true = array![1.5, -2.0];
        let b = a.dot(&x_true);
        let x = solve_spd(&a, &b, 0.0).unwrap();
        assert!((&x - &x_true).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        let b = array![1.0, 1.0];
        assert!(solve_spd(&a, &b, 0.0).is_err());
    }
}

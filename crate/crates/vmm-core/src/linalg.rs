//! Bridge between `ndarray` storage and `faer` dense factorizations.
//!
//! faer is forced into sequential mode process-wide the first time a
//! factorization runs: estimation must be bit-reproducible regardless of how
//! many worker threads the surrounding Monte Carlo harness uses, so all
//! parallelism in this crate lives at the replication level.

use ndarray::{Array1, Array2};
use std::sync::Once;

static FORCE_SEQ: Once = Once::new();

fn ensure_sequential() {
    FORCE_SEQ.call_once(|| {
        faer::set_global_parallelism(faer::Par::Seq);
    });
}

fn to_faer(a: &Array2<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Lower Cholesky factor of `a`, or `None` if `a` is not positive definite.
pub fn cholesky_lower(a: &Array2<f64>) -> Option<Array2<f64>> {
    ensure_sequential();
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let m = to_faer(a);
    let llt = m.llt(faer::Side::Lower).ok()?;
    let l = llt.L();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            out[[i, j]] = l[(i, j)];
        }
    }
    Some(out)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= l[[i, j]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= l[[j, i]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Eigenvalues and eigenvectors of a symmetric matrix, ascending order.
/// Returns `(values, vectors)` with eigenvectors in columns.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    ensure_sequential();
    let n = a.nrows();
    let m = to_faer(a);
    let ev = m
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("symmetric eigendecomposition failed");
    let s = ev.S();
    let u = ev.U();
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].partial_cmp(&s[j]).unwrap());
    for (col, &k) in order.iter().enumerate() {
        vals[col] = s[k];
        for row in 0..n {
            vecs[[row, col]] = u[(row, k)];
        }
    }
    (vals, vecs)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    vals[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_matches_hand_computation() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky_lower(&a).unwrap();
        assert!((l[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((l[[1, 0]] - 1.0).abs() < 1e-15);
        assert!((l[[1, 1]] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[[0, 1]], 0.0);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky_lower(&a).is_none());
    }

    #[test]
    fn triangular_solves_invert_factor() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky_lower(&a).unwrap();
        let b = array![1.0, 0.0];
        let y = solve_lower(&l, &b);
        let x = solve_lower_transpose(&l, &y);
        // A x should equal b
        let r0 = 4.0 * x[0] + 2.0 * x[1] - 1.0;
        let r1 = 2.0 * x[0] + 3.0 * x[1];
        assert!(r0.abs() < 1e-14 && r1.abs() < 1e-14);
    }

    #[test]
    fn eigen_sorted_ascending() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = sym_eigen(&a);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        // reconstruct
        let mut rec = Array2::<f64>::zeros((2, 2));
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    rec[[i, j]] += vals[k] * vecs[[i, k]] * vecs[[j, k]];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((rec[[i, j]] - a[[i, j]]).abs() < 1e-12);
            }
        }
    }
}

//! Dense symmetric linear algebra with jitter-escalated SPD factorization.
//!
//! Gram-type matrices assembled in floating point are symmetrized on
//! construction and factorized as `A + jitter*I`, escalating through a
//! schedule of trace-scaled jitters until a positive-definite factorization
//! succeeds. The variational quadratic `h'(C+aI)^{-1}h` is exposed directly
//! because it is the finite-dimensional value of the regularized dual-norm
//! supremum used throughout the estimators.

use crate::linalg;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("no jitter in the schedule produced a positive-definite factorization (dim {dim}, last jitter {last_jitter:e})")]
    AllJittersFailed { dim: usize, last_jitter: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Dense symmetric matrix; the constructor symmetrizes via `(A + Aᵀ)/2`.
#[derive(Clone, Debug)]
pub struct SymMatrix {
    a: Array2<f64>,
}

impl SymMatrix {
    pub fn new(a: Array2<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "SymMatrix requires a square matrix");
        let mut s = a;
        let n = s.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (s[[i, j]] + s[[j, i]]);
                s[[i, j]] = v;
                s[[j, i]] = v;
            }
        }
        Self { a: s }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            a: Array2::zeros((dim, dim)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            a: Array2::eye(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn into_array(self) -> Array2<f64> {
        self.a
    }

    pub fn trace(&self) -> f64 {
        self.a.diag().sum()
    }

    /// Smallest eigenvalue; O(dim^3), intended for moderate dimensions.
    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.a)
    }
}

/// Cholesky factor of `A + jitter*I` together with the jitter that was used.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    lower: Array2<f64>,
    jitter_used: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// Reconstructs `A + jitter*I` as `L Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::new(self.lower.dot(&self.lower.t()))
    }
}

/// Trace-scaled escalation schedule: `[0, 1e-12 s, 1e-10 s, 1e-8 s, 1e-6 s]`
/// with `s = tr(A)/dim`. Rank-deficient Gram blocks land on a scale-free
/// jitter this way. A zero-trace matrix falls back to absolute jitters.
pub fn default_jitter_schedule(a: &SymMatrix) -> Vec<f64> {
    let mut scale = a.trace() / a.dim() as f64;
    if !(scale.is_finite() && scale > 0.0) {
        scale = 1.0;
    }
    vec![
        0.0,
        1e-12 * scale,
        1e-10 * scale,
        1e-8 * scale,
        1e-6 * scale,
    ]
}

/// Cholesky factorization of `a + jitter*I` for the first jitter in the
/// schedule that yields a positive-definite factorization.
pub fn spd_factor(a: &SymMatrix, jitter_schedule: &[f64]) -> Result<SpdFactor, NumericsError> {
    assert!(!jitter_schedule.is_empty(), "jitter schedule must be non-empty");
    debug_assert!(
        jitter_schedule.windows(2).all(|w| w[0] <= w[1]),
        "jitter schedule must be ascending"
    );
    let n = a.dim();
    for &jitter in jitter_schedule {
        debug_assert!(jitter >= 0.0);
        let mut m = a.array().clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[[i, i]] += jitter;
            }
        }
        if let Some(lower) = linalg::cholesky_lower(&m) {
            return Ok(SpdFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(NumericsError::AllJittersFailed {
        dim: n,
        last_jitter: *jitter_schedule.last().unwrap(),
    })
}

/// Convenience: factorize under the default trace-scaled schedule.
pub fn spd_factor_default(a: &SymMatrix) -> Result<SpdFactor, NumericsError> {
    let schedule = default_jitter_schedule(a);
    spd_factor(a, &schedule)
}

/// Solves `(A + jitter*I) x = b` for a vector right-hand side.
pub fn spd_solve(f: &SpdFactor, b: &Array1<f64>) -> Result<Array1<f64>, NumericsError> {
    if b.len() != f.dim() {
        return Err(NumericsError::DimensionMismatch {
            expected: f.dim(),
            got: b.len(),
        });
    }
    let y = linalg::solve_lower(&f.lower, b);
    Ok(linalg::solve_lower_transpose(&f.lower, &y))
}

/// Solves `(A + jitter*I) X = B` column by column.
pub fn spd_solve_mat(f: &SpdFactor, b: &Array2<f64>) -> Result<Array2<f64>, NumericsError> {
    if b.nrows() != f.dim() {
        return Err(NumericsError::DimensionMismatch {
            expected: f.dim(),
            got: b.nrows(),
        });
    }
    let mut out = Array2::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let x = spd_solve(f, &col.to_owned())?;
        out.column_mut(j).assign(&x);
    }
    Ok(out)
}

/// Computes `hᵀ (C + alpha I)^{-1} h` for symmetric PSD `c` and `alpha > 0`.
///
/// This equals `sup_v { <h, v> - (1/4) <(C + alpha I) v, v> }`, attained at
/// `v* = 2 (C + alpha I)^{-1} h`; the supremum form is what the estimators
/// optimize and the closed form is what they evaluate.
pub fn variational_quadratic(
    c: &SymMatrix,
    alpha: f64,
    h: &Array1<f64>,
) -> Result<f64, NumericsError> {
    assert!(alpha > 0.0, "alpha must be positive");
    if h.len() != c.dim() {
        return Err(NumericsError::DimensionMismatch {
            expected: c.dim(),
            got: h.len(),
        });
    }
    let n = c.dim();
    let mut shifted = c.array().clone();
    for i in 0..n {
        shifted[[i, i]] += alpha;
    }
    let shifted = SymMatrix::new(shifted);
    let factor = spd_factor(&shifted, &default_jitter_schedule(&shifted))?;
    let x = spd_solve(&factor, h)?;
    Ok(h.dot(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use ndarray::array;

    fn random_psd(dim: usize, rng: &mut SplitMix64) -> SymMatrix {
        let mut b = Array2::zeros((dim, dim));
        for v in b.iter_mut() {
            *v = rng.next_normal();
        }
        SymMatrix::new(b.dot(&b.t()))
    }

    #[test]
    fn identity_factors_with_zero_jitter() {
        let a = SymMatrix::identity(3);
        let f = spd_factor(&a, &[0.0]).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((f.lower()[[i, j]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_cholesky_two_by_two() {
        let a = SymMatrix::new(array![[4.0, 2.0], [2.0, 3.0]]);
        let f = spd_factor(&a, &[0.0]).unwrap();
        assert!((f.lower()[[0, 0]] - 2.0).abs() < 1e-14);
        assert!((f.lower()[[1, 0]] - 1.0).abs() < 1e-14);
        assert!((f.lower()[[1, 1]] - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_forced_onto_jitter_branch() {
        let a = SymMatrix::zeros(2);
        let f = spd_factor(&a, &[0.0, 1e-8]).unwrap();
        assert_eq!(f.jitter_used(), 1e-8);
        let s = 1e-8f64.sqrt();
        assert!((f.lower()[[0, 0]] - s).abs() < 1e-18);
        assert!((f.lower()[[1, 1]] - s).abs() < 1e-18);
    }

    #[test]
    fn all_jitters_failed_on_negative_definite() {
        let a = SymMatrix::new(array![[-1.0, 0.0], [0.0, -1.0]]);
        let err = spd_factor(&a, &[0.0, 1e-10]).unwrap_err();
        assert!(matches!(err, NumericsError::AllJittersFailed { .. }));
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let a = SymMatrix::identity(3);
        let f = spd_factor(&a, &[0.0]).unwrap();
        let b = array![1.0, 2.0, 3.0];
        let x = spd_solve(&f, &b).unwrap();
        for i in 0..3 {
            assert!((x[i] - b[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn solve_two_by_two_hand_inverse() {
        let a = SymMatrix::new(array![[4.0, 2.0], [2.0, 3.0]]);
        let f = spd_factor(&a, &[0.0]).unwrap();
        let x = spd_solve(&f, &array![1.0, 0.0]).unwrap();
        assert!((x[0] - 3.0 / 8.0).abs() < 1e-14);
        assert!((x[1] + 1.0 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn solve_scaled_identity() {
        let a = SymMatrix::new(array![[2.0, 0.0], [0.0, 2.0]]);
        let f = spd_factor(&a, &[0.0]).unwrap();
        let x = spd_solve(&f, &array![2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_rejects_dimension_mismatch() {
        let a = SymMatrix::identity(3);
        let f = spd_factor(&a, &[0.0]).unwrap();
        assert!(matches!(
            spd_solve(&f, &array![1.0, 2.0]),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn variational_quadratic_examples() {
        let c = SymMatrix::zeros(1);
        let v = variational_quadratic(&c, 1.0, &array![2.0]).unwrap();
        assert!((v - 4.0).abs() < 1e-12);

        let v0 = variational_quadratic(&c, 1.0, &array![0.0]).unwrap();
        assert_eq!(v0, 0.0);

        let c3 = SymMatrix::new(array![[3.0]]);
        let v3 = variational_quadratic(&c3, 1.0, &array![2.0]).unwrap();
        assert!((v3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variational_quadratic_matches_numeric_maximization() {
        // closed form vs conjugate-gradient maximization of the quadratic
        let mut rng = SplitMix64::new(11);
        for &alpha in &[1e-3, 1.0, 10.0] {
            for trial in 0..10 {
                let dim = 1 + (trial % 10);
                let c = random_psd(dim, &mut rng);
                let mut h = Array1::zeros(dim);
                for v in h.iter_mut() {
                    *v = rng.next_normal();
                }
                let closed = variational_quadratic(&c, alpha, &h).unwrap();
                let numeric = crate::verify::oracles::max_regularized_quadratic(
                    c.array(),
                    alpha,
                    &h,
                );
                let denom = closed.abs().max(1e-300);
                assert!(
                    (closed - numeric).abs() / denom < 1e-8,
                    "alpha={alpha} closed={closed} numeric={numeric}"
                );
            }
        }
    }

    #[test]
    fn factor_solve_residual_up_to_dim_200() {
        let mut rng = SplitMix64::new(99);
        for &dim in &[5usize, 40, 200] {
            let a = random_psd(dim, &mut rng);
            let f = spd_factor_default(&a).unwrap();
            let mut b = Array1::zeros(dim);
            for v in b.iter_mut() {
                *v = rng.next_normal();
            }
            let x = spd_solve(&f, &b).unwrap();
            let jit = f.jitter_used();
            let mut r = a.array().dot(&x) - &b;
            for i in 0..dim {
                r[i] += jit * x[i];
            }
            let rel = r.dot(&r).sqrt() / b.dot(&b).sqrt();
            assert!(rel <= 1e-8, "dim {dim} residual {rel}");
        }
    }

    #[test]
    fn reconstruction_error_within_tolerance() {
        let mut rng = SplitMix64::new(5);
        let a = random_psd(30, &mut rng);
        let f = spd_factor_default(&a).unwrap();
        let rec = f.reconstruct();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..30 {
            for j in 0..30 {
                let mut expect = a.array()[[i, j]];
                if i == j {
                    expect += f.jitter_used();
                }
                num += (rec.array()[[i, j]] - expect).powi(2);
                den += expect * expect;
            }
        }
        assert!((num / den).sqrt() < 1e-8);
    }
}

//! Quasi-Newton minimization with random restarts.
//!
//! BFGS on the inverse Hessian with Armijo backtracking. The parameter box
//! is used only to draw restart points; iterates themselves are
//! unconstrained. The curvature update is skipped when `sᵀy` is too small,
//! which keeps the approximation positive definite without a Wolfe search.

use crate::rng::SplitMix64;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("optimizer diverged: non-finite objective or gradient encountered")]
    Diverged,
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    /// Convergence threshold on the gradient sup-norm.
    pub grad_tol: f64,
    /// Stop once the per-step objective improvement falls below this.
    pub obj_improvement_tol: f64,
    pub max_iters: usize,
    /// Number of random restart points drawn from the box, in addition to
    /// the caller-provided initial point.
    pub restarts: usize,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub seed: u64,
}

impl OptimConfig {
    /// Default settings on a symmetric box `[-r, r]^b`.
    pub fn boxed(b: usize, r: f64) -> Self {
        Self {
            grad_tol: 1e-8,
            obj_improvement_tol: 1e-12,
            max_iters: 500,
            restarts: 5,
            lower: Array1::from_elem(b, -r),
            upper: Array1::from_elem(b, r),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad_sup_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective evaluation: value and gradient, or `None` on a non-finite result.
pub type ValueGrad<'a> = &'a dyn Fn(&Array1<f64>) -> Option<(f64, Array1<f64>)>;

fn sup_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn bfgs_single(
    f: ValueGrad<'_>,
    x0: &Array1<f64>,
    cfg: &OptimConfig,
) -> Result<OptimOutcome, OptimError> {
    let b = x0.len();
    let mut x = x0.clone();
    let (mut fx, mut gx) = f(&x).ok_or(OptimError::Diverged)?;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::Diverged);
    }
    let mut h = Array2::<f64>::eye(b);
    let mut iterations = 0;
    let mut converged = sup_norm(&gx) <= cfg.grad_tol;

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let mut d = -h.dot(&gx);
        let mut descent = d.dot(&gx);
        if !(descent < 0.0) {
            // reset to steepest descent if the approximation degraded
            h = Array2::eye(b);
            d = -gx.clone();
            descent = d.dot(&gx);
            if !(descent < 0.0) {
                break;
            }
        }

        // Armijo backtracking
        let mut step = 1.0;
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &(step * &d);
            match f(&xn) {
                Some((fn_, gn)) if fn_.is_finite() => {
                    if fn_ <= fx + c1 * step * descent {
                        accepted = Some((xn, fn_, gn));
                        break;
                    }
                }
                Some(_) | None => {
                    // non-finite trial point: shrink and keep trying
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break; // line search exhausted; report the best point so far
        };

        let s = &xn - &x;
        let yv = &gn - &gx;
        let sy = s.dot(&yv);
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        gx = gn;
        if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::Diverged);
        }

        if sy > 1e-10 * s.dot(&s).sqrt() * yv.dot(&yv).sqrt() && sy > 0.0 {
            // BFGS inverse update H <- (I - s yᵀ/sy) H (I - y sᵀ/sy) + s sᵀ/sy
            let rho = 1.0 / sy;
            let hy = h.dot(&yv);
            let yhy = yv.dot(&hy);
            let mut hn = h.clone();
            for i in 0..b {
                for j in 0..b {
                    hn[[i, j]] += (1.0 + rho * yhy) * rho * s[i] * s[j]
                        - rho * (s[i] * hy[j] + hy[i] * s[j]);
                }
            }
            h = hn;
        }

        if sup_norm(&gx) <= cfg.grad_tol {
            converged = true;
        } else if improvement >= 0.0 && improvement < cfg.obj_improvement_tol {
            break;
        }
    }

    Ok(OptimOutcome {
        grad_sup_norm: sup_norm(&gx),
        x,
        value: fx,
        iterations,
        converged,
    })
}

/// Minimizes `f` from `init` plus `cfg.restarts` random points in the box;
/// the best objective wins, ties broken by first found.
pub fn minimize_multistart(
    f: ValueGrad<'_>,
    init: &Array1<f64>,
    cfg: &OptimConfig,
) -> Result<OptimOutcome, OptimError> {
    let b = init.len();
    assert_eq!(cfg.lower.len(), b);
    assert_eq!(cfg.upper.len(), b);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut starts = vec![init.clone()];
    for _ in 0..cfg.restarts {
        let mut p = Array1::zeros(b);
        for i in 0..b {
            p[i] = rng.next_range(cfg.lower[i], cfg.upper[i]);
        }
        starts.push(p);
    }

    let mut best: Option<OptimOutcome> = None;
    for start in &starts {
        let outcome = bfgs_single(f, start, cfg)?;
        let better = match &best {
            None => true,
            Some(cur) => outcome.value < cur.value,
        };
        if better {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one start point"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_bowl_converges() {
        let f = |x: &Array1<f64>| {
            let v = (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            let g = array![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)];
            Some((v, g))
        };
        let cfg = OptimConfig::boxed(2, 5.0);
        let out = minimize_multistart(&f, &array![0.0, 0.0], &cfg).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-7);
        assert!((out.x[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let f = |x: &Array1<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = array![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a)
            ];
            Some((v, g))
        };
        let mut cfg = OptimConfig::boxed(2, 2.0);
        cfg.max_iters = 2000;
        cfg.grad_tol = 1e-7;
        let out = minimize_multistart(&f, &array![-1.2, 1.0], &cfg).unwrap();
        assert!(out.value < 1e-12, "value {}", out.value);
    }

    #[test]
    fn restarts_escape_poor_local_minimum() {
        // double well with a shallow local minimum near x = -1.5
        let f = |x: &Array1<f64>| {
            let t = x[0];
            let v = 0.05 * (t + 1.5).powi(2) + 1.0 - (-(t - 2.0).powi(2)).exp();
            let g = array![0.1 * (t + 1.5) + 2.0 * (t - 2.0) * (-(t - 2.0).powi(2)).exp()];
            Some((v, g))
        };
        let mut cfg = OptimConfig::boxed(1, 4.0);
        cfg.seed = 3;
        let out = minimize_multistart(&f, &array![-1.5], &cfg).unwrap();
        assert!((out.x[0] - 2.0).abs() < 0.2, "x {}", out.x[0]);
    }

    #[test]
    fn divergence_reported() {
        let f = |x: &Array1<f64>| {
            if x[0].abs() > 1e3 {
                None
            } else {
                Some((f64::NAN, array![f64::NAN]))
            }
        };
        let cfg = OptimConfig::boxed(1, 1.0);
        assert!(matches!(
            minimize_multistart(&f, &array![0.5], &cfg),
            Err(OptimError::Diverged)
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let f = |x: &Array1<f64>| {
            let v = (x[0].sin() + x[0] * x[0] * 0.1, array![x[0].cos() + 0.2 * x[0]]);
            Some(v)
        };
        let cfg = OptimConfig::boxed(1, 6.0);
        let a = minimize_multistart(&f, &array![1.0], &cfg).unwrap();
        let b = minimize_multistart(&f, &array![1.0], &cfg).unwrap();
        assert_eq!(a.x[0].to_bits(), b.x[0].to_bits());
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }
}

//! Optimally weighted GMM over a finite instrument basis.
//!
//! Given instrument functions `f_1..f_k`, the estimator minimizes
//! `g(theta)ᵀ Gamma^{-1} g(theta)` where `g_i(theta)` is the sample mean of
//! `f_i(Z)ᵀ rho(X; theta)` and `Gamma` is the second-moment matrix of those
//! products at a prior parameter value. Two-step mode recomputes `Gamma` at
//! the stage-one estimate and re-minimizes. The same objective is the
//! supremum of the minimax criterion over the span of the basis with no
//! regularizer, which is what `verify owgmm-span` exercises.

use crate::moments::{Dataset, MomentError, MomentProblem};
use crate::numerics::{self, NumericsError, SpdFactor, SymMatrix};
use crate::optim::{self, OptimConfig, OptimError};
use ndarray::{Array1, Array2};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OwgmmError {
    #[error("instrument column {index} is identically zero on the data")]
    DegenerateInstrument { index: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Instrument function `z -> R^m`.
pub type InstrumentFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A finite set of instrument functions `F(Z) = (f_1(Z), ..., f_k(Z))`.
#[derive(Clone)]
pub struct InstrumentBasis {
    fns: Vec<InstrumentFn>,
    m: usize,
}

impl std::fmt::Debug for InstrumentBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstrumentBasis")
            .field("k", &self.fns.len())
            .field("m", &self.m)
            .finish()
    }
}

impl InstrumentBasis {
    pub fn new(fns: Vec<InstrumentFn>, m: usize) -> Self {
        assert!(!fns.is_empty(), "instrument basis must be non-empty");
        Self { fns, m }
    }

    /// Monomials of the instrument coordinates up to `degree`, applied to
    /// every residual dimension: `1, z_1, ..., z_d, z_1^2, ...`.
    pub fn polynomial(d_z: usize, m: usize, degree: u32) -> Self {
        let mut fns: Vec<InstrumentFn> = Vec::new();
        for deg in 0..=degree {
            if deg == 0 {
                for k in 0..m {
                    fns.push(Arc::new(move |_z: &[f64]| {
                        let mut v = vec![0.0; m];
                        v[k] = 1.0;
                        v
                    }));
                }
            } else {
                for coord in 0..d_z {
                    for k in 0..m {
                        fns.push(Arc::new(move |z: &[f64]| {
                            let mut v = vec![0.0; m];
                            v[k] = z[coord].powi(deg as i32);
                            v
                        }));
                    }
                }
            }
        }
        Self { fns, m }
    }

    pub fn k(&self) -> usize {
        self.fns.len()
    }

    pub fn residual_dim(&self) -> usize {
        self.m
    }

    pub fn eval(&self, i: usize, z: &[f64]) -> Vec<f64> {
        (self.fns[i])(z)
    }
}

/// Per-sample products `u[s, i] = f_i(z_s)ᵀ rho(x_s; theta)` (n x k), after
/// checking that no evaluated instrument column is identically zero.
fn basis_residual_products(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
) -> Result<Array2<f64>, OwgmmError> {
    let n = data.n();
    let k = basis.k();
    let m = problem.residual_dim();
    assert_eq!(basis.residual_dim(), m, "basis residual dimension mismatch");
    let mut u = Array2::zeros((n, k));
    let mut column_nonzero = vec![false; k];
    for s in 0..n {
        let rho = problem.residual(data.record(s), theta)?;
        let z = data.instrument(s);
        for i in 0..k {
            let f = basis.eval(i, z);
            debug_assert_eq!(f.len(), m);
            if f.iter().any(|v| *v != 0.0) {
                column_nonzero[i] = true;
            }
            u[[s, i]] = f.iter().zip(rho.iter()).map(|(a, b)| a * b).sum();
        }
    }
    if let Some(idx) = column_nonzero.iter().position(|ok| !ok) {
        return Err(OwgmmError::DegenerateInstrument { index: idx });
    }
    Ok(u)
}

/// `Gamma[i, j] = mean_s f_i(z_s)ᵀ rho_s rho_sᵀ f_j(z_s)` at the prior.
pub fn gamma_matrix(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta_prior: &[f64],
) -> Result<SymMatrix, OwgmmError> {
    let u = basis_residual_products(basis, problem, data, theta_prior)?;
    let n = data.n() as f64;
    Ok(SymMatrix::new(u.t().dot(&u) / n))
}

/// Empirical marginal moments `g_i(theta) = mean_s f_i(z_s)ᵀ rho(x_s; theta)`.
pub fn moment_vector(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
) -> Result<Array1<f64>, OwgmmError> {
    let u = basis_residual_products(basis, problem, data, theta)?;
    Ok(u.mean_axis(ndarray::Axis(0)).unwrap())
}

/// Jacobian of the moment vector: `dg[i, l] = mean_s f_i(z_s)ᵀ drho/dtheta_l`.
fn moment_jacobian(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
) -> Result<Array2<f64>, OwgmmError> {
    let n = data.n();
    let k = basis.k();
    let b = problem.param_dim();
    let m = problem.residual_dim();
    let mut dg = Array2::zeros((k, b));
    for s in 0..n {
        let jac = problem.jacobian(data.record(s), theta)?;
        let z = data.instrument(s);
        for i in 0..k {
            let f = basis.eval(i, z);
            for l in 0..b {
                let mut acc = 0.0;
                for kk in 0..m {
                    acc += f[kk] * jac[[kk, l]];
                }
                dg[[i, l]] += acc / n as f64;
            }
        }
    }
    Ok(dg)
}

/// `g(theta)ᵀ Gamma^{-1} g(theta)` with the jitter-escalated inverse.
pub fn owgmm_objective(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
    gamma: &SymMatrix,
) -> Result<f64, OwgmmError> {
    let factor = numerics::spd_factor_default(gamma)?;
    let g = moment_vector(basis, problem, data, theta)?;
    let x = numerics::spd_solve(&factor, &g)?;
    Ok(g.dot(&x))
}

/// Weighting used for the quadratic form.
#[derive(Clone, Debug)]
pub enum Weighting {
    /// `Gamma = I`: unweighted one-step GMM.
    Identity,
    /// `Gamma` from residuals at the supplied prior.
    Prior,
    /// Stage one at the prior, then recompute `Gamma` at the stage-one
    /// estimate and re-minimize.
    TwoStep,
}

#[derive(Clone, Debug)]
pub struct OwgmmConfig {
    pub weighting: Weighting,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug)]
pub struct OwgmmEstimate {
    pub theta_hat: Array1<f64>,
    pub gamma: SymMatrix,
    pub objective: f64,
    pub grad_sup_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn minimize_with_gamma(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    gamma: &SymMatrix,
    init: &Array1<f64>,
    cfg: &OptimConfig,
) -> Result<(Array1<f64>, f64, f64, usize, bool), OwgmmError> {
    let factor: SpdFactor = numerics::spd_factor_default(gamma)?;
    let eval = |theta: &Array1<f64>| -> Option<(f64, Array1<f64>)> {
        let tv: Vec<f64> = theta.to_vec();
        let g = moment_vector(basis, problem, data, &tv).ok()?;
        let x = numerics::spd_solve(&factor, &g).ok()?;
        let value = g.dot(&x);
        let dg = moment_jacobian(basis, problem, data, &tv).ok()?;
        let grad = 2.0 * dg.t().dot(&x);
        if value.is_finite() && grad.iter().all(|v| v.is_finite()) {
            Some((value, grad))
        } else {
            None
        }
    };
    let out = optim::minimize_multistart(&eval, init, cfg)?;
    Ok((
        out.x,
        out.value,
        out.grad_sup_norm,
        out.iterations,
        out.converged,
    ))
}

/// OWGMM point estimation.
pub fn owgmm_estimate(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta_prior: &[f64],
    config: &OwgmmConfig,
) -> Result<OwgmmEstimate, OwgmmError> {
    let k = basis.k();
    let prior = Array1::from_vec(theta_prior.to_vec());
    let gamma0 = match config.weighting {
        Weighting::Identity => SymMatrix::identity(k),
        Weighting::Prior | Weighting::TwoStep => gamma_matrix(basis, problem, data, theta_prior)?,
    };
    let (theta1, obj1, grad1, it1, conv1) =
        minimize_with_gamma(basis, problem, data, &gamma0, &prior, &config.optim)?;

    match config.weighting {
        Weighting::TwoStep => {
            let gamma1 = gamma_matrix(basis, problem, data, theta1.as_slice().unwrap())?;
            let (theta2, obj2, grad2, it2, conv2) =
                minimize_with_gamma(basis, problem, data, &gamma1, &theta1, &config.optim)?;
            Ok(OwgmmEstimate {
                theta_hat: theta2,
                gamma: gamma1,
                objective: obj2,
                grad_sup_norm: grad2,
                iterations: it1 + it2,
                converged: conv2,
            })
        }
        _ => Ok(OwgmmEstimate {
            theta_hat: theta1,
            gamma: gamma0,
            objective: obj1,
            grad_sup_norm: grad1,
            iterations: it1,
            converged: conv1,
        }),
    }
}

/// Evaluates the minimax criterion over the basis span directly on the data
/// at the coefficient vector `v`:
/// `mean_s (F v)ᵀ rho(x_s; theta) - (1/4) mean_s ((F v)ᵀ rho(x_s; prior))²`.
/// At the stationary `v* = 2 Gamma^{-1} g(theta)` this equals the OWGMM
/// objective, which is the content of the span-equivalence check.
pub fn span_game_value(
    basis: &InstrumentBasis,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
    theta_prior: &[f64],
    v: &Array1<f64>,
) -> Result<f64, OwgmmError> {
    let u_theta = basis_residual_products(basis, problem, data, theta)?;
    let u_prior = basis_residual_products(basis, problem, data, theta_prior)?;
    let n = data.n();
    let mut first = 0.0;
    let mut second = 0.0;
    for s in 0..n {
        let mut fv_rho = 0.0;
        let mut fv_rho_prior = 0.0;
        for i in 0..basis.k() {
            fv_rho += u_theta[[s, i]] * v[i];
            fv_rho_prior += u_prior[[s, i]] * v[i];
        }
        first += fv_rho;
        second += fv_rho_prior * fv_rho_prior;
    }
    Ok(first / n as f64 - 0.25 * second / n as f64)
}

//! Conditional moment problems `E[rho(X; theta0) | Z] = 0` and the three
//! built-in examples: linear instrumental variable regression, smoothed
//! instrumental quantile regression, and stationary density-ratio
//! estimation for off-policy evaluation.
//!
//! A raw record is a flat real vector with a layout fixed by the problem at
//! construction time; the instrument projection `x -> z` is part of the
//! problem definition, which keeps [`Dataset`] problem-agnostic.

use ndarray::{Array1, Array2};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("malformed record at index {index}: expected length {expected}, got {got}")]
    MalformedRecord {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("behavior policy probability is zero at record {index}")]
    ZeroBehaviorProbability { index: usize },
    #[error("parameter dimension mismatch: expected {expected}, got {got}")]
    ParameterDimension { expected: usize, got: usize },
}

/// Observations: raw records plus their instrument projections.
///
/// `instruments[i]` is always computed from `records[i]` by the projector
/// supplied at construction, so `Z` stays measurable with respect to `X`.
#[derive(Clone, Debug)]
pub struct Dataset {
    records: Vec<Vec<f64>>,
    instruments: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new<P>(records: Vec<Vec<f64>>, projector: P) -> Result<Self, MomentError>
    where
        P: Fn(usize, &[f64]) -> Result<Vec<f64>, MomentError>,
    {
        assert!(!records.is_empty(), "Dataset requires at least one record");
        let mut instruments = Vec::with_capacity(records.len());
        for (i, x) in records.iter().enumerate() {
            instruments.push(projector(i, x)?);
        }
        Ok(Self {
            records,
            instruments,
        })
    }

    /// Builds the dataset with the projection owned by `problem`.
    pub fn from_problem(
        records: Vec<Vec<f64>>,
        problem: &dyn MomentProblem,
    ) -> Result<Self, MomentError> {
        Dataset::new(records, |i, x| {
            problem.instrument(x).map_err(|e| match e {
                MomentError::MalformedRecord { expected, got, .. } => {
                    MomentError::MalformedRecord {
                        index: i,
                        expected,
                        got,
                    }
                }
                other => other,
            })
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn record(&self, i: usize) -> &[f64] {
        &self.records[i]
    }

    pub fn records(&self) -> &[Vec<f64>] {
        &self.records
    }

    pub fn instrument(&self, i: usize) -> &[f64] {
        &self.instruments[i]
    }

    pub fn instruments(&self) -> &[Vec<f64>] {
        &self.instruments
    }
}

/// A conditional moment problem with residual `rho: X x Theta -> R^m`,
/// its Jacobian in `theta`, and the instrument projection.
pub trait MomentProblem: Send + Sync {
    /// Residual dimension `m`.
    fn residual_dim(&self) -> usize;

    /// Parameter dimension `b`.
    fn param_dim(&self) -> usize;

    /// `rho(x; theta)` as an `m`-vector.
    fn residual(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, MomentError>;

    /// `m x b` Jacobian of the residual with respect to `theta`.
    fn jacobian(&self, x: &[f64], theta: &[f64]) -> Result<Array2<f64>, MomentError>;

    /// Instrument projection `x -> z`.
    fn instrument(&self, x: &[f64]) -> Result<Vec<f64>, MomentError>;

    /// Whether `rho` is affine in `theta`; affine problems admit a direct
    /// normal-equation minimizer.
    fn linear_in_theta(&self) -> bool {
        false
    }

    /// Optional scale normalization `cᵀ theta = 1` evaluated on the data.
    /// Problems identified only up to scale return the constraint vector.
    fn scale_constraint(&self, _data: &Dataset) -> Option<Array1<f64>> {
        None
    }
}

fn check_theta(problem: &dyn MomentProblem, theta: &[f64]) -> Result<(), MomentError> {
    if theta.len() != problem.param_dim() {
        return Err(MomentError::ParameterDimension {
            expected: problem.param_dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Stacks residuals into the `n x m` matrix with entry `(i, k) = rho_k(x_i; theta)`.
pub fn residual_matrix(
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
) -> Result<Array2<f64>, MomentError> {
    check_theta(problem, theta)?;
    let n = data.n();
    let m = problem.residual_dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let r = problem.residual(data.record(i), theta)?;
        for k in 0..m {
            out[[i, k]] = r[k];
        }
    }
    Ok(out)
}

/// Stacks Jacobians into the `(n*m) x b` matrix whose row `(k*n + i)` is the
/// gradient of `rho_k(x_i; theta)`; the flattening matches the Gram-matrix
/// index order used by the kernel estimators.
pub fn jacobian_matrix(
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
) -> Result<Array2<f64>, MomentError> {
    check_theta(problem, theta)?;
    let n = data.n();
    let m = problem.residual_dim();
    let b = problem.param_dim();
    let mut out = Array2::zeros((n * m, b));
    for i in 0..n {
        let j = problem.jacobian(data.record(i), theta)?;
        for k in 0..m {
            for l in 0..b {
                out[[k * n + i, l]] = j[[k, l]];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Example 1: linear instrumental variable regression
// ---------------------------------------------------------------------------

/// `rho(x; theta) = y - thetaᵀ t` with record layout `[z(d_z), t(b), y]`.
#[derive(Clone, Debug)]
pub struct LinearIvProblem {
    d_z: usize,
    b: usize,
}

impl LinearIvProblem {
    pub fn new(d_z: usize, b: usize) -> Self {
        assert!(d_z >= 1 && b >= 1);
        Self { d_z, b }
    }

    fn record_len(&self) -> usize {
        self.d_z + self.b + 1
    }

    fn decode<'a>(&self, x: &'a [f64]) -> Result<(&'a [f64], &'a [f64], f64), MomentError> {
        if x.len() != self.record_len() {
            return Err(MomentError::MalformedRecord {
                index: 0,
                expected: self.record_len(),
                got: x.len(),
            });
        }
        let z = &x[..self.d_z];
        let t = &x[self.d_z..self.d_z + self.b];
        let y = x[self.d_z + self.b];
        Ok((z, t, y))
    }

    /// Encodes one record from its parts.
    pub fn encode(&self, z: &[f64], t: &[f64], y: f64) -> Vec<f64> {
        assert_eq!(z.len(), self.d_z);
        assert_eq!(t.len(), self.b);
        let mut x = Vec::with_capacity(self.record_len());
        x.extend_from_slice(z);
        x.extend_from_slice(t);
        x.push(y);
        x
    }
}

impl MomentProblem for LinearIvProblem {
    fn residual_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.b
    }

    fn residual(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, MomentError> {
        let (_, t, y) = self.decode(x)?;
        let fit: f64 = theta.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        Ok(vec![y - fit])
    }

    fn jacobian(&self, x: &[f64], _theta: &[f64]) -> Result<Array2<f64>, MomentError> {
        let (_, t, _) = self.decode(x)?;
        let mut j = Array2::zeros((1, self.b));
        for l in 0..self.b {
            j[[0, l]] = -t[l];
        }
        Ok(j)
    }

    fn instrument(&self, x: &[f64]) -> Result<Vec<f64>, MomentError> {
        let (z, _, _) = self.decode(x)?;
        Ok(z.to_vec())
    }

    fn linear_in_theta(&self) -> bool {
        true
    }
}

/// Linear IV with instrument dimension equal to the parameter dimension.
pub fn linear_iv_problem(b: usize) -> LinearIvProblem {
    LinearIvProblem::new(b, b)
}

// ---------------------------------------------------------------------------
// Example 2: instrumental quantile regression, smoothed
// ---------------------------------------------------------------------------

/// Logistic smoothing temperature for the quantile indicator.
#[derive(Clone, Copy, Debug)]
pub struct SmoothingConfig {
    pub temperature: f64,
}

impl SmoothingConfig {
    pub fn new(temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self { temperature }
    }

    /// Default temperature `0.05 * sd(y)` from the outcomes.
    pub fn from_outcome_sd(ys: &[f64]) -> Self {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self::new(if sd > 0.0 { 0.05 * sd } else { 0.05 })
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `rho(x; theta) = sigma((thetaᵀ t - y)/tau) - p`, the smoothed form of the
/// quantile indicator `1{y <= g(t; theta)} - p`; layout `[z(d_z), t(b), y]`.
///
/// The raw indicator is recovered as `tau -> 0`. The smoothing is what makes
/// gradient-based minimization possible; estimates carry the fixed-`tau`
/// approximation.
#[derive(Clone, Debug)]
pub struct QuantileIvProblem {
    d_z: usize,
    b: usize,
    p: f64,
    tau: f64,
}

impl QuantileIvProblem {
    pub fn new(d_z: usize, b: usize, p: f64, smoothing: SmoothingConfig) -> Self {
        assert!(d_z >= 1 && b >= 1);
        assert!(p > 0.0 && p < 1.0, "p must lie strictly inside (0, 1)");
        Self {
            d_z,
            b,
            p,
            tau: smoothing.temperature,
        }
    }

    fn record_len(&self) -> usize {
        self.d_z + self.b + 1
    }

    fn decode<'a>(&self, x: &'a [f64]) -> Result<(&'a [f64], &'a [f64], f64), MomentError> {
        if x.len() != self.record_len() {
            return Err(MomentError::MalformedRecord {
                index: 0,
                expected: self.record_len(),
                got: x.len(),
            });
        }
        Ok((
            &x[..self.d_z],
            &x[self.d_z..self.d_z + self.b],
            x[self.d_z + self.b],
        ))
    }

    pub fn encode(&self, z: &[f64], t: &[f64], y: f64) -> Vec<f64> {
        assert_eq!(z.len(), self.d_z);
        assert_eq!(t.len(), self.b);
        let mut x = Vec::with_capacity(self.record_len());
        x.extend_from_slice(z);
        x.extend_from_slice(t);
        x.push(y);
        x
    }
}

impl MomentProblem for QuantileIvProblem {
    fn residual_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.b
    }

    fn residual(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, MomentError> {
        let (_, t, y) = self.decode(x)?;
        let g: f64 = theta.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        Ok(vec![logistic((g - y) / self.tau) - self.p])
    }

    fn jacobian(&self, x: &[f64], theta: &[f64]) -> Result<Array2<f64>, MomentError> {
        let (_, t, y) = self.decode(x)?;
        let g: f64 = theta.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        let s = logistic((g - y) / self.tau);
        let w = s * (1.0 - s) / self.tau;
        let mut j = Array2::zeros((1, self.b));
        for l in 0..self.b {
            j[[0, l]] = w * t[l];
        }
        Ok(j)
    }

    fn instrument(&self, x: &[f64]) -> Result<Vec<f64>, MomentError> {
        let (z, _, _) = self.decode(x)?;
        Ok(z.to_vec())
    }
}

/// Scalar-treatment quantile IV at level `p`.
pub fn quantile_iv_problem(p: f64, smoothing: SmoothingConfig) -> QuantileIvProblem {
    QuantileIvProblem::new(1, 1, p, smoothing)
}

// ---------------------------------------------------------------------------
// Example 3: stationary density ratio between two policies
// ---------------------------------------------------------------------------

/// Policy evaluator `(a, s) -> probability`.
pub type PolicyEval = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Feature basis `s -> phi(s)` in `R^b`.
pub type FeatureBasis = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `rho(x; theta) = d(s; theta) pi_e(a|s)/pi_b(a|s) - d(s'; theta)` with
/// `d(s; theta) = thetaᵀ phi(s)`; record layout `[s(d_s), a(d_a), s'(d_s)]`
/// and instrument `z = s'`.
///
/// The ratio is identified only up to scale, so the problem exposes the
/// empirical normalization `mean(d(s_i; theta)) = 1` as its scale constraint
/// and estimates are rescaled to satisfy it exactly.
#[derive(Clone)]
pub struct DensityRatioProblem {
    d_s: usize,
    d_a: usize,
    b: usize,
    pi_e: PolicyEval,
    pi_b: PolicyEval,
    basis: FeatureBasis,
}

impl std::fmt::Debug for DensityRatioProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityRatioProblem")
            .field("d_s", &self.d_s)
            .field("d_a", &self.d_a)
            .field("b", &self.b)
            .finish()
    }
}

impl DensityRatioProblem {
    pub fn new(
        pi_e: PolicyEval,
        pi_b: PolicyEval,
        basis: FeatureBasis,
        b: usize,
        d_s: usize,
        d_a: usize,
    ) -> Self {
        assert!(b >= 1 && d_s >= 1 && d_a >= 1);
        Self {
            d_s,
            d_a,
            b,
            pi_e,
            pi_b,
            basis,
        }
    }

    fn record_len(&self) -> usize {
        2 * self.d_s + self.d_a
    }

    fn decode<'a>(&self, x: &'a [f64]) -> Result<(&'a [f64], &'a [f64], &'a [f64]), MomentError> {
        if x.len() != self.record_len() {
            return Err(MomentError::MalformedRecord {
                index: 0,
                expected: self.record_len(),
                got: x.len(),
            });
        }
        let s = &x[..self.d_s];
        let a = &x[self.d_s..self.d_s + self.d_a];
        let s_next = &x[self.d_s + self.d_a..];
        Ok((s, a, s_next))
    }

    pub fn encode(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.record_len());
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        x.extend_from_slice(s_next);
        x
    }

    fn ratio(&self, a: &[f64], s: &[f64]) -> Result<f64, MomentError> {
        let pb = (self.pi_b)(a, s);
        if pb <= 0.0 {
            return Err(MomentError::ZeroBehaviorProbability { index: 0 });
        }
        Ok((self.pi_e)(a, s) / pb)
    }
}

impl MomentProblem for DensityRatioProblem {
    fn residual_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.b
    }

    fn residual(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, MomentError> {
        let (s, a, s_next) = self.decode(x)?;
        let ratio = self.ratio(a, s)?;
        let phi_s = (self.basis)(s);
        let phi_next = (self.basis)(s_next);
        let d_s: f64 = theta.iter().zip(phi_s.iter()).map(|(a, b)| a * b).sum();
        let d_next: f64 = theta.iter().zip(phi_next.iter()).map(|(a, b)| a * b).sum();
        Ok(vec![d_s * ratio - d_next])
    }

    fn jacobian(&self, x: &[f64], _theta: &[f64]) -> Result<Array2<f64>, MomentError> {
        let (s, a, s_next) = self.decode(x)?;
        let ratio = self.ratio(a, s)?;
        let phi_s = (self.basis)(s);
        let phi_next = (self.basis)(s_next);
        let mut j = Array2::zeros((1, self.b));
        for l in 0..self.b {
            j[[0, l]] = phi_s[l] * ratio - phi_next[l];
        }
        Ok(j)
    }

    fn instrument(&self, x: &[f64]) -> Result<Vec<f64>, MomentError> {
        let (_, _, s_next) = self.decode(x)?;
        Ok(s_next.to_vec())
    }

    fn linear_in_theta(&self) -> bool {
        true
    }

    fn scale_constraint(&self, data: &Dataset) -> Option<Array1<f64>> {
        // mean of phi(s_i); cᵀ theta = 1 pins mean(d(s_i; theta)) = 1
        let n = data.n() as f64;
        let mut c = Array1::zeros(self.b);
        for i in 0..data.n() {
            let (s, _, _) = self.decode(data.record(i)).ok()?;
            let phi = (self.basis)(s);
            for l in 0..self.b {
                c[l] += phi[l] / n;
            }
        }
        Some(c)
    }
}

pub fn density_ratio_problem(
    pi_e: PolicyEval,
    pi_b: PolicyEval,
    basis: FeatureBasis,
    b: usize,
    d_s: usize,
    d_a: usize,
) -> DensityRatioProblem {
    DensityRatioProblem::new(pi_e, pi_b, basis, b, d_s, d_a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobian(
        problem: &dyn MomentProblem,
        x: &[f64],
        theta: &[f64],
        step: f64,
    ) -> Array2<f64> {
        let m = problem.residual_dim();
        let b = problem.param_dim();
        let mut j = Array2::zeros((m, b));
        for l in 0..b {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[l] += step;
            tm[l] -= step;
            let rp = problem.residual(x, &tp).unwrap();
            let rm = problem.residual(x, &tm).unwrap();
            for k in 0..m {
                j[[k, l]] = (rp[k] - rm[k]) / (2.0 * step);
            }
        }
        j
    }

    #[test]
    fn linear_iv_residual_examples() {
        let p = linear_iv_problem(1);
        let x = p.encode(&[0.3], &[1.0], 5.0);
        assert_eq!(p.residual(&x, &[2.0]).unwrap()[0], 3.0);
        assert_eq!(p.residual(&x, &[0.0]).unwrap()[0], 5.0);
        let x2 = p.encode(&[0.0], &[1.5], 0.0);
        assert_eq!(p.jacobian(&x2, &[0.0]).unwrap()[[0, 0]], -1.5);
    }

    #[test]
    fn linear_iv_rejects_malformed_record() {
        let p = linear_iv_problem(2);
        assert!(matches!(
            p.residual(&[1.0, 2.0], &[0.0, 0.0]),
            Err(MomentError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn quantile_residual_examples() {
        let p = quantile_iv_problem(0.5, SmoothingConfig::new(0.1));
        // y = g exactly: residual sigma(0) - 0.5 = 0
        let x = p.encode(&[0.0], &[1.0], 2.0);
        assert_eq!(p.residual(&x, &[2.0]).unwrap()[0], 0.0);
        // g - y = 0.1off with tau = 0.1: sigma(1) - 0.5
        let x2 = p.encode(&[0.0], &[1.0], 1.9);
        let r = p.residual(&x2, &[2.0]).unwrap()[0];
        assert!((r - 0.2310585786300049).abs() < 1e-12);
        // saturated indicator: g - y -> +inf gives p-complement
        let p25 = quantile_iv_problem(0.25, SmoothingConfig::new(0.1));
        let x3 = p25.encode(&[0.0], &[1.0], -1e9);
        let r3 = p25.residual(&x3, &[2.0]).unwrap()[0];
        assert!((r3 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn density_ratio_examples() {
        let uniform: PolicyEval = Arc::new(|_a, _s| 0.5);
        let basis: FeatureBasis = Arc::new(|s| vec![1.0 - s[0], s[0]]);
        let p = density_ratio_problem(uniform.clone(), uniform.clone(), basis.clone(), 2, 1, 1);
        // equal policies and constant ratio: rho = 0
        let x = p.encode(&[0.0], &[1.0], &[1.0]);
        let r = p.residual(&x, &[1.0, 1.0]).unwrap()[0];
        assert!(r.abs() < 1e-15);
        // theta = 0 gives rho = 0
        assert_eq!(p.residual(&x, &[0.0, 0.0]).unwrap()[0], 0.0);
        // ratio 2 with d(s) = d(s') = 1
        let double: PolicyEval = Arc::new(|_a, _s| 1.0);
        let p2 = density_ratio_problem(double, uniform, basis, 2, 1, 1);
        let r2 = p2.residual(&x, &[1.0, 1.0]).unwrap()[0];
        assert!((r2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn density_ratio_zero_behavior_probability() {
        let zero: PolicyEval = Arc::new(|_a, _s| 0.0);
        let one: PolicyEval = Arc::new(|_a, _s| 1.0);
        let basis: FeatureBasis = Arc::new(|s| vec![s[0]]);
        let p = density_ratio_problem(one, zero, basis, 1, 1, 1);
        let x = p.encode(&[0.5], &[0.0], &[0.5]);
        assert!(matches!(
            p.residual(&x, &[1.0]),
            Err(MomentError::ZeroBehaviorProbability { .. })
        ));
    }

    #[test]
    fn residual_matrix_paths() {
        let p = linear_iv_problem(1);
        // exact fit gives zero matrix
        let recs = vec![p.encode(&[0.1], &[1.0], 2.0), p.encode(&[0.2], &[3.0], 6.0)];
        let data = Dataset::from_problem(recs, &p).unwrap();
        let r = residual_matrix(&p, &data, &[2.0]).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        // hand-built 2x1 values
        let r2 = residual_matrix(&p, &data, &[1.0]).unwrap();
        assert_eq!(r2[[0, 0]], 1.0);
        assert_eq!(r2[[1, 0]], 3.0);
        // n = 1 row matches scalar evaluation
        let one = Dataset::from_problem(vec![p.encode(&[0.0], &[2.0], 7.0)], &p).unwrap();
        let row = residual_matrix(&p, &one, &[1.5]).unwrap();
        assert_eq!(row[[0, 0]], p.residual(one.record(0), &[1.5]).unwrap()[0]);
    }

    #[test]
    fn residual_matrix_is_deterministic() {
        let p = quantile_iv_problem(0.3, SmoothingConfig::new(0.07));
        let recs: Vec<Vec<f64>> = (0..20)
            .map(|i| p.encode(&[i as f64 * 0.1], &[(i as f64).sin()], (i as f64).cos()))
            .collect();
        let data = Dataset::from_problem(recs, &p).unwrap();
        let a = residual_matrix(&p, &data, &[0.4]).unwrap();
        let b = residual_matrix(&p, &data, &[0.4]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = crate::rng::SplitMix64::new(123);
        let linear = LinearIvProblem::new(2, 2);
        let quantile = QuantileIvProblem::new(1, 2, 0.4, SmoothingConfig::new(0.3));
        let pe: PolicyEval = Arc::new(|a, s| 0.3 + 0.4 * ((a[0] + s[0]).tanh() * 0.5 + 0.5));
        let pb: PolicyEval = Arc::new(|_a, _s| 0.5);
        let basis: FeatureBasis = Arc::new(|s| vec![1.0, s[0]]);
        let ratio = DensityRatioProblem::new(pe, pb, basis, 2, 1, 1);

        let problems: Vec<(&dyn MomentProblem, usize)> =
            vec![(&linear, 5), (&quantile, 4), (&ratio, 3)];
        for (problem, len) in problems {
            for _ in 0..100 {
                let x: Vec<f64> = (0..len).map(|_| rng.next_normal()).collect();
                let theta: Vec<f64> = (0..problem.param_dim()).map(|_| rng.next_normal()).collect();
                let analytic = problem.jacobian(&x, &theta).unwrap();
                let numeric = fd_jacobian(problem, &x, &theta, 1e-5);
                for (a, f) in analytic.iter().zip(numeric.iter()) {
                    let denom = a.abs().max(f.abs()).max(1e-6);
                    assert!(
                        (a - f).abs() / denom <= 1e-4,
                        "jacobian mismatch: analytic {a}, numeric {f}"
                    );
                }
            }
        }
    }

    #[test]
    fn scale_constraint_mean_features() {
        let uniform: PolicyEval = Arc::new(|_a, _s| 0.5);
        let basis: FeatureBasis = Arc::new(|s| vec![1.0 - s[0], s[0]]);
        let p = density_ratio_problem(uniform.clone(), uniform, basis, 2, 1, 1);
        let recs = vec![
            p.encode(&[0.0], &[0.0], &[1.0]),
            p.encode(&[1.0], &[0.0], &[0.0]),
            p.encode(&[1.0], &[1.0], &[1.0]),
        ];
        let data = Dataset::from_problem(recs, &p).unwrap();
        let c = p.scale_constraint(&data).unwrap();
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((c[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}

//! Plug-in asymptotic covariance estimation and Wald intervals.
//!
//! Two routes are provided. The efficient plug-in estimates
//! `Omega0[i,j] = E[ E[rho'_i|Z]ᵀ V(Z)^{-1} E[rho'_j|Z] ]` by Nadaraya-Watson
//! regression of Jacobians and outer residual products on the instruments,
//! with an eigenvalue floor on the estimated `V`. The general sandwich
//! `Omega^{-1} Delta Omega^{-1}` is computed entirely in the representer
//! basis of the Gram assembly:
//!
//! ```text
//! Omega[i,j] = (1/n²) rho'_iᵀ A rho'_j            A = L (Q + aL)^{-1} L
//! w_i        = (1/n)  (Q + aL)^{-1} L rho'_i
//! Delta[i,j] = w_iᵀ Q(theta_hat) w_j
//! ```
//!
//! which collapses to `Delta ≈ Omega` when the weighting prior equals the
//! estimate (the efficient case, up to the `alpha` regularization).

use crate::kernel_vmm::{GramAssembly, VmmError};
use crate::kernels::{self, KernelSpec};
use crate::linalg;
use crate::moments::{self, Dataset, MomentProblem};
use crate::numerics::{self, NumericsError, SymMatrix};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("degenerate data for conditional regression")]
    DegenerateData,
    #[error("estimated conditional second moment is singular even after flooring (min eigenvalue {min_eig:e} < floor {floor:e})")]
    SingularV { min_eig: f64, floor: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Vmm(#[from] VmmError),
}

// ---------------------------------------------------------------------------
// Nadaraya-Watson conditional regression
// ---------------------------------------------------------------------------

/// Kernel-weighted conditional mean with a ridge floor in the normalizer:
/// `prediction(z) = sum_i w_i(z) target_i`, `w_i = K(z, z_i) / (sum_j K(z, z_j) + eps)`.
#[derive(Clone, Debug)]
pub struct NwRegressor {
    zs: Vec<Vec<f64>>,
    targets: Array2<f64>,
    spec: KernelSpec,
    ridge: f64,
}

pub fn fit_conditional(
    zs: &[Vec<f64>],
    targets: &Array2<f64>,
    spec: &KernelSpec,
    ridge: f64,
) -> Result<NwRegressor, InferenceError> {
    assert!(zs.len() >= 2, "conditional regression needs n >= 2");
    assert_eq!(zs.len(), targets.nrows());
    assert!(ridge >= 0.0);
    if zs.iter().all(|z| z == &zs[0]) {
        return Err(InferenceError::DegenerateData);
    }
    Ok(NwRegressor {
        zs: zs.to_vec(),
        targets: targets.clone(),
        spec: spec.clone(),
        ridge,
    })
}

impl NwRegressor {
    pub fn predict(&self, z: &[f64]) -> Array1<f64> {
        let d = self.targets.ncols();
        let mut acc = Array1::zeros(d);
        let mut norm = self.ridge;
        for (i, zi) in self.zs.iter().enumerate() {
            let w = kernels::eval_kernel(&self.spec, z, zi).unwrap_or(0.0);
            norm += w;
            for j in 0..d {
                acc[j] += w * self.targets[[i, j]];
            }
        }
        if norm > 0.0 {
            acc / norm
        } else {
            acc
        }
    }
}

// ---------------------------------------------------------------------------
// Conditional moment models for the efficient plug-in
// ---------------------------------------------------------------------------

/// Supplies `E[rho'(X; theta)|Z = z]` (m x b) and `V(z) = E[rho rhoᵀ | Z = z]`
/// (m x m). Production code fits these by Nadaraya-Watson; tests may inject
/// oracles.
pub trait ConditionalMoments {
    fn mean_jacobian(&self, z: &[f64]) -> Array2<f64>;
    fn second_moment(&self, z: &[f64]) -> Array2<f64>;
}

#[derive(Clone, Debug)]
pub struct RegressConfig {
    /// Kernel for the weights; defaults to a Gaussian at the median pairwise
    /// distance of the instruments.
    pub spec: Option<KernelSpec>,
    pub ridge: f64,
    /// Relative eigenvalue floor for the estimated `V`: `floor = v_floor_rel * tr(V)/m`.
    pub v_floor_rel: f64,
}

impl Default for RegressConfig {
    fn default() -> Self {
        Self {
            spec: None,
            ridge: 1e-8,
            v_floor_rel: 1e-6,
        }
    }
}

/// Nadaraya-Watson instantiation of [`ConditionalMoments`] at a parameter.
pub struct NwConditionalMoments {
    jac: NwRegressor,
    second: NwRegressor,
    m: usize,
    b: usize,
}

impl NwConditionalMoments {
    pub fn fit(
        problem: &dyn MomentProblem,
        data: &Dataset,
        theta: &[f64],
        cfg: &RegressConfig,
    ) -> Result<Self, InferenceError> {
        let n = data.n();
        let m = problem.residual_dim();
        let b = problem.param_dim();
        let spec = match &cfg.spec {
            Some(s) => s.clone(),
            None => KernelSpec::gaussian(
                kernels::median_bandwidth(data.instruments())
                    .map_err(|_| InferenceError::DegenerateData)?,
            ),
        };
        let mut jac_t = Array2::zeros((n, m * b));
        let mut sec_t = Array2::zeros((n, m * m));
        for i in 0..n {
            let j = problem
                .jacobian(data.record(i), theta)
                .map_err(VmmError::from)?;
            let r = problem
                .residual(data.record(i), theta)
                .map_err(VmmError::from)?;
            for k in 0..m {
                for l in 0..b {
                    jac_t[[i, k * b + l]] = j[[k, l]];
                }
                for k2 in 0..m {
                    sec_t[[i, k * m + k2]] = r[k] * r[k2];
                }
            }
        }
        let jac = fit_conditional(data.instruments(), &jac_t, &spec, cfg.ridge)?;
        let second = fit_conditional(data.instruments(), &sec_t, &spec, cfg.ridge)?;
        Ok(Self { jac, second, m, b })
    }
}

impl ConditionalMoments for NwConditionalMoments {
    fn mean_jacobian(&self, z: &[f64]) -> Array2<f64> {
        let flat = self.jac.predict(z);
        let mut out = Array2::zeros((self.m, self.b));
        for k in 0..self.m {
            for l in 0..self.b {
                out[[k, l]] = flat[k * self.b + l];
            }
        }
        out
    }

    fn second_moment(&self, z: &[f64]) -> Array2<f64> {
        let flat = self.second.predict(z);
        let mut out = Array2::zeros((self.m, self.m));
        for k in 0..self.m {
            for k2 in 0..self.m {
                out[[k, k2]] = flat[k * self.m + k2];
            }
        }
        out
    }
}

/// Floors the eigenvalues of a symmetric matrix at `floor` and returns the
/// reconstructed matrix together with the smallest floored eigenvalue.
fn floor_eigenvalues(v: &SymMatrix, floor: f64) -> (SymMatrix, f64) {
    let (vals, vecs) = linalg::sym_eigen(v.array());
    let m = v.dim();
    let mut rec = Array2::zeros((m, m));
    let mut min_after = f64::INFINITY;
    for k in 0..m {
        let lam = vals[k].max(floor);
        min_after = min_after.min(lam);
        for i in 0..m {
            for j in 0..m {
                rec[[i, j]] += lam * vecs[[i, k]] * vecs[[j, k]];
            }
        }
    }
    (SymMatrix::new(rec), min_after)
}

/// Efficient-covariance plug-in: `(1/n) sum_i g(z_i)ᵀ V(z_i)^{-1} g(z_i)`
/// with `g` and `V` supplied by the conditional model.
pub fn omega0_plug_in(
    data: &Dataset,
    b: usize,
    m: usize,
    cond: &dyn ConditionalMoments,
    v_floor_rel: f64,
) -> Result<SymMatrix, InferenceError> {
    let n = data.n();
    let mut omega = Array2::zeros((b, b));
    for i in 0..n {
        let z = data.instrument(i);
        let g = cond.mean_jacobian(z);
        let v = SymMatrix::new(cond.second_moment(z));
        let floor = v_floor_rel * v.trace() / m as f64;
        let (v_floored, min_after) = floor_eigenvalues(&v, floor);
        if !(min_after >= floor) || floor <= 0.0 {
            return Err(InferenceError::SingularV {
                min_eig: min_after,
                floor,
            });
        }
        let factor = numerics::spd_factor_default(&v_floored)?;
        // V^{-1} g, column by column
        let vinv_g = numerics::spd_solve_mat(&factor, &g)?;
        let contrib = g.t().dot(&vinv_g);
        omega.zip_mut_with(&contrib, |o, &c| *o += c / n as f64);
    }
    Ok(SymMatrix::new(omega))
}

// ---------------------------------------------------------------------------
// Sandwich covariance in Gram coordinates
// ---------------------------------------------------------------------------

/// Covariance report for a parameter estimate.
#[derive(Clone, Debug)]
pub struct InferenceReport {
    pub theta_hat: Array1<f64>,
    pub omega: SymMatrix,
    pub delta: SymMatrix,
    /// Finite-sample covariance of `theta_hat` (already divided by n).
    pub covariance: SymMatrix,
    pub std_errors: Array1<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
    pub n: usize,
    /// Set when the weighting prior coincides with the estimate, in which
    /// case the sandwich collapses and `covariance ≈ Omega^{-1}/n`.
    pub efficient_case: bool,
    pub warnings: Vec<String>,
}

/// Sandwich covariance `Omega^{-1} Delta Omega^{-1} / n` in the representer
/// basis of `asm`, with Wald intervals at `1 - gamma`.
pub fn sandwich_covariance(
    asm: &GramAssembly,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta_hat: &[f64],
    gamma: f64,
) -> Result<InferenceReport, InferenceError> {
    assert!(gamma > 0.0 && gamma < 1.0);
    let n = data.n();
    let b = problem.param_dim();
    let nf = n as f64;
    let mut warnings = Vec::new();

    let jac = moments::jacobian_matrix(problem, data, theta_hat).map_err(VmmError::from)?;
    // Omega[i,j] = (1/n²) rho'_i' A rho'_j, and w_i = (1/n)(Q+aL)^{-1}L rho'_i
    let mut omega = Array2::zeros((b, b));
    let mut w_cols = Array2::zeros((jac.nrows(), b));
    for l in 0..b {
        let col = jac.column(l).to_owned();
        let a_col = asm.apply_a(&col);
        for i in 0..b {
            omega[[i, l]] = jac.column(i).dot(&a_col) / (nf * nf);
        }
        let w = asm.apply_reg_inverse_l(&col) / nf;
        w_cols.column_mut(l).assign(&w);
    }
    let omega = SymMatrix::new(omega);

    // Delta[i,j] = w_i' Q(theta_hat) w_j
    let res_hat = moments::residual_matrix(problem, data, theta_hat).map_err(VmmError::from)?;
    let mut delta = Array2::zeros((b, b));
    for l in 0..b {
        let q_w = asm.apply_q_at(&res_hat, &w_cols.column(l).to_owned());
        for i in 0..b {
            delta[[i, l]] = w_cols.column(i).dot(&q_w);
        }
    }
    let delta = SymMatrix::new(delta);

    let factor = numerics::spd_factor_default(&omega)?;
    if factor.jitter_used() > 0.0 {
        warnings.push(format!(
            "weighting matrix is numerically singular (jitter {:e} applied); \
             the parametrization may be degenerate",
            factor.jitter_used()
        ));
    }
    // Omega^{-1} Delta Omega^{-1} / n
    let inv_delta = numerics::spd_solve_mat(&factor, delta.array())?;
    let sandwich = numerics::spd_solve_mat(&factor, &inv_delta.t().to_owned())?;
    let covariance = SymMatrix::new(sandwich / nf);

    let std_errors = covariance
        .array()
        .diag()
        .mapv(|v| if v > 0.0 { v.sqrt() } else { 0.0 });
    let theta_hat = Array1::from_vec(theta_hat.to_vec());
    let intervals = wald_intervals(&theta_hat, &covariance, gamma);

    let efficient_case = theta_hat
        .iter()
        .zip(asm.theta_prior().iter())
        .all(|(a, b)| (a - b).abs() <= 1e-10 * a.abs().max(1.0));

    Ok(InferenceReport {
        theta_hat,
        omega,
        delta,
        covariance,
        std_errors,
        intervals,
        level: 1.0 - gamma,
        n,
        efficient_case,
        warnings,
    })
}

/// Per-coordinate Wald intervals `theta_i ± z_{1-gamma/2} sqrt(cov_ii)`.
pub fn wald_intervals(
    theta_hat: &Array1<f64>,
    covariance: &SymMatrix,
    gamma: f64,
) -> Vec<(f64, f64)> {
    let z = normal_quantile(1.0 - gamma / 2.0);
    theta_hat
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let v = covariance.array()[[i, i]];
            let half = if v > 0.0 { z * v.sqrt() } else { 0.0 };
            (t - half, t + half)
        })
        .collect()
}

/// Standard normal quantile by the Wichura rational approximation; absolute
/// error below 1e-9 across (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0, 1)");
    const A: [f64; 8] = [
        3.387_132_872_796_366_608e0,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_545_703e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_3e0,
        4.630_337_846_156_545_295_9e0,
        5.769_497_221_460_691_405_5e0,
        3.647_848_324_763_204_605e0,
        1.270_458_252_452_368_382_6e0,
        2.417_807_251_774_506_117_7e-1,
        2.272_384_498_926_918_458_3e-2,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_9e0,
        1.676_384_830_183_803_849_4e0,
        6.897_673_349_851_000_045_5e-1,
        1.481_039_764_274_800_745_9e-1,
        1.519_866_656_361_645_719_7e-2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_2e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2e0,
        5.463_784_911_164_114_369_9e0,
        1.784_826_539_917_291_335_8e0,
        2.965_605_718_285_048_912_3e-1,
        2.653_218_952_657_612_309_3e-2,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_2e-5,
        2.010_334_399_292_288_132_6e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_9e-1,
        1.369_298_809_227_358_053_1e-1,
        1.487_536_129_085_061_485_3e-2,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_6e-15,
    ];

    fn poly(coef: &[f64; 8], r: f64) -> f64 {
        coef.iter().rev().fold(0.0, |acc, &c| acc * r + c)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_vmm::{k_step_estimate, VmmConfig};
    use crate::moments::linear_iv_problem;
    use crate::rng::SplitMix64;
    use ndarray::array;

    #[test]
    fn normal_quantile_reference_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        assert!((normal_quantile(0.025) + 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.9995) - 3.290526731491926).abs() < 1e-9);
    }

    #[test]
    fn nw_constant_targets_reproduced() {
        let zs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.3]).collect();
        let targets = Array2::from_elem((10, 1), 4.2);
        let reg = fit_conditional(&zs, &targets, &KernelSpec::gaussian(1.0), 1e-8).unwrap();
        for z in &zs {
            let p = reg.predict(z);
            assert!((p[0] - 4.2).abs() < 1e-7);
        }
    }

    #[test]
    fn nw_weight_concentration_at_training_point() {
        let zs = vec![vec![0.0], vec![10.0]];
        let targets = ndarray::array![[1.0], [5.0]];
        let reg = fit_conditional(&zs, &targets, &KernelSpec::gaussian(0.1), 1e-12).unwrap();
        let p = reg.predict(&[0.0]);
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nw_ridge_saturation() {
        let zs = vec![vec![0.0], vec![1.0]];
        let targets = ndarray::array![[3.0], [3.0]];
        let reg = fit_conditional(&zs, &targets, &KernelSpec::gaussian(1.0), 1e12).unwrap();
        let p = reg.predict(&[0.5]);
        assert!(p[0].abs() < 1e-10);
    }

    #[test]
    fn nw_degenerate_data_rejected() {
        let zs = vec![vec![1.0], vec![1.0]];
        let targets = ndarray::array![[1.0], [2.0]];
        assert!(matches!(
            fit_conditional(&zs, &targets, &KernelSpec::gaussian(1.0), 1e-8),
            Err(InferenceError::DegenerateData)
        ));
    }

    struct OracleConditionals {
        scale: f64,
        sigma2: f64,
        a: f64,
    }

    impl ConditionalMoments for OracleConditionals {
        fn mean_jacobian(&self, z: &[f64]) -> Array2<f64> {
            array![[-self.a * z[0] * self.scale]]
        }
        fn second_moment(&self, _z: &[f64]) -> Array2<f64> {
            array![[self.sigma2 * self.scale * self.scale]]
        }
    }

    fn gaussian_design_data(
        n: usize,
        a: f64,
        sigma: f64,
        seed: u64,
    ) -> (crate::moments::LinearIvProblem, Dataset) {
        let p = linear_iv_problem(1);
        let mut rng = SplitMix64::new(seed);
        let recs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = rng.next_normal();
                let t = a * z + 0.5 * rng.next_normal();
                let y = 1.5 * t + sigma * rng.next_normal();
                p.encode(&[z], &[t], y)
            })
            .collect();
        let data = Dataset::from_problem(recs, &p).unwrap();
        (p, data)
    }

    #[test]
    fn omega0_all_ones_plug_in() {
        struct Ones;
        impl ConditionalMoments for Ones {
            fn mean_jacobian(&self, _z: &[f64]) -> Array2<f64> {
                array![[1.0]]
            }
            fn second_moment(&self, _z: &[f64]) -> Array2<f64> {
                array![[1.0]]
            }
        }
        let (_, data) = gaussian_design_data(50, 1.0, 1.0, 3);
        let omega = omega0_plug_in(&data, 1, 1, &Ones, 1e-6).unwrap();
        assert!((omega.array()[[0, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn omega0_oracle_matches_analytic_gaussian_design() {
        // analytic value a² E[Z²] / sigma²; with oracle conditionals the
        // only error is the law-of-large-numbers average of z²
        let (a, sigma) = (1.3, 0.8);
        for seed in [1u64, 2, 3] {
            let (_, data) = gaussian_design_data(4000, a, sigma, seed);
            let oracle = OracleConditionals {
                scale: 1.0,
                sigma2: sigma * sigma,
                a,
            };
            let omega = omega0_plug_in(&data, 1, 1, &oracle, 1e-6).unwrap();
            let expect = a * a / (sigma * sigma);
            let rel = (omega.array()[[0, 0]] - expect).abs() / expect;
            assert!(rel < 0.10, "seed {seed}: rel error {rel}");
        }
    }

    #[test]
    fn omega0_scale_invariance_with_oracles() {
        // scaling rho by c scales g by c and V by c²; Omega0 is unchanged
        let (_, data) = gaussian_design_data(500, 1.0, 1.0, 9);
        let base = OracleConditionals {
            scale: 1.0,
            sigma2: 1.0,
            a: 1.0,
        };
        let scaled = OracleConditionals {
            scale: 3.0,
            sigma2: 1.0,
            a: 1.0,
        };
        let o1 = omega0_plug_in(&data, 1, 1, &base, 1e-6).unwrap();
        let o2 = omega0_plug_in(&data, 1, 1, &scaled, 1e-6).unwrap();
        let rel = (o1.array()[[0, 0]] - o2.array()[[0, 0]]).abs() / o1.array()[[0, 0]];
        assert!(rel < 1e-12);
    }

    #[test]
    fn sandwich_collapses_in_efficient_case() {
        let (p, data) = gaussian_design_data(1000, 1.0, 1.0, 17);
        let cfg = VmmConfig::default();
        let sol = k_step_estimate(&p, &data, &[KernelSpec::gaussian(1.0)], 2, &[0.0], &cfg)
            .unwrap();
        let asm = GramAssembly::assemble(
            &p,
            &data,
            &[KernelSpec::gaussian(1.0)],
            sol.theta_hat.as_slice().unwrap(),
            sol.alpha,
        )
        .unwrap();
        let report =
            sandwich_covariance(&asm, &p, &data, sol.theta_hat.as_slice().unwrap(), 0.05)
                .unwrap();
        assert!(report.efficient_case);
        let o = report.omega.array()[[0, 0]];
        let d = report.delta.array()[[0, 0]];
        assert!(
            (o - d).abs() / o.abs() <= 0.05,
            "Omega {o} vs Delta {d}: relative gap {}",
            (o - d).abs() / o.abs()
        );
    }

    #[test]
    fn duplicate_parameters_trigger_degeneracy_warning() {
        // two identical treatment columns make Omega singular
        let p = crate::moments::LinearIvProblem::new(1, 2);
        let mut rng = SplitMix64::new(30);
        let recs: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let z = rng.next_normal();
                let t = z + 0.4 * rng.next_normal();
                let y = 0.7 * t + 0.5 * rng.next_normal();
                p.encode(&[z], &[t, t], y)
            })
            .collect();
        let data = Dataset::from_problem(recs, &p).unwrap();
        let asm =
            GramAssembly::assemble(&p, &data, &[KernelSpec::gaussian(1.0)], &[0.3, 0.3], 0.02)
                .unwrap();
        let report = sandwich_covariance(&asm, &p, &data, &[0.3, 0.3], 0.05).unwrap();
        assert!(
            !report.warnings.is_empty(),
            "expected a degeneracy warning, got none"
        );
    }

    #[test]
    fn wald_interval_shapes() {
        let theta = array![1.0, -2.0];
        let cov = SymMatrix::zeros(2);
        let ints = wald_intervals(&theta, &cov, 0.05);
        assert_eq!(ints[0], (1.0, 1.0));
        assert_eq!(ints[1], (-2.0, -2.0));

        let n = 400.0;
        let cov = SymMatrix::new(Array2::eye(2) / n);
        let ints = wald_intervals(&theta, &cov, 0.05);
        let half = 1.959963984540054 / n.sqrt();
        assert!((ints[0].1 - (1.0 + half)).abs() < 1e-12);
        assert!((ints[1].0 - (-2.0 - half)).abs() < 1e-12);
    }
}

//! Randomized self-check suites behind `vmm verify`.
//!
//! Each suite draws fresh instances from its seed, runs one named check per
//! instance (or one aggregate check), and reports machine-readable results.
//! The oracles here are deliberately independent of the closed-form paths
//! they test: quadratic suprema are computed by conjugate-gradient iteration
//! on matrix-vector products alone, never through a factorization.

use crate::kernel_vmm::{self, GramAssembly, VmmConfig};
use crate::kernels::{self, KernelSpec};
use crate::moments::{self, Dataset, MomentError, MomentProblem};
use crate::neural_vmm::{GameContext, MlpNetwork, RegularizerChoice};
use crate::numerics::{self, SymMatrix};
use crate::owgmm::{self, InstrumentBasis};
use crate::rng::{derive_stream, SplitMix64};
use crate::simulation::{self, DgpSpec, EstimatorSpec};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// The suites `vmm verify` accepts, in display order.
pub const SUITES: &[&str] = &[
    "lemma1",
    "lemma6",
    "lemma7",
    "variational-identity",
    "gradients",
    "kstep",
    "efficiency",
    "coverage",
    "neural-dominance",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured discrepancy or statistic.
    pub value: f64,
    /// Threshold the value was compared against.
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: &str, seed: u64, checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self {
            suite: suite.to_string(),
            seed,
            passed,
            checks,
        }
    }
}

/// Runs the named suite; `None` when the suite does not exist.
pub fn run_suite(name: &str, seed: u64) -> Option<SuiteReport> {
    match name {
        "lemma1" => Some(owgmm_span_suite(seed)),
        "lemma6" => Some(closed_form_oracle_suite(seed)),
        "lemma7" => Some(kernel_iv_oracle_suite(seed)),
        "variational-identity" => Some(variational_identity_suite(seed)),
        "gradients" => Some(gradient_suite(seed)),
        "kstep" => Some(kstep_ordering_suite(seed)),
        "efficiency" => Some(efficiency_suite(seed)),
        "coverage" => Some(coverage_suite(seed)),
        "neural-dominance" => Some(neural_dominance_suite(seed)),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

pub mod oracles {
    use ndarray::{Array1, Array2};

    /// Conjugate gradients for `A x = b` with SPD `A` given only through
    /// matvecs; runs to a 1e-14 relative residual or `max_iters`.
    pub fn conjugate_gradient(
        apply: &dyn Fn(&Array1<f64>) -> Array1<f64>,
        b: &Array1<f64>,
        max_iters: usize,
    ) -> Array1<f64> {
        let mut x = Array1::zeros(b.len());
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rs = r.dot(&r);
        let b_norm = b.dot(b).sqrt().max(1e-300);
        for _ in 0..max_iters {
            if rs.sqrt() <= 1e-14 * b_norm {
                break;
            }
            let ap = apply(&p);
            let denom = p.dot(&ap);
            if denom <= 0.0 || !denom.is_finite() {
                break;
            }
            let alpha = rs / denom;
            x.zip_mut_with(&p, |xi, &pi| *xi += alpha * pi);
            r.zip_mut_with(&ap, |ri, &api| *ri -= alpha * api);
            let rs_new = r.dot(&r);
            let beta = rs_new / rs;
            rs = rs_new;
            let mut p_new = r.clone();
            p_new.zip_mut_with(&p, |pn, &pi| *pn += beta * pi);
            p = p_new;
        }
        x
    }

    /// `sup_v { lᵀv - (1/4) vᵀ H v }` for SPD `H`, by conjugate-gradient
    /// maximization; the value is evaluated at the iterate, not through any
    /// closed form.
    pub fn max_quadratic(apply_h: &dyn Fn(&Array1<f64>) -> Array1<f64>, lin: &Array1<f64>) -> f64 {
        // stationarity: H v = 2 l
        let b = 2.0 * lin;
        let v = conjugate_gradient(apply_h, &b, 40 * lin.len().max(8));
        lin.dot(&v) - 0.25 * v.dot(&apply_h(&v))
    }

    /// `sup_v { <h, v> - (1/4) <(C + alpha I) v, v> }` for PSD `c`.
    pub fn max_regularized_quadratic(c: &Array2<f64>, alpha: f64, h: &Array1<f64>) -> f64 {
        let apply = |v: &Array1<f64>| -> Array1<f64> {
            let mut out = c.dot(v);
            out.zip_mut_with(v, |o, &vi| *o += alpha * vi);
            out
        };
        max_quadratic(&apply, h)
    }

    /// Minimizer of `(1/2) xᵀ H x - bᵀ x` by conjugate gradients on matvecs.
    pub fn min_quadratic(
        apply_h: &dyn Fn(&Array1<f64>) -> Array1<f64>,
        b: &Array1<f64>,
        max_iters: usize,
    ) -> Array1<f64> {
        conjugate_gradient(apply_h, b, max_iters)
    }
}

// ---------------------------------------------------------------------------
// Synthetic affine problem for oracle suites
// ---------------------------------------------------------------------------

/// Residuals `rho(x; theta) = base + J theta` with the base vector and the
/// `m x b` Jacobian stored in the record. Exercises arbitrary `(m, b)`
/// without any modelling structure.
#[derive(Clone, Debug)]
pub struct SyntheticAffineProblem {
    pub d_z: usize,
    pub m: usize,
    pub b: usize,
}

impl SyntheticAffineProblem {
    fn record_len(&self) -> usize {
        self.d_z + self.m + self.m * self.b
    }

    pub fn encode(&self, z: &[f64], base: &[f64], jac: &Array2<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.record_len());
        x.extend_from_slice(z);
        x.extend_from_slice(base);
        for k in 0..self.m {
            for l in 0..self.b {
                x.push(jac[[k, l]]);
            }
        }
        x
    }
}

impl MomentProblem for SyntheticAffineProblem {
    fn residual_dim(&self) -> usize {
        self.m
    }

    fn param_dim(&self) -> usize {
        self.b
    }

    fn residual(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>, MomentError> {
        if x.len() != self.record_len() {
            return Err(MomentError::MalformedRecord {
                index: 0,
                expected: self.record_len(),
                got: x.len(),
            });
        }
        let base = &x[self.d_z..self.d_z + self.m];
        let jac = &x[self.d_z + self.m..];
        let mut r = Vec::with_capacity(self.m);
        for k in 0..self.m {
            let mut v = base[k];
            for l in 0..self.b {
                v += jac[k * self.b + l] * theta[l];
            }
            r.push(v);
        }
        Ok(r)
    }

    fn jacobian(&self, x: &[f64], _theta: &[f64]) -> Result<Array2<f64>, MomentError> {
        if x.len() != self.record_len() {
            return Err(MomentError::MalformedRecord {
                index: 0,
                expected: self.record_len(),
                got: x.len(),
            });
        }
        let jac = &x[self.d_z + self.m..];
        let mut out = Array2::zeros((self.m, self.b));
        for k in 0..self.m {
            for l in 0..self.b {
                out[[k, l]] = jac[k * self.b + l];
            }
        }
        Ok(out)
    }

    fn instrument(&self, x: &[f64]) -> Result<Vec<f64>, MomentError> {
        Ok(x[..self.d_z].to_vec())
    }

    fn linear_in_theta(&self) -> bool {
        true
    }
}

fn random_affine_instance(
    rng: &mut SplitMix64,
    n: usize,
    m: usize,
    b: usize,
) -> (SyntheticAffineProblem, Dataset) {
    let problem = SyntheticAffineProblem { d_z: 1, m, b };
    let records: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = vec![rng.next_normal()];
            let base: Vec<f64> = (0..m).map(|_| rng.next_normal()).collect();
            let mut jac = Array2::zeros((m, b));
            for v in jac.iter_mut() {
                *v = rng.next_normal();
            }
            problem.encode(&z, &base, &jac)
        })
        .collect();
    let data = Dataset::from_problem(records, &problem).unwrap();
    (problem, data)
}

// ---------------------------------------------------------------------------
// Suite: owgmm span equivalence (lemma1)
// ---------------------------------------------------------------------------

fn owgmm_span_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    let tol = 1e-8;
    for trial in 0..50u64 {
        let mut rng = SplitMix64::new(derive_stream(seed, trial));
        let n = 10 + (rng.next_u64() % 41) as usize; // up to 50
        let k = 1 + (rng.next_u64() % 4) as usize;
        let p = moments::linear_iv_problem(1);
        let records: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = rng.next_normal();
                let t = z + 0.5 * rng.next_normal();
                let y = 1.3 * t + 0.7 * rng.next_normal();
                p.encode(&[z], &[t], y)
            })
            .collect();
        let data = Dataset::from_problem(records, &p).unwrap();
        let basis = InstrumentBasis::polynomial(1, 1, (k - 1) as u32);
        let theta = vec![rng.next_range(-2.0, 2.0)];
        let theta_prior = vec![rng.next_range(-2.0, 2.0)];

        let result = (|| -> Result<(f64, f64), String> {
            let gamma = owgmm::gamma_matrix(&basis, &p, &data, &theta_prior)
                .map_err(|e| e.to_string())?;
            let objective = owgmm::owgmm_objective(&basis, &p, &data, &theta, &gamma)
                .map_err(|e| e.to_string())?;
            // stationary coefficient v* = 2 Gamma^{-1} g evaluated on data
            let g = owgmm::moment_vector(&basis, &p, &data, &theta).map_err(|e| e.to_string())?;
            let factor = numerics::spd_factor_default(&gamma).map_err(|e| e.to_string())?;
            let v_star = 2.0 * numerics::spd_solve(&factor, &g).map_err(|e| e.to_string())?;
            let game = owgmm::span_game_value(&basis, &p, &data, &theta, &theta_prior, &v_star)
                .map_err(|e| e.to_string())?;
            Ok((objective, game))
        })();

        let (name, passed, value, detail) = match result {
            Ok((objective, game)) => {
                let rel = (objective - game).abs() / objective.abs().max(1e-12);
                (
                    format!("span-equivalence-{trial:02}"),
                    rel <= tol,
                    rel,
                    format!("n={n} k={k} objective={objective:.6e} span-sup={game:.6e}"),
                )
            }
            Err(e) => (format!("span-equivalence-{trial:02}"), false, f64::NAN, e),
        };
        checks.push(CheckResult {
            name,
            passed,
            value,
            threshold: tol,
            detail,
        });
    }
    SuiteReport::new("lemma1", seed, checks)
}

// ---------------------------------------------------------------------------
// Suite: closed-form objective vs representer brute force (lemma6)
// ---------------------------------------------------------------------------

fn closed_form_oracle_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    let tol = 1e-8;
    for trial in 0..50u64 {
        let mut rng = SplitMix64::new(derive_stream(seed, trial));
        let n = 5 + (rng.next_u64() % 36) as usize; // up to 40
        let m = 1 + (rng.next_u64() % 2) as usize;
        let b = 1 + (rng.next_u64() % 2) as usize;
        let (problem, data) = random_affine_instance(&mut rng, n, m, b);
        let theta: Vec<f64> = (0..b).map(|_| rng.next_range(-1.5, 1.5)).collect();
        let theta_prior: Vec<f64> = (0..b).map(|_| rng.next_range(-1.5, 1.5)).collect();
        let alpha = 10f64.powf(rng.next_range(-2.0, 0.0));
        let bw = kernels::median_bandwidth(data.instruments()).unwrap();
        let specs = [KernelSpec::gaussian(bw)];

        let result = (|| -> Result<(f64, f64), String> {
            let asm = GramAssembly::assemble_with(
                &problem,
                &data,
                &specs,
                &theta_prior,
                alpha,
                kernel_vmm::AssemblyMode::Dense,
            )
            .map_err(|e| e.to_string())?;
            let closed = asm
                .objective(&problem, &data, &theta)
                .map_err(|e| e.to_string())?;
            // brute-force sup over representer coefficients:
            // (1/n) bᵀ L rho - (1/4) bᵀ (Q + alpha L) b
            let l = asm.l_matrix();
            let q = asm.q_matrix();
            let rho = kernel_vmm::flatten_residuals(
                &moments::residual_matrix(&problem, &data, &theta).map_err(|e| e.to_string())?,
            );
            let lin = l.array().dot(&rho) / n as f64;
            let apply_h = |v: &Array1<f64>| -> Array1<f64> {
                q.array().dot(v) + alpha * &l.array().dot(v)
            };
            let brute = oracles::max_quadratic(&apply_h, &lin);
            Ok((closed, brute))
        })();

        let (passed, value, detail) = match result {
            Ok((closed, brute)) => {
                let rel = (closed - brute).abs() / closed.abs().max(1e-12);
                (
                    rel <= tol,
                    rel,
                    format!("n={n} m={m} closed={closed:.8e} brute={brute:.8e}"),
                )
            }
            Err(e) => (false, f64::NAN, e),
        };
        checks.push(CheckResult {
            name: format!("closed-form-oracle-{trial:02}"),
            passed,
            value,
            threshold: tol,
            detail,
        });
    }
    SuiteReport::new("lemma6", seed, checks)
}

// ---------------------------------------------------------------------------
// Suite: closed-form kernel IV vs numerical coefficient minimizer (lemma7)
// ---------------------------------------------------------------------------

fn kernel_iv_oracle_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    let tol = 1e-5;
    for trial in 0..20u64 {
        let mut rng = SplitMix64::new(derive_stream(seed, trial));
        let n = 10 + (rng.next_u64() % 51) as usize; // up to 60
        // jittered grids with a matched bandwidth keep the Gram matrices
        // well-conditioned; coefficients on a numerically rank-deficient
        // Gram are not identified and the comparison would be vacuous
        let t: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![i as f64 + rng.next_range(-0.25, 0.25)])
            .collect();
        let z: Vec<Vec<f64>> = t
            .iter()
            .map(|ti| vec![0.8 * ti[0] + rng.next_range(-0.5, 0.5)])
            .collect();
        let y: Vec<f64> = t
            .iter()
            .map(|ti| (1.2 * ti[0]).sin() + 0.3 * rng.next_normal())
            .collect();
        let c0 = rng.next_range(-0.5, 0.5);
        let c1 = rng.next_range(-0.5, 0.5);
        let prior = move |tt: &[f64]| c0 + c1 * tt[0];
        let alpha = rng.next_range(0.05, 0.5);
        let lambda = rng.next_range(0.05, 0.5);
        let kf = KernelSpec::gaussian(0.7);
        let kg = KernelSpec::gaussian(0.7);

        let result = (|| -> Result<(f64, String), String> {
            let fit = kernel_vmm::kernel_iv_closed_form(
                &z, &t, &y, &kf, &kg, &prior, alpha, lambda,
            )
            .map_err(|e| e.to_string())?;
            // independent minimizer of (y - Lg b)ᵀ M (y - Lg b) + lambda bᵀ Lg b
            // via conjugate gradients on matvec products only
            let lg = kernels::gram_matrix(&kg, &t).map_err(|e| e.to_string())?;
            let m_mat = fit.m_matrix.clone();
            let apply_h = |v: &Array1<f64>| -> Array1<f64> {
                let lg_v = lg.array().dot(v);
                lg.array().dot(&m_mat.array().dot(&lg_v)) + lambda * &lg_v
            };
            let yv = Array1::from_vec(y.clone());
            let rhs = lg.array().dot(&m_mat.array().dot(&yv));
            let beta_oracle = oracles::min_quadratic(&apply_h, &rhs, 400 * n);
            let diff = (&fit.beta - &beta_oracle).dot(&(&fit.beta - &beta_oracle)).sqrt();
            let norm = beta_oracle.dot(&beta_oracle).sqrt().max(1e-12);
            Ok((
                diff / norm,
                format!("n={n} alpha={alpha:.3} lambda={lambda:.3}"),
            ))
        })();

        let (passed, value, detail) = match result {
            Ok((rel, detail)) => (rel <= tol, rel, detail),
            Err(e) => (false, f64::NAN, e),
        };
        checks.push(CheckResult {
            name: format!("kernel-iv-oracle-{trial:02}"),
            passed,
            value,
            threshold: tol,
            detail,
        });
    }
    SuiteReport::new("lemma7", seed, checks)
}

// ---------------------------------------------------------------------------
// Suite: variational identity (variational-identity)
// ---------------------------------------------------------------------------

fn variational_identity_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    let tol = 1e-8;
    let alphas = [1e-3, 1.0, 10.0];
    for trial in 0..100u64 {
        let mut rng = SplitMix64::new(derive_stream(seed, trial));
        let dim = 1 + (rng.next_u64() % 10) as usize;
        let mut b = Array2::zeros((dim, dim));
        for v in b.iter_mut() {
            *v = rng.next_normal();
        }
        let c = SymMatrix::new(b.dot(&b.t()));
        let mut h = Array1::zeros(dim);
        for v in h.iter_mut() {
            *v = rng.next_normal();
        }
        let alpha = alphas[(trial % 3) as usize];

        let (passed, value, detail) = match numerics::variational_quadratic(&c, alpha, &h) {
            Ok(closed) => {
                let numeric = oracles::max_regularized_quadratic(c.array(), alpha, &h);
                let rel = (closed - numeric).abs() / closed.abs().max(1e-12);
                (
                    rel <= tol,
                    rel,
                    format!("dim={dim} alpha={alpha} closed={closed:.8e} numeric={numeric:.8e}"),
                )
            }
            Err(e) => (false, f64::NAN, e.to_string()),
        };
        checks.push(CheckResult {
            name: format!("variational-identity-{trial:03}"),
            passed,
            value,
            threshold: tol,
            detail,
        });
    }
    SuiteReport::new("variational-identity", seed, checks)
}

// ---------------------------------------------------------------------------
// Suite: gradient checks (gradients)
// ---------------------------------------------------------------------------

fn gradient_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();

    // kernel VMM objective gradient vs central differences, 100 points
    let tol_kernel = 1e-6;
    let mut worst_kernel = 0.0f64;
    let mut kernel_detail = String::new();
    let mut kernel_ok = true;
    for trial in 0..100u64 {
        let mut rng = SplitMix64::new(derive_stream(seed, trial));
        let n = 10 + (rng.next_u64() % 21) as usize;
        let m = 1 + (rng.next_u64() % 2) as usize;
        let b = 1 + (rng.next_u64() % 2) as usize;
        let (problem, data) = random_affine_instance(&mut rng, n, m, b);
        let theta_prior: Vec<f64> = (0..b).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let alpha = 10f64.powf(rng.next_range(-2.0, -0.5));
        let bw = kernels::median_bandwidth(data.instruments()).unwrap();
        let asm = match GramAssembly::assemble(
            &problem,
            &data,
            &[KernelSpec::gaussian(bw)],
            &theta_prior,
            alpha,
        ) {
            Ok(a) => a,
            Err(e) => {
                kernel_ok = false;
                kernel_detail = e.to_string();
                break;
            }
        };
        let theta: Vec<f64> = (0..b).map(|_| rng.next_range(-1.5, 1.5)).collect();
        let grad = asm.objective_gradient(&problem, &data, &theta).unwrap();
        for l in 0..b {
            let h = 1e-5 * theta[l].abs().max(1.0);
            let mut tp = theta.clone();
            tp[l] += h;
            let mut tm = theta.clone();
            tm[l] -= h;
            let fp = asm.objective(&problem, &data, &tp).unwrap();
            let fm = asm.objective(&problem, &data, &tm).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[l] - fd).abs() / grad[l].abs().max(fd.abs()).max(1e-10);
            if rel > worst_kernel {
                worst_kernel = rel;
                kernel_detail = format!("trial {trial}, coord {l}: analytic {} fd {}", grad[l], fd);
            }
        }
    }
    checks.push(CheckResult {
        name: "kernel-objective-gradient".into(),
        passed: kernel_ok && worst_kernel <= tol_kernel,
        value: worst_kernel,
        threshold: tol_kernel,
        detail: kernel_detail,
    });

    // neural game value gradients vs central differences, 100 points
    let tol_neural = 1e-4;
    let mut worst_neural = 0.0f64;
    let mut neural_detail = String::new();
    let mut neural_ok = true;
    for trial in 0..100u64 {
        let mut rng = SplitMix64::new(derive_stream(seed.wrapping_add(0x5eed), trial));
        let n = 8 + (rng.next_u64() % 9) as usize;
        let p = moments::linear_iv_problem(1);
        // jittered-grid instruments keep the regularizer Gram matrix well
        // away from singularity; a near-singular inverse blows the game
        // value up and drowns the difference quotient in cancellation
        let records: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let z = i as f64 + rng.next_range(-0.3, 0.3);
                let t = 0.5 * z + 0.3 * rng.next_normal();
                p.encode(&[z], &[t], 0.9 * t + 0.4 * rng.next_normal())
            })
            .collect();
        let data = Dataset::from_problem(records, &p).unwrap();
        let mut net = MlpNetwork::new(1, 5, 2, 1);
        net.init_he(derive_stream(seed, 1000 + trial));
        // small outputs keep the kernel penalty out of the cancellation
        // regime of the difference quotient
        net.scale_params(0.3);
        let theta = [rng.next_range(-1.5, 1.5)];
        let theta_prior = [rng.next_range(-1.5, 1.5)];
        let reg = RegularizerChoice::Kernel {
            specs: vec![KernelSpec::gaussian(0.7)],
            alpha: 0.2,
        };
        let ctx = match GameContext::new(&p, &data, &theta_prior, &reg) {
            Ok(c) => c,
            Err(e) => {
                neural_ok = false;
                neural_detail = e.to_string();
                break;
            }
        };
        let res_theta = moments::residual_matrix(&p, &data, &theta).unwrap();
        let (outputs, cache) = net.forward_batch(data.instruments());
        let (_, d_out) = ctx.value_and_output_grad(&outputs, &res_theta);
        let grads = net.backward_batch(&cache, &d_out);
        let mut flat_grads = Vec::new();
        for l in 0..grads.d_weights.len() {
            flat_grads.extend(grads.d_weights[l].iter().copied());
            flat_grads.extend(grads.d_biases[l].iter().copied());
        }
        let params = net.params_flat();
        // sample a handful of adversary coordinates per point
        for _ in 0..6 {
            let idx = (rng.next_u64() % params.len() as u64) as usize;
            let h = 1e-6;
            let mut np = net.clone();
            let mut pp = params.clone();
            pp[idx] += h;
            np.set_params_flat(&pp);
            let (op, _) = np.forward_batch(data.instruments());
            let vp = ctx.value(&op, &res_theta);
            let mut pm = params.clone();
            pm[idx] -= h;
            np.set_params_flat(&pm);
            let (om, _) = np.forward_batch(data.instruments());
            let vm = ctx.value(&om, &res_theta);
            let fd = (vp - vm) / (2.0 * h);
            let a = flat_grads[idx];
            // the floor reflects what a central difference can resolve at
            // this step size; components below it are pure roundoff
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            if rel > worst_neural {
                worst_neural = rel;
                neural_detail = format!("trial {trial}, param {idx}: analytic {a} fd {fd}");
            }
        }
        // theta gradient; the game value is linear in theta here, so a wide
        // step loses nothing and stays clear of cancellation
        let tg = ctx.theta_grad(&outputs, &theta).unwrap();
        let h = 1e-3;
        let rp = moments::residual_matrix(&p, &data, &[theta[0] + h]).unwrap();
        let rm = moments::residual_matrix(&p, &data, &[theta[0] - h]).unwrap();
        let fd = (ctx.value(&outputs, &rp) - ctx.value(&outputs, &rm)) / (2.0 * h);
        let rel = (tg[0] - fd).abs() / tg[0].abs().max(fd.abs()).max(1e-5);
        if rel > worst_neural {
            worst_neural = rel;
            neural_detail = format!("trial {trial}, theta: analytic {} fd {fd}", tg[0]);
        }
    }
    checks.push(CheckResult {
        name: "neural-game-gradient".into(),
        passed: neural_ok && worst_neural <= tol_neural,
        value: worst_neural,
        threshold: tol_neural,
        detail: neural_detail,
    });

    SuiteReport::new("gradients", seed, checks)
}

// ---------------------------------------------------------------------------
// Suite: k-step variance ordering (kstep)
// ---------------------------------------------------------------------------

fn kstep_ordering_suite(seed: u64) -> SuiteReport {
    let reps = 300;
    let n = 500;
    let spec = DgpSpec {
        seed,
        ..DgpSpec::linear_heteroskedastic(1.0, seed)
    };
    let poor_prior = vec![5.0];
    let two_step = EstimatorSpec::KernelVmm {
        k: 2,
        theta_init: poor_prior.clone(),
        config: VmmConfig::default(),
        with_inference: false,
    };
    let one_step_poor = EstimatorSpec::KernelVmmFixedPrior {
        theta_prior: poor_prior,
        config: VmmConfig::default(),
        with_inference: false,
    };
    let table = simulation::compare_estimators(
        &spec,
        &[
            ("one-step-poor-prior".to_string(), one_step_poor),
            ("two-step".to_string(), two_step),
        ],
        n,
        reps,
        true,
    );
    let ratio = table.results[1].summary.variance_sqrt_n[0]
        / table.results[0].summary.variance_sqrt_n[0];
    let threshold = 1.05;
    let check = CheckResult {
        name: "two-step-variance-ratio".into(),
        passed: ratio <= threshold && table.results.iter().all(|r| r.failed_reps == 0),
        value: ratio,
        threshold,
        detail: format!(
            "var(2-step)={:.4e} var(1-step, poor prior)={:.4e} over {reps} reps at n={n}",
            table.results[1].summary.variance_sqrt_n[0],
            table.results[0].summary.variance_sqrt_n[0],
        ),
    };
    SuiteReport::new("kstep", seed, vec![check])
}

// ---------------------------------------------------------------------------
// Suites: efficiency and coverage share one experiment
// ---------------------------------------------------------------------------

/// Homoskedastic Gaussian design at n = 1000 with 500 replications of the
/// 2-step estimator plus sandwich intervals.
pub fn efficiency_experiment(seed: u64) -> (simulation::MonteCarloResult, f64) {
    let spec = DgpSpec::linear_homoskedastic(1.0, seed);
    let bound = spec.efficient_variance_bound().unwrap();
    let est = EstimatorSpec::KernelVmm {
        k: 2,
        theta_init: vec![0.0],
        config: VmmConfig::default(),
        with_inference: true,
    };
    let result = simulation::run_monte_carlo(&spec, &est, 1000, 500, true);
    (result, bound)
}

fn efficiency_suite(seed: u64) -> SuiteReport {
    let (result, bound) = efficiency_experiment(seed);
    let var = result.summary.variance_sqrt_n[0];
    let rel = (var - bound).abs() / bound;
    let check = CheckResult {
        name: "efficient-variance-band".into(),
        passed: rel <= 0.20 && result.failed_reps == 0,
        value: var,
        threshold: bound,
        detail: format!(
            "variance of sqrt(n)(theta_hat - theta0) = {var:.4} vs analytic bound {bound:.4} \
             (relative gap {rel:.3}), {} failed reps",
            result.failed_reps
        ),
    };
    SuiteReport::new("efficiency", seed, vec![check])
}

fn coverage_suite(seed: u64) -> SuiteReport {
    let (result, _) = efficiency_experiment(seed);
    let coverage = result
        .summary
        .coverage
        .as_ref()
        .map(|c| c[0])
        .unwrap_or(f64::NAN);
    let check = CheckResult {
        name: "wald-coverage-band".into(),
        passed: (0.90..=0.98).contains(&coverage) && result.failed_reps == 0,
        value: coverage,
        threshold: 0.95,
        detail: format!(
            "nominal 95% Wald coverage over {} reps = {coverage:.3}",
            result.reps
        ),
    };
    SuiteReport::new("coverage", seed, vec![check])
}

// ---------------------------------------------------------------------------
// Suite: neural dominance and closed-form approximation (neural-dominance)
// ---------------------------------------------------------------------------

/// Ridge added to the Gaussian Gram in the dominance experiment; the
/// resulting matrix is the Gram of the kernel `K(z,z') + ridge 1{z=z'}`,
/// which keeps the regularizer's inverse tame enough for gradient training
/// while dominance against the matching closed form stays exact.
const DOMINANCE_GRAM_RIDGE: f64 = 1e-2;

fn neural_dominance_suite(seed: u64) -> SuiteReport {
    use rayon::prelude::*;

    let n = 200;
    let spec = DgpSpec::linear_homoskedastic(1.0, derive_stream(seed, 0));
    let data = simulation::sample_dgp(&spec, n);
    let problem = spec.problem();
    let bw = kernels::median_bandwidth(data.instruments()).unwrap();
    let gram = kernels::gram_matrix(&KernelSpec::gaussian(bw), data.instruments())
        .unwrap()
        .with_ridge(DOMINANCE_GRAM_RIDGE);
    let theta_prior = [1.5];
    let cfg = VmmConfig::default();
    let alpha = cfg.alpha_for(n);

    let asm = match GramAssembly::assemble_from_grams(
        problem.as_ref(),
        &data,
        vec![gram.clone()],
        &theta_prior,
        alpha,
        kernel_vmm::AssemblyMode::Dense,
    ) {
        Ok(a) => a,
        Err(e) => {
            return SuiteReport::new(
                "neural-dominance",
                seed,
                vec![CheckResult {
                    name: "assembly".into(),
                    passed: false,
                    value: f64::NAN,
                    threshold: 0.0,
                    detail: e.to_string(),
                }],
            )
        }
    };
    let ctx =
        GameContext::with_kernel_grams(problem.as_ref(), &data, &theta_prior, &[gram.clone()], alpha)
            .unwrap();
    let gram_factor = numerics::spd_factor_default(gram.matrix()).unwrap();
    let prior_res = moments::residual_matrix(problem.as_ref(), &data, &theta_prior).unwrap();

    let grid_checks: Vec<Vec<CheckResult>> = (0..11usize)
        .into_par_iter()
        .map(|idx| {
            let theta = [0.2 * idx as f64]; // grid over [0, 2] around theta0 = 1
            let closed = asm
                .objective(problem.as_ref(), &data, &theta)
                .unwrap_or(f64::NAN);
            let res_theta =
                moments::residual_matrix(problem.as_ref(), &data, &theta).unwrap();

            // adversary optimum in output space, by conjugate gradients:
            // [(1/n) diag(rt^2) + alpha K^{-1}] f* = (2/n) r
            let nf = n as f64;
            let apply = |v: &Array1<f64>| -> Array1<f64> {
                let mut out = numerics::spd_solve(&gram_factor, v).unwrap() * alpha;
                for i in 0..n {
                    out[i] += prior_res[[i, 0]] * prior_res[[i, 0]] * v[i] / nf;
                }
                out
            };
            let rhs = Array1::from_iter((0..n).map(|i| 2.0 * res_theta[[i, 0]] / nf));
            let f_star = oracles::conjugate_gradient(&apply, &rhs, 40 * n);
            let f_star_mat = {
                let mut m = Array2::zeros((n, 1));
                for i in 0..n {
                    m[[i, 0]] = f_star[i];
                }
                m
            };
            let sup_value = ctx.value(&f_star_mat, &res_theta);

            let mut net = MlpNetwork::new(1, 50, 3, 1);
            net.init_he(derive_stream(seed, 100 + idx as u64));
            let mut best = f64::NEG_INFINITY;
            let mut dominance_ok = true;
            let mut observe = |v: f64, ok: &mut bool, best: &mut f64| {
                if v > closed + 1e-8 {
                    *ok = false;
                }
                if v > *best {
                    *best = v;
                }
            };

            // warm start: regress the network onto the output-space optimum
            for step in 0..4000 {
                let (outputs, cache) = net.forward_batch(data.instruments());
                let mut d_out = Array2::zeros((n, 1));
                for i in 0..n {
                    d_out[[i, 0]] = (outputs[[i, 0]] - f_star[i]) / nf;
                }
                let grads = net.backward_batch(&cache, &d_out);
                net.step(&grads, -0.25);
                if step % 200 == 0 {
                    let v = ctx.value(&outputs, &res_theta);
                    observe(v, &mut dominance_ok, &mut best);
                }
            }
            // fine-tune on the game value itself
            let mut lr = 2e-3;
            for stage in 0..3 {
                let _ = stage;
                for _ in 0..400 {
                    let (outputs, cache) = net.forward_batch(data.instruments());
                    let (v, d_out) = ctx.value_and_output_grad(&outputs, &res_theta);
                    observe(v, &mut dominance_ok, &mut best);
                    let grads = net.backward_batch(&cache, &d_out);
                    net.step(&grads, lr);
                }
                lr *= 0.5;
            }
            let (outputs, _) = net.forward_batch(data.instruments());
            observe(
                ctx.value(&outputs, &res_theta),
                &mut dominance_ok,
                &mut best,
            );

            let tol = (0.10 * closed.abs()).max(1e-3);
            let gap = (closed - best).abs();
            vec![
                CheckResult {
                    name: format!("grid-{idx:02}-dominance"),
                    passed: dominance_ok,
                    value: best - closed,
                    threshold: 1e-8,
                    detail: format!(
                        "theta={:.2} neural={best:.6e} closed={closed:.6e} sup-oracle={sup_value:.6e}",
                        theta[0]
                    ),
                },
                CheckResult {
                    name: format!("grid-{idx:02}-approximation"),
                    passed: gap <= tol,
                    value: gap,
                    threshold: tol,
                    detail: format!(
                        "theta={:.2} |closed - neural| = {gap:.3e} (closed {closed:.6e})",
                        theta[0]
                    ),
                },
            ]
        })
        .collect();

    let checks: Vec<CheckResult> = grid_checks.into_iter().flatten().collect();
    SuiteReport::new("neural-dominance", seed, checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_none() {
        assert!(run_suite("no-such-suite", 1).is_none());
    }

    #[test]
    fn cg_oracle_solves_small_system() {
        let h = ndarray::array![[4.0, 1.0], [1.0, 3.0]];
        let apply = |v: &Array1<f64>| h.dot(v);
        let lin = ndarray::array![1.0, 2.0];
        // sup_v lᵀv - (1/4) vᵀHv = lᵀ H^{-1} l at v = 2 H^{-1} l
        let det = 11.0;
        let hinv_l = ndarray::array![(3.0 - 2.0) / det, (-1.0 + 8.0) / det];
        let expect = lin.dot(&hinv_l);
        let got = oracles::max_quadratic(&apply, &lin);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn owgmm_span_suite_passes() {
        let report = run_suite("lemma1", 7).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}: {} (value {:.3e})", c.name, c.detail, c.value);
        }
    }

    #[test]
    fn variational_suite_passes() {
        let report = run_suite("variational-identity", 11).unwrap();
        assert!(report.passed);
    }
}

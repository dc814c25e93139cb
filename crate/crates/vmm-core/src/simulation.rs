//! Data-generating processes and the Monte Carlo harness.
//!
//! Every replication draws its own counter-derived stream, so runs are fully
//! determined by `(seed, n, reps, config)` and parallel execution is
//! bit-identical to serial. Summary statistics are pairwise-summed in a
//! fixed tree order and can always be recomputed from the per-rep table.

use crate::inference::{self, InferenceReport};
use crate::kernel_vmm::{k_step_estimate, GramAssembly, VmmConfig};
use crate::kernels::{self, KernelSpec};
use crate::moments::{
    linear_iv_problem, Dataset, DensityRatioProblem, FeatureBasis, MomentProblem,
    PolicyEval, QuantileIvProblem, SmoothingConfig,
};
use crate::owgmm::{self, InstrumentBasis, OwgmmConfig};
use crate::rng::{derive_stream, SplitMix64};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Data-generating processes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    LinearIvHomoskedastic,
    LinearIvHeteroskedastic,
    QuantileIv,
    DensityRatioChain,
}

/// Samplable design. For the linear designs: shared confounder `U ~ N(0,1)`,
/// `T = a Z + rho_c U + nu`, `Y = theta0ᵀ T + eps` with
/// `eps = rho_c U + e` scaled so that `Var(eps | Z) = sigma²` (homoskedastic)
/// or multiplied by `sqrt(1 + Z²)` (heteroskedastic). The quantile design
/// shares the linear structure with `t = [T, 1]` and true intercept equal to
/// the `p`-quantile of `eps`. The density-ratio design is a two-state Markov
/// chain with uniform behavior policy and a state-dependent target policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub theta0: Vec<f64>,
    /// Instrument strength.
    pub a: f64,
    /// Conditional noise scale `sqrt(Var(eps | Z))` of the base design.
    pub sigma: f64,
    /// Confounding weight; requires `|rho_c| < sigma` so the independent
    /// noise variance stays positive, and `|rho_c| < 1`.
    pub rho_c: f64,
    /// Quantile level for the quantile design.
    #[serde(default = "default_quantile")]
    pub quantile_p: f64,
    pub seed: u64,
}

fn default_quantile() -> f64 {
    0.5
}

impl DgpSpec {
    pub fn linear_homoskedastic(theta0: f64, seed: u64) -> Self {
        Self {
            kind: DgpKind::LinearIvHomoskedastic,
            theta0: vec![theta0],
            a: 1.0,
            sigma: 1.0,
            rho_c: 0.5,
            quantile_p: 0.5,
            seed,
        }
    }

    pub fn linear_heteroskedastic(theta0: f64, seed: u64) -> Self {
        Self {
            kind: DgpKind::LinearIvHeteroskedastic,
            ..Self::linear_homoskedastic(theta0, seed)
        }
    }

    pub fn validate(&self) {
        assert!(self.rho_c.abs() < 1.0, "|rho_c| must be below 1");
        assert!(self.sigma > 0.0, "sigma must be positive");
        assert!(self.a != 0.0, "instrument strength must be non-zero");
        assert!(
            self.rho_c.abs() < self.sigma,
            "|rho_c| must be below sigma for a positive noise variance"
        );
        assert!(self.quantile_p > 0.0 && self.quantile_p < 1.0);
        match self.kind {
            DgpKind::DensityRatioChain => assert_eq!(self.theta0.len(), 2),
            DgpKind::QuantileIv | DgpKind::LinearIvHomoskedastic
            | DgpKind::LinearIvHeteroskedastic => {
                assert!(!self.theta0.is_empty())
            }
        }
    }

    /// True parameter of the estimand, including derived components (the
    /// quantile intercept, the chain density ratio).
    pub fn true_theta(&self) -> Vec<f64> {
        match self.kind {
            DgpKind::LinearIvHomoskedastic | DgpKind::LinearIvHeteroskedastic => {
                self.theta0.clone()
            }
            DgpKind::QuantileIv => {
                let q = self.sigma * inference::normal_quantile(self.quantile_p);
                vec![self.theta0[0], q]
            }
            DgpKind::DensityRatioChain => chain_true_ratio(),
        }
    }

    /// The moment problem matching this design.
    pub fn problem(&self) -> Arc<dyn MomentProblem> {
        match self.kind {
            DgpKind::LinearIvHomoskedastic | DgpKind::LinearIvHeteroskedastic => {
                Arc::new(linear_iv_problem(self.theta0.len()))
            }
            DgpKind::QuantileIv => Arc::new(QuantileIvProblem::new(
                1,
                2,
                self.quantile_p,
                SmoothingConfig::new(0.05 * self.sigma),
            )),
            DgpKind::DensityRatioChain => Arc::new(chain_problem()),
        }
    }

    /// Analytic efficiency bound `sigma²/a²` for the homoskedastic scalar
    /// linear design, when available.
    pub fn efficient_variance_bound(&self) -> Option<f64> {
        match self.kind {
            DgpKind::LinearIvHomoskedastic if self.theta0.len() == 1 => {
                Some(self.sigma * self.sigma / (self.a * self.a))
            }
            _ => None,
        }
    }
}

// Two-state chain used by the density-ratio design. Actions: 0 = stay-biased
// (switch with prob 0.3), 1 = switch-biased (switch with prob 0.7). The
// behavior policy is uniform, so the behavior chain is symmetric with
// stationary distribution (1/2, 1/2); the target policy prefers switching
// out of state 0 and staying in state 1.
const CHAIN_SWITCH: [f64; 2] = [0.3, 0.7];

fn chain_pi_e(action0: f64, state0: f64) -> f64 {
    // P(action = 1 | state): 0.8 in state 0, 0.2 in state 1
    let p1 = if state0 < 0.5 { 0.8 } else { 0.2 };
    if action0 > 0.5 {
        p1
    } else {
        1.0 - p1
    }
}

fn chain_true_ratio() -> Vec<f64> {
    // switch probabilities of the target chain out of each state
    let alpha0 = 0.2 * CHAIN_SWITCH[0] + 0.8 * CHAIN_SWITCH[1];
    let alpha1 = 0.8 * CHAIN_SWITCH[0] + 0.2 * CHAIN_SWITCH[1];
    let pe0 = alpha1 / (alpha0 + alpha1);
    let pe1 = alpha0 / (alpha0 + alpha1);
    vec![pe0 / 0.5, pe1 / 0.5]
}

fn chain_problem() -> DensityRatioProblem {
    let pi_e: PolicyEval = Arc::new(|a, s| chain_pi_e(a[0], s[0]));
    let pi_b: PolicyEval = Arc::new(|_a, _s| 0.5);
    let basis: FeatureBasis = Arc::new(|s| vec![1.0 - s[0], s[0]]);
    DensityRatioProblem::new(pi_e, pi_b, basis, 2, 1, 1)
}

/// Draws a dataset of size `n`; fully determined by `(spec, n)`.
pub fn sample_dgp(spec: &DgpSpec, n: usize) -> Dataset {
    spec.validate();
    assert!(n >= 1);
    let mut rng = SplitMix64::new(spec.seed);
    match spec.kind {
        DgpKind::LinearIvHomoskedastic | DgpKind::LinearIvHeteroskedastic => {
            let b = spec.theta0.len();
            let problem = linear_iv_problem(b);
            let hetero = spec.kind == DgpKind::LinearIvHeteroskedastic;
            let e_sd = (spec.sigma * spec.sigma - spec.rho_c * spec.rho_c).sqrt();
            let records: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let z: Vec<f64> = (0..b).map(|_| rng.next_normal()).collect();
                    let u = rng.next_normal();
                    let t: Vec<f64> = z
                        .iter()
                        .map(|zi| spec.a * zi + spec.rho_c * u + rng.next_normal())
                        .collect();
                    let eps = spec.rho_c * u + e_sd * rng.next_normal();
                    let scale = if hetero {
                        (1.0 + z[0] * z[0]).sqrt()
                    } else {
                        1.0
                    };
                    let y: f64 = spec
                        .theta0
                        .iter()
                        .zip(t.iter())
                        .map(|(th, ti)| th * ti)
                        .sum::<f64>()
                        + scale * eps;
                    problem.encode(&z, &t, y)
                })
                .collect();
            Dataset::from_problem(records, &problem).unwrap()
        }
        DgpKind::QuantileIv => {
            let problem = QuantileIvProblem::new(
                1,
                2,
                spec.quantile_p,
                SmoothingConfig::new(0.05 * spec.sigma),
            );
            let slope = spec.theta0[0];
            let e_sd = (spec.sigma * spec.sigma - spec.rho_c * spec.rho_c).sqrt();
            let records: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let z = rng.next_normal();
                    let u = rng.next_normal();
                    let t = spec.a * z + spec.rho_c * u + rng.next_normal();
                    let eps = spec.rho_c * u + e_sd * rng.next_normal();
                    let y = slope * t + eps;
                    problem.encode(&[z], &[t, 1.0], y)
                })
                .collect();
            Dataset::from_problem(records, &problem).unwrap()
        }
        DgpKind::DensityRatioChain => {
            let problem = chain_problem();
            // start from the stationary distribution of the behavior chain
            let mut state = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
            let records: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let action = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                    let switch_prob = CHAIN_SWITCH[action as usize];
                    let next = if rng.next_f64() < switch_prob {
                        1.0 - state
                    } else {
                        state
                    };
                    let rec = problem.encode(&[state], &[action], &[next]);
                    state = next;
                    rec
                })
                .collect();
            Dataset::from_problem(records, &problem).unwrap()
        }
    }
}

// ---------------------------------------------------------------------------
// Estimator configurations
// ---------------------------------------------------------------------------

/// Which estimator a Monte Carlo run applies to each replication.
#[derive(Clone, Debug)]
pub enum EstimatorSpec {
    /// k-step kernel VMM with a Gaussian kernel at the median bandwidth.
    KernelVmm {
        k: usize,
        theta_init: Vec<f64>,
        config: VmmConfig,
        /// Compute Wald intervals from the sandwich covariance at the final
        /// stage.
        with_inference: bool,
    },
    /// One-step kernel VMM at a fixed weighting prior.
    KernelVmmFixedPrior {
        theta_prior: Vec<f64>,
        config: VmmConfig,
        with_inference: bool,
    },
    /// OWGMM over a caller-supplied instrument basis.
    Owgmm {
        basis: Arc<InstrumentBasis>,
        theta_prior: Vec<f64>,
        config: OwgmmConfig,
    },
}

impl EstimatorSpec {
    pub fn kernel_vmm(k: usize, b: usize) -> Self {
        EstimatorSpec::KernelVmm {
            k,
            theta_init: vec![0.0; b],
            config: VmmConfig::default(),
            with_inference: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

/// One replication of the experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: u64,
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    /// Wald intervals when inference was requested.
    pub intervals: Option<Vec<(f64, f64)>>,
    pub error: Option<String>,
    /// Wall-clock time of the replication; informational only and excluded
    /// from reproducibility comparisons.
    pub runtime_ms: f64,
}

/// Aggregated Monte Carlo output; all summary fields are recomputable from
/// `records`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub n: usize,
    pub reps: usize,
    pub failed_reps: usize,
    pub theta_true: Vec<f64>,
    pub records: Vec<RepRecord>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Per-coordinate mean of `theta_hat - theta0`.
    pub bias: Vec<f64>,
    /// Per-coordinate variance of `sqrt(n) (theta_hat - theta0)`.
    pub variance_sqrt_n: Vec<f64>,
    /// Per-coordinate root mean squared error.
    pub rmse: Vec<f64>,
    /// Median absolute error of the first coordinate.
    pub median_abs_error: f64,
    /// Per-coordinate Wald coverage of the truth, when intervals exist.
    pub coverage: Option<Vec<f64>>,
    /// Mean per-rep wall-clock time; informational only and excluded from
    /// reproducibility comparisons.
    pub mean_runtime_ms: f64,
}

/// Pairwise summation in a fixed tree order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Recomputes the summary from a per-rep table (failed reps excluded).
pub fn summarize(records: &[RepRecord], theta_true: &[f64], n: usize) -> Summary {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let b = theta_true.len();
    let count = ok.len().max(1) as f64;
    let mut bias = Vec::with_capacity(b);
    let mut variance = Vec::with_capacity(b);
    let mut rmse = Vec::with_capacity(b);
    for j in 0..b {
        let errs: Vec<f64> = ok.iter().map(|r| r.theta_hat[j] - theta_true[j]).collect();
        let mean_err = pairwise_sum(&errs) / count;
        let scaled: Vec<f64> = errs.iter().map(|e| (n as f64).sqrt() * e).collect();
        let mean_scaled = pairwise_sum(&scaled) / count;
        let sq_dev: Vec<f64> = scaled
            .iter()
            .map(|s| (s - mean_scaled) * (s - mean_scaled))
            .collect();
        let var = if ok.len() > 1 {
            pairwise_sum(&sq_dev) / (count - 1.0)
        } else {
            0.0
        };
        let sq: Vec<f64> = errs.iter().map(|e| e * e).collect();
        bias.push(mean_err);
        variance.push(var);
        rmse.push((pairwise_sum(&sq) / count).sqrt());
    }
    let mut abs0: Vec<f64> = ok
        .iter()
        .map(|r| (r.theta_hat[0] - theta_true[0]).abs())
        .collect();
    abs0.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_abs_error = if abs0.is_empty() {
        f64::NAN
    } else if abs0.len() % 2 == 1 {
        abs0[abs0.len() / 2]
    } else {
        0.5 * (abs0[abs0.len() / 2 - 1] + abs0[abs0.len() / 2])
    };
    let coverage = if ok.iter().all(|r| r.intervals.is_some()) && !ok.is_empty() {
        let mut cov = Vec::with_capacity(b);
        for j in 0..b {
            let hits: Vec<f64> = ok
                .iter()
                .map(|r| {
                    let (lo, hi) = r.intervals.as_ref().unwrap()[j];
                    if lo <= theta_true[j] && theta_true[j] <= hi {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            cov.push(pairwise_sum(&hits) / count);
        }
        Some(cov)
    } else {
        None
    };
    let runtimes: Vec<f64> = records.iter().map(|r| r.runtime_ms).collect();
    let mean_runtime_ms = pairwise_sum(&runtimes) / records.len().max(1) as f64;
    Summary {
        bias,
        variance_sqrt_n: variance,
        rmse,
        median_abs_error,
        coverage,
        mean_runtime_ms,
    }
}

fn run_one_rep(
    spec: &DgpSpec,
    estimator: &EstimatorSpec,
    n: usize,
    rep: u64,
) -> RepRecord {
    let started = std::time::Instant::now();
    let rep_spec = DgpSpec {
        seed: derive_stream(spec.seed, rep),
        ..spec.clone()
    };
    let data = sample_dgp(&rep_spec, n);
    let problem = rep_spec.problem();
    let bw = match kernels::median_bandwidth(data.instruments()) {
        Ok(b) => b,
        Err(e) => {
            return RepRecord {
                rep,
                theta_hat: vec![f64::NAN; rep_spec.true_theta().len()],
                objective: f64::NAN,
                intervals: None,
                error: Some(e.to_string()),
                runtime_ms: started.elapsed().as_secs_f64() * 1e3,
            }
        }
    };
    let specs = [KernelSpec::gaussian(bw)];

    let outcome: Result<(Vec<f64>, f64, Option<Vec<(f64, f64)>>), String> = (|| {
        match estimator {
            EstimatorSpec::KernelVmm {
                k,
                theta_init,
                config,
                with_inference,
            } => {
                let sol = k_step_estimate(problem.as_ref(), &data, &specs, *k, theta_init, config)
                    .map_err(|e| e.to_string())?;
                let intervals = if *with_inference {
                    let asm = GramAssembly::assemble_with(
                        problem.as_ref(),
                        &data,
                        &specs,
                        sol.theta_hat.as_slice().unwrap(),
                        sol.alpha,
                        config.assembly,
                    )
                    .map_err(|e| e.to_string())?;
                    let report: InferenceReport = inference::sandwich_covariance(
                        &asm,
                        problem.as_ref(),
                        &data,
                        sol.theta_hat.as_slice().unwrap(),
                        0.05,
                    )
                    .map_err(|e| e.to_string())?;
                    Some(report.intervals)
                } else {
                    None
                };
                Ok((sol.theta_hat.to_vec(), sol.objective, intervals))
            }
            EstimatorSpec::KernelVmmFixedPrior {
                theta_prior,
                config,
                with_inference,
            } => {
                let sol = crate::kernel_vmm::minimize(
                    problem.as_ref(),
                    &data,
                    &specs,
                    theta_prior,
                    config,
                )
                .map_err(|e| e.to_string())?;
                let intervals = if *with_inference {
                    let asm = GramAssembly::assemble_with(
                        problem.as_ref(),
                        &data,
                        &specs,
                        theta_prior,
                        sol.alpha,
                        config.assembly,
                    )
                    .map_err(|e| e.to_string())?;
                    let report = inference::sandwich_covariance(
                        &asm,
                        problem.as_ref(),
                        &data,
                        sol.theta_hat.as_slice().unwrap(),
                        0.05,
                    )
                    .map_err(|e| e.to_string())?;
                    Some(report.intervals)
                } else {
                    None
                };
                Ok((sol.theta_hat.to_vec(), sol.objective, intervals))
            }
            EstimatorSpec::Owgmm {
                basis,
                theta_prior,
                config,
            } => {
                let est =
                    owgmm::owgmm_estimate(basis, problem.as_ref(), &data, theta_prior, config)
                        .map_err(|e| e.to_string())?;
                Ok((est.theta_hat.to_vec(), est.objective, None))
            }
        }
    })();

    match outcome {
        Ok((mut theta_hat, objective, intervals)) => {
            // scale-constrained problems are reported after exact rescaling
            if let Some(c) = problem.scale_constraint(&data) {
                let scale = c.dot(&Array1::from_vec(theta_hat.clone()));
                if scale.abs() > 1e-12 {
                    for t in theta_hat.iter_mut() {
                        *t /= scale;
                    }
                }
            }
            RepRecord {
                rep,
                theta_hat,
                objective,
                intervals,
                error: None,
                runtime_ms: started.elapsed().as_secs_f64() * 1e3,
            }
        }
        Err(msg) => RepRecord {
            rep,
            theta_hat: vec![f64::NAN; rep_spec.true_theta().len()],
            objective: f64::NAN,
            intervals: None,
            error: Some(msg),
            runtime_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    }
}

/// Runs `reps` independent replications; `parallel` only changes wall time,
/// never the results.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    estimator: &EstimatorSpec,
    n: usize,
    reps: usize,
    parallel: bool,
) -> MonteCarloResult {
    spec.validate();
    assert!(reps >= 1);
    let records: Vec<RepRecord> = if parallel {
        (0..reps as u64)
            .into_par_iter()
            .map(|rep| run_one_rep(spec, estimator, n, rep))
            .collect()
    } else {
        (0..reps as u64)
            .map(|rep| run_one_rep(spec, estimator, n, rep))
            .collect()
    };
    let theta_true = spec.true_theta();
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let summary = summarize(&records, &theta_true, n);
    MonteCarloResult {
        n,
        reps,
        failed_reps: failed,
        theta_true,
        records,
        summary,
    }
}

/// Side-by-side comparison under common random numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub names: Vec<String>,
    pub results: Vec<MonteCarloResult>,
    /// First-coordinate variance ratio of each estimator against the first.
    pub variance_ratio_vs_first: Vec<f64>,
    /// Paired per-rep difference in absolute error vs the first estimator
    /// (mean over reps), per estimator.
    pub paired_abs_error_diff: Vec<f64>,
}

pub fn compare_estimators(
    spec: &DgpSpec,
    estimators: &[(String, EstimatorSpec)],
    n: usize,
    reps: usize,
    parallel: bool,
) -> ComparisonTable {
    assert!(estimators.len() >= 2, "need at least two estimators");
    let results: Vec<MonteCarloResult> = estimators
        .iter()
        .map(|(_, est)| run_monte_carlo(spec, est, n, reps, parallel))
        .collect();
    let base_var = results[0].summary.variance_sqrt_n[0];
    let theta_true = spec.true_theta();
    let mut ratios = Vec::new();
    let mut paired = Vec::new();
    for res in &results {
        ratios.push(res.summary.variance_sqrt_n[0] / base_var);
        let diffs: Vec<f64> = res
            .records
            .iter()
            .zip(results[0].records.iter())
            .filter(|(a, b)| a.error.is_none() && b.error.is_none())
            .map(|(a, b)| {
                (a.theta_hat[0] - theta_true[0]).abs() - (b.theta_hat[0] - theta_true[0]).abs()
            })
            .collect();
        paired.push(if diffs.is_empty() {
            f64::NAN
        } else {
            pairwise_sum(&diffs) / diffs.len() as f64
        });
    }
    ComparisonTable {
        names: estimators.iter().map(|(n, _)| n.clone()).collect(),
        results,
        variance_ratio_vs_first: ratios,
        paired_abs_error_diff: paired,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = DgpSpec::linear_homoskedastic(1.5, 42);
        let a = sample_dgp(&spec, 50);
        let b = sample_dgp(&spec, 50);
        for i in 0..50 {
            assert_eq!(a.record(i), b.record(i));
        }
    }

    #[test]
    fn instrument_treatment_covariance_matches_design() {
        let mut spec = DgpSpec::linear_homoskedastic(1.0, 7);
        spec.rho_c = 0.0;
        let data = sample_dgp(&spec, 10_000);
        let n = data.n();
        let mut num = 0.0;
        for i in 0..n {
            let r = data.record(i);
            num += r[0] * r[1];
        }
        let cov = num / n as f64;
        assert!((cov - spec.a).abs() < 0.05 * spec.a, "cov {cov}");
    }

    #[test]
    fn chain_frequencies_match_stationary_distribution() {
        let spec = DgpSpec {
            kind: DgpKind::DensityRatioChain,
            theta0: vec![1.0, 1.0],
            a: 1.0,
            sigma: 1.0,
            rho_c: 0.0,
            quantile_p: 0.5,
            seed: 5,
        };
        let data = sample_dgp(&spec, 10_000);
        let mut count1 = 0usize;
        for i in 0..data.n() {
            if data.record(i)[0] > 0.5 {
                count1 += 1;
            }
        }
        let freq = count1 as f64 / data.n() as f64;
        assert!((freq - 0.5).abs() < 0.03, "state-1 frequency {freq}");
    }

    #[test]
    fn single_rep_summary_equals_rep_values() {
        let spec = DgpSpec::linear_homoskedastic(2.0, 3);
        let est = EstimatorSpec::kernel_vmm(1, 1);
        let res = run_monte_carlo(&spec, &est, 80, 1, false);
        assert_eq!(res.reps, 1);
        let err = res.records[0].theta_hat[0] - 2.0;
        assert!((res.summary.bias[0] - err).abs() < 1e-15);
        assert!((res.summary.rmse[0] - err.abs()).abs() < 1e-15);
        assert_eq!(res.summary.variance_sqrt_n[0], 0.0);
    }

    #[test]
    fn noiseless_design_zero_bias_and_variance() {
        let mut spec = DgpSpec::linear_homoskedastic(1.2, 11);
        spec.sigma = 1e-8;
        spec.rho_c = 0.0;
        let est = EstimatorSpec::kernel_vmm(1, 1);
        let res = run_monte_carlo(&spec, &est, 60, 5, false);
        assert_eq!(res.failed_reps, 0);
        assert!(res.summary.bias[0].abs() <= 1e-6, "bias {}", res.summary.bias[0]);
        assert!(res.summary.variance_sqrt_n[0] <= 1e-6);
    }

    #[test]
    fn parallel_results_bit_identical_to_serial() {
        let spec = DgpSpec::linear_homoskedastic(0.7, 19);
        let est = EstimatorSpec::kernel_vmm(2, 1);
        let serial = run_monte_carlo(&spec, &est, 60, 8, false);
        let parallel = run_monte_carlo(&spec, &est, 60, 8, true);
        for (a, b) in serial.records.iter().zip(parallel.records.iter()) {
            assert_eq!(a.rep, b.rep);
            assert_eq!(a.theta_hat[0].to_bits(), b.theta_hat[0].to_bits());
        }
        assert_eq!(
            serial.summary.bias[0].to_bits(),
            parallel.summary.bias[0].to_bits()
        );
    }

    #[test]
    fn summary_recomputable_from_records() {
        let spec = DgpSpec::linear_homoskedastic(1.0, 23);
        let est = EstimatorSpec::kernel_vmm(1, 1);
        let res = run_monte_carlo(&spec, &est, 50, 6, true);
        let re = summarize(&res.records, &res.theta_true, res.n);
        assert_eq!(res.summary, re);
    }

    #[test]
    fn identical_configs_have_ratio_exactly_one() {
        let spec = DgpSpec::linear_homoskedastic(1.0, 29);
        let est = EstimatorSpec::kernel_vmm(1, 1);
        let table = compare_estimators(
            &spec,
            &[
                ("a".to_string(), est.clone()),
                ("b".to_string(), est.clone()),
            ],
            50,
            5,
            false,
        );
        assert_eq!(table.variance_ratio_vs_first[1], 1.0);
        assert_eq!(table.paired_abs_error_diff[1], 0.0);
    }

    #[test]
    fn chain_estimates_recover_density_ratio() {
        let spec = DgpSpec {
            kind: DgpKind::DensityRatioChain,
            theta0: vec![1.0, 1.0],
            a: 1.0,
            sigma: 1.0,
            rho_c: 0.0,
            quantile_p: 0.5,
            seed: 77,
        };
        let est = EstimatorSpec::kernel_vmm(2, 2);
        let res = run_monte_carlo(&spec, &est, 4000, 3, true);
        assert_eq!(res.failed_reps, 0);
        let truth = chain_true_ratio();
        for j in 0..2 {
            let mean = res
                .records
                .iter()
                .map(|r| r.theta_hat[j])
                .sum::<f64>()
                / 3.0;
            assert!(
                (mean - truth[j]).abs() < 0.08,
                "coordinate {j}: mean {mean} vs truth {}",
                truth[j]
            );
        }
    }
}

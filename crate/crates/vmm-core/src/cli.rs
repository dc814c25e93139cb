//! Command-line surface: `estimate` on CSV data, `simulate` Monte Carlo
//! experiments, `verify` randomized self-check suites. All file formats live
//! here.
//!
//! Reports are JSON with every float printed at seventeen significant
//! digits, so a report round-trips the exact binary values of a run. Reruns
//! with the same config and data are byte-identical except for the
//! `timestamp` field (and wall-clock `timing` sections, which are
//! informational).

use crate::inference;
use crate::kernel_vmm::{self, AlphaRule, VmmConfig};
use crate::kernels::{self, KernelSpec};
use crate::moments::{Dataset, LinearIvProblem, MomentProblem, QuantileIvProblem, SmoothingConfig};
use crate::neural_vmm::{self, BatchMode, MinimaxConfig, MlpArch, RegularizerChoice};
use crate::owgmm::{self, InstrumentBasis, OwgmmConfig, Weighting};
use crate::simulation::{self, DgpSpec, EstimatorSpec, MonteCarloResult};
use crate::verify;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad usage, config, or data: exit code 2.
    Usage(String),
    /// A verification suite failed: exit code 1.
    Verification,
    /// Estimation failed: exit code 3.
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification => 1,
            CliError::Estimation(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Verification => "verification failed".to_string(),
            CliError::Estimation(m) => format!("estimation failed: {m}"),
        }
    }
}

fn usage<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("{context}: {e}"))
}

// ---------------------------------------------------------------------------
// JSON writer with fixed float precision
// ---------------------------------------------------------------------------

/// JSON value whose floats always print with seventeen significant digits.
#[derive(Clone, Debug)]
pub enum JsonVal {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Arr(Vec<JsonVal>),
    Obj(Vec<(String, JsonVal)>),
}

impl JsonVal {
    pub fn obj(fields: Vec<(&str, JsonVal)>) -> JsonVal {
        JsonVal::Obj(fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn floats(values: &[f64]) -> JsonVal {
        JsonVal::Arr(values.iter().map(|&v| JsonVal::Float(v)).collect())
    }

    pub fn to_json_string(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }

    fn write(&self, out: &mut String, indent: usize) {
        match self {
            JsonVal::Null => out.push_str("null"),
            JsonVal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JsonVal::Int(i) => {
                let _ = write!(out, "{i}");
            }
            JsonVal::Float(x) => out.push_str(&fmt_float(*x)),
            JsonVal::Str(s) => write_escaped(out, s),
            JsonVal::Arr(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    item.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push(']');
            }
            JsonVal::Obj(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push('{');
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    write_escaped(out, k);
                    out.push_str(": ");
                    v.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push('}');
            }
        }
    }
}

fn push_indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_escaped(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Seventeen significant digits; non-finite values become JSON null.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return "null".to_string();
    }
    format!("{x:.16e}")
}

/// Converts parsed config JSON into the fixed-precision writer's values so
/// the effective configuration echo shares the report format.
pub fn from_serde(value: &serde_json::Value) -> JsonVal {
    match value {
        serde_json::Value::Null => JsonVal::Null,
        serde_json::Value::Bool(b) => JsonVal::Bool(*b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                JsonVal::Int(i)
            } else {
                JsonVal::Float(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        serde_json::Value::String(s) => JsonVal::Str(s.clone()),
        serde_json::Value::Array(a) => JsonVal::Arr(a.iter().map(from_serde).collect()),
        serde_json::Value::Object(o) => {
            JsonVal::Obj(o.iter().map(|(k, v)| (k.clone(), from_serde(v))).collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Estimate command
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Owgmm,
    KernelVmm,
    KernelIv,
    NeuralVmm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Linear instrumental variable regression `y = thetaᵀ t`.
    LinearIv,
    /// Instrumental quantile regression at level `p`; `tau` defaults to
    /// `0.05 * sd(y)`.
    QuantileIv { p: f64, tau: Option<f64> },
}

/// Named column roles for the CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub z: Vec<String>,
    pub t: Vec<String>,
    pub y: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_adversary_steps")]
    pub adversary_steps: usize,
    #[serde(default = "default_lr")]
    pub lr_adversary: f64,
    #[serde(default = "default_lr")]
    pub lr_theta: f64,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    /// `full` or a minibatch size.
    #[serde(default)]
    pub minibatch: Option<usize>,
    /// `kernel`, `frobenius`, or `none`.
    #[serde(default = "default_regularizer")]
    pub regularizer: String,
}

fn default_width() -> usize {
    50
}
fn default_depth() -> usize {
    3
}
fn default_adversary_steps() -> usize {
    5
}
fn default_lr() -> f64 {
    0.05
}
fn default_outer_iters() -> usize {
    400
}
fn default_regularizer() -> String {
    "kernel".to_string()
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            width: default_width(),
            depth: default_depth(),
            adversary_steps: default_adversary_steps(),
            lr_adversary: default_lr(),
            lr_theta: default_lr(),
            outer_iters: default_outer_iters(),
            minibatch: None,
            regularizer: default_regularizer(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub problem: ProblemConfig,
    pub layout: LayoutConfig,
    pub estimator: EstimatorKind,
    /// Number of weighting refinement steps.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub alpha: AlphaRule,
    /// Ridge weight of the closed-form kernel IV estimator.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Kernel on the instruments; bandwidth defaults to the median pairwise
    /// distance.
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    /// Kernel on the treatments for kernel IV.
    #[serde(default)]
    pub treatment_kernel: Option<KernelSpec>,
    #[serde(default)]
    pub theta_init: Option<Vec<f64>>,
    /// Instrument monomial degree for OWGMM.
    #[serde(default = "default_degree")]
    pub owgmm_degree: u32,
    #[serde(default)]
    pub neural: NeuralConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub confidence_level: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub box_radius: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 500,
            restarts: 5,
            box_radius: 10.0,
        }
    }
}

fn default_k() -> usize {
    2
}
fn default_lambda() -> f64 {
    0.01
}
fn default_degree() -> u32 {
    2
}
fn default_level() -> f64 {
    0.95
}

/// Parsed CSV: column-major values for the declared roles.
struct CsvData {
    z: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
    y: Vec<f64>,
}

fn read_csv(path: &Path, layout: &LayoutConfig) -> Result<CsvData, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(usage("cannot open data file"))?;
    let headers = reader
        .headers()
        .map_err(usage("cannot read CSV header"))?
        .clone();
    let index_of = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Usage(format!(
                "column '{name}' not found in CSV header (available: {})",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let z_idx: Vec<usize> = layout
        .z
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<_, _>>()?;
    let t_idx: Vec<usize> = layout
        .t
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<_, _>>()?;
    let y_idx = index_of(&layout.y)?;

    let mut z = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2; // header is line 1
        let record = record.map_err(|e| CliError::Usage(format!("line {line}: {e}")))?;
        let parse = |idx: usize| -> Result<f64, CliError> {
            let raw = record.get(idx).ok_or_else(|| {
                CliError::Usage(format!("line {line}: missing field {}", idx + 1))
            })?;
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("line {line}: '{raw}' is not a number")))?;
            if !v.is_finite() {
                return Err(CliError::Usage(format!(
                    "line {line}: non-finite value '{raw}' rejected"
                )));
            }
            Ok(v)
        };
        z.push(z_idx.iter().map(|&i| parse(i)).collect::<Result<_, _>>()?);
        t.push(t_idx.iter().map(|&i| parse(i)).collect::<Result<_, _>>()?);
        y.push(parse(y_idx)?);
    }
    if y.is_empty() {
        return Err(CliError::Usage("data file has no rows".to_string()));
    }
    Ok(CsvData { z, t, y })
}

fn sym_to_json(m: &crate::numerics::SymMatrix) -> JsonVal {
    JsonVal::Arr(
        (0..m.dim())
            .map(|i| JsonVal::floats(&(0..m.dim()).map(|j| m.array()[[i, j]]).collect::<Vec<_>>()))
            .collect(),
    )
}

fn intervals_to_json(ints: &[(f64, f64)]) -> JsonVal {
    JsonVal::Arr(
        ints.iter()
            .map(|(lo, hi)| JsonVal::floats(&[*lo, *hi]))
            .collect(),
    )
}

fn effective_config_json<T: Serialize>(cfg: &T) -> JsonVal {
    let v = serde_json::to_value(cfg).expect("config serializes");
    from_serde(&v)
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Runs estimation on CSV data and writes the JSON report; optionally also
/// writes the per-row fitted residuals.
pub fn cmd_estimate(
    config_path: &Path,
    data_path: &Path,
    out_path: &Path,
    residuals_path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(config_path).map_err(usage("cannot read config"))?;
    let mut cfg: EstimateConfig =
        serde_json::from_str(&raw).map_err(usage("invalid estimate config"))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if !(cfg.confidence_level > 0.0 && cfg.confidence_level < 1.0) {
        return Err(CliError::Usage(
            "confidence_level must lie strictly inside (0, 1)".to_string(),
        ));
    }
    let csv_data = read_csv(data_path, &cfg.layout)?;
    let n = csv_data.y.len();
    let d_z = cfg.layout.z.len();
    let b = cfg.layout.t.len();
    let gamma = 1.0 - cfg.confidence_level;

    // instrument kernel: explicit spec or Gaussian at the median distance
    let kernel_z = match &cfg.kernel {
        Some(s) => s.clone(),
        None => KernelSpec::gaussian(
            kernels::median_bandwidth(&csv_data.z).map_err(usage("instrument columns"))?,
        ),
    };

    let problem: Arc<dyn MomentProblem> = match &cfg.problem {
        ProblemConfig::LinearIv => Arc::new(LinearIvProblem::new(d_z, b)),
        ProblemConfig::QuantileIv { p, tau } => {
            let tau = match tau {
                Some(t) => SmoothingConfig::new(*t),
                None => SmoothingConfig::from_outcome_sd(&csv_data.y),
            };
            Arc::new(QuantileIvProblem::new(d_z, b, *p, tau))
        }
    };
    let records: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut x = Vec::with_capacity(d_z + b + 1);
            x.extend_from_slice(&csv_data.z[i]);
            x.extend_from_slice(&csv_data.t[i]);
            x.push(csv_data.y[i]);
            x
        })
        .collect();
    let data = Dataset::from_problem(records, problem.as_ref())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let theta_init = cfg.theta_init.clone().unwrap_or_else(|| vec![0.0; b]);
    if theta_init.len() != b {
        return Err(CliError::Usage(format!(
            "theta_init has {} entries but the layout declares {} treatment columns",
            theta_init.len(),
            b
        )));
    }

    let estimate: JsonVal;
    let mut inference_json = JsonVal::Null;
    let mut diagnostics = Vec::new();
    let mut fitted_residuals: Vec<f64> = Vec::new();

    match cfg.estimator {
        EstimatorKind::KernelVmm | EstimatorKind::NeuralVmm | EstimatorKind::Owgmm => {
            let theta_hat: Vec<f64>;
            match cfg.estimator {
                EstimatorKind::KernelVmm => {
                    let vmm_cfg = VmmConfig {
                        alpha: cfg.alpha.clone(),
                        grad_tol: cfg.optimizer.grad_tol,
                        max_iters: cfg.optimizer.max_iters,
                        restarts: cfg.optimizer.restarts,
                        box_radius: cfg.optimizer.box_radius,
                        seed: cfg.seed,
                        ..VmmConfig::default()
                    };
                    let sol = kernel_vmm::k_step_estimate(
                        problem.as_ref(),
                        &data,
                        std::slice::from_ref(&kernel_z),
                        cfg.k.max(1),
                        &theta_init,
                        &vmm_cfg,
                    )
                    .map_err(|e| CliError::Estimation(e.to_string()))?;
                    theta_hat = sol.theta_hat.to_vec();
                    let asm = kernel_vmm::GramAssembly::assemble(
                        problem.as_ref(),
                        &data,
                        std::slice::from_ref(&kernel_z),
                        &theta_hat,
                        sol.alpha,
                    )
                    .map_err(|e| CliError::Estimation(e.to_string()))?;
                    let report = inference::sandwich_covariance(
                        &asm,
                        problem.as_ref(),
                        &data,
                        &theta_hat,
                        gamma,
                    )
                    .map_err(|e| CliError::Estimation(e.to_string()))?;
                    estimate = JsonVal::obj(vec![
                        ("theta_hat", JsonVal::floats(&theta_hat)),
                        ("objective", JsonVal::Float(sol.objective)),
                        ("grad_sup_norm", JsonVal::Float(sol.grad_sup_norm)),
                        ("alpha", JsonVal::Float(sol.alpha)),
                        (
                            "stages",
                            JsonVal::Arr(
                                sol.stages
                                    .iter()
                                    .map(|s| {
                                        JsonVal::obj(vec![
                                            ("theta", JsonVal::floats(&s.theta.to_vec())),
                                            ("objective", JsonVal::Float(s.objective)),
                                            ("grad_sup_norm", JsonVal::Float(s.grad_sup_norm)),
                                            ("iterations", JsonVal::Int(s.iterations as i64)),
                                        ])
                                    })
                                    .collect(),
                            ),
                        ),
                    ]);
                    inference_json = JsonVal::obj(vec![
                        ("omega", sym_to_json(&report.omega)),
                        ("delta", sym_to_json(&report.delta)),
                        ("covariance", sym_to_json(&report.covariance)),
                        (
                            "std_errors",
                            JsonVal::floats(&report.std_errors.to_vec()),
                        ),
                        ("intervals", intervals_to_json(&report.intervals)),
                        ("level", JsonVal::Float(report.level)),
                        ("efficient_case", JsonVal::Bool(report.efficient_case)),
                        (
                            "warnings",
                            JsonVal::Arr(
                                report
                                    .warnings
                                    .iter()
                                    .map(|w| JsonVal::Str(w.clone()))
                                    .collect(),
                            ),
                        ),
                    ]);
                    diagnostics.push(("kernel_bandwidth", kernel_to_json(&kernel_z)));
                }
                EstimatorKind::NeuralVmm => {
                    let ncfg = &cfg.neural;
                    let reg = match ncfg.regularizer.as_str() {
                        "kernel" => RegularizerChoice::Kernel {
                            specs: vec![kernel_z.clone()],
                            alpha: cfg.alpha.value_for(n),
                        },
                        "frobenius" => RegularizerChoice::Frobenius {
                            sigma: vec![1.0],
                            alpha: cfg.alpha.value_for(n),
                        },
                        "none" => RegularizerChoice::None,
                        other => {
                            return Err(CliError::Usage(format!(
                                "unknown regularizer '{other}' (expected kernel, frobenius, none)"
                            )))
                        }
                    };
                    let mcfg = MinimaxConfig {
                        adversary_steps: ncfg.adversary_steps,
                        lr_adversary: ncfg.lr_adversary,
                        lr_theta: ncfg.lr_theta,
                        outer_iters: ncfg.outer_iters,
                        batch: match ncfg.minibatch {
                            Some(s) => BatchMode::Minibatch(s),
                            None => BatchMode::Full,
                        },
                        seed: cfg.seed,
                    };
                    let sol = neural_vmm::train_neural_vmm(
                        problem.as_ref(),
                        &data,
                        MlpArch {
                            width: ncfg.width,
                            depth: ncfg.depth,
                        },
                        &theta_init,
                        &theta_init,
                        &reg,
                        &mcfg,
                    )
                    .map_err(|e| CliError::Estimation(e.to_string()))?;
                    theta_hat = sol.theta_hat.to_vec();
                    estimate = JsonVal::obj(vec![
                        ("theta_hat", JsonVal::floats(&theta_hat)),
                        ("game_value", JsonVal::Float(sol.objective)),
                        ("grad_sup_norm", JsonVal::Float(sol.grad_sup_norm)),
                        (
                            "value_trace_tail",
                            JsonVal::floats(
                                &sol.value_trace
                                    .iter()
                                    .rev()
                                    .take(10)
                                    .rev()
                                    .copied()
                                    .collect::<Vec<_>>(),
                            ),
                        ),
                    ]);
                }
                EstimatorKind::Owgmm => {
                    let basis = InstrumentBasis::polynomial(d_z, 1, cfg.owgmm_degree);
                    let ocfg = OwgmmConfig {
                        weighting: Weighting::TwoStep,
                        optim: crate::optim::OptimConfig {
                            grad_tol: cfg.optimizer.grad_tol,
                            obj_improvement_tol: 1e-12,
                            max_iters: cfg.optimizer.max_iters,
                            restarts: cfg.optimizer.restarts,
                            lower: ndarray::Array1::from_elem(b, -cfg.optimizer.box_radius),
                            upper: ndarray::Array1::from_elem(b, cfg.optimizer.box_radius),
                            seed: cfg.seed,
                        },
                    };
                    let est = owgmm::owgmm_estimate(
                        &basis,
                        problem.as_ref(),
                        &data,
                        &theta_init,
                        &ocfg,
                    )
                    .map_err(|e| CliError::Estimation(e.to_string()))?;
                    theta_hat = est.theta_hat.to_vec();
                    estimate = JsonVal::obj(vec![
                        ("theta_hat", JsonVal::floats(&theta_hat)),
                        ("objective", JsonVal::Float(est.objective)),
                        ("grad_sup_norm", JsonVal::Float(est.grad_sup_norm)),
                        ("gamma", sym_to_json(&est.gamma)),
                        ("converged", JsonVal::Bool(est.converged)),
                    ]);
                }
                _ => unreachable!(),
            }
            for i in 0..n {
                let r = problem
                    .residual(data.record(i), &theta_hat)
                    .map_err(|e| CliError::Estimation(e.to_string()))?;
                fitted_residuals.push(r[0]);
            }
        }
        EstimatorKind::KernelIv => {
            let kernel_t = match &cfg.treatment_kernel {
                Some(s) => s.clone(),
                None => KernelSpec::gaussian(
                    kernels::median_bandwidth(&csv_data.t)
                        .map_err(usage("treatment columns"))?,
                ),
            };
            let alpha = cfg.alpha.value_for(n);
            // weighting refinement: stage j uses the previous fit as prior
            let mut fit = kernel_vmm::kernel_iv_closed_form(
                &csv_data.z,
                &csv_data.t,
                &csv_data.y,
                &kernel_z,
                &kernel_t,
                &|_t| 0.0,
                alpha,
                cfg.lambda,
            )
            .map_err(|e| CliError::Estimation(e.to_string()))?;
            for _ in 1..cfg.k.max(1) {
                let prev = fit.clone();
                fit = kernel_vmm::kernel_iv_closed_form(
                    &csv_data.z,
                    &csv_data.t,
                    &csv_data.y,
                    &kernel_z,
                    &kernel_t,
                    &|t| prev.predict(t),
                    alpha,
                    cfg.lambda,
                )
                .map_err(|e| CliError::Estimation(e.to_string()))?;
            }
            for i in 0..n {
                fitted_residuals.push(csv_data.y[i] - fit.predict(&csv_data.t[i]));
            }
            estimate = JsonVal::obj(vec![
                ("beta", JsonVal::floats(&fit.beta.to_vec())),
                ("alpha", JsonVal::Float(alpha)),
                ("lambda", JsonVal::Float(cfg.lambda)),
                (
                    "fitted_values",
                    JsonVal::floats(
                        &(0..n)
                            .map(|i| fit.predict(&csv_data.t[i]))
                            .collect::<Vec<_>>(),
                    ),
                ),
            ]);
            diagnostics.push(("treatment_kernel", kernel_to_json(&kernel_t)));
        }
    }

    diagnostics.push(("n", JsonVal::Int(n as i64)));
    diagnostics.push(("instrument_kernel", kernel_to_json(&kernel_z)));

    let report = JsonVal::obj(vec![
        ("config", effective_config_json(&cfg)),
        ("estimate", estimate),
        ("inference", inference_json),
        ("diagnostics", JsonVal::Obj(
            diagnostics
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )),
        ("version", JsonVal::Str(crate::VERSION.to_string())),
        ("timestamp", JsonVal::Str(timestamp())),
    ]);
    std::fs::write(out_path, report.to_json_string())
        .map_err(usage("cannot write report"))?;

    if let Some(res_path) = residuals_path {
        let mut out = String::from("row,residual\n");
        for (i, r) in fitted_residuals.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, fmt_float(*r));
        }
        std::fs::write(res_path, out).map_err(usage("cannot write residuals"))?;
    }
    Ok(())
}

fn kernel_to_json(spec: &KernelSpec) -> JsonVal {
    match spec {
        KernelSpec::Gaussian { bandwidth } => JsonVal::obj(vec![
            ("kind", JsonVal::Str("gaussian".into())),
            ("bandwidth", JsonVal::Float(*bandwidth)),
        ]),
        KernelSpec::Linear => JsonVal::obj(vec![("kind", JsonVal::Str("linear".into()))]),
        KernelSpec::Polynomial { degree, offset } => JsonVal::obj(vec![
            ("kind", JsonVal::Str("polynomial".into())),
            ("degree", JsonVal::Int(*degree as i64)),
            ("offset", JsonVal::Float(*offset)),
        ]),
    }
}

// ---------------------------------------------------------------------------
// Simulate command
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimEstimatorConfig {
    KernelVmm {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        theta_init: Option<Vec<f64>>,
        #[serde(default)]
        with_inference: bool,
    },
    KernelVmmFixedPrior {
        theta_prior: Vec<f64>,
        #[serde(default)]
        with_inference: bool,
    },
    Owgmm {
        #[serde(default = "default_degree")]
        degree: u32,
        #[serde(default)]
        theta_prior: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    pub estimator: SimEstimatorConfig,
    pub n: usize,
    pub reps: usize,
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Compare the Monte Carlo variance against the analytic efficiency
    /// bound when the design has one; marks pass/fail in the summary.
    #[serde(default)]
    pub efficiency_check: bool,
}

fn default_true() -> bool {
    true
}

fn build_estimator(cfg: &SimEstimatorConfig, b: usize) -> EstimatorSpec {
    match cfg {
        SimEstimatorConfig::KernelVmm {
            k,
            theta_init,
            with_inference,
        } => EstimatorSpec::KernelVmm {
            k: (*k).max(1),
            theta_init: theta_init.clone().unwrap_or_else(|| vec![0.0; b]),
            config: VmmConfig::default(),
            with_inference: *with_inference,
        },
        SimEstimatorConfig::KernelVmmFixedPrior {
            theta_prior,
            with_inference,
        } => EstimatorSpec::KernelVmmFixedPrior {
            theta_prior: theta_prior.clone(),
            config: VmmConfig::default(),
            with_inference: *with_inference,
        },
        SimEstimatorConfig::Owgmm {
            degree,
            theta_prior,
        } => EstimatorSpec::Owgmm {
            basis: Arc::new(InstrumentBasis::polynomial(1, 1, *degree)),
            theta_prior: theta_prior.clone().unwrap_or_else(|| vec![0.0; b]),
            config: OwgmmConfig {
                weighting: Weighting::TwoStep,
                optim: crate::optim::OptimConfig::boxed(b, 10.0),
            },
        },
    }
}

fn result_to_json(res: &MonteCarloResult, efficiency: Option<(f64, bool, f64)>) -> JsonVal {
    let summary = &res.summary;
    let mut fields = vec![
        ("n", JsonVal::Int(res.n as i64)),
        ("reps", JsonVal::Int(res.reps as i64)),
        ("failed_reps", JsonVal::Int(res.failed_reps as i64)),
        ("theta_true", JsonVal::floats(&res.theta_true)),
        ("bias", JsonVal::floats(&summary.bias)),
        (
            "variance_sqrt_n",
            JsonVal::floats(&summary.variance_sqrt_n),
        ),
        ("rmse", JsonVal::floats(&summary.rmse)),
        (
            "median_abs_error",
            JsonVal::Float(summary.median_abs_error),
        ),
        (
            "coverage",
            match &summary.coverage {
                Some(c) => JsonVal::floats(c),
                None => JsonVal::Null,
            },
        ),
    ];
    if let Some((bound, pass, variance)) = efficiency {
        fields.push((
            "efficiency_check",
            JsonVal::obj(vec![
                ("analytic_bound", JsonVal::Float(bound)),
                ("variance_sqrt_n", JsonVal::Float(variance)),
                ("within_20_percent", JsonVal::Bool(pass)),
            ]),
        ));
    }
    JsonVal::obj(fields)
}

pub fn cmd_simulate(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    parallel_override: Option<bool>,
) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(config_path).map_err(usage("cannot read config"))?;
    let mut cfg: SimulateConfig =
        serde_json::from_str(&raw).map_err(usage("invalid simulate config"))?;
    if let Some(seed) = seed_override {
        cfg.dgp.seed = seed;
    }
    if let Some(par) = parallel_override {
        cfg.parallel = par;
    }
    if cfg.reps == 0 || cfg.n == 0 {
        return Err(CliError::Usage("n and reps must be positive".to_string()));
    }
    let b = cfg.dgp.true_theta().len();
    let estimator = build_estimator(&cfg.estimator, b);
    let result = simulation::run_monte_carlo(&cfg.dgp, &estimator, cfg.n, cfg.reps, cfg.parallel);

    std::fs::create_dir_all(out_dir).map_err(usage("cannot create output directory"))?;

    // per-rep CSV
    let mut reps_csv = String::from("rep,");
    let bdim = result.theta_true.len();
    for j in 0..bdim {
        let _ = write!(reps_csv, "theta_hat_{j},");
    }
    reps_csv.push_str("objective,interval_lo_0,interval_hi_0,error\n");
    for r in &result.records {
        let _ = write!(reps_csv, "{},", r.rep);
        for j in 0..bdim {
            let _ = write!(reps_csv, "{},", fmt_float(r.theta_hat[j]));
        }
        let _ = write!(reps_csv, "{},", fmt_float(r.objective));
        match &r.intervals {
            Some(ints) => {
                let _ = write!(
                    reps_csv,
                    "{},{},",
                    fmt_float(ints[0].0),
                    fmt_float(ints[0].1)
                );
            }
            None => reps_csv.push_str(",,"),
        }
        match &r.error {
            Some(e) => {
                let _ = writeln!(reps_csv, "\"{}\"", e.replace('"', "'"));
            }
            None => reps_csv.push('\n'),
        }
    }
    std::fs::write(out_dir.join("reps.csv"), reps_csv)
        .map_err(usage("cannot write reps.csv"))?;

    let efficiency = if cfg.efficiency_check {
        match cfg.dgp.efficient_variance_bound() {
            Some(bound) => {
                let variance = result.summary.variance_sqrt_n[0];
                let pass = (variance - bound).abs() / bound <= 0.20;
                Some((bound, pass, variance))
            }
            None => {
                return Err(CliError::Usage(
                    "efficiency_check requires a design with an analytic bound \
                     (homoskedastic linear IV with scalar parameter)"
                        .to_string(),
                ))
            }
        }
    } else {
        None
    };

    let summary = JsonVal::obj(vec![
        ("config", effective_config_json(&cfg)),
        ("result", result_to_json(&result, efficiency)),
        (
            "timing",
            JsonVal::obj(vec![(
                "mean_runtime_ms",
                JsonVal::Float(result.summary.mean_runtime_ms),
            )]),
        ),
        ("version", JsonVal::Str(crate::VERSION.to_string())),
        ("timestamp", JsonVal::Str(timestamp())),
    ]);
    std::fs::write(out_dir.join("summary.json"), summary.to_json_string())
        .map_err(usage("cannot write summary.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Verify command
// ---------------------------------------------------------------------------

pub fn cmd_verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let Some(report) = verify::run_suite(suite, seed) else {
        return Err(CliError::Usage(format!(
            "unknown suite '{suite}'; available suites: {}",
            verify::SUITES.join(", ")
        )));
    };
    for check in &report.checks {
        println!(
            "{} {} :: value {:.6e} vs threshold {:.6e} :: {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.value,
            check.threshold,
            check.detail
        );
    }
    let json = suite_report_json(&report).to_json_string();
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json).map_err(usage("cannot write suite report"))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification)
    }
}

pub fn suite_report_json(report: &verify::SuiteReport) -> JsonVal {
    JsonVal::obj(vec![
        ("suite", JsonVal::Str(report.suite.clone())),
        ("seed", JsonVal::Int(report.seed as i64)),
        ("passed", JsonVal::Bool(report.passed)),
        (
            "checks",
            JsonVal::Arr(
                report
                    .checks
                    .iter()
                    .map(|c| {
                        JsonVal::obj(vec![
                            ("name", JsonVal::Str(c.name.clone())),
                            ("passed", JsonVal::Bool(c.passed)),
                            ("value", JsonVal::Float(c.value)),
                            ("threshold", JsonVal::Float(c.threshold)),
                            ("detail", JsonVal::Str(c.detail.clone())),
                        ])
                    })
                    .collect(),
            ),
        ),
        ("version", JsonVal::Str(crate::VERSION.to_string())),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_seventeen_digits() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(f64::NAN), "null");
        // round trip
        let x = 0.1 + 0.2;
        let s = fmt_float(x);
        let back: f64 = s.parse().unwrap();
        assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn json_escaping() {
        let v = JsonVal::Str("a\"b\\c\nd".to_string());
        let mut out = String::new();
        v.write(&mut out, 0);
        assert_eq!(out, "\"a\\\"b\\\\c\\nd\"");
    }

    #[test]
    fn config_round_trip() {
        let raw = r#"{
            "problem": {"kind": "linear_iv"},
            "layout": {"z": ["z1"], "t": ["t1"], "y": "y"},
            "estimator": "kernel-vmm",
            "seed": 7
        }"#;
        let cfg: EstimateConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(cfg.k, 2);
        let echoed = serde_json::to_string(&cfg).unwrap();
        let back: EstimateConfig = serde_json::from_str(&echoed).unwrap();
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let raw = r#"{
            "problem": {"kind": "linear_iv"},
            "layout": {"z": ["z1"], "t": ["t1"], "y": "y"},
            "estimator": "kernel-vmm",
            "surplus": 1
        }"#;
        assert!(serde_json::from_str::<EstimateConfig>(raw).is_err());
    }
}

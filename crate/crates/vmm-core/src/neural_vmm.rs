//! Neural VMM: a fixed fully-connected ReLU adversary trained by alternating
//! gradient ascent/descent on the minimax criterion
//!
//! ```text
//! G(theta, f) = mean_i f(z_i)ᵀ rho(x_i; theta)
//!             - (1/4) mean_i (f(z_i)ᵀ rho(x_i; prior))²
//!             - R(f)
//! ```
//!
//! with `R(f)` one of: the data-norm kernel regularizer
//! `(alpha/4) sum_k f_kᵀ K_k^{-1} f_k` on the evaluated columns, its
//! weighted-Frobenius approximation `(alpha/4) sum_k (1/sigma_k) sum_i
//! f(z_i)_k²` (exact when `K_k = sigma_k I`), or nothing. For any network the
//! kernel-regularized value is bounded above by the closed-form kernel
//! objective at the same `theta`, because the minimum-norm interpolant of the
//! network's values is a feasible point of the RKHS supremum.

use crate::kernel_vmm::StageTrace;
use crate::kernel_vmm::{VmmError, VmmSolution};
use crate::kernels::{self, KernelSpec};
use crate::moments::{self, Dataset, MomentProblem};
use crate::numerics::{self, SpdFactor};
use crate::rng::SplitMix64;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Multilayer perceptron
// ---------------------------------------------------------------------------

/// Fully-connected ReLU network with identity output layer.
#[derive(Clone, Debug)]
pub struct MlpNetwork {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Cached activations from a batched forward pass.
pub struct ForwardCache {
    /// `activations[l]` is the n x sizes[l] output of layer l (0 = input).
    activations: Vec<Array2<f64>>,
}

/// Parameter gradients with the same shapes as the network.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl MlpNetwork {
    /// Architecture `[input, width, ..., width, output]` with `depth` hidden
    /// layers, all parameters zero.
    pub fn new(input: usize, width: usize, depth: usize, output: usize) -> Self {
        assert!(input >= 1 && output >= 1);
        let mut sizes = vec![input];
        for _ in 0..depth {
            sizes.push(width);
        }
        sizes.push(output);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            weights.push(Array2::zeros((sizes[l + 1], sizes[l])));
            biases.push(Array1::zeros(sizes[l + 1]));
        }
        Self {
            sizes,
            weights,
            biases,
        }
    }

    /// He-style scaled uniform initialization from a counter-based stream.
    /// Biases get a small positive offset so no unit starts exactly on its
    /// activation kink.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        for l in 0..self.weights.len() {
            let fan_in = self.sizes[l] as f64;
            let scale = (6.0 / fan_in).sqrt();
            for w in self.weights[l].iter_mut() {
                *w = rng.next_range(-scale, scale);
            }
            for b in self.biases[l].iter_mut() {
                *b = rng.next_range(0.01, 0.05);
            }
        }
    }

    /// Multiplies all parameters by `c`.
    pub fn scale_params(&mut self, c: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| c * v);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| c * v);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn params_flat(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            v.extend(self.weights[l].iter());
            v.extend(self.biases[l].iter());
        }
        Array1::from_vec(v)
    }

    pub fn set_params_flat(&mut self, v: &Array1<f64>) {
        assert_eq!(v.len(), self.param_count());
        let mut idx = 0;
        for l in 0..self.weights.len() {
            for w in self.weights[l].iter_mut() {
                *w = v[idx];
                idx += 1;
            }
            for b in self.biases[l].iter_mut() {
                *b = v[idx];
                idx += 1;
            }
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, z: &[f64]) -> Array1<f64> {
        assert_eq!(z.len(), self.input_dim());
        let mut h = Array1::from_vec(z.to_vec());
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let mut next = self.weights[l].dot(&h) + &self.biases[l];
            if l < last {
                next.mapv_inplace(|v| v.max(0.0));
            }
            h = next;
        }
        h
    }

    /// Batched forward pass over rows of `zs`; returns outputs `n x m` and
    /// the activation cache for backpropagation.
    pub fn forward_batch(&self, zs: &[Vec<f64>]) -> (Array2<f64>, ForwardCache) {
        let n = zs.len();
        let mut act = Array2::zeros((n, self.input_dim()));
        for (i, z) in zs.iter().enumerate() {
            for (j, v) in z.iter().enumerate() {
                act[[i, j]] = *v;
            }
        }
        let mut activations = vec![act];
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let prev = activations.last().unwrap();
            let mut next = prev.dot(&self.weights[l].t());
            for mut row in next.rows_mut() {
                row += &self.biases[l];
            }
            if l < last {
                next.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(next);
        }
        let outputs = activations.last().unwrap().clone();
        (outputs, ForwardCache { activations })
    }

    /// Reverse-mode gradients of any scalar loss given `d_outputs[i, k] =
    /// dLoss/d f(z_i)_k`.
    pub fn backward_batch(&self, cache: &ForwardCache, d_outputs: &Array2<f64>) -> GradientSet {
        let layers = self.weights.len();
        let mut d_weights = Vec::with_capacity(layers);
        let mut d_biases = Vec::with_capacity(layers);
        for l in 0..layers {
            d_weights.push(Array2::zeros(self.weights[l].raw_dim()));
            d_biases.push(Array1::zeros(self.biases[l].raw_dim()));
        }
        let mut d_h = d_outputs.clone();
        for l in (0..layers).rev() {
            // output layer is linear; hidden layers gate by the ReLU mask
            let d_pre = if l == layers - 1 {
                d_h
            } else {
                let mut masked = d_h;
                masked.zip_mut_with(&cache.activations[l + 1], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                masked
            };
            d_weights[l] = d_pre.t().dot(&cache.activations[l]);
            d_biases[l] = d_pre.sum_axis(ndarray::Axis(0));
            if l > 0 {
                d_h = d_pre.dot(&self.weights[l]);
            } else {
                d_h = Array2::zeros((0, 0));
            }
        }
        GradientSet {
            d_weights,
            d_biases,
        }
    }

    /// In-place `params += lr * grads` (ascent for positive `lr`).
    pub fn step(&mut self, grads: &GradientSet, lr: f64) {
        for l in 0..self.weights.len() {
            self.weights[l].zip_mut_with(&grads.d_weights[l], |w, &g| *w += lr * g);
            self.biases[l].zip_mut_with(&grads.d_biases[l], |b, &g| *b += lr * g);
        }
    }

    /// Activations of the last hidden layer on a batch (`n x width`); these
    /// are the features the linear output layer acts on.
    pub fn hidden_features(&self, zs: &[Vec<f64>]) -> Array2<f64> {
        let (_, cache) = self.forward_batch(zs);
        let idx = cache.activations.len() - 2;
        cache.activations[idx].clone()
    }

    /// Replaces the output layer. The game value is concave quadratic in
    /// this block, so callers can maximize it exactly given the features.
    pub fn set_output_layer(&mut self, weights: Array2<f64>, biases: Array1<f64>) {
        let l = self.weights.len() - 1;
        assert_eq!(weights.raw_dim(), self.weights[l].raw_dim());
        assert_eq!(biases.len(), self.biases[l].len());
        self.weights[l] = weights;
        self.biases[l] = biases;
    }
}

// ---------------------------------------------------------------------------
// Game value
// ---------------------------------------------------------------------------

/// Regularizer applied to the adversary.
#[derive(Clone, Debug)]
pub enum RegularizerChoice {
    /// `(alpha/4) sum_k f_kᵀ K_k^{-1} f_k` on the evaluated columns.
    Kernel { specs: Vec<KernelSpec>, alpha: f64 },
    /// `(alpha/4) sum_k (1/sigma_k) sum_i f(z_i)_k²`.
    Frobenius { sigma: Vec<f64>, alpha: f64 },
    ///  No regularization.
    None,
}

enum PreparedReg {
    Kernel { factors: Vec<SpdFactor>, alpha: f64 },
    Frobenius { sigma: Vec<f64>, alpha: f64 },
    None,
}

/// Precomputed quantities for repeated game evaluations at a fixed prior.
pub struct GameContext<'a> {
    problem: &'a dyn MomentProblem,
    data: &'a Dataset,
    prior_residuals: Array2<f64>,
    reg: PreparedReg,
}

impl<'a> GameContext<'a> {
    /// Context with explicit Gram matrices for the kernel regularizer, so a
    /// caller can share the exact matrices with a closed-form assembly.
    pub fn with_kernel_grams(
        problem: &'a dyn MomentProblem,
        data: &'a Dataset,
        theta_prior: &[f64],
        grams: &[kernels::GramMatrix],
        alpha: f64,
    ) -> Result<Self, VmmError> {
        assert!(alpha >= 0.0);
        let m = problem.residual_dim();
        let prior_residuals = moments::residual_matrix(problem, data, theta_prior)?;
        let grams: Vec<&kernels::GramMatrix> = if grams.len() == m {
            grams.iter().collect()
        } else {
            assert_eq!(grams.len(), 1, "one Gram matrix per output dimension");
            vec![&grams[0]; m]
        };
        let mut factors = Vec::with_capacity(m);
        for gram in grams {
            factors.push(numerics::spd_factor_default(gram.matrix())?);
        }
        Ok(Self {
            problem,
            data,
            prior_residuals,
            reg: PreparedReg::Kernel { factors, alpha },
        })
    }

    pub fn new(
        problem: &'a dyn MomentProblem,
        data: &'a Dataset,
        theta_prior: &[f64],
        reg: &RegularizerChoice,
    ) -> Result<Self, VmmError> {
        let m = problem.residual_dim();
        let prior_residuals = moments::residual_matrix(problem, data, theta_prior)?;
        let reg = match reg {
            RegularizerChoice::Kernel { specs, alpha } => {
                assert!(*alpha >= 0.0);
                let specs = if specs.len() == m {
                    specs.clone()
                } else {
                    assert_eq!(specs.len(), 1, "one kernel per output dimension");
                    vec![specs[0].clone(); m]
                };
                let mut factors = Vec::with_capacity(m);
                for spec in &specs {
                    let gram = kernels::gram_matrix(spec, data.instruments())?;
                    factors.push(numerics::spd_factor_default(gram.matrix())?);
                }
                PreparedReg::Kernel {
                    factors,
                    alpha: *alpha,
                }
            }
            RegularizerChoice::Frobenius { sigma, alpha } => {
                assert!(*alpha >= 0.0);
                assert!(sigma.iter().all(|s| *s > 0.0), "sigma weights must be positive");
                let sigma = if sigma.len() == m {
                    sigma.clone()
                } else {
                    assert_eq!(sigma.len(), 1);
                    vec![sigma[0]; m]
                };
                PreparedReg::Frobenius {
                    sigma,
                    alpha: *alpha,
                }
            }
            RegularizerChoice::None => PreparedReg::None,
        };
        Ok(Self {
            problem,
            data,
            prior_residuals,
            reg,
        })
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    fn regularizer_value(&self, outputs: &Array2<f64>) -> f64 {
        let (n, m) = outputs.dim();
        match &self.reg {
            PreparedReg::None => 0.0,
            PreparedReg::Frobenius { sigma, alpha } => {
                let mut acc = 0.0;
                for k in 0..m {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += outputs[[i, k]] * outputs[[i, k]];
                    }
                    acc += s / sigma[k];
                }
                0.25 * alpha * acc
            }
            PreparedReg::Kernel { factors, alpha } => {
                let mut acc = 0.0;
                for k in 0..m {
                    let fk = outputs.column(k).to_owned();
                    let solved = numerics::spd_solve(&factors[k], &fk)
                        .expect("gram factor dimension fixed");
                    acc += fk.dot(&solved);
                }
                0.25 * alpha * acc
            }
        }
    }

    /// Game value at adversary outputs `outputs` and residuals `res_theta`.
    pub fn value(&self, outputs: &Array2<f64>, res_theta: &Array2<f64>) -> f64 {
        let (n, m) = outputs.dim();
        let mut first = 0.0;
        let mut second = 0.0;
        for i in 0..n {
            let mut f_rho = 0.0;
            let mut f_prior = 0.0;
            for k in 0..m {
                f_rho += outputs[[i, k]] * res_theta[[i, k]];
                f_prior += outputs[[i, k]] * self.prior_residuals[[i, k]];
            }
            first += f_rho;
            second += f_prior * f_prior;
        }
        first / n as f64 - 0.25 * second / n as f64 - self.regularizer_value(outputs)
    }

    /// Value plus the gradient with respect to the adversary outputs.
    pub fn value_and_output_grad(
        &self,
        outputs: &Array2<f64>,
        res_theta: &Array2<f64>,
    ) -> (f64, Array2<f64>) {
        let (n, m) = outputs.dim();
        let nf = n as f64;
        let mut grad = Array2::zeros((n, m));
        for i in 0..n {
            let mut f_prior = 0.0;
            for k in 0..m {
                f_prior += outputs[[i, k]] * self.prior_residuals[[i, k]];
            }
            for k in 0..m {
                grad[[i, k]] = res_theta[[i, k]] / nf
                    - 0.5 * f_prior * self.prior_residuals[[i, k]] / nf;
            }
        }
        match &self.reg {
            PreparedReg::None => {}
            PreparedReg::Frobenius { sigma, alpha } => {
                for k in 0..m {
                    for i in 0..n {
                        grad[[i, k]] -= 0.5 * alpha * outputs[[i, k]] / sigma[k];
                    }
                }
            }
            PreparedReg::Kernel { factors, alpha } => {
                for k in 0..m {
                    let fk = outputs.column(k).to_owned();
                    let solved = numerics::spd_solve(&factors[k], &fk)
                        .expect("gram factor dimension fixed");
                    for i in 0..n {
                        grad[[i, k]] -= 0.5 * alpha * solved[i];
                    }
                }
            }
        }
        (self.value(outputs, res_theta), grad)
    }

    /// Gradient of the game value with respect to `theta` at fixed adversary
    /// outputs: `mean_i Jac_iᵀ f(z_i)`.
    pub fn theta_grad(
        &self,
        outputs: &Array2<f64>,
        theta: &[f64],
    ) -> Result<Array1<f64>, VmmError> {
        let n = self.data.n();
        let m = self.problem.residual_dim();
        let b = self.problem.param_dim();
        let mut g = Array1::zeros(b);
        for i in 0..n {
            let jac = self.problem.jacobian(self.data.record(i), theta)?;
            for k in 0..m {
                for l in 0..b {
                    g[l] += outputs[[i, k]] * jac[[k, l]] / n as f64;
                }
            }
        }
        Ok(g)
    }
}

/// Inner objective value at `(theta, f = net)`.
pub fn nvmm_game_value(
    net: &MlpNetwork,
    problem: &dyn MomentProblem,
    data: &Dataset,
    theta: &[f64],
    theta_prior: &[f64],
    reg: &RegularizerChoice,
) -> Result<f64, VmmError> {
    let ctx = GameContext::new(problem, data, theta_prior, reg)?;
    let (outputs, _) = net.forward_batch(data.instruments());
    let res_theta = moments::residual_matrix(problem, data, theta)?;
    Ok(ctx.value(&outputs, &res_theta))
}

/// Gradient ascent on the adversary at fixed `theta`; returns the final
/// game value.
pub fn ascend_adversary(
    net: &mut MlpNetwork,
    ctx: &GameContext<'_>,
    res_theta: &Array2<f64>,
    lr: f64,
    steps: usize,
) -> f64 {
    let mut value = f64::NEG_INFINITY;
    for _ in 0..steps {
        let (outputs, cache) = net.forward_batch(ctx.data.instruments());
        let (v, d_out) = ctx.value_and_output_grad(&outputs, res_theta);
        let grads = net.backward_batch(&cache, &d_out);
        net.step(&grads, lr);
        value = v;
    }
    let (outputs, _) = net.forward_batch(ctx.data.instruments());
    ctx.value(&outputs, res_theta).max(value)
}

// ---------------------------------------------------------------------------
// Alternating minimax training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Deterministic full-batch updates (the default).
    Full,
    /// Seeded minibatches of the given size.
    Minibatch(usize),
}

#[derive(Clone, Debug)]
pub struct MinimaxConfig {
    pub adversary_steps: usize,
    pub lr_adversary: f64,
    pub lr_theta: f64,
    pub outer_iters: usize,
    pub batch: BatchMode,
    pub seed: u64,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            adversary_steps: 5,
            lr_adversary: 1e-2,
            lr_theta: 2e-2,
            outer_iters: 600,
            batch: BatchMode::Full,
            seed: 0,
        }
    }
}

/// Network architecture for the adversary; the default toy size is three
/// hidden layers of width fifty.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MlpArch {
    pub width: usize,
    pub depth: usize,
}

impl Default for MlpArch {
    fn default() -> Self {
        Self {
            width: 50,
            depth: 3,
        }
    }
}

/// Alternating minimax training: the adversary ascends the game value for
/// `adversary_steps`, then `theta` takes one descent step; the returned
/// solution is the final iterate with the trace of outer-iteration values.
pub fn train_neural_vmm(
    problem: &dyn MomentProblem,
    data: &Dataset,
    arch: MlpArch,
    theta_init: &[f64],
    theta_prior: &[f64],
    reg: &RegularizerChoice,
    config: &MinimaxConfig,
) -> Result<VmmSolution, VmmError> {
    assert!(config.lr_adversary > 0.0 && config.lr_theta > 0.0);
    let m = problem.residual_dim();
    let d_z = data.instrument(0).len();
    let mut net = MlpNetwork::new(d_z, arch.width, arch.depth, m);
    net.init_he(config.seed);
    let ctx = GameContext::new(problem, data, theta_prior, reg)?;
    let mut batch_rng = SplitMix64::new(crate::rng::derive_stream(config.seed, 0x6261_7463_68));

    let mut theta = Array1::from_vec(theta_init.to_vec());
    let mut value_trace = Vec::with_capacity(config.outer_iters);
    let mut last_theta_grad = Array1::zeros(theta.len());

    for _outer in 0..config.outer_iters {
        let tv = theta.to_vec();
        let res_theta = moments::residual_matrix(problem, data, &tv)?;

        let sample_indices: Option<Vec<usize>> = match config.batch {
            BatchMode::Full => None,
            BatchMode::Minibatch(size) => {
                let n = data.n();
                let size = size.min(n);
                let mut idx: Vec<usize> = (0..n).collect();
                // Fisher-Yates from the seeded stream
                for i in (1..n).rev() {
                    let j = (batch_rng.next_u64() % (i as u64 + 1)) as usize;
                    idx.swap(i, j);
                }
                idx.truncate(size);
                idx.sort_unstable();
                Some(idx)
            }
        };

        match &sample_indices {
            None => {
                for _ in 0..config.adversary_steps {
                    let (outputs, cache) = net.forward_batch(data.instruments());
                    let (_, d_out) = ctx.value_and_output_grad(&outputs, &res_theta);
                    let grads = net.backward_batch(&cache, &d_out);
                    net.step(&grads, config.lr_adversary);
                }
            }
            Some(idx) => {
                // minibatch updates approximate the first two terms on the
                // subset; the regularizer always sees the full evaluation
                let zs: Vec<Vec<f64>> = idx.iter().map(|&i| data.instrument(i).to_vec()).collect();
                let sub_res = {
                    let mut r = Array2::zeros((idx.len(), m));
                    for (row, &i) in idx.iter().enumerate() {
                        for k in 0..m {
                            r[[row, k]] = res_theta[[i, k]];
                        }
                    }
                    r
                };
                let sub_prior = {
                    let mut r = Array2::zeros((idx.len(), m));
                    for (row, &i) in idx.iter().enumerate() {
                        for k in 0..m {
                            r[[row, k]] = ctx.prior_residuals[[i, k]];
                        }
                    }
                    r
                };
                for _ in 0..config.adversary_steps {
                    let (outputs, cache) = net.forward_batch(&zs);
                    let n_sub = idx.len() as f64;
                    let mut d_out = Array2::zeros((idx.len(), m));
                    for r in 0..idx.len() {
                        let mut f_prior = 0.0;
                        for k in 0..m {
                            f_prior += outputs[[r, k]] * sub_prior[[r, k]];
                        }
                        for k in 0..m {
                            d_out[[r, k]] = sub_res[[r, k]] / n_sub
                                - 0.5 * f_prior * sub_prior[[r, k]] / n_sub;
                        }
                    }
                    let grads = net.backward_batch(&cache, &d_out);
                    net.step(&grads, config.lr_adversary);
                }
            }
        }

        let (outputs, _) = net.forward_batch(data.instruments());
        let g = ctx.theta_grad(&outputs, &tv)?;
        let value = ctx.value(&outputs, &res_theta);
        if !value.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(VmmError::Optim(crate::optim::OptimError::Diverged));
        }
        theta.zip_mut_with(&g, |t, &gi| *t -= config.lr_theta * gi);
        last_theta_grad = g;
        value_trace.push(value);
    }

    let objective = *value_trace.last().unwrap_or(&0.0);
    let grad_sup_norm = last_theta_grad
        .iter()
        .fold(0.0f64, |acc, g| acc.max(g.abs()));
    Ok(VmmSolution {
        theta_hat: theta.clone(),
        objective,
        grad_sup_norm,
        alpha: match reg {
            RegularizerChoice::Kernel { alpha, .. } | RegularizerChoice::Frobenius { alpha, .. } => {
                *alpha
            }
            RegularizerChoice::None => 0.0,
        },
        stages: vec![StageTrace {
            theta,
            objective,
            grad_sup_norm,
            iterations: config.outer_iters,
        }],
        value_trace,
    })
}

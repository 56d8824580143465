//! The global policy and the supervised projection (S-step).
//!
//! The policy is conditionally Gaussian: a parametric mean function of the
//! (selected) state with a state-independent covariance. The S-step
//! projects the local controllers onto this class by minimizing the summed
//! Gaussian KL from the policy to each local conditional, which reduces to
//! a precision-weighted quadratic on the mean plus closed-form covariance
//! terms. The covariance is set once per S-step in closed form; the mean
//! parameters are trained by mini-batch SGD with momentum (affine policies
//! can also be solved exactly).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdgpsError, Result};
use crate::fitting::ConditionalGaussianPolicy;
use crate::trajdist::{eigen_floor, symmetrize, PosDef};

/// Width of the two hidden layers of the network policy.
pub const MLP_HIDDEN: usize = 40;
/// Eigenvalue floor on the policy covariance.
pub const POLICY_COV_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index subset of the state the policy is allowed to observe. Blind task
/// variants drop the target-relative coordinates here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSelector {
    state_dim: usize,
    indices: Vec<usize>,
}

impl ObsSelector {
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_dim,
            indices: (0..state_dim).collect(),
        }
    }

    pub fn new(state_dim: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(MdgpsError::Empty("ObsSelector indices"));
        }
        if indices.iter().any(|&i| i >= state_dim) {
            return Err(MdgpsError::InvalidInput(format!(
                "observation index out of range for state dimension {state_dim}"
            )));
        }
        Ok(Self { state_dim, indices })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn select(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.indices.len(), |i, _| state[self.indices[i]])
    }

    /// Selection matrix S with obs = S * state.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.indices.len(), self.state_dim);
        for (r, &c) in self.indices.iter().enumerate() {
            s[(r, c)] = 1.0;
        }
        s
    }
}

/// Cached forward-pass activations for backprop.
struct MlpCache {
    obs: DVector<f64>,
    z1: DVector<f64>,
    h1: DVector<f64>,
    z2: DVector<f64>,
    h2: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

impl Mlp {
    fn forward(&self, obs: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        let z1 = &self.w1 * obs + &self.b1;
        let h1 = z1.map(|v| v.max(0.0));
        let z2 = &self.w2 * &h1 + &self.b2;
        let h2 = z2.map(|v| v.max(0.0));
        let out = &self.w3 * &h2 + &self.b3;
        (
            out,
            MlpCache {
                obs: obs.clone(),
                z1,
                h1,
                z2,
                h2,
            },
        )
    }
}

/// Parametric mean function of the policy.
#[derive(Debug, Clone)]
pub enum MeanFunction {
    Affine { weight: DMatrix<f64>, bias: DVector<f64> },
    Mlp(Mlp),
}

impl MeanFunction {
    pub fn action_dim(&self) -> usize {
        match self {
            MeanFunction::Affine { bias, .. } => bias.len(),
            MeanFunction::Mlp(m) => m.b3.len(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            MeanFunction::Affine { weight, .. } => weight.ncols(),
            MeanFunction::Mlp(m) => m.w1.ncols(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            MeanFunction::Affine { weight, bias } => weight.len() + bias.len(),
            MeanFunction::Mlp(m) => {
                m.w1.len() + m.b1.len() + m.w2.len() + m.b2.len() + m.w3.len() + m.b3.len()
            }
        }
    }

    /// Flat parameter vector, row-major per layer.
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let push_mat = |out: &mut Vec<f64>, m: &DMatrix<f64>| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
        };
        match self {
            MeanFunction::Affine { weight, bias } => {
                push_mat(&mut out, weight);
                out.extend(bias.iter());
            }
            MeanFunction::Mlp(m) => {
                push_mat(&mut out, &m.w1);
                out.extend(m.b1.iter());
                push_mat(&mut out, &m.w2);
                out.extend(m.b2.iter());
                push_mat(&mut out, &m.w3);
                out.extend(m.b3.iter());
            }
        }
        DVector::from_vec(out)
    }

    pub fn set_params(&mut self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(MdgpsError::Dimension {
                context: "MeanFunction::set_params",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut idx = 0usize;
        let take_mat = |m: &mut DMatrix<f64>, idx: &mut usize| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    m[(r, c)] = params[*idx];
                    *idx += 1;
                }
            }
        };
        match self {
            MeanFunction::Affine { weight, bias } => {
                take_mat(weight, &mut idx);
                for i in 0..bias.len() {
                    bias[i] = params[idx];
                    idx += 1;
                }
            }
            MeanFunction::Mlp(m) => {
                take_mat(&mut m.w1, &mut idx);
                for i in 0..m.b1.len() {
                    m.b1[i] = params[idx];
                    idx += 1;
                }
                take_mat(&mut m.w2, &mut idx);
                for i in 0..m.b2.len() {
                    m.b2[i] = params[idx];
                    idx += 1;
                }
                take_mat(&mut m.w3, &mut idx);
                for i in 0..m.b3.len() {
                    m.b3[i] = params[idx];
                    idx += 1;
                }
            }
        }
        Ok(())
    }
}

/// State-conditional Gaussian policy with parametric mean and
/// state-independent covariance.
#[derive(Debug, Clone)]
pub struct GlobalPolicy {
    mean_fn: MeanFunction,
    covariance: DMatrix<f64>,
    selector: ObsSelector,
}

impl GlobalPolicy {
    pub fn new(mean_fn: MeanFunction, covariance: DMatrix<f64>, selector: ObsSelector) -> Result<Self> {
        if mean_fn.obs_dim() != selector.obs_dim() {
            return Err(MdgpsError::Dimension {
                context: "GlobalPolicy mean input",
                expected: selector.obs_dim(),
                actual: mean_fn.obs_dim(),
            });
        }
        let du = mean_fn.action_dim();
        if covariance.nrows() != du || covariance.ncols() != du {
            return Err(MdgpsError::Dimension {
                context: "GlobalPolicy covariance",
                expected: du,
                actual: covariance.nrows(),
            });
        }
        // Floor only when violated so clean inputs stay bit-exact.
        let floored = if crate::trajdist::min_eigenvalue(&covariance) >= POLICY_COV_FLOOR {
            symmetrize(&covariance)
        } else {
            eigen_floor(&covariance, POLICY_COV_FLOOR)
        };
        PosDef::new(floored.clone(), "GlobalPolicy covariance")?;
        Ok(Self {
            mean_fn,
            covariance: floored,
            selector,
        })
    }

    /// Zero-mean affine policy with isotropic covariance; the configured
    /// initial global policy.
    pub fn zero_affine(action_dim: usize, selector: ObsSelector, std: f64) -> Result<Self> {
        let weight = DMatrix::zeros(action_dim, selector.obs_dim());
        let bias = DVector::zeros(action_dim);
        let cov = DMatrix::identity(action_dim, action_dim) * std * std;
        Self::new(MeanFunction::Affine { weight, bias }, cov, selector)
    }

    /// Network policy with scaled-uniform fan-in hidden layers and a
    /// zero-initialized output layer, so the fresh policy's mean is
    /// identically zero and the policy equals the configured Gaussian
    /// prior policy.
    pub fn mlp_init(action_dim: usize, selector: ObsSelector, std: f64, seed: u64) -> Result<Self> {
        let obs = selector.obs_dim();
        let mut rng = crate::rng::rng_from(seed, &[crate::rng::stream::POLICY_INIT]);
        let bound1 = 1.0 / (obs as f64).sqrt();
        let w1 = DMatrix::from_fn(MLP_HIDDEN, obs, |_, _| rng.random_range(-bound1..bound1));
        let b1 = DVector::from_fn(MLP_HIDDEN, |_, _| rng.random_range(-bound1..bound1));
        let bound2 = 1.0 / (MLP_HIDDEN as f64).sqrt();
        let w2 = DMatrix::from_fn(MLP_HIDDEN, MLP_HIDDEN, |_, _| rng.random_range(-bound2..bound2));
        let b2 = DVector::from_fn(MLP_HIDDEN, |_, _| rng.random_range(-bound2..bound2));
        let w3 = DMatrix::zeros(action_dim, MLP_HIDDEN);
        let b3 = DVector::zeros(action_dim);
        let cov = DMatrix::identity(action_dim, action_dim) * std * std;
        Self::new(
            MeanFunction::Mlp(Mlp { w1, b1, w2, b2, w3, b3 }),
            cov,
            selector,
        )
    }

    pub fn mean_fn(&self) -> &MeanFunction {
        &self.mean_fn
    }

    pub fn selector(&self) -> &ObsSelector {
        &self.selector
    }

    pub fn state_dim(&self) -> usize {
        self.selector.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean_fn.action_dim()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn with_covariance(&self, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(self.mean_fn.clone(), covariance, self.selector.clone())
    }

    pub fn params(&self) -> DVector<f64> {
        self.mean_fn.params()
    }

    pub fn set_params(&mut self, params: &DVector<f64>) -> Result<()> {
        self.mean_fn.set_params(params)
    }

    fn mean_obs(&self, obs: &DVector<f64>) -> DVector<f64> {
        match &self.mean_fn {
            MeanFunction::Affine { weight, bias } => weight * obs + bias,
            MeanFunction::Mlp(m) => m.forward(obs).0,
        }
    }

    pub fn mean(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        if state.len() != self.selector.state_dim() {
            return Err(MdgpsError::Dimension {
                context: "GlobalPolicy::mean state",
                expected: self.selector.state_dim(),
                actual: state.len(),
            });
        }
        Ok(self.mean_obs(&self.selector.select(state)))
    }
}

impl ConditionalGaussianPolicy for GlobalPolicy {
    fn mean(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        GlobalPolicy::mean(self, state)
    }
    fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

/// Deterministic mean and (state-independent) covariance at a state.
pub fn policy_eval(policy: &GlobalPolicy, state: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((policy.mean(state)?, policy.covariance.clone()))
}

/// One supervision tuple: a sampled state, the local controller's mean at
/// that state, and the controller's precision there.
#[derive(Debug, Clone)]
pub struct SStepTuple {
    pub state: DVector<f64>,
    pub target_mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// The S-step training set across steps, conditions, and samples.
#[derive(Debug, Clone)]
pub struct SStepDataset {
    tuples: Vec<SStepTuple>,
}

impl SStepDataset {
    pub fn new(tuples: Vec<SStepTuple>) -> Result<Self> {
        if tuples.is_empty() {
            return Err(MdgpsError::Empty("SStepDataset"));
        }
        let dx = tuples[0].state.len();
        let du = tuples[0].target_mean.len();
        for (i, tup) in tuples.iter().enumerate() {
            if tup.state.len() != dx || tup.target_mean.len() != du {
                return Err(MdgpsError::InvalidInput(format!(
                    "S-step tuple {i} has inconsistent dimensions"
                )));
            }
            PosDef::new(tup.precision.clone(), &format!("S-step precision {i}"))?;
        }
        Ok(Self { tuples })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[SStepTuple] {
        &self.tuples
    }

    pub fn precisions(&self) -> Vec<DMatrix<f64>> {
        self.tuples.iter().map(|t| t.precision.clone()).collect()
    }
}

/// The S-step objective with constants dropped:
/// `sum_j tr(C_j^-1 S) - log|S| + (mu(x_j) - m_j)^T C_j^-1 (mu(x_j) - m_j)`
/// where S is the policy covariance. Equals twice the summed Gaussian KL
/// from the policy to the targets plus the constant `sum_j (du - log|C_j|)`.
pub fn s_step_loss(policy: &GlobalPolicy, dataset: &SStepDataset) -> Result<f64> {
    let sigma = PosDef::new(policy.covariance.clone(), "policy covariance")?;
    let log_det_sigma = sigma.log_det();
    let mut total = 0.0;
    for tup in dataset.tuples() {
        let err = policy.mean(&tup.state)? - &tup.target_mean;
        total += (&tup.precision * sigma.matrix()).trace() - log_det_sigma
            + err.dot(&(&tup.precision * &err));
    }
    if !total.is_finite() {
        return Err(MdgpsError::NonFinite("s_step_loss".into()));
    }
    Ok(total)
}

fn grad_for_indices(
    policy: &GlobalPolicy,
    dataset: &SStepDataset,
    indices: &[usize],
) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(policy.mean_fn.param_count());
    for &j in indices {
        let tup = &dataset.tuples()[j];
        if tup.state.len() != policy.selector.state_dim() {
            return Err(MdgpsError::Dimension {
                context: "s_step gradient state",
                expected: policy.selector.state_dim(),
                actual: tup.state.len(),
            });
        }
        let obs = policy.selector.select(&tup.state);
        match &policy.mean_fn {
            MeanFunction::Affine { weight, bias } => {
                let mean = weight * &obs + bias;
                let g_out = &tup.precision * (mean - &tup.target_mean) * 2.0;
                let du = bias.len();
                let p = obs.len();
                // Layout: weight row-major, then bias.
                for r in 0..du {
                    for c in 0..p {
                        grad[r * p + c] += g_out[r] * obs[c];
                    }
                }
                for r in 0..du {
                    grad[du * p + r] += g_out[r];
                }
            }
            MeanFunction::Mlp(m) => {
                let (mean, cache) = m.forward(&obs);
                let g_out = &tup.precision * (mean - &tup.target_mean) * 2.0;
                accumulate_mlp_grad(m, &cache, &g_out, &mut grad);
            }
        }
    }
    Ok(grad)
}

fn accumulate_mlp_grad(m: &Mlp, cache: &MlpCache, g_out: &DVector<f64>, grad: &mut DVector<f64>) {
    let h = MLP_HIDDEN;
    let p = m.w1.ncols();
    let du = m.b3.len();
    let off_w1 = 0;
    let off_b1 = off_w1 + h * p;
    let off_w2 = off_b1 + h;
    let off_b2 = off_w2 + h * h;
    let off_w3 = off_b2 + h;
    let off_b3 = off_w3 + du * h;

    // Output layer.
    for r in 0..du {
        for c in 0..h {
            grad[off_w3 + r * h + c] += g_out[r] * cache.h2[c];
        }
        grad[off_b3 + r] += g_out[r];
    }
    let dh2 = m.w3.transpose() * g_out;
    let dz2 = DVector::from_fn(h, |i, _| if cache.z2[i] > 0.0 { dh2[i] } else { 0.0 });
    for r in 0..h {
        for c in 0..h {
            grad[off_w2 + r * h + c] += dz2[r] * cache.h1[c];
        }
        grad[off_b2 + r] += dz2[r];
    }
    let dh1 = m.w2.transpose() * &dz2;
    let dz1 = DVector::from_fn(h, |i, _| if cache.z1[i] > 0.0 { dh1[i] } else { 0.0 });
    for r in 0..h {
        for c in 0..p {
            grad[off_w1 + r * p + c] += dz1[r] * cache.obs[c];
        }
        grad[off_b1 + r] += dz1[r];
    }
}

/// Analytic gradient of [`s_step_loss`] with respect to the mean
/// parameters (the covariance terms do not depend on them).
pub fn s_step_grad(policy: &GlobalPolicy, dataset: &SStepDataset) -> Result<DVector<f64>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    grad_for_indices(policy, dataset, &all)
}

/// Closed-form covariance minimizer of the S-step objective:
/// the inverse of the mean precision, symmetrized and eigenvalue-floored.
pub fn optimal_covariance(precisions: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if precisions.is_empty() {
        return Err(MdgpsError::Empty("optimal_covariance precisions"));
    }
    let du = precisions[0].nrows();
    let mut mean = DMatrix::zeros(du, du);
    for p in precisions {
        if p.nrows() != du || p.ncols() != du {
            return Err(MdgpsError::Dimension {
                context: "optimal_covariance precision",
                expected: du,
                actual: p.nrows(),
            });
        }
        mean += p;
    }
    mean /= precisions.len() as f64;
    let pd = PosDef::new(symmetrize(&mean), "mean precision")?;
    Ok(eigen_floor(&pd.inverse(), POLICY_COV_FLOOR))
}

/// Mini-batch SGD settings for the S-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            learning_rate: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SStepOutcome {
    pub policy: GlobalPolicy,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Set when a non-finite loss forced a halved-learning-rate restart.
    pub restarted: bool,
}

/// Train the policy mean by mini-batch SGD on the S-step loss. The
/// covariance is set once, in closed form, before the gradient steps.
/// A non-finite excursion halves the learning rate and restarts once;
/// a second failure is an error. The returned loss never exceeds the
/// initial one (the best parameters seen are kept).
pub fn s_step_train(
    policy: &GlobalPolicy,
    dataset: &SStepDataset,
    config: &SgdConfig,
    seed: u64,
) -> Result<SStepOutcome> {
    if dataset.is_empty() {
        return Err(MdgpsError::Empty("s_step_train dataset"));
    }
    if config.steps == 0 {
        let loss = s_step_loss(policy, dataset)?;
        return Ok(SStepOutcome {
            policy: policy.clone(),
            initial_loss: loss,
            final_loss: loss,
            restarted: false,
        });
    }

    let mut trained = policy.with_covariance(optimal_covariance(&dataset.precisions())?)?;
    let initial_params = trained.params();
    let initial_loss = s_step_loss(&trained, dataset)?;

    let mut lr = config.learning_rate;
    let mut restarted = false;
    loop {
        match sgd_run(&trained, dataset, config, lr, seed)? {
            Some((params, final_loss)) => {
                let mut out = trained.clone();
                if final_loss <= initial_loss {
                    out.set_params(&params)?;
                    return Ok(SStepOutcome {
                        policy: out,
                        initial_loss,
                        final_loss,
                        restarted,
                    });
                }
                // SGD ended worse than it started; keep the covariance
                // update and the original mean.
                return Ok(SStepOutcome {
                    policy: out,
                    initial_loss,
                    final_loss: initial_loss,
                    restarted,
                });
            }
            None => {
                if restarted {
                    return Err(MdgpsError::SStep(
                        "non-finite loss after halving the learning rate".into(),
                    ));
                }
                log::warn!("S-step diverged; halving learning rate from {lr:.2e} and restarting");
                restarted = true;
                lr *= 0.5;
                trained.set_params(&initial_params)?;
            }
        }
    }
}

/// One SGD run; returns None when parameters go non-finite.
fn sgd_run(
    policy: &GlobalPolicy,
    dataset: &SStepDataset,
    config: &SgdConfig,
    lr: f64,
    seed: u64,
) -> Result<Option<(DVector<f64>, f64)>> {
    let mut rng = crate::rng::rng_from(seed, &[crate::rng::stream::SGD]);
    let mut work = policy.clone();
    let n = dataset.len();
    let batch = config.batch_size.max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut velocity = DVector::zeros(work.mean_fn().param_count());
    let mut params = work.params();

    let eval_every = (config.steps / 20).max(1);
    let mut best_loss = s_step_loss(&work, dataset)?;
    let mut best_params = params.clone();

    for step in 0..config.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let indices = &order[cursor..cursor + batch];
        cursor += batch;

        let grad = grad_for_indices(&work, dataset, indices)? / batch as f64;
        velocity = velocity * config.momentum - grad * lr;
        params += &velocity;
        if !params.iter().all(|v| v.is_finite()) {
            return Ok(None);
        }
        work.set_params(&params)?;

        if (step + 1) % eval_every == 0 || step + 1 == config.steps {
            let loss = s_step_loss(&work, dataset)?;
            if !loss.is_finite() {
                return Ok(None);
            }
            if loss < best_loss {
                best_loss = loss;
                best_params.copy_from(&params);
            }
        }
    }
    Ok(Some((best_params, best_loss)))
}

/// One Gaussian-moment term of the analytic affine projection: the state
/// marginal of a local controller step together with its target affine
/// conditional.
#[derive(Debug, Clone)]
pub struct AffineProjectionTerm {
    pub state_mean: DVector<f64>,
    pub state_cov: DMatrix<f64>,
    pub target_gain: DMatrix<f64>,
    pub target_bias: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// Solve the affine S-step exactly from Gaussian state moments:
/// minimizes `sum_j E_{x~N(mu_j, Sig_j)}[(A Sx + b - K_j x - k_j)^T W_j (...)]`
/// over (A, b), then sets the covariance in closed form. This is the
/// projection used by the exact linear pipeline; sampled SGD is the
/// general path.
pub fn s_step_affine_exact(
    policy: &GlobalPolicy,
    terms: &[AffineProjectionTerm],
) -> Result<GlobalPolicy> {
    if terms.is_empty() {
        return Err(MdgpsError::Empty("s_step_affine_exact terms"));
    }
    if !matches!(policy.mean_fn, MeanFunction::Affine { .. }) {
        return Err(MdgpsError::SStep(
            "exact affine projection requires an affine policy".into(),
        ));
    }
    let sel = policy.selector.matrix();
    let p = policy.selector.obs_dim();
    let du = policy.action_dim();
    let dim = du * (p + 1);
    let mut lhs = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(du, p + 1);
    for term in terms {
        let second = &term.state_cov + &term.state_mean * term.state_mean.transpose();
        let s_second = &sel * &second;
        // E[a a^T] for a = [S x; 1].
        let mut m = DMatrix::zeros(p + 1, p + 1);
        m.view_mut((0, 0), (p, p)).copy_from(&(&s_second * sel.transpose()));
        let smu = &sel * &term.state_mean;
        m.view_mut((0, p), (p, 1)).copy_from(&smu);
        m.view_mut((p, 0), (1, p)).copy_from(&smu.transpose());
        m[(p, p)] = 1.0;
        // E[(K x + k) a^T].
        let mut tmat = DMatrix::zeros(du, p + 1);
        tmat.view_mut((0, 0), (du, p)).copy_from(
            &(&term.target_gain * &second * sel.transpose() + &term.target_bias * smu.transpose()),
        );
        let ky = &term.target_gain * &term.state_mean + &term.target_bias;
        tmat.view_mut((0, p), (du, 1)).copy_from(&ky);

        lhs += symmetrize(&m).kronecker(&term.precision);
        rhs += &term.precision * tmat;
    }
    // Column-major vec convention: vec(W Z M) = (M^T kron W) vec(Z).
    let rhs_vec = DVector::from_column_slice(rhs.as_slice());
    let sol = lhs
        .lu()
        .solve(&DMatrix::from_column_slice(dim, 1, rhs_vec.as_slice()))
        .ok_or_else(|| MdgpsError::SStep("singular normal equations in affine projection".into()))?;
    let z = DMatrix::from_column_slice(du, p + 1, sol.as_slice());
    let weight = z.view((0, 0), (du, p)).into_owned();
    let bias: DVector<f64> = z.column(p).into_owned();
    let precisions: Vec<_> = terms.iter().map(|t| t.precision.clone()).collect();
    GlobalPolicy::new(
        MeanFunction::Affine { weight, bias },
        optimal_covariance(&precisions)?,
        policy.selector.clone(),
    )
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    architecture: String,
    state_dim: usize,
    action_dim: usize,
    hidden_dim: usize,
    observation_selector: Vec<usize>,
    /// Flat mean parameters, row-major per layer.
    params: Vec<f64>,
    /// Row-major action covariance.
    covariance: Vec<f64>,
}

/// Write a policy checkpoint as a structured text document.
pub fn save_checkpoint(policy: &GlobalPolicy, path: &std::path::Path) -> Result<()> {
    let (arch, hidden) = match &policy.mean_fn {
        MeanFunction::Affine { .. } => ("affine", 0),
        MeanFunction::Mlp(_) => ("mlp", MLP_HIDDEN),
    };
    let cov = policy.covariance();
    let mut cov_flat = Vec::with_capacity(cov.len());
    for r in 0..cov.nrows() {
        for c in 0..cov.ncols() {
            cov_flat.push(cov[(r, c)]);
        }
    }
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        architecture: arch.to_string(),
        state_dim: policy.state_dim(),
        action_dim: policy.action_dim(),
        hidden_dim: hidden,
        observation_selector: policy.selector.indices().to_vec(),
        params: policy.params().iter().cloned().collect(),
        covariance: cov_flat,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a policy checkpoint, refusing unknown format versions.
pub fn load_checkpoint(path: &std::path::Path) -> Result<GlobalPolicy> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(MdgpsError::CheckpointVersion {
            found: file.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let selector = ObsSelector::new(file.state_dim, file.observation_selector)?;
    let obs = selector.obs_dim();
    let du = file.action_dim;
    let mut mean_fn = match file.architecture.as_str() {
        "affine" => MeanFunction::Affine {
            weight: DMatrix::zeros(du, obs),
            bias: DVector::zeros(du),
        },
        "mlp" => {
            if file.hidden_dim != MLP_HIDDEN {
                return Err(MdgpsError::InvalidInput(format!(
                    "checkpoint hidden width {} is not supported (expected {MLP_HIDDEN})",
                    file.hidden_dim
                )));
            }
            MeanFunction::Mlp(Mlp {
                w1: DMatrix::zeros(MLP_HIDDEN, obs),
                b1: DVector::zeros(MLP_HIDDEN),
                w2: DMatrix::zeros(MLP_HIDDEN, MLP_HIDDEN),
                b2: DVector::zeros(MLP_HIDDEN),
                w3: DMatrix::zeros(du, MLP_HIDDEN),
                b3: DVector::zeros(du),
            })
        }
        other => {
            return Err(MdgpsError::InvalidInput(format!(
                "unknown policy architecture '{other}'"
            )))
        }
    };
    mean_fn.set_params(&DVector::from_vec(file.params))?;
    if file.covariance.len() != du * du {
        return Err(MdgpsError::Dimension {
            context: "checkpoint covariance",
            expected: du * du,
            actual: file.covariance.len(),
        });
    }
    let covariance = DMatrix::from_row_slice(du, du, &file.covariance);
    GlobalPolicy::new(mean_fn, covariance, selector)
}

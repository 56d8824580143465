//! The outer loop: sample, fit, C-step, S-step, adjust the step size.
//!
//! Each iteration draws samples from the last local or global policies,
//! fits linear-Gaussian dynamics and a global-policy linearization per
//! condition, solves the KL-constrained control step against that
//! linearization, projects the new local controllers onto the global
//! policy class, and adapts the per-condition KL budget from the analytic
//! expected-cost bookkeeping. Bound diagnostics estimate the per-step
//! local-global divergence and the resulting cost bound.
//!
//! Cost-estimate notation: `l_m_k` is the analytic expected total cost of
//! the iteration-k local policy under the dynamics fitted from
//! iteration-m samples; a `_pi` suffix swaps in the linearized global
//! policy. Dynamics fitted from a policy's own samples only exist one
//! iteration later, so the record emitted at iteration k carries the six
//! quantities of the step-size decision *made* at iteration k, which
//! concerns the C-step of iteration k-1 (at iteration 1 the fresh values
//! are duplicated into the historical slots and no adjustment happens).

use nalgebra::{DMatrix, DVector};

use crate::envs::{self, Actor, EnvSpec, Rollout};
use crate::error::{MdgpsError, Result};
use crate::fitting::{
    fit_gmm, fit_linear_gaussian, fit_policy_linearization, FitMode, GmmPrior, GmmSettings,
    Provenance, SampleSet, SampleTrajectory,
};
use crate::lqr::c_step;
use crate::policy::{
    s_step_affine_exact, s_step_train, AffineProjectionTerm, GlobalPolicy,
    MeanFunction, SStepDataset, SStepTuple, SgdConfig,
};
use crate::rng::{split_seed, stream};
use crate::trajdist::{
    expected_cost, propagate_marginals, PosDef, QuadraticCostExpansion,
    TimeVaryingLinGauss,
};

/// How iteration samples are generated: from the global policy
/// ("on policy") or from the local policies ("off policy").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    OnPolicy,
    OffPolicy,
}

/// Which step-size rule adapts the KL budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Classic,
    Global,
}

/// How the S-step is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SStepSolver {
    Sgd,
    /// Closed-form affine projection from exact Gaussian marginals;
    /// requires an affine policy and is the exact-pipeline companion of
    /// `exact_dynamics`.
    ExactAffine,
}

/// Clamps applied to every step-size update: first multiplicative
/// (at most x5 up or down per iteration), then absolute.
#[derive(Debug, Clone, Copy)]
pub struct StepClamps {
    pub relative: f64,
    pub abs_min: f64,
    pub abs_max: f64,
}

impl Default for StepClamps {
    fn default() -> Self {
        Self {
            relative: 5.0,
            abs_min: 1e-4,
            abs_max: 10.0,
        }
    }
}

/// The six analytic cost estimates behind one step-size decision.
#[derive(Debug, Clone, Copy)]
pub struct StepQuantities {
    /// Previous global-policy linearization under previous dynamics.
    pub l_km1_km1_pi: f64,
    /// New local policy under the dynamics it was optimized with.
    pub l_km1_k: f64,
    /// Same local policy under the dynamics fitted from its own samples.
    pub l_k_k: f64,
    /// New global-policy linearization under previous dynamics.
    pub l_km1_k_pi: f64,
    /// New global-policy linearization under the fresh dynamics.
    pub l_k_k_pi: f64,
    /// Previous local policy under previous dynamics.
    pub l_km1_km1: f64,
}

fn apply_step_update(num: f64, den: f64, epsilon: f64, clamps: &StepClamps) -> (f64, bool) {
    let ratio = num / den;
    let (raw, flagged) = if den == 0.0 || !ratio.is_finite() || ratio <= 0.0 {
        // Degenerate or sign-flipped prediction model: maximal shrink.
        (epsilon / clamps.relative, true)
    } else {
        (epsilon * ratio, false)
    };
    let clamped = raw
        .clamp(epsilon / clamps.relative, epsilon * clamps.relative)
        .clamp(clamps.abs_min, clamps.abs_max);
    (clamped, flagged)
}

/// "Classic" rule: predicted-versus-actual local improvement,
/// `eps' = eps (l_{k-1}^k - l_{k-1}^{k-1,pi}) / 2(l_{k-1}^k - l_k^k)`.
/// Returns the new epsilon and whether the maximal-shrink fallback fired.
pub fn adjust_step_classic(q: &StepQuantities, epsilon: f64, clamps: &StepClamps) -> (f64, bool) {
    let num = q.l_km1_k - q.l_km1_km1_pi;
    let den = 2.0 * (q.l_km1_k - q.l_k_k);
    apply_step_update(num, den, epsilon, clamps)
}

/// "Global" rule: same numerator, but the realized cost is the global
/// policy's, `eps' = eps (l_{k-1}^k - l_{k-1}^{k-1,pi}) / 2(l_{k-1}^k - l_k^{k,pi})`,
/// so a global policy that fails to reproduce the local policies also
/// shrinks the step.
pub fn adjust_step_global(q: &StepQuantities, epsilon: f64, clamps: &StepClamps) -> (f64, bool) {
    let num = q.l_km1_k - q.l_km1_km1_pi;
    let den = 2.0 * (q.l_km1_k - q.l_k_k_pi);
    apply_step_update(num, den, epsilon, clamps)
}

/// Per-step state-marginal total-variation bounds from the per-step KL
/// maxima: `tv_bound[t] = 2 sum_{t' <= t} sqrt(2 eps_{t'})`. The bound is
/// on the raw L1 distance `|p(x_t) - q(x_t)|_1`; half of it bounds the
/// 1/2-normalized total-variation convention.
pub fn state_marginal_tv_bounds(eps: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    eps.iter()
        .map(|&e| {
            acc += 2.0 * (2.0 * e.max(0.0)).sqrt();
            acc
        })
        .collect()
}

/// Cost bound on the divergence-limited policy:
/// `sum_t [ E_p[l_t] + sqrt(2 eps_t) max_t l + 2 sqrt(2 eps_t) Q_max_t ]`
/// with `Q_max_t` the suffix sum of the per-step cost maxima.
pub fn divergence_cost_bound(exp_cost_p: &[f64], max_cost: &[f64], eps: &[f64]) -> f64 {
    let horizon = exp_cost_p.len();
    assert_eq!(max_cost.len(), horizon);
    assert_eq!(eps.len(), horizon);
    let mut q_max = vec![0.0; horizon];
    let mut acc = 0.0;
    for t in (0..horizon).rev() {
        acc += max_cost[t];
        q_max[t] = acc;
    }
    (0..horizon)
        .map(|t| {
            let root = (2.0 * eps[t].max(0.0)).sqrt();
            exp_cost_p[t] + root * max_cost[t] + 2.0 * root * q_max[t]
        })
        .sum()
}

/// Per-iteration divergence and cost-bound diagnostics for one condition.
/// The per-step KL maxima are taken over the sampled states only, so they
/// lower-bound the true state-space maxima; the report is empirical, not
/// a certificate.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// Max over sampled states of KL(local || global) per step.
    pub eps_t: Vec<f64>,
    /// Cumulative TV bound per step (raw L1 convention).
    pub tv_bound: Vec<f64>,
    /// Per-step empirical mean cost under the local-policy samples.
    pub exp_cost: Vec<f64>,
    /// Per-step max cost over the sampled support.
    pub max_cost: Vec<f64>,
    /// Suffix sums of `max_cost` (max cost-to-go).
    pub q_max: Vec<f64>,
    /// Right-hand side of the cost bound.
    pub cost_bound_rhs: f64,
    /// Monte-Carlo estimate of the global policy's total cost.
    pub global_cost_mc: f64,
}

/// Diagnostics of the local-to-global divergence along sampled states and
/// the implied cost bound.
pub fn compute_bound(
    local: &TimeVaryingLinGauss,
    policy: &GlobalPolicy,
    samples: &[Rollout],
    global_cost_mc: f64,
) -> Result<BoundReport> {
    if samples.is_empty() {
        return Err(MdgpsError::Empty("compute_bound samples"));
    }
    let horizon = local.horizon();
    let du = local.out_dim() as f64;
    let pol_cov = PosDef::new(policy.covariance().clone(), "bound policy covariance")?;
    let pol_prec = pol_cov.inverse();
    let pol_logdet = pol_cov.log_det();

    let mut eps_t = Vec::with_capacity(horizon);
    let mut exp_cost = Vec::with_capacity(horizon);
    let mut max_cost = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut worst: f64 = 0.0;
        let mut mean_cost = 0.0;
        let mut top_cost = f64::NEG_INFINITY;
        let local_logdet = local.cov_pd(t).log_det();
        let trace_term = (&pol_prec * local.cov(t)).trace();
        for rollout in samples {
            let x = &rollout.states[t];
            let mean_local = local.mean(t, x);
            let mean_pol = policy.mean(x)?;
            let d = &mean_pol - &mean_local;
            let kl = 0.5
                * (trace_term + d.dot(&(&pol_prec * &d)) - du + pol_logdet - local_logdet);
            worst = worst.max(kl.max(0.0));
            mean_cost += rollout.costs[t];
            top_cost = top_cost.max(rollout.costs[t]);
        }
        eps_t.push(worst);
        exp_cost.push(mean_cost / samples.len() as f64);
        max_cost.push(top_cost);
    }
    let tv_bound = state_marginal_tv_bounds(&eps_t);
    let cost_bound_rhs = divergence_cost_bound(&exp_cost, &max_cost, &eps_t);
    let mut q_max = vec![0.0; horizon];
    let mut acc = 0.0;
    for t in (0..horizon).rev() {
        acc += max_cost[t];
        q_max[t] = acc;
    }
    Ok(BoundReport {
        eps_t,
        tv_bound,
        exp_cost,
        max_cost,
        q_max,
        cost_bound_rhs,
        global_cost_mc,
    })
}

/// Algorithm settings for the outer loop.
#[derive(Debug, Clone)]
pub struct AlgorithmConfig {
    pub sampling: SamplingMode,
    pub step_rule: StepRule,
    pub initial_epsilon: f64,
    pub clamps: StepClamps,
    pub samples_per_condition: usize,
    pub gmm: GmmSettings,
    pub sgd: SgdConfig,
    pub s_step_solver: SStepSolver,
    /// Use the environment's exact linear dynamics instead of fitting
    /// (available for the point-mass family only).
    pub exact_dynamics: bool,
    /// Linearize the global policy by regressing on sampled actions
    /// instead of policy mean evaluations.
    pub fit_policy_on_actions: bool,
    pub master_seed: u64,
    /// Rollouts per condition for the Monte-Carlo return estimates.
    pub eval_samples: usize,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingMode::OffPolicy,
            step_rule: StepRule::Classic,
            initial_epsilon: 2.0,
            clamps: StepClamps::default(),
            samples_per_condition: 5,
            gmm: GmmSettings::default(),
            sgd: SgdConfig::default(),
            s_step_solver: SStepSolver::Sgd,
            exact_dynamics: false,
            fit_policy_on_actions: false,
            master_seed: 0,
            eval_samples: 5,
        }
    }
}

/// Record of one condition within an iteration.
#[derive(Debug, Clone)]
pub struct ConditionRecord {
    pub epsilon: f64,
    pub eta: f64,
    pub achieved_kl: f64,
    pub quantities: StepQuantities,
    /// False at iteration 1 (nothing to compare against yet).
    pub step_adjusted: bool,
    /// The maximal-shrink fallback fired.
    pub shrink_flagged: bool,
    pub cstep_warning: bool,
    pub constraint_slack: bool,
}

/// Everything measured during one iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub conditions: Vec<ConditionRecord>,
    pub bounds: Vec<BoundReport>,
    /// Monte-Carlo mean total cost of the new local policies.
    pub local_mean_return: f64,
    /// Monte-Carlo mean total cost of the new global policy.
    pub global_mean_return: f64,
    /// Success rate of the global-policy evaluation rollouts.
    pub success_rate: f64,
    /// Mean final distance-to-goal of the global-policy rollouts.
    pub mean_final_distance: f64,
    pub s_step_initial_loss: f64,
    pub s_step_final_loss: f64,
}

impl IterationRecord {
    /// Sum a step quantity across conditions.
    pub fn total(&self, f: impl Fn(&StepQuantities) -> f64) -> f64 {
        self.conditions.iter().map(|c| f(&c.quantities)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.conditions.iter().enumerate() {
            let q = &c.quantities;
            let vals = [
                q.l_km1_km1_pi,
                q.l_km1_k,
                q.l_k_k,
                q.l_km1_k_pi,
                q.l_k_k_pi,
                q.l_km1_km1,
                c.epsilon,
                c.eta,
                c.achieved_kl,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(MdgpsError::NonFinite(format!(
                    "iteration record condition {i} holds a non-finite value"
                )));
            }
        }
        Ok(())
    }
}

struct Pending {
    l_pred: f64,
    l_base_pi: f64,
    l_pred_pi: f64,
    l_base_local: f64,
}

/// Mutable state of the outer loop.
pub struct AlgorithmState {
    pub env: EnvSpec,
    pub config: AlgorithmConfig,
    pub policy: GlobalPolicy,
    pub local: Vec<TimeVaryingLinGauss>,
    pub epsilon: Vec<f64>,
    eta_warm: Vec<Option<f64>>,
    dyn_buffer: Vec<Vec<DVector<f64>>>,
    pol_buffer: Vec<Vec<DVector<f64>>>,
    pending: Option<Vec<Pending>>,
    /// Per-condition training samples of the most recent iteration, kept
    /// for post-hoc serialization.
    last_samples: Vec<Vec<Rollout>>,
    pub iteration: usize,
}

impl AlgorithmState {
    pub fn last_samples(&self) -> &[Vec<Rollout>] {
        &self.last_samples
    }
}

impl AlgorithmState {
    /// Start a run. The initial local controllers mirror the initial
    /// global policy (zero mean, the policy's covariance), so iteration 1
    /// constrains against a well-defined linearization in both sampling
    /// modes.
    pub fn new(env: EnvSpec, config: AlgorithmConfig, policy: GlobalPolicy) -> Result<Self> {
        if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
            return Err(MdgpsError::Dimension {
                context: "AlgorithmState policy dims",
                expected: env.state_dim() + env.action_dim(),
                actual: policy.state_dim() + policy.action_dim(),
            });
        }
        let n = env.n_conditions();
        let horizon = env.horizon;
        let mut local = Vec::with_capacity(n);
        for _ in 0..n {
            local.push(TimeVaryingLinGauss::new(
                vec![DMatrix::zeros(env.action_dim(), env.state_dim()); horizon],
                vec![DVector::zeros(env.action_dim()); horizon],
                vec![policy.covariance().clone(); horizon],
            )?);
        }
        Ok(Self {
            epsilon: vec![config.initial_epsilon; n],
            last_samples: Vec::new(),
            eta_warm: vec![None; n],
            dyn_buffer: vec![Vec::new(); n],
            pol_buffer: vec![Vec::new(); n],
            pending: None,
            iteration: 0,
            env,
            config,
            policy,
            local,
        })
    }
}

fn rollouts_to_sampleset(condition: usize, rollouts: &[Rollout], provenance: Provenance) -> Result<SampleSet> {
    let trajectories = rollouts
        .iter()
        .map(|r| SampleTrajectory {
            states: r.states.clone(),
            actions: r.actions.clone(),
        })
        .collect();
    SampleSet::new(condition, trajectories, provenance)
}

/// Average several per-trajectory cost expansions into one, in absolute
/// coordinates (zero nominal point).
pub fn average_cost_expansions(expansions: &[QuadraticCostExpansion]) -> Result<QuadraticCostExpansion> {
    if expansions.is_empty() {
        return Err(MdgpsError::Empty("average_cost_expansions"));
    }
    let horizon = expansions[0].horizon();
    let dx = expansions[0].state_dim();
    let du = expansions[0].action_dim();
    let mut out = QuadraticCostExpansion::zeros(horizon, dx, du);
    let w = 1.0 / expansions.len() as f64;
    for exp in expansions {
        if exp.horizon() != horizon || exp.state_dim() != dx || exp.action_dim() != du {
            return Err(MdgpsError::InvalidInput(
                "cost expansions have mismatched shapes".into(),
            ));
        }
        for t in 0..horizon {
            let xh = &exp.x_nom[t];
            let uh = &exp.u_nom[t];
            let gx_abs = &exp.grad_x[t] - &exp.hess_xx[t] * xh - &exp.hess_xu[t] * uh;
            let gu_abs = &exp.grad_u[t] - exp.hess_xu[t].transpose() * xh - &exp.hess_uu[t] * uh;
            let c_abs = exp.constant[t] - exp.grad_x[t].dot(xh) - exp.grad_u[t].dot(uh)
                + 0.5 * xh.dot(&(&exp.hess_xx[t] * xh))
                + xh.dot(&(&exp.hess_xu[t] * uh))
                + 0.5 * uh.dot(&(&exp.hess_uu[t] * uh));
            out.hess_xx[t] += &exp.hess_xx[t] * w;
            out.hess_uu[t] += &exp.hess_uu[t] * w;
            out.hess_xu[t] += &exp.hess_xu[t] * w;
            out.grad_x[t] += gx_abs * w;
            out.grad_u[t] += gu_abs * w;
            out.constant[t] += c_abs * w;
        }
    }
    Ok(out)
}

fn exact_policy_linearization(policy: &GlobalPolicy, horizon: usize) -> Result<TimeVaryingLinGauss> {
    match policy.mean_fn() {
        MeanFunction::Affine { weight, bias } => {
            let gain = weight * policy.selector().matrix();
            TimeVaryingLinGauss::replicated(horizon, gain, bias.clone(), policy.covariance().clone())
        }
        MeanFunction::Mlp(_) => Err(MdgpsError::InvalidInput(
            "exact linearization requires an affine policy".into(),
        )),
    }
}

fn append_capped(buffer: &mut Vec<DVector<f64>>, fresh: &[DVector<f64>], cap: usize) -> Vec<DVector<f64>> {
    // Pool = previous iteration's points plus the fresh ones, newest kept.
    let mut pool = std::mem::take(buffer);
    pool.extend_from_slice(fresh);
    if pool.len() > cap {
        pool.drain(0..pool.len() - cap);
    }
    *buffer = fresh.to_vec();
    pool
}

/// Run one full iteration: sample, fit, adjust the step size, C-step per
/// condition, S-step, diagnostics. Deterministic given the master seed.
pub fn run_iteration(state: &mut AlgorithmState) -> Result<IterationRecord> {
    let iter = state.iteration + 1;
    let env = state.env.clone();
    let cfg = state.config.clone();
    let n_cond = env.n_conditions();
    let horizon = env.horizon;
    let seed = cfg.master_seed;

    // ---- Sampling (Algorithm line: run the last local or global policy).
    let mut samplesets = Vec::with_capacity(n_cond);
    let mut rollouts_per_cond = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        let actor = match cfg.sampling {
            SamplingMode::OffPolicy => Actor::Local(&state.local[i]),
            SamplingMode::OnPolicy => Actor::Global(&state.policy),
        };
        let rollouts = envs::sample_rollouts(
            &env,
            actor,
            i,
            cfg.samples_per_condition,
            split_seed(seed, &[stream::SAMPLING, iter as u64]),
        )?;
        let provenance = match cfg.sampling {
            SamplingMode::OffPolicy => Provenance::LocalPolicy,
            SamplingMode::OnPolicy => Provenance::GlobalPolicy,
        };
        samplesets.push(rollouts_to_sampleset(i, &rollouts, provenance)?);
        rollouts_per_cond.push(rollouts);
    }

    // ---- Dynamics fits.
    let cap = 20 * horizon;
    let mut dynamics = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        if cfg.exact_dynamics {
            dynamics.push(env.exact_linear_dynamics(horizon)?);
        } else {
            let fresh = samplesets[i].dynamics_triples();
            let pool = append_capped(&mut state.dyn_buffer[i], &fresh, cap);
            let prior = fit_gmm(
                &pool,
                &cfg.gmm,
                split_seed(seed, &[stream::GMM_DYNAMICS, iter as u64, i as u64]),
            )?;
            dynamics.push(fit_linear_gaussian(&samplesets[i], &prior, FitMode::Dynamics)?);
        }
    }

    // ---- Global-policy linearizations (the incoming policy).
    let mut pol_priors: Vec<Option<GmmPrior>> = vec![None; n_cond];
    let mut pi_bar_prev = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        if cfg.exact_dynamics {
            pi_bar_prev.push(exact_policy_linearization(&state.policy, horizon)?);
        } else {
            let fresh = policy_pairs(&samplesets[i], &state.policy, cfg.fit_policy_on_actions)?;
            let pool = append_capped(&mut state.pol_buffer[i], &fresh, cap);
            let prior = fit_gmm(
                &pool,
                &cfg.gmm,
                split_seed(seed, &[stream::GMM_POLICY, iter as u64, i as u64]),
            )?;
            let lin = fit_policy_linearization(
                &samplesets[i],
                &state.policy,
                &prior,
                cfg.fit_policy_on_actions,
            )?;
            pol_priors[i] = Some(prior);
            pi_bar_prev.push(lin);
        }
    }

    // ---- Cost expansions.
    let mut costs = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        if cfg.exact_dynamics {
            // Expand along the current local controller's mean trajectory;
            // exact for quadratic costs.
            let (init_mean, init_cov) = env.init_distribution(i);
            let marg = propagate_marginals(&state.local[i], &dynamics[i], &init_mean, &init_cov)?;
            let dx = env.state_dim();
            let du = env.action_dim();
            let states: Vec<DVector<f64>> = (0..horizon + 1)
                .map(|t| {
                    if t < horizon {
                        marg.joint_mean(t).rows(0, dx).into_owned()
                    } else {
                        marg.next_state_mean(horizon - 1).clone()
                    }
                })
                .collect();
            let actions: Vec<DVector<f64>> = (0..horizon)
                .map(|t| marg.joint_mean(t).rows(dx, du).into_owned())
                .collect();
            costs.push(envs::cost_expand(&env, &states, &actions)?);
        } else {
            let expansions: Vec<QuadraticCostExpansion> = rollouts_per_cond[i]
                .iter()
                .map(|r| envs::cost_expand(&env, &r.states, &r.actions))
                .collect::<Result<_>>()?;
            costs.push(average_cost_expansions(&expansions)?);
        }
    }

    // ---- Fresh analytic costs under the new dynamics.
    let mut l_actual = Vec::with_capacity(n_cond);
    let mut l_actual_pi = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        let (init_mean, init_cov) = env.init_distribution(i);
        let m_local = propagate_marginals(&state.local[i], &dynamics[i], &init_mean, &init_cov)?;
        let m_pi = propagate_marginals(&pi_bar_prev[i], &dynamics[i], &init_mean, &init_cov)?;
        l_actual.push(expected_cost(&m_local, &costs[i])?);
        l_actual_pi.push(expected_cost(&m_pi, &costs[i])?);
    }

    // ---- Step-size adjustment (validates the previous C-step). The
    // exact linear pipeline is the convex variant of the method, which
    // has no adjustment step: with exact dynamics the predicted cost is
    // always realized and the rules degenerate, so epsilon stays fixed.
    let mut quantities = Vec::with_capacity(n_cond);
    let mut shrink_flags = vec![false; n_cond];
    let step_adjusted = state.pending.is_some() && !cfg.exact_dynamics;
    match &state.pending {
        Some(pending) if !cfg.exact_dynamics => {
            for i in 0..n_cond {
                let q = StepQuantities {
                    l_km1_km1_pi: pending[i].l_base_pi,
                    l_km1_k: pending[i].l_pred,
                    l_k_k: l_actual[i],
                    l_km1_k_pi: pending[i].l_pred_pi,
                    l_k_k_pi: l_actual_pi[i],
                    l_km1_km1: pending[i].l_base_local,
                };
                let (new_eps, flagged) = match cfg.step_rule {
                    StepRule::Classic => adjust_step_classic(&q, state.epsilon[i], &cfg.clamps),
                    StepRule::Global => adjust_step_global(&q, state.epsilon[i], &cfg.clamps),
                };
                state.epsilon[i] = new_eps;
                shrink_flags[i] = flagged;
                quantities.push(q);
            }
        }
        Some(pending) => {
            for i in 0..n_cond {
                quantities.push(StepQuantities {
                    l_km1_km1_pi: pending[i].l_base_pi,
                    l_km1_k: pending[i].l_pred,
                    l_k_k: l_actual[i],
                    l_km1_k_pi: pending[i].l_pred_pi,
                    l_k_k_pi: l_actual_pi[i],
                    l_km1_km1: pending[i].l_base_local,
                });
            }
        }
        None => {
            for i in 0..n_cond {
                // Iteration 1: no history; duplicate the fresh values so
                // the record is complete, and skip the adjustment.
                quantities.push(StepQuantities {
                    l_km1_km1_pi: l_actual_pi[i],
                    l_km1_k: l_actual[i],
                    l_k_k: l_actual[i],
                    l_km1_k_pi: l_actual_pi[i],
                    l_k_k_pi: l_actual_pi[i],
                    l_km1_km1: l_actual[i],
                });
            }
        }
    }

    // ---- C-step per condition.
    let mut new_local = Vec::with_capacity(n_cond);
    let mut cond_records = Vec::with_capacity(n_cond);
    let mut l_pred = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        let (init_mean, init_cov) = env.init_distribution(i);
        let result = c_step(
            &dynamics[i],
            &costs[i],
            &pi_bar_prev[i],
            state.epsilon[i],
            &init_mean,
            &init_cov,
            state.eta_warm[i],
        )?;
        state.eta_warm[i] = Some(result.dual.eta);
        let marg = propagate_marginals(&result.controller, &dynamics[i], &init_mean, &init_cov)?;
        l_pred.push(expected_cost(&marg, &costs[i])?);
        cond_records.push(ConditionRecord {
            epsilon: state.epsilon[i],
            eta: result.dual.eta,
            achieved_kl: result.achieved_kl,
            quantities: quantities[i],
            step_adjusted,
            shrink_flagged: shrink_flags[i],
            cstep_warning: result.warning,
            constraint_slack: result.constraint_slack,
        });
        new_local.push(result.controller);
    }

    // ---- S-step.
    let (new_policy, s_init_loss, s_final_loss) = match cfg.s_step_solver {
        SStepSolver::ExactAffine => {
            let mut terms = Vec::new();
            for i in 0..n_cond {
                let (init_mean, init_cov) = env.init_distribution(i);
                let marg = propagate_marginals(&new_local[i], &dynamics[i], &init_mean, &init_cov)?;
                for t in 0..horizon {
                    terms.push(AffineProjectionTerm {
                        state_mean: marg.state_mean(t).clone(),
                        state_cov: marg.state_cov(t).clone(),
                        target_gain: new_local[i].gain(t).clone(),
                        target_bias: new_local[i].bias(t).clone(),
                        precision: new_local[i].cov_pd(t).inverse(),
                    });
                }
            }
            let trained = s_step_affine_exact(&state.policy, &terms)?;
            (trained, f64::NAN, f64::NAN)
        }
        SStepSolver::Sgd => {
            let mut tuples = Vec::new();
            for i in 0..n_cond {
                for rollout in &rollouts_per_cond[i] {
                    for t in 0..horizon {
                        let x = &rollout.states[t];
                        tuples.push(SStepTuple {
                            state: x.clone(),
                            target_mean: new_local[i].mean(t, x),
                            precision: new_local[i].cov_pd(t).inverse(),
                        });
                    }
                }
            }
            let dataset = SStepDataset::new(tuples)?;
            if cfg.sgd.steps == 0 {
                let loss = crate::policy::s_step_loss(&state.policy, &dataset)?;
                (state.policy.clone(), loss, loss)
            } else {
                let outcome = s_step_train(
                    &state.policy,
                    &dataset,
                    &cfg.sgd,
                    split_seed(seed, &[stream::SGD, iter as u64]),
                )?;
                (outcome.policy, outcome.initial_loss, outcome.final_loss)
            }
        }
    };

    // ---- Linearize the outgoing policy on the same samples (needed by
    // the next step-size decision).
    let mut l_pred_pi = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        let lin = if cfg.exact_dynamics {
            exact_policy_linearization(&new_policy, horizon)?
        } else {
            let prior = pol_priors[i]
                .as_ref()
                .expect("policy prior exists on the sampled path");
            fit_policy_linearization(&samplesets[i], &new_policy, prior, false)?
        };
        let (init_mean, init_cov) = env.init_distribution(i);
        let marg = propagate_marginals(&lin, &dynamics[i], &init_mean, &init_cov)?;
        l_pred_pi.push(expected_cost(&marg, &costs[i])?);
    }

    // ---- Evaluation rollouts and bound diagnostics.
    let mut local_costs = Vec::new();
    let mut global_rollouts_all = Vec::new();
    let mut bounds = Vec::with_capacity(n_cond);
    for i in 0..n_cond {
        let local_eval = envs::sample_rollouts(
            &env,
            Actor::Local(&new_local[i]),
            i,
            cfg.eval_samples,
            split_seed(seed, &[stream::EVAL_LOCAL, iter as u64]),
        )?;
        local_costs.extend(local_eval.iter().map(|r| r.total_cost));
        let global_eval = envs::sample_rollouts(
            &env,
            Actor::Global(&new_policy),
            i,
            cfg.eval_samples,
            split_seed(seed, &[stream::EVAL_GLOBAL, iter as u64]),
        )?;
        let global_mc =
            global_eval.iter().map(|r| r.total_cost).sum::<f64>() / global_eval.len() as f64;
        bounds.push(compute_bound(&new_local[i], &new_policy, &rollouts_per_cond[i], global_mc)?);
        global_rollouts_all.extend(global_eval);
    }
    let local_mean_return = local_costs.iter().sum::<f64>() / local_costs.len() as f64;
    let global_mean_return = global_rollouts_all.iter().map(|r| r.total_cost).sum::<f64>()
        / global_rollouts_all.len() as f64;
    let success = envs::success_rate(&env, &global_rollouts_all)?;
    let mean_final_distance = global_rollouts_all
        .iter()
        .map(|r| envs::final_distance(&env, r))
        .sum::<f64>()
        / global_rollouts_all.len() as f64;

    // ---- Commit.
    state.pending = Some(
        (0..n_cond)
            .map(|i| Pending {
                l_pred: l_pred[i],
                l_base_pi: l_actual_pi[i],
                l_pred_pi: l_pred_pi[i],
                l_base_local: l_actual[i],
            })
            .collect(),
    );
    state.local = new_local;
    state.policy = new_policy;
    state.last_samples = rollouts_per_cond;
    state.iteration = iter;

    let record = IterationRecord {
        iteration: iter,
        conditions: cond_records,
        bounds,
        local_mean_return,
        global_mean_return,
        success_rate: success,
        mean_final_distance,
        s_step_initial_loss: s_init_loss,
        s_step_final_loss: s_final_loss,
    };
    record.validate()?;
    Ok(record)
}

fn policy_pairs(
    samples: &SampleSet,
    policy: &GlobalPolicy,
    on_actions: bool,
) -> Result<Vec<DVector<f64>>> {
    let dx = samples.state_dim();
    let du = samples.action_dim();
    let mut out = Vec::with_capacity(samples.n_trajectories() * samples.horizon());
    for traj in &samples.trajectories {
        for t in 0..samples.horizon() {
            let target = if on_actions {
                traj.actions[t].clone()
            } else {
                policy.mean(&traj.states[t])?
            };
            let mut v = DVector::zeros(dx + du);
            v.rows_mut(0, dx).copy_from(&traj.states[t]);
            v.rows_mut(dx, du).copy_from(&target);
            out.push(v);
        }
    }
    Ok(out)
}

/// Analytic expected cost of the global policy's exact linearization under
/// exact dynamics, summed over conditions. Only defined for the exact
/// pipeline (affine policy, linear dynamics); used to verify the
/// mirror-descent behavior of the loop.
pub fn exact_global_cost(state: &AlgorithmState) -> Result<f64> {
    let env = &state.env;
    let horizon = env.horizon;
    let dyn_model = env.exact_linear_dynamics(horizon)?;
    let lin = exact_policy_linearization(&state.policy, horizon)?;
    let mut total = 0.0;
    for i in 0..env.n_conditions() {
        let (init_mean, init_cov) = env.init_distribution(i);
        let marg = propagate_marginals(&lin, &dyn_model, &init_mean, &init_cov)?;
        // The true quadratic cost expanded anywhere is exact; expand at the
        // zero trajectory.
        let states = vec![DVector::zeros(env.state_dim()); horizon + 1];
        let actions = vec![DVector::zeros(env.action_dim()); horizon];
        let cost = envs::cost_expand(env, &states, &actions)?;
        total += expected_cost(&marg, &cost)?;
    }
    Ok(total)
}

//! Sample-based estimation of time-varying linear-Gaussian conditionals.
//!
//! Dynamics `p(x'|x,u)` and global-policy linearizations are fitted per
//! step by linear regression with a Gaussian-mixture-model prior: the GMM
//! is fit on joint vectors pooled across steps and iterations, its
//! conditional moments at the step's empirical mean act as a
//! normal-inverse-Wishart prior with a configurable pseudo-count, and the
//! affine conditional of output given input is read off the posterior
//! joint Gaussian. With prior strength zero the fit reduces exactly to
//! ordinary least squares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{MdgpsError, Result};
use crate::trajdist::{eigen_floor, min_eigenvalue, symmetrize, TimeVaryingLinGauss};

/// Eigenvalue floor applied to fitted output covariances.
pub const COV_FLOOR: f64 = 1e-6;

/// Where a batch of trajectories came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    LocalPolicy,
    GlobalPolicy,
}

/// One sampled trajectory: states x_1..x_{T+1} and actions u_1..u_T.
#[derive(Debug, Clone)]
pub struct SampleTrajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
}

/// The per-condition sample batch used for fitting.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub condition: usize,
    pub trajectories: Vec<SampleTrajectory>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(
        condition: usize,
        trajectories: Vec<SampleTrajectory>,
        provenance: Provenance,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(MdgpsError::Empty("SampleSet trajectories"));
        }
        let horizon = trajectories[0].actions.len();
        let dx = trajectories[0].states[0].len();
        let du = trajectories[0].actions[0].len();
        for (j, traj) in trajectories.iter().enumerate() {
            if traj.actions.len() != horizon || traj.states.len() != horizon + 1 {
                return Err(MdgpsError::InvalidInput(format!(
                    "trajectory {j} has {} actions / {} states, expected {horizon} / {}",
                    traj.actions.len(),
                    traj.states.len(),
                    horizon + 1
                )));
            }
            if traj.states.iter().any(|s| s.len() != dx)
                || traj.actions.iter().any(|a| a.len() != du)
            {
                return Err(MdgpsError::InvalidInput(format!(
                    "trajectory {j} has inconsistent state/action dimensions"
                )));
            }
        }
        let set = Self {
            condition,
            trajectories,
            provenance,
        };
        if set.dof_warning() {
            log::warn!(
                "condition {condition}: {} trajectories per step is below dx+du+1 = {}; regression leans on the prior",
                set.n_trajectories(),
                set.state_dim() + set.action_dim() + 1
            );
        }
        Ok(set)
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].actions.len()
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0].states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].actions[0].len()
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// True when there are fewer samples per step than regression
    /// degrees of freedom.
    pub fn dof_warning(&self) -> bool {
        self.n_trajectories() < self.state_dim() + self.action_dim() + 1
    }

    /// Joint (x_t, u_t, x_{t+1}) vectors pooled across steps and
    /// trajectories; the raw material of the dynamics prior.
    pub fn dynamics_triples(&self) -> Vec<DVector<f64>> {
        let (dx, du) = (self.state_dim(), self.action_dim());
        let mut out = Vec::with_capacity(self.horizon() * self.n_trajectories());
        for traj in &self.trajectories {
            for t in 0..self.horizon() {
                let mut v = DVector::zeros(dx + du + dx);
                v.rows_mut(0, dx).copy_from(&traj.states[t]);
                v.rows_mut(dx, du).copy_from(&traj.actions[t]);
                v.rows_mut(dx + du, dx).copy_from(&traj.states[t + 1]);
                out.push(v);
            }
        }
        out
    }
}

/// Settings for the mixture-model prior.
#[derive(Debug, Clone, Copy)]
pub struct GmmSettings {
    pub n_components: usize,
    pub max_em_iters: usize,
    pub restarts: usize,
    /// Pseudo-count of the normal-inverse-Wishart prior built from the GMM.
    pub strength: f64,
}

impl Default for GmmSettings {
    fn default() -> Self {
        Self {
            n_components: 4,
            max_em_iters: 30,
            restarts: 2,
            strength: 1.0,
        }
    }
}

/// A Gaussian mixture over joint vectors, used as a regression prior.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    strength: f64,
    degenerate: bool,
    /// Total log-likelihood after each EM iteration of the kept restart.
    ll_trace: Vec<f64>,
}

impl GmmPrior {
    /// Single-component prior built directly from moments.
    pub fn single_gaussian(mean: DVector<f64>, cov: DMatrix<f64>, strength: f64) -> Result<Self> {
        if min_eigenvalue(&cov) <= 0.0 {
            return Err(MdgpsError::NotPositiveDefinite {
                context: "GmmPrior::single_gaussian".into(),
            });
        }
        Ok(Self {
            weights: vec![1.0],
            means: vec![mean],
            covs: vec![symmetrize(&cov)],
            strength,
            degenerate: false,
            ll_trace: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &DVector<f64> {
        &self.means[c]
    }

    pub fn cov(&self, c: usize) -> &DMatrix<f64> {
        &self.covs[c]
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn set_strength(&mut self, strength: f64) {
        self.strength = strength;
    }

    /// True when the fit needed fallback covariance regularization for
    /// rank-deficient data.
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn ll_trace(&self) -> &[f64] {
        &self.ll_trace
    }

    fn log_gauss(mean: &DVector<f64>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, x: &DVector<f64>) -> f64 {
        let d = mean.len() as f64;
        let diff = x - mean;
        let solved = chol.solve(&DMatrix::from_column_slice(diff.len(), 1, diff.as_slice()));
        let maha = diff.dot(&DVector::from_column_slice(solved.as_slice()));
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + chol.ln_determinant() + maha)
    }

    /// Posterior component probabilities at a query point.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        let chols: Vec<_> = self
            .covs
            .iter()
            .map(|c| nalgebra::Cholesky::new(c.clone()).expect("prior covariances stay PD"))
            .collect();
        let logs: Vec<f64> = (0..self.n_components())
            .map(|c| self.weights[c].ln() + Self::log_gauss(&self.means[c], &chols[c], x))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        unnorm.iter().map(|u| u / z).collect()
    }

    /// Mixture moments conditioned on the component posterior at `x`:
    /// the weighted mean of the component means and the within-plus-between
    /// covariance.
    pub fn moments_at(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let resp = self.responsibilities(x);
        let dim = self.dim();
        let mut mu = DVector::zeros(dim);
        for c in 0..self.n_components() {
            mu += &self.means[c] * resp[c];
        }
        let mut phi = DMatrix::zeros(dim, dim);
        for c in 0..self.n_components() {
            let d = &self.means[c] - &mu;
            phi += (&self.covs[c] + &d * d.transpose()) * resp[c];
        }
        (mu, symmetrize(&phi))
    }

    /// Total log-likelihood of a dataset under the mixture.
    pub fn log_likelihood(&self, data: &[DVector<f64>]) -> f64 {
        let chols: Vec<_> = self
            .covs
            .iter()
            .map(|c| nalgebra::Cholesky::new(c.clone()).expect("prior covariances stay PD"))
            .collect();
        data.iter()
            .map(|x| {
                let logs: Vec<f64> = (0..self.n_components())
                    .map(|c| self.weights[c].ln() + Self::log_gauss(&self.means[c], &chols[c], x))
                    .collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
            })
            .sum()
    }
}

/// Fit a full-covariance Gaussian mixture by expectation-maximization.
///
/// Deterministic given the seed: each restart initializes the means from
/// distinct data points drawn with a derived seed, runs EM to a total
/// log-likelihood increase below 1e-6 (or the iteration cap), and the
/// restart with the best final log-likelihood is kept. Rank-deficient
/// data is handled by covariance regularization and flagged.
pub fn fit_gmm(data: &[DVector<f64>], settings: &GmmSettings, seed: u64) -> Result<GmmPrior> {
    if data.is_empty() {
        return Err(MdgpsError::Empty("fit_gmm data"));
    }
    let dim = data[0].len();
    if data.iter().any(|d| d.len() != dim) {
        return Err(MdgpsError::InvalidInput("fit_gmm: mixed dimensions".into()));
    }
    let k = settings.n_components.max(1);
    let distinct = {
        let mut seen: Vec<&DVector<f64>> = Vec::new();
        for d in data {
            if !seen.iter().any(|s| (*s - d).amax() == 0.0) {
                seen.push(d);
            }
            if seen.len() >= k {
                break;
            }
        }
        seen.len()
    };
    if distinct < k {
        return Err(MdgpsError::InvalidInput(format!(
            "fit_gmm needs at least {k} distinct vectors, found {distinct}"
        )));
    }

    // Scale-aware regularization from the pooled variance.
    let n = data.len();
    let pooled_mean = data.iter().fold(DVector::zeros(dim), |acc, d| acc + d) / n as f64;
    let pooled_var = data
        .iter()
        .map(|d| (d - &pooled_mean).norm_squared())
        .sum::<f64>()
        / (n as f64 * dim as f64);
    let reg = 1e-6 * pooled_var.max(1e-6);

    let mut best: Option<GmmPrior> = None;
    for restart in 0..settings.restarts.max(1) {
        let mut rng = crate::rng::rng_from(seed, &[restart as u64]);
        let fit = em_single(data, k, settings.max_em_iters, reg, &mut rng)?;
        let better = match &best {
            None => true,
            Some(b) => fit.ll_trace.last() > b.ll_trace.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    let mut prior = best.expect("at least one restart ran");
    prior.strength = settings.strength;
    Ok(prior)
}

fn em_single(
    data: &[DVector<f64>],
    k: usize,
    max_iters: usize,
    reg: f64,
    rng: &mut impl Rng,
) -> Result<GmmPrior> {
    let dim = data[0].len();
    let n = data.len();

    // Initial means: k distinct data points.
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut guard = 0;
    while means.len() < k {
        let idx = rng.random_range(0..n);
        let cand = &data[idx];
        if !means.iter().any(|m| (m - cand).amax() == 0.0) {
            means.push(cand.clone());
        }
        guard += 1;
        if guard > 100 * k + 1000 {
            return Err(MdgpsError::Internal("fit_gmm initialization stalled".into()));
        }
    }
    let pooled_mean = data.iter().fold(DVector::zeros(dim), |acc, d| acc + d) / n as f64;
    let mut pooled_cov = DMatrix::zeros(dim, dim);
    for d in data {
        let c = d - &pooled_mean;
        pooled_cov += &c * c.transpose();
    }
    pooled_cov /= n as f64;
    let mut degenerate = nalgebra::Cholesky::new(symmetrize(&pooled_cov)).is_none();
    pooled_cov += DMatrix::identity(dim, dim) * reg;
    if nalgebra::Cholesky::new(symmetrize(&pooled_cov)).is_none() {
        pooled_cov = eigen_floor(&pooled_cov, reg);
        degenerate = true;
    }

    let mut covs = vec![symmetrize(&pooled_cov); k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut ll_trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = DMatrix::zeros(n, k);
    for _ in 0..max_iters.max(1) {
        // E-step in log space.
        let chols: Vec<_> = covs
            .iter()
            .map(|c| {
                nalgebra::Cholesky::new(c.clone()).ok_or_else(|| MdgpsError::Internal(
                    "GMM component covariance lost positive definiteness".into(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ll = 0.0;
        for (j, x) in data.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| weights[c].ln() + GmmPrior::log_gauss(&means[c], &chols[c], x))
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            ll += m + z.ln();
            for c in 0..k {
                resp[(j, c)] = (logs[c] - m).exp() / z;
            }
        }
        ll_trace.push(ll);
        if ll - prev_ll < 1e-6 && prev_ll.is_finite() {
            break;
        }
        prev_ll = ll;

        // M-step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|j| resp[(j, c)]).sum::<f64>().max(1e-12);
            weights[c] = nk / n as f64;
            let mut mu = DVector::zeros(dim);
            for (j, x) in data.iter().enumerate() {
                mu += x * resp[(j, c)];
            }
            mu /= nk;
            let mut cov = DMatrix::zeros(dim, dim);
            for (j, x) in data.iter().enumerate() {
                let d = x - &mu;
                cov += &d * d.transpose() * resp[(j, c)];
            }
            cov = symmetrize(&cov) / nk + DMatrix::identity(dim, dim) * reg;
            if nalgebra::Cholesky::new(cov.clone()).is_none() {
                cov = eigen_floor(&cov, reg);
                degenerate = true;
            }
            means[c] = mu;
            covs[c] = cov;
        }
        // Renormalize the weights exactly.
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }

    Ok(GmmPrior {
        weights,
        means,
        covs,
        strength: 0.0,
        degenerate,
        ll_trace,
    })
}

/// What the per-step regression is estimating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// Inputs (x_t, u_t), outputs x_{t+1}.
    Dynamics,
    /// Inputs x_t, outputs the sampled actions u_t.
    Policy,
}

/// Conditional-Gaussian policy surface needed by the linearization fit.
/// The mean takes the full state; observation selection happens inside.
pub trait ConditionalGaussianPolicy {
    fn mean(&self, state: &DVector<f64>) -> Result<DVector<f64>>;
    fn covariance(&self) -> &DMatrix<f64>;
}

/// Per-step normal-inverse-Wishart regression with the GMM prior.
///
/// The posterior joint Gaussian at step t combines the step's empirical
/// moments (N samples) with the prior moments evaluated at the empirical
/// mean (pseudo-count = prior strength); the returned conditional is
/// output given input, with the residual covariance symmetrized and
/// eigenvalue-floored at 1e-6.
pub fn fit_linear_gaussian(
    samples: &SampleSet,
    prior: &GmmPrior,
    mode: FitMode,
) -> Result<TimeVaryingLinGauss> {
    let (dx, du) = (samples.state_dim(), samples.action_dim());
    let (in_dim, out_dim, prior_dim) = match mode {
        FitMode::Dynamics => (dx + du, dx, dx + du + dx),
        FitMode::Policy => (dx, du, dx + du),
    };
    if prior.strength() > 0.0 && prior.dim() != prior_dim {
        return Err(MdgpsError::Dimension {
            context: "fit_linear_gaussian prior",
            expected: prior_dim,
            actual: prior.dim(),
        });
    }
    let horizon = samples.horizon();
    let pts_at = |t: usize| -> Vec<DVector<f64>> {
        samples
            .trajectories
            .iter()
            .map(|traj| {
                let mut v = DVector::zeros(in_dim + out_dim);
                match mode {
                    FitMode::Dynamics => {
                        v.rows_mut(0, dx).copy_from(&traj.states[t]);
                        v.rows_mut(dx, du).copy_from(&traj.actions[t]);
                        v.rows_mut(dx + du, dx).copy_from(&traj.states[t + 1]);
                    }
                    FitMode::Policy => {
                        v.rows_mut(0, dx).copy_from(&traj.states[t]);
                        v.rows_mut(dx, du).copy_from(&traj.actions[t]);
                    }
                }
                v
            })
            .collect()
    };
    let mut gains = Vec::with_capacity(horizon);
    let mut biases = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (gain, bias, cov) = conditional_fit(&pts_at(t), in_dim, out_dim, prior)?;
        gains.push(gain);
        biases.push(bias);
        covs.push(cov);
    }
    TimeVaryingLinGauss::new(gains, biases, covs)
}

/// Linearize a global policy around the sampled states by regressing its
/// mean evaluations on the states per step. The fitted covariance is
/// replaced by the policy's own covariance (the regression residual
/// measures mean-fit error, not the policy's stochasticity).
///
/// With `regress_on_actions` the sampled actions are used as targets
/// instead of the policy mean evaluations.
pub fn fit_policy_linearization<P: ConditionalGaussianPolicy + ?Sized>(
    samples: &SampleSet,
    policy: &P,
    prior: &GmmPrior,
    regress_on_actions: bool,
) -> Result<TimeVaryingLinGauss> {
    let (dx, du) = (samples.state_dim(), samples.action_dim());
    if prior.strength() > 0.0 && prior.dim() != dx + du {
        return Err(MdgpsError::Dimension {
            context: "fit_policy_linearization prior",
            expected: dx + du,
            actual: prior.dim(),
        });
    }
    let horizon = samples.horizon();
    let mut gains = Vec::with_capacity(horizon);
    let mut biases = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    let sigma = symmetrize(policy.covariance());
    for t in 0..horizon {
        let mut pts = Vec::with_capacity(samples.n_trajectories());
        for traj in &samples.trajectories {
            let target = if regress_on_actions {
                traj.actions[t].clone()
            } else {
                policy.mean(&traj.states[t])?
            };
            if target.len() != du {
                return Err(MdgpsError::Dimension {
                    context: "fit_policy_linearization target",
                    expected: du,
                    actual: target.len(),
                });
            }
            let mut v = DVector::zeros(dx + du);
            v.rows_mut(0, dx).copy_from(&traj.states[t]);
            v.rows_mut(dx, du).copy_from(&target);
            pts.push(v);
        }
        let (gain, bias, _) = conditional_fit(&pts, dx, du, prior)?;
        gains.push(gain);
        biases.push(bias);
        covs.push(sigma.clone());
    }
    TimeVaryingLinGauss::new(gains, biases, covs)
}

fn conditional_fit(
    pts: &[DVector<f64>],
    in_dim: usize,
    out_dim: usize,
    prior: &GmmPrior,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let n = pts.len();
    if n == 0 {
        return Err(MdgpsError::Empty("conditional_fit points"));
    }
    let dim = in_dim + out_dim;
    let nf = n as f64;
    let mhat = pts.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / nf;
    let mut scatter = DMatrix::zeros(dim, dim);
    for p in pts {
        let d = p - &mhat;
        scatter += &d * d.transpose();
    }

    let s = prior.strength();
    let (mu, sigma) = if s > 0.0 {
        let (mu0, phi0) = prior.moments_at(&mhat);
        let mu = (&mu0 * s + &mhat * nf) / (s + nf);
        let dm = &mhat - &mu0;
        let sigma = (phi0 * s + scatter + &dm * dm.transpose() * (s * nf / (s + nf))) / (s + nf);
        (mu, symmetrize(&sigma))
    } else {
        (mhat, symmetrize(&scatter) / nf)
    };

    // Condition out | in on the posterior joint.
    let sig_ii = sigma.view((0, 0), (in_dim, in_dim)).into_owned();
    let sig_io = sigma.view((0, in_dim), (in_dim, out_dim)).into_owned();
    let sig_oo = sigma.view((in_dim, in_dim), (out_dim, out_dim)).into_owned();

    let scale = (sig_ii.trace() / in_dim as f64).max(1e-12);
    let mut jitter = 1e-8 * scale;
    let mut regularized = sig_ii.clone();
    let chol = loop {
        match nalgebra::Cholesky::new(symmetrize(&regularized)) {
            Some(c) => break c,
            None => {
                regularized += DMatrix::identity(in_dim, in_dim) * jitter;
                jitter *= 2.0;
                if jitter > 1e6 * scale {
                    return Err(MdgpsError::Internal(
                        "conditional_fit: input covariance could not be regularized".into(),
                    ));
                }
            }
        }
    };

    let gain = chol.solve(&sig_io).transpose();
    let mu_i = mu.rows(0, in_dim).into_owned();
    let mu_o = mu.rows(in_dim, out_dim).into_owned();
    let bias = &mu_o - &gain * &mu_i;
    let resid = symmetrize(&(sig_oo - &gain * &sig_io));
    debug_assert!(
        min_eigenvalue(&resid) >= -1e-8 * scale.max(1.0),
        "residual covariance strongly indefinite"
    );
    let cov = eigen_floor(&resid, COV_FLOOR);
    Ok((gain, bias, cov))
}

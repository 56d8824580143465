//! Gaussian trajectory-distribution algebra.
//!
//! A single type, [`TimeVaryingLinGauss`], represents every affine-Gaussian
//! conditional in the method: local controllers p(u|x), linearized global
//! policies, and fitted dynamics p(x'|x,u). On top of it this module
//! provides exact KL divergences, forward marginal propagation, expected
//! quadratic cost, and entropy. Everything here is a closed form; Monte
//! Carlo only appears in the tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{MdgpsError, Result};

/// Tolerance for the symmetry check on covariances supplied by callers.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Symmetrize in place: `0.5 * (M + M^T)`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Largest absolute asymmetry `max_ij |M_ij - M_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mt = m.transpose();
    (m - mt).abs().max()
}

/// Floor the eigenvalues of a symmetric matrix at `floor` and reconstruct.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let recon = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&recon)
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// A covariance stored together with its Cholesky factor.
///
/// The factorization succeeding *is* the positive-definiteness check; it
/// also gives cheap log-determinants, solves and inverses.
#[derive(Debug, Clone)]
pub struct PosDef {
    matrix: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl PosDef {
    pub fn new(matrix: DMatrix<f64>, context: &str) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(MdgpsError::Dimension {
                context: "PosDef::new (square)",
                expected: matrix.nrows(),
                actual: matrix.ncols(),
            });
        }
        if asymmetry(&matrix) > SYMMETRY_TOL {
            return Err(MdgpsError::NotPositiveDefinite {
                context: format!("{context}: asymmetry {:.3e} exceeds {SYMMETRY_TOL:.0e}", asymmetry(&matrix)),
            });
        }
        let sym = symmetrize(&matrix);
        let chol = nalgebra::Cholesky::new(sym.clone()).ok_or_else(|| {
            MdgpsError::NotPositiveDefinite {
                context: format!("{context}: Cholesky factorization failed"),
            }
        })?;
        Ok(Self { matrix: sym, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.chol.ln_determinant()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// Lower Cholesky factor L with `L L^T = M`.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// A length-T sequence of affine-Gaussian conditionals
/// `N(gain_t * input + bias_t, cov_t)`.
///
/// For controllers the input is the state and the output the action
/// (gain = K_t, bias = k_t, cov = C_t). For dynamics the input is the
/// stacked (x_t, u_t) and the output x_{t+1} (gain = [f_x f_u],
/// bias = f_c, cov = F_t).
#[derive(Debug, Clone)]
pub struct TimeVaryingLinGauss {
    gains: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    covs: Vec<PosDef>,
}

impl TimeVaryingLinGauss {
    pub fn new(
        gains: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if gains.is_empty() {
            return Err(MdgpsError::Empty("TimeVaryingLinGauss horizon"));
        }
        if gains.len() != biases.len() || gains.len() != covs.len() {
            return Err(MdgpsError::InvalidInput(format!(
                "per-step sequences disagree: {} gains, {} biases, {} covariances",
                gains.len(),
                biases.len(),
                covs.len()
            )));
        }
        let out_dim = gains[0].nrows();
        let in_dim = gains[0].ncols();
        let mut pd = Vec::with_capacity(covs.len());
        for (t, ((g, b), c)) in gains.iter().zip(&biases).zip(covs.iter()).enumerate() {
            if g.nrows() != out_dim || g.ncols() != in_dim {
                return Err(MdgpsError::InvalidInput(format!(
                    "gain at step {t} is {}x{}, expected {}x{}",
                    g.nrows(),
                    g.ncols(),
                    out_dim,
                    in_dim
                )));
            }
            if b.len() != out_dim {
                return Err(MdgpsError::Dimension {
                    context: "TimeVaryingLinGauss bias",
                    expected: out_dim,
                    actual: b.len(),
                });
            }
            if c.nrows() != out_dim || c.ncols() != out_dim {
                return Err(MdgpsError::Dimension {
                    context: "TimeVaryingLinGauss covariance",
                    expected: out_dim,
                    actual: c.nrows(),
                });
            }
            pd.push(PosDef::new(c.clone(), &format!("covariance at step {t}"))?);
        }
        Ok(Self {
            gains,
            biases,
            covs: pd,
        })
    }

    /// Controller with zero gain and bias and isotropic covariance.
    pub fn zero_controller(horizon: usize, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        if std <= 0.0 {
            return Err(MdgpsError::InvalidInput(format!("controller std must be > 0, got {std}")));
        }
        let gain = DMatrix::zeros(out_dim, in_dim);
        let bias = DVector::zeros(out_dim);
        let cov = DMatrix::identity(out_dim, out_dim) * std * std;
        Self::new(
            vec![gain; horizon],
            vec![bias; horizon],
            vec![cov; horizon],
        )
    }

    /// Same affine conditional replicated at every step.
    pub fn replicated(horizon: usize, gain: DMatrix<f64>, bias: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![gain; horizon], vec![bias; horizon], vec![cov; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn in_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    pub fn gain(&self, t: usize) -> &DMatrix<f64> {
        &self.gains[t]
    }

    pub fn bias(&self, t: usize) -> &DVector<f64> {
        &self.biases[t]
    }

    pub fn cov(&self, t: usize) -> &DMatrix<f64> {
        self.covs[t].matrix()
    }

    pub fn cov_pd(&self, t: usize) -> &PosDef {
        &self.covs[t]
    }

    pub fn mean(&self, t: usize, input: &DVector<f64>) -> DVector<f64> {
        &self.gains[t] * input + &self.biases[t]
    }

    /// Log density of `output` under the step-t conditional at `input`.
    pub fn log_density(&self, t: usize, input: &DVector<f64>, output: &DVector<f64>) -> f64 {
        let d = self.out_dim() as f64;
        let resid = output - self.mean(t, input);
        let solved = self.covs[t].solve(&DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()));
        let maha = resid.dot(&DVector::from_column_slice(solved.as_slice()));
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.covs[t].log_det() + maha)
    }
}

/// Per-step joint and next-state Gaussian moments under a controller and
/// dynamics. The state moments of step t+1 are the very objects produced
/// as step t's next-state moments.
#[derive(Debug, Clone)]
pub struct GaussianMarginals {
    init_mean: DVector<f64>,
    init_cov: DMatrix<f64>,
    joint_means: Vec<DVector<f64>>,
    joint_covs: Vec<DMatrix<f64>>,
    next_means: Vec<DVector<f64>>,
    next_covs: Vec<DMatrix<f64>>,
    state_dim: usize,
    action_dim: usize,
}

impl GaussianMarginals {
    pub fn horizon(&self) -> usize {
        self.joint_means.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn init_mean(&self) -> &DVector<f64> {
        &self.init_mean
    }

    pub fn init_cov(&self) -> &DMatrix<f64> {
        &self.init_cov
    }

    /// State marginal mean at step t (t = 0 is the initial distribution).
    pub fn state_mean(&self, t: usize) -> &DVector<f64> {
        if t == 0 {
            &self.init_mean
        } else {
            &self.next_means[t - 1]
        }
    }

    pub fn state_cov(&self, t: usize) -> &DMatrix<f64> {
        if t == 0 {
            &self.init_cov
        } else {
            &self.next_covs[t - 1]
        }
    }

    pub fn joint_mean(&self, t: usize) -> &DVector<f64> {
        &self.joint_means[t]
    }

    pub fn joint_cov(&self, t: usize) -> &DMatrix<f64> {
        &self.joint_covs[t]
    }

    /// Moments of x_{t+1} propagated from step t.
    pub fn next_state_mean(&self, t: usize) -> &DVector<f64> {
        &self.next_means[t]
    }

    pub fn next_state_cov(&self, t: usize) -> &DMatrix<f64> {
        &self.next_covs[t]
    }
}

/// Per-step second-order expansion of the cost around a nominal trajectory:
/// `l(x,u) ~= const + g^T d + 0.5 d^T H d` with `d = [x - x_nom; u - u_nom]`.
#[derive(Debug, Clone)]
pub struct QuadraticCostExpansion {
    pub hess_xx: Vec<DMatrix<f64>>,
    pub hess_uu: Vec<DMatrix<f64>>,
    /// Cross block d^2 l / dx du, shape dx x du.
    pub hess_xu: Vec<DMatrix<f64>>,
    pub grad_x: Vec<DVector<f64>>,
    pub grad_u: Vec<DVector<f64>>,
    pub constant: Vec<f64>,
    pub x_nom: Vec<DVector<f64>>,
    pub u_nom: Vec<DVector<f64>>,
}

impl QuadraticCostExpansion {
    pub fn horizon(&self) -> usize {
        self.constant.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x_nom[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.u_nom[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        if t == 0 {
            return Err(MdgpsError::Empty("QuadraticCostExpansion horizon"));
        }
        let lens = [
            self.hess_xx.len(),
            self.hess_uu.len(),
            self.hess_xu.len(),
            self.grad_x.len(),
            self.grad_u.len(),
            self.x_nom.len(),
            self.u_nom.len(),
        ];
        if lens.iter().any(|&l| l != t) {
            return Err(MdgpsError::InvalidInput(
                "cost expansion per-step sequences have unequal lengths".into(),
            ));
        }
        for i in 0..t {
            if asymmetry(&self.hess_xx[i]) > SYMMETRY_TOL || asymmetry(&self.hess_uu[i]) > SYMMETRY_TOL {
                return Err(MdgpsError::InvalidInput(format!(
                    "cost Hessian blocks at step {i} are not symmetric"
                )));
            }
        }
        Ok(())
    }

    /// Full (dx+du) Hessian `[[l_xx, l_xu], [l_xu^T, l_uu]]` at step t.
    pub fn full_hessian(&self, t: usize) -> DMatrix<f64> {
        let dx = self.state_dim();
        let du = self.action_dim();
        let mut h = DMatrix::zeros(dx + du, dx + du);
        h.view_mut((0, 0), (dx, dx)).copy_from(&self.hess_xx[t]);
        h.view_mut((0, dx), (dx, du)).copy_from(&self.hess_xu[t]);
        h.view_mut((dx, 0), (du, dx)).copy_from(&self.hess_xu[t].transpose());
        h.view_mut((dx, dx), (du, du)).copy_from(&self.hess_uu[t]);
        h
    }

    pub fn full_gradient(&self, t: usize) -> DVector<f64> {
        let dx = self.state_dim();
        let du = self.action_dim();
        let mut g = DVector::zeros(dx + du);
        g.rows_mut(0, dx).copy_from(&self.grad_x[t]);
        g.rows_mut(dx, du).copy_from(&self.grad_u[t]);
        g
    }

    pub fn nominal(&self, t: usize) -> DVector<f64> {
        let dx = self.state_dim();
        let du = self.action_dim();
        let mut z = DVector::zeros(dx + du);
        z.rows_mut(0, dx).copy_from(&self.x_nom[t]);
        z.rows_mut(dx, du).copy_from(&self.u_nom[t]);
        z
    }

    /// Minimum eigenvalue of the full Hessian (may be negative before
    /// regularization).
    pub fn min_hessian_eigenvalue(&self, t: usize) -> f64 {
        min_eigenvalue(&self.full_hessian(t))
    }

    /// Evaluate the quadratic model at (x, u).
    pub fn eval(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut d = DVector::zeros(self.state_dim() + self.action_dim());
        d.rows_mut(0, self.state_dim()).copy_from(&(x - &self.x_nom[t]));
        d.rows_mut(self.state_dim(), self.action_dim())
            .copy_from(&(u - &self.u_nom[t]));
        let h = self.full_hessian(t);
        let g = self.full_gradient(t);
        self.constant[t] + g.dot(&d) + 0.5 * d.dot(&(&h * &d))
    }

    /// Zero expansion around a zero nominal trajectory.
    pub fn zeros(horizon: usize, dx: usize, du: usize) -> Self {
        Self {
            hess_xx: vec![DMatrix::zeros(dx, dx); horizon],
            hess_uu: vec![DMatrix::zeros(du, du); horizon],
            hess_xu: vec![DMatrix::zeros(dx, du); horizon],
            grad_x: vec![DVector::zeros(dx); horizon],
            grad_u: vec![DVector::zeros(du); horizon],
            constant: vec![0.0; horizon],
            x_nom: vec![DVector::zeros(dx); horizon],
            u_nom: vec![DVector::zeros(du); horizon],
        }
    }

    /// Scale every term by `a` (the expansion of `a * l`).
    pub fn scaled(&self, a: f64) -> Self {
        Self {
            hess_xx: self.hess_xx.iter().map(|m| m * a).collect(),
            hess_uu: self.hess_uu.iter().map(|m| m * a).collect(),
            hess_xu: self.hess_xu.iter().map(|m| m * a).collect(),
            grad_x: self.grad_x.iter().map(|v| v * a).collect(),
            grad_u: self.grad_u.iter().map(|v| v * a).collect(),
            constant: self.constant.iter().map(|c| c * a).collect(),
            x_nom: self.x_nom.clone(),
            u_nom: self.u_nom.clone(),
        }
    }
}

fn check_controller_pair(p: &TimeVaryingLinGauss, q: &TimeVaryingLinGauss) -> Result<()> {
    if p.out_dim() != q.out_dim() {
        return Err(MdgpsError::Dimension {
            context: "kl_step action dimension",
            expected: p.out_dim(),
            actual: q.out_dim(),
        });
    }
    if p.in_dim() != q.in_dim() {
        return Err(MdgpsError::Dimension {
            context: "kl_step state dimension",
            expected: p.in_dim(),
            actual: q.in_dim(),
        });
    }
    Ok(())
}

/// Expected state-conditional KL divergence at step t,
/// `E_{x ~ N(state_mean, state_cov)}[ D_KL(p(.|x) || q(.|x)) ]`,
/// in closed form for affine-Gaussian conditionals.
pub fn kl_step(
    p: &TimeVaryingLinGauss,
    q: &TimeVaryingLinGauss,
    t: usize,
    state_mean: &DVector<f64>,
    state_cov: &DMatrix<f64>,
) -> Result<f64> {
    check_controller_pair(p, q)?;
    if t >= p.horizon() || t >= q.horizon() {
        return Err(MdgpsError::InvalidInput(format!(
            "kl_step index {t} out of range (horizons {} and {})",
            p.horizon(),
            q.horizon()
        )));
    }
    if state_mean.len() != p.in_dim() || state_cov.nrows() != p.in_dim() {
        return Err(MdgpsError::Dimension {
            context: "kl_step state marginal",
            expected: p.in_dim(),
            actual: state_mean.len(),
        });
    }
    if min_eigenvalue(state_cov) < -SYMMETRY_TOL {
        return Err(MdgpsError::InvalidInput(
            "kl_step: state covariance is not PSD".into(),
        ));
    }
    let du = p.out_dim() as f64;
    let prec_q = q.cov_pd(t).inverse();
    // Mean difference as an affine function of the state: D x + d.
    let diff_gain = q.gain(t) - p.gain(t);
    let diff_bias = q.bias(t) - p.bias(t);
    let mean_diff = &diff_gain * state_mean + &diff_bias;

    let trace_term = (&prec_q * p.cov(t)).trace();
    let gain_term = (diff_gain.transpose() * &prec_q * &diff_gain * state_cov).trace();
    let quad_term = mean_diff.dot(&(&prec_q * &mean_diff));
    let log_det_term = q.cov_pd(t).log_det() - p.cov_pd(t).log_det();

    let val = 0.5 * (trace_term + gain_term + quad_term - du + log_det_term);
    debug_assert!(val > -1e-6, "kl_step produced a strongly negative value: {val}");
    Ok(val.max(0.0))
}

/// Forward propagation of Gaussian state-action marginals under a
/// controller and fitted dynamics.
pub fn propagate_marginals(
    ctrl: &TimeVaryingLinGauss,
    dyn_model: &TimeVaryingLinGauss,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<GaussianMarginals> {
    let dx = ctrl.in_dim();
    let du = ctrl.out_dim();
    let horizon = ctrl.horizon();
    if dyn_model.in_dim() != dx + du {
        return Err(MdgpsError::Dimension {
            context: "propagate_marginals dynamics input",
            expected: dx + du,
            actual: dyn_model.in_dim(),
        });
    }
    if dyn_model.out_dim() != dx {
        return Err(MdgpsError::Dimension {
            context: "propagate_marginals dynamics output",
            expected: dx,
            actual: dyn_model.out_dim(),
        });
    }
    if dyn_model.horizon() != horizon {
        return Err(MdgpsError::Dimension {
            context: "propagate_marginals horizon",
            expected: horizon,
            actual: dyn_model.horizon(),
        });
    }
    if init_mean.len() != dx || init_cov.nrows() != dx || init_cov.ncols() != dx {
        return Err(MdgpsError::Dimension {
            context: "propagate_marginals initial distribution",
            expected: dx,
            actual: init_mean.len(),
        });
    }
    if min_eigenvalue(init_cov) < -SYMMETRY_TOL {
        return Err(MdgpsError::InvalidInput(
            "propagate_marginals: initial covariance is not PSD".into(),
        ));
    }

    let init_cov = symmetrize(init_cov);
    let mut joint_means = Vec::with_capacity(horizon);
    let mut joint_covs = Vec::with_capacity(horizon);
    let mut next_means = Vec::with_capacity(horizon);
    let mut next_covs = Vec::with_capacity(horizon);

    let mut mu_x = init_mean.clone();
    let mut sigma_x = init_cov.clone();
    for t in 0..horizon {
        let gain = ctrl.gain(t);
        let mu_u = gain * &mu_x + ctrl.bias(t);
        let cross = &sigma_x * gain.transpose(); // Sigma_x K^T
        let sigma_u = gain * &cross + ctrl.cov(t);

        let mut mu_joint = DVector::zeros(dx + du);
        mu_joint.rows_mut(0, dx).copy_from(&mu_x);
        mu_joint.rows_mut(dx, du).copy_from(&mu_u);

        let mut sigma_joint = DMatrix::zeros(dx + du, dx + du);
        sigma_joint.view_mut((0, 0), (dx, dx)).copy_from(&sigma_x);
        sigma_joint.view_mut((0, dx), (dx, du)).copy_from(&cross);
        sigma_joint.view_mut((dx, 0), (du, dx)).copy_from(&cross.transpose());
        sigma_joint.view_mut((dx, dx), (du, du)).copy_from(&symmetrize(&sigma_u));

        let f = dyn_model.gain(t);
        let mu_next = f * &mu_joint + dyn_model.bias(t);
        let sigma_next = symmetrize(&(f * &sigma_joint * f.transpose() + dyn_model.cov(t)));

        joint_means.push(mu_joint);
        joint_covs.push(sigma_joint);
        next_means.push(mu_next.clone());
        next_covs.push(sigma_next.clone());

        mu_x = mu_next;
        sigma_x = sigma_next;
    }

    Ok(GaussianMarginals {
        init_mean: init_mean.clone(),
        init_cov,
        joint_means,
        joint_covs,
        next_means,
        next_covs,
        state_dim: dx,
        action_dim: du,
    })
}

/// Trajectory KL divergence `D_KL(p(tau) || q(tau))` for two controllers
/// sharing the same dynamics and initial distribution. The dynamics and
/// initial terms cancel, leaving the sum over steps of the expected
/// state-conditional KL under p's own marginals.
pub fn traj_kl(
    p: &TimeVaryingLinGauss,
    q: &TimeVaryingLinGauss,
    dyn_model: &TimeVaryingLinGauss,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<f64> {
    check_controller_pair(p, q)?;
    if p.horizon() != q.horizon() {
        return Err(MdgpsError::Dimension {
            context: "traj_kl horizon",
            expected: p.horizon(),
            actual: q.horizon(),
        });
    }
    let marg = propagate_marginals(p, dyn_model, init_mean, init_cov)?;
    let mut total = 0.0;
    for t in 0..p.horizon() {
        total += kl_step(p, q, t, marg.state_mean(t), marg.state_cov(t))?;
    }
    Ok(total)
}

/// Expected total cost of a quadratic expansion under Gaussian marginals:
/// per step `0.5 tr(H S) + 0.5 m^T H m + g^T m + const`, with the mean
/// taken relative to the expansion point.
pub fn expected_cost(marg: &GaussianMarginals, cost: &QuadraticCostExpansion) -> Result<f64> {
    cost.validate()?;
    if cost.horizon() != marg.horizon() {
        return Err(MdgpsError::Dimension {
            context: "expected_cost horizon",
            expected: marg.horizon(),
            actual: cost.horizon(),
        });
    }
    if cost.state_dim() != marg.state_dim() || cost.action_dim() != marg.action_dim() {
        return Err(MdgpsError::Dimension {
            context: "expected_cost dimensions",
            expected: marg.state_dim() + marg.action_dim(),
            actual: cost.state_dim() + cost.action_dim(),
        });
    }
    let mut total = 0.0;
    for t in 0..cost.horizon() {
        let h = cost.full_hessian(t);
        let g = cost.full_gradient(t);
        let m = marg.joint_mean(t) - cost.nominal(t);
        let s = marg.joint_cov(t);
        total += 0.5 * (&h * s).trace() + 0.5 * m.dot(&(&h * &m)) + g.dot(&m) + cost.constant[t];
    }
    Ok(total)
}

/// Per-step differential entropy `0.5 log |2 pi e C_t|` of a controller's
/// conditionals. Independent of the gains and biases.
pub fn entropy(ctrl: &TimeVaryingLinGauss) -> Vec<f64> {
    let du = ctrl.out_dim() as f64;
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    (0..ctrl.horizon())
        .map(|t| 0.5 * (du * two_pi_e.ln() + ctrl.cov_pd(t).log_det()))
        .collect()
}

//! Maximum-entropy LQR backward pass and the KL-constrained control step.
//!
//! The control step solves
//! `min_p E_p[sum_t l(x_t, u_t)]  s.t.  D_KL(p(tau) || pibar(tau)) <= eps`
//! by minimizing the Lagrangian through an LQR problem on the surrogate
//! cost `l~ = l / eta - log pibar(u|x)` and adjusting the scalar dual
//! variable eta with a bracketing bisection on log eta. The LQR solution
//! is the Gaussian controller `N(K_t x + k_t, Q_uu^-1)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MdgpsError, Result};
use crate::trajdist::{
    min_eigenvalue, propagate_marginals, symmetrize, traj_kl, QuadraticCostExpansion,
    TimeVaryingLinGauss,
};

/// Per-step Q-function blocks and value function from the backward pass.
#[derive(Debug, Clone)]
pub struct QFunction {
    pub q_xx: Vec<DMatrix<f64>>,
    /// Regularized action block actually used to extract the controller.
    pub q_uu: Vec<DMatrix<f64>>,
    /// Action-state cross block, shape du x dx.
    pub q_ux: Vec<DMatrix<f64>>,
    pub q_x: Vec<DVector<f64>>,
    pub q_u: Vec<DVector<f64>>,
    pub v_xx: Vec<DMatrix<f64>>,
    pub v_x: Vec<DVector<f64>>,
    pub v_const: Vec<f64>,
    /// How many times the doubling regularization of Q_uu fired.
    pub regularization_count: usize,
}

/// One evaluated dual candidate: the multiplier and the trajectory KL the
/// corresponding controller achieved.
#[derive(Debug, Clone, Copy)]
pub struct DualCandidate {
    pub eta: f64,
    pub kl: f64,
}

/// State of the bracketing search over the dual variable.
#[derive(Debug, Clone)]
pub struct DualState {
    pub eta: f64,
    pub eta_lo: f64,
    pub eta_hi: f64,
    /// Every candidate evaluated during the search, in evaluation order.
    pub trace: Vec<DualCandidate>,
    pub epsilon: f64,
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct CStepResult {
    pub controller: TimeVaryingLinGauss,
    pub achieved_kl: f64,
    pub dual: DualState,
    /// Set when bisection exhausted its iteration budget and fell back to
    /// the best feasible candidate.
    pub warning: bool,
    /// True when the KL constraint was slack at the near-unconstrained
    /// boundary of the eta range (no bracketing possible, none needed).
    pub constraint_slack: bool,
}

/// Maximum value-Hessian norm before the recursion is declared divergent.
const DIVERGENCE_NORM: f64 = 1e12;
/// Hard bounds on the dual variable.
const ETA_MIN: f64 = 1e-8;
const ETA_MAX: f64 = 1e16;
/// Default initial bracket when no warm start is available.
const ETA_BRACKET_LO: f64 = 1e-4;
const ETA_BRACKET_HI: f64 = 1e4;
/// Relative tolerance on |achieved KL - eps|.
pub const KL_REL_TOL: f64 = 0.05;
const MAX_DUAL_ITERS: usize = 50;

/// Build the surrogate expansion `l / eta - log pibar(u|x)` around the
/// cost's own nominal trajectory. The `-log pibar` term is an exact
/// quadratic in (x, u); its Hessian is
/// `[K^T C^-1 K, -K^T C^-1; -C^-1 K, C^-1]`.
pub fn surrogate_expand(
    cost: &QuadraticCostExpansion,
    pi_bar: &TimeVaryingLinGauss,
    eta: f64,
) -> Result<QuadraticCostExpansion> {
    if eta <= 0.0 {
        return Err(MdgpsError::InvalidInput(format!(
            "surrogate_expand requires eta > 0, got {eta}"
        )));
    }
    cost.validate()?;
    if pi_bar.horizon() != cost.horizon() {
        return Err(MdgpsError::Dimension {
            context: "surrogate_expand horizon",
            expected: cost.horizon(),
            actual: pi_bar.horizon(),
        });
    }
    if pi_bar.in_dim() != cost.state_dim() || pi_bar.out_dim() != cost.action_dim() {
        return Err(MdgpsError::Dimension {
            context: "surrogate_expand policy dims",
            expected: cost.state_dim() + cost.action_dim(),
            actual: pi_bar.in_dim() + pi_bar.out_dim(),
        });
    }

    let du = cost.action_dim() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut out = cost.scaled(1.0 / eta);
    for t in 0..cost.horizon() {
        let gain = pi_bar.gain(t);
        let prec = pi_bar.cov_pd(t).inverse();
        let resid = &cost.u_nom[t] - pi_bar.mean(t, &cost.x_nom[t]);
        let prec_resid = &prec * &resid;
        let prec_gain = &prec * gain;

        out.hess_xx[t] += gain.transpose() * &prec_gain;
        out.hess_uu[t] += &prec;
        out.hess_xu[t] -= prec_gain.transpose();
        out.grad_x[t] -= gain.transpose() * &prec_resid;
        out.grad_u[t] += &prec_resid;
        out.constant[t] +=
            0.5 * resid.dot(&prec_resid) + 0.5 * (du * ln_2pi + pi_bar.cov_pd(t).log_det());
    }
    Ok(out)
}

/// Backward pass of maximum-entropy LQR: minimizes
/// `sum_t E[l(x_t, u_t)] - H(p(.|x_t))` over Gaussian controllers under the
/// fitted dynamics. The optimal controller is `N(K_t x + k_t, Q_uu^-1)`.
///
/// Q_uu is symmetrized and, if its Cholesky fails, regularized by adding
/// `mu I` with `mu` doubled from 1e-6 until the factorization succeeds;
/// the number of doublings is reported in the returned Q-function.
pub fn maxent_lqr_backward(
    dyn_model: &TimeVaryingLinGauss,
    cost: &QuadraticCostExpansion,
) -> Result<(TimeVaryingLinGauss, QFunction)> {
    cost.validate()?;
    let dx = cost.state_dim();
    let du = cost.action_dim();
    let horizon = cost.horizon();
    if dyn_model.in_dim() != dx + du || dyn_model.out_dim() != dx {
        return Err(MdgpsError::Dimension {
            context: "maxent_lqr_backward dynamics dims",
            expected: dx + du,
            actual: dyn_model.in_dim(),
        });
    }
    if dyn_model.horizon() != horizon {
        return Err(MdgpsError::Dimension {
            context: "maxent_lqr_backward horizon",
            expected: horizon,
            actual: dyn_model.horizon(),
        });
    }

    let ln_2pi_e = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let mut q = QFunction {
        q_xx: vec![DMatrix::zeros(0, 0); horizon],
        q_uu: vec![DMatrix::zeros(0, 0); horizon],
        q_ux: vec![DMatrix::zeros(0, 0); horizon],
        q_x: vec![DVector::zeros(0); horizon],
        q_u: vec![DVector::zeros(0); horizon],
        v_xx: vec![DMatrix::zeros(0, 0); horizon],
        v_x: vec![DVector::zeros(0); horizon],
        v_const: vec![0.0; horizon],
        regularization_count: 0,
    };
    let mut gains = vec![DMatrix::zeros(du, dx); horizon];
    let mut biases = vec![DVector::zeros(du); horizon];
    let mut covs = vec![DMatrix::zeros(du, du); horizon];

    let mut v_xx = DMatrix::zeros(dx, dx);
    let mut v_x = DVector::zeros(dx);
    let mut v_c = 0.0;

    for t in (0..horizon).rev() {
        // Absolute-coordinate quadratic for the step cost:
        // l(z) = 0.5 z^T H z + b^T z + c, with z = [x; u].
        let h = cost.full_hessian(t);
        let g = cost.full_gradient(t);
        let zhat = cost.nominal(t);
        let b = &g - &h * &zhat;
        let c = cost.constant[t] - g.dot(&zhat) + 0.5 * zhat.dot(&(&h * &zhat));

        let (mut q_zz, q_z, q_c) = if t + 1 < horizon {
            let f = dyn_model.gain(t);
            let fc = dyn_model.bias(t);
            let fcov = dyn_model.cov(t);
            let q_zz = &h + f.transpose() * &v_xx * f;
            let q_z = &b + f.transpose() * (&v_xx * fc + &v_x);
            let q_c = c
                + v_c
                + v_x.dot(fc)
                + 0.5 * fc.dot(&(&v_xx * fc))
                + 0.5 * (&v_xx * fcov).trace();
            (q_zz, q_z, q_c)
        } else {
            (h.clone(), b.clone(), c)
        };
        q_zz = symmetrize(&q_zz);

        let q_xx = q_zz.view((0, 0), (dx, dx)).into_owned();
        let q_ux = q_zz.view((dx, 0), (du, dx)).into_owned();
        let mut q_uu = symmetrize(&q_zz.view((dx, dx), (du, du)).into_owned());
        let q_x = q_z.rows(0, dx).into_owned();
        let q_u = q_z.rows(dx, du).into_owned();

        // Fitted dynamics routinely make Q_uu indefinite; regularize by a
        // doubling identity shift, never silently.
        let mut mu = 1e-6;
        let chol = loop {
            match nalgebra::Cholesky::new(q_uu.clone()) {
                Some(c) => break c,
                None => {
                    q_uu += DMatrix::identity(du, du) * mu;
                    q.regularization_count += 1;
                    mu *= 2.0;
                    if mu > 1e12 {
                        return Err(MdgpsError::DivergentRecursion {
                            step: t,
                            norm: f64::INFINITY,
                        });
                    }
                }
            }
        };

        let gain = -chol.solve(&q_ux);
        let bias = -chol.solve(&DMatrix::from_column_slice(du, 1, q_u.as_slice()));
        let bias = DVector::from_column_slice(bias.as_slice());
        let cov = symmetrize(&chol.inverse());

        // Value function after the entropy-regularized minimization over u.
        let new_v_xx = symmetrize(&(&q_xx + q_ux.transpose() * &gain));
        let new_v_x = &q_x + q_ux.transpose() * &bias;
        let ln_det_quu = chol.ln_determinant();
        let new_v_c = q_c
            + q_u.dot(&bias)
            + 0.5 * bias.dot(&(&q_uu * &bias))
            + 0.5 * du as f64 * (1.0 - ln_2pi_e)
            + 0.5 * ln_det_quu;

        let norm = new_v_xx.abs().max();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(MdgpsError::DivergentRecursion { step: t, norm });
        }

        q.q_xx[t] = q_xx;
        q.q_uu[t] = q_uu;
        q.q_ux[t] = q_ux;
        q.q_x[t] = q_x;
        q.q_u[t] = q_u;
        q.v_xx[t] = new_v_xx.clone();
        q.v_x[t] = new_v_x.clone();
        q.v_const[t] = new_v_c;
        gains[t] = gain;
        biases[t] = bias;
        covs[t] = cov;

        v_xx = new_v_xx;
        v_x = new_v_x;
        v_c = new_v_c;
    }

    let controller = TimeVaryingLinGauss::new(gains, biases, covs)?;
    Ok((controller, q))
}

/// The KL-constrained control step: optimize a local controller against
/// the cost subject to `D_KL(p(tau) || pibar(tau)) <= eps`, with the dual
/// variable found by bracketing bisection on log eta.
#[allow(clippy::too_many_arguments)]
pub fn c_step(
    dyn_model: &TimeVaryingLinGauss,
    cost: &QuadraticCostExpansion,
    pi_bar: &TimeVaryingLinGauss,
    epsilon: f64,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
    warm_start_eta: Option<f64>,
) -> Result<CStepResult> {
    if epsilon <= 0.0 {
        return Err(MdgpsError::InvalidInput(format!(
            "c_step requires eps > 0, got {epsilon}"
        )));
    }
    if pi_bar.horizon() != cost.horizon() || dyn_model.horizon() != cost.horizon() {
        return Err(MdgpsError::Dimension {
            context: "c_step horizon",
            expected: cost.horizon(),
            actual: pi_bar.horizon(),
        });
    }

    let mut trace: Vec<DualCandidate> = Vec::new();
    let mut evaluate = |eta: f64| -> Result<(TimeVaryingLinGauss, f64)> {
        let surrogate = surrogate_expand(cost, pi_bar, eta)?;
        let (ctrl, _) = maxent_lqr_backward(dyn_model, &surrogate)?;
        let kl = traj_kl(&ctrl, pi_bar, dyn_model, init_mean, init_cov)?;
        trace.push(DualCandidate { eta, kl });
        Ok((ctrl, kl))
    };

    // Establish a bracket [lo, hi] with kl(lo) >= eps >= kl(hi); kl is
    // non-increasing in eta.
    let (mut lo, mut hi) = match warm_start_eta {
        Some(w) if w.is_finite() && w > 0.0 => {
            let w = w.clamp(ETA_MIN * 100.0, ETA_MAX / 100.0);
            (w / 100.0, w * 100.0)
        }
        _ => (ETA_BRACKET_LO, ETA_BRACKET_HI),
    };

    let (mut ctrl_lo, mut kl_lo) = evaluate(lo)?;
    // Expand downward while even the low end satisfies the constraint.
    while kl_lo <= epsilon && lo > ETA_MIN {
        lo = (lo / 10.0).max(ETA_MIN);
        let (c, k) = evaluate(lo)?;
        ctrl_lo = c;
        kl_lo = k;
    }
    if kl_lo <= epsilon {
        // Constraint slack at the near-unconstrained boundary; the most
        // cost-greedy candidate is the answer.
        let dual = DualState {
            eta: lo,
            eta_lo: lo,
            eta_hi: hi,
            trace,
            epsilon,
        };
        return Ok(CStepResult {
            achieved_kl: kl_lo,
            controller: ctrl_lo,
            dual,
            warning: false,
            constraint_slack: true,
        });
    }

    let (mut ctrl_hi, mut kl_hi) = evaluate(hi)?;
    while kl_hi > epsilon {
        if hi >= ETA_MAX {
            // The eta -> infinity limit pins the controller to pibar with
            // KL -> 0, so failing to bracket means something upstream broke.
            return Err(MdgpsError::Internal(format!(
                "c_step could not bracket the dual: kl({ETA_MAX:.0e}) = {kl_hi:.3e} > eps = {epsilon:.3e}"
            )));
        }
        hi = (hi * 10.0).min(ETA_MAX);
        let (c, k) = evaluate(hi)?;
        ctrl_hi = c;
        kl_hi = k;
    }

    // Bisection on log eta. The 5% KL tolerance is an acceptance condition,
    // not the stopping rule: bisection keeps going until the bracket
    // collapses so the returned controller is pinned much tighter than the
    // tolerance (downstream oracle comparisons need that).
    let mut best_feasible: Option<(f64, f64, TimeVaryingLinGauss)> = Some((hi, kl_hi, ctrl_hi));
    let tol = KL_REL_TOL * epsilon;
    for _ in 0..MAX_DUAL_ITERS {
        if (hi / lo).ln().abs() < 1e-12 {
            break;
        }
        let mid = ((lo.ln() + hi.ln()) / 2.0).exp();
        let (c, k) = evaluate(mid)?;
        if k <= epsilon {
            if best_feasible
                .as_ref()
                .is_none_or(|(_, bk, _)| (k - epsilon).abs() < (bk - epsilon).abs())
            {
                best_feasible = Some((mid, k, c));
            }
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let (eta, kl, ctrl) = best_feasible.expect("hi endpoint was feasible");
    // Outside the tolerance after a full search: fell back to the best
    // feasible candidate, flagged for the caller.
    let warning = (kl - epsilon).abs() > tol;
    let dual = DualState {
        eta,
        eta_lo: lo,
        eta_hi: hi,
        trace,
        epsilon,
    };
    Ok(CStepResult {
        controller: ctrl,
        achieved_kl: kl,
        dual,
        warning,
        constraint_slack: false,
    })
}

/// Entropy-regularized surrogate objective value of a controller:
/// `E[sum_t l~(x_t, u_t)] - sum_t H(p(.|x_t))`. Used by the optimality
/// probes in the tests.
pub fn maxent_objective(
    ctrl: &TimeVaryingLinGauss,
    dyn_model: &TimeVaryingLinGauss,
    surrogate: &QuadraticCostExpansion,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<f64> {
    let marg = propagate_marginals(ctrl, dyn_model, init_mean, init_cov)?;
    let cost = crate::trajdist::expected_cost(&marg, surrogate)?;
    let ent: f64 = crate::trajdist::entropy(ctrl).iter().sum();
    Ok(cost - ent)
}

/// Check that the Q_uu blocks reproduce the extracted controller; used by
/// tests as the structural invariant of the Q-function.
pub fn controller_consistency_error(q: &QFunction, ctrl: &TimeVaryingLinGauss) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..ctrl.horizon() {
        let chol = nalgebra::Cholesky::new(q.q_uu[t].clone()).expect("Q_uu PD after regularization");
        let k = -chol.solve(&q.q_ux[t]);
        let kv = -chol.solve(&DMatrix::from_column_slice(
            q.q_u[t].len(),
            1,
            q.q_u[t].as_slice(),
        ));
        let cov = chol.inverse();
        worst = worst
            .max((k - ctrl.gain(t)).abs().max())
            .max((DVector::from_column_slice(kv.as_slice()) - ctrl.bias(t)).abs().max())
            .max((cov - ctrl.cov(t)).abs().max());
    }
    worst
}

/// Minimum eigenvalue across all regularized Q_uu blocks.
pub fn min_quu_eigenvalue(q: &QFunction) -> f64 {
    q.q_uu
        .iter()
        .map(min_eigenvalue)
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{random_lin_gauss, random_psd, random_vector};
    use rand::Rng;

    fn dmat(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, vals)
    }

    fn quadratic_cost(
        horizon: usize,
        dx: usize,
        du: usize,
        w_x: f64,
        w_u: f64,
    ) -> QuadraticCostExpansion {
        let mut cost = QuadraticCostExpansion::zeros(horizon, dx, du);
        for t in 0..horizon {
            cost.hess_xx[t] = DMatrix::identity(dx, dx) * 2.0 * w_x;
            cost.hess_uu[t] = DMatrix::identity(du, du) * 2.0 * w_u;
        }
        cost
    }

    fn scalar_dynamics(horizon: usize, a: f64, b: f64, noise: f64) -> TimeVaryingLinGauss {
        TimeVaryingLinGauss::new(
            vec![dmat(1, 2, &[a, b]); horizon],
            vec![DVector::zeros(1); horizon],
            vec![dmat(1, 1, &[noise]); horizon],
        )
        .unwrap()
    }

    #[test]
    fn surrogate_limits() {
        // eta = 1 with zero base cost: the surrogate Hessian equals the
        // -log pibar Hessian exactly.
        let horizon = 3;
        let mut rng = crate::rng::rng_from(30, &[1]);
        let pi_bar = random_lin_gauss(&mut rng, horizon, 2, 2);
        let zero = QuadraticCostExpansion::zeros(horizon, 2, 2);
        let sur = surrogate_expand(&zero, &pi_bar, 1.0).unwrap();
        for t in 0..horizon {
            let prec = pi_bar.cov_pd(t).inverse();
            let k = pi_bar.gain(t);
            assert!((&sur.hess_uu[t] - &prec).abs().max() < 1e-12);
            assert!((&sur.hess_xx[t] - k.transpose() * &prec * k).abs().max() < 1e-12);
            assert!((&sur.hess_xu[t] + (k.transpose() * &prec)).abs().max() < 1e-12);
        }

        // Huge eta: minimizing controller recovers pibar's mean map and
        // covariance.
        let cost = quadratic_cost(horizon, 2, 2, 1.0, 0.1);
        let dyn_model = TimeVaryingLinGauss::new(
            vec![dmat(2, 4, &[1.0, 0.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.1]); horizon],
            vec![DVector::zeros(2); horizon],
            vec![DMatrix::identity(2, 2) * 0.01; horizon],
        )
        .unwrap();
        let sur = surrogate_expand(&cost, &pi_bar, 1e14).unwrap();
        let (ctrl, _) = maxent_lqr_backward(&dyn_model, &sur).unwrap();
        for t in 0..horizon {
            assert!((ctrl.gain(t) - pi_bar.gain(t)).abs().max() < 1e-5);
            assert!((ctrl.bias(t) - pi_bar.bias(t)).abs().max() < 1e-5);
            assert!((ctrl.cov(t) - pi_bar.cov(t)).abs().max() < 1e-5);
        }
    }

    #[test]
    fn surrogate_matches_pointwise_density() {
        // Oracle: evaluate the surrogate quadratic and compare with
        // l(x,u)/eta - log pibar(u|x) at random points.
        let mut rng = crate::rng::rng_from(31, &[2]);
        let horizon = 2;
        let pi_bar = random_lin_gauss(&mut rng, horizon, 3, 2);
        let mut cost = QuadraticCostExpansion::zeros(horizon, 3, 2);
        for t in 0..horizon {
            let h = random_psd(&mut rng, 5);
            cost.hess_xx[t] = h.view((0, 0), (3, 3)).into_owned();
            cost.hess_xu[t] = h.view((0, 3), (3, 2)).into_owned();
            cost.hess_uu[t] = h.view((3, 3), (2, 2)).into_owned();
            cost.grad_x[t] = random_vector(&mut rng, 3);
            cost.grad_u[t] = random_vector(&mut rng, 2);
            cost.constant[t] = rng.random::<f64>();
            cost.x_nom[t] = random_vector(&mut rng, 3);
            cost.u_nom[t] = random_vector(&mut rng, 2);
        }
        let eta = 2.7;
        let sur = surrogate_expand(&cost, &pi_bar, eta).unwrap();
        for _ in 0..100 {
            let t = rng.random_range(0..horizon);
            let x = random_vector(&mut rng, 3);
            let u = random_vector(&mut rng, 2);
            let direct = cost.eval(t, &x, &u) / eta - pi_bar.log_density(t, &x, &u);
            let quad = sur.eval(t, &x, &u);
            assert!(
                (direct - quad).abs() < 1e-9,
                "pointwise mismatch {direct} vs {quad}"
            );
        }
    }

    #[test]
    fn single_step_isotropic_cost() {
        // T = 1, cost 0.5 u^T u, no state terms: K = 0, k = 0, C = I.
        let mut cost = QuadraticCostExpansion::zeros(1, 2, 2);
        cost.hess_uu[0] = DMatrix::identity(2, 2);
        let dyn_model = TimeVaryingLinGauss::new(
            vec![dmat(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])],
            vec![DVector::zeros(2)],
            vec![DMatrix::identity(2, 2) * 0.1],
        )
        .unwrap();
        let (ctrl, q) = maxent_lqr_backward(&dyn_model, &cost).unwrap();
        assert!(ctrl.gain(0).abs().max() < 1e-14);
        assert!(ctrl.bias(0).abs().max() < 1e-14);
        assert!((ctrl.cov(0) - DMatrix::identity(2, 2)).abs().max() < 1e-14);
        assert_eq!(q.regularization_count, 0);
        assert!(controller_consistency_error(&q, &ctrl) < 1e-9);
    }

    /// Textbook finite-horizon discrete Riccati recursion for
    /// cost sum_t x^T Qx x + u^T Ru u with u = K x (independent oracle).
    fn riccati_oracle(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        qx: &DMatrix<f64>,
        ru: &DMatrix<f64>,
        horizon: usize,
    ) -> Vec<DMatrix<f64>> {
        let mut gains = vec![DMatrix::zeros(b.ncols(), a.nrows()); horizon];
        // Terminal step: only the instantaneous cost, so u_T minimizes
        // u^T Ru u alone and K_T = 0.
        let mut p = qx.clone();
        gains[horizon - 1] = DMatrix::zeros(b.ncols(), a.nrows());
        for t in (0..horizon.saturating_sub(1)).rev() {
            let m = ru + b.transpose() * &p * b;
            let minv = m.try_inverse().unwrap();
            let k = -(&minv * b.transpose() * &p * a);
            let acl = a + b * &k;
            p = qx + k.transpose() * ru * &k + acl.transpose() * &p * &acl;
            gains[t] = k;
        }
        gains
    }

    #[test]
    fn matches_riccati_oracle_on_scalar_chain() {
        // Time-invariant scalar system x' = x + u, cost x^2 + u^2, T = 20.
        let horizon = 20;
        let dyn_model = scalar_dynamics(horizon, 1.0, 1.0, 0.01);
        let cost = quadratic_cost(horizon, 1, 1, 1.0, 1.0);
        let (ctrl, _) = maxent_lqr_backward(&dyn_model, &cost).unwrap();
        let gains = riccati_oracle(
            &dmat(1, 1, &[1.0]),
            &dmat(1, 1, &[1.0]),
            &dmat(1, 1, &[1.0]),
            &dmat(1, 1, &[1.0]),
            horizon,
        );
        for t in 0..horizon {
            assert!(
                (ctrl.gain(t) - &gains[t]).abs().max() < 1e-9,
                "gain mismatch at t = {t}: {} vs {}",
                ctrl.gain(t)[(0, 0)],
                gains[t][(0, 0)]
            );
        }
    }

    #[test]
    fn matches_riccati_oracle_on_random_instances() {
        let mut rng = crate::rng::rng_from(32, &[3]);
        for _ in 0..20 {
            let dx = rng.random_range(1..=3);
            let du = rng.random_range(1..=2);
            let horizon = rng.random_range(2..=8);
            let mut a = DMatrix::from_fn(dx, dx, |_, _| 0.4 * (rng.random::<f64>() - 0.5));
            for i in 0..dx {
                a[(i, i)] += 0.9;
            }
            let b = DMatrix::from_fn(dx, du, |_, _| rng.random::<f64>() - 0.5);
            let qx = random_psd(&mut rng, dx);
            let ru = random_psd(&mut rng, du) + DMatrix::identity(du, du) * 0.5;

            let mut gain = DMatrix::zeros(dx, dx + du);
            gain.view_mut((0, 0), (dx, dx)).copy_from(&a);
            gain.view_mut((0, dx), (dx, du)).copy_from(&b);
            let dyn_model = TimeVaryingLinGauss::new(
                vec![gain; horizon],
                vec![DVector::zeros(dx); horizon],
                vec![DMatrix::identity(dx, dx) * 0.01; horizon],
            )
            .unwrap();
            let mut cost = QuadraticCostExpansion::zeros(horizon, dx, du);
            for t in 0..horizon {
                cost.hess_xx[t] = &qx * 2.0;
                cost.hess_uu[t] = &ru * 2.0;
            }
            let (ctrl, q) = maxent_lqr_backward(&dyn_model, &cost).unwrap();
            assert_eq!(q.regularization_count, 0);
            let gains = riccati_oracle(&a, &b, &qx, &ru, horizon);
            for t in 0..horizon {
                assert!(
                    (ctrl.gain(t) - &gains[t]).abs().max() < 1e-9,
                    "gain mismatch at t = {t}"
                );
            }
        }
    }

    #[test]
    fn backward_pass_beats_perturbed_controllers() {
        // Random-perturbation optimality probe on the surrogate problem.
        let mut rng = crate::rng::rng_from(33, &[4]);
        let horizon = 5;
        let dyn_model = scalar_dynamics(horizon, 0.9, 0.8, 0.05);
        let pi_bar = random_lin_gauss(&mut rng, horizon, 1, 1);
        let mut cost = quadratic_cost(horizon, 1, 1, 1.0, 0.2);
        for t in 0..horizon {
            cost.grad_x[t] = random_vector(&mut rng, 1);
            cost.grad_u[t] = random_vector(&mut rng, 1);
        }
        let sur = surrogate_expand(&cost, &pi_bar, 1.3).unwrap();
        let (ctrl, _) = maxent_lqr_backward(&dyn_model, &sur).unwrap();
        let init_mean = DVector::from_vec(vec![0.5]);
        let init_cov = dmat(1, 1, &[0.2]);
        let best = maxent_objective(&ctrl, &dyn_model, &sur, &init_mean, &init_cov).unwrap();
        for _ in 0..100 {
            let scale = 0.1;
            let perturbed = TimeVaryingLinGauss::new(
                (0..horizon)
                    .map(|t| ctrl.gain(t) + DMatrix::from_fn(1, 1, |_, _| scale * (rng.random::<f64>() - 0.5)))
                    .collect(),
                (0..horizon)
                    .map(|t| ctrl.bias(t) + DVector::from_fn(1, |_, _| scale * (rng.random::<f64>() - 0.5)))
                    .collect(),
                (0..horizon)
                    .map(|t| {
                        let jitter: f64 = 1.0 + scale * (rng.random::<f64>() - 0.5);
                        ctrl.cov(t) * jitter
                    })
                    .collect(),
            )
            .unwrap();
            let other =
                maxent_objective(&perturbed, &dyn_model, &sur, &init_mean, &init_cov).unwrap();
            assert!(
                other >= best - 1e-9,
                "perturbed controller beat the backward pass: {other} < {best}"
            );
        }
    }

    #[test]
    fn c_step_zero_cost_returns_pi_bar() {
        let mut rng = crate::rng::rng_from(34, &[5]);
        let horizon = 4;
        let pi_bar = random_lin_gauss(&mut rng, horizon, 2, 1);
        let dyn_model = TimeVaryingLinGauss::new(
            vec![dmat(2, 3, &[1.0, 0.05, 0.0, 0.0, 1.0, 0.05]); horizon],
            vec![DVector::zeros(2); horizon],
            vec![DMatrix::identity(2, 2) * 0.01; horizon],
        )
        .unwrap();
        let zero = QuadraticCostExpansion::zeros(horizon, 2, 1);
        let init_mean = DVector::zeros(2);
        let init_cov = DMatrix::identity(2, 2) * 0.1;
        for eps in [1e-4, 0.1, 5.0] {
            let res = c_step(&dyn_model, &zero, &pi_bar, eps, &init_mean, &init_cov, None).unwrap();
            assert!(res.constraint_slack);
            assert!(res.achieved_kl <= eps);
            assert!(res.achieved_kl < 1e-9);
            for t in 0..horizon {
                assert!((res.controller.gain(t) - pi_bar.gain(t)).abs().max() < 1e-6);
                assert!((res.controller.bias(t) - pi_bar.bias(t)).abs().max() < 1e-6);
            }
        }
    }

    #[test]
    fn c_step_tiny_epsilon_pins_to_pi_bar() {
        let mut rng = crate::rng::rng_from(35, &[6]);
        let horizon = 3;
        let pi_bar = random_lin_gauss(&mut rng, horizon, 2, 1);
        let dyn_model = TimeVaryingLinGauss::new(
            vec![dmat(2, 3, &[1.0, 0.05, 0.02, 0.0, 1.0, 0.05]); horizon],
            vec![DVector::zeros(2); horizon],
            vec![DMatrix::identity(2, 2) * 0.01; horizon],
        )
        .unwrap();
        let mut cost = quadratic_cost(horizon, 2, 1, 1.0, 0.1);
        for t in 0..horizon {
            cost.grad_u[t] = DVector::from_vec(vec![-2.0]);
        }
        let init_mean = DVector::from_vec(vec![1.0, 0.0]);
        let init_cov = DMatrix::identity(2, 2) * 0.05;
        let res = c_step(&dyn_model, &cost, &pi_bar, 1e-6, &init_mean, &init_cov, None).unwrap();
        for t in 0..horizon {
            assert!(
                (res.controller.gain(t) - pi_bar.gain(t)).abs().max() < 1e-3,
                "gains drifted at t = {t}"
            );
            assert!((res.controller.bias(t) - pi_bar.bias(t)).abs().max() < 1e-3);
        }
    }

    /// Dense grid-search oracle over eta: coarse pass over the full range,
    /// then a refining pass around the bracketing pair. A single coarse
    /// grid cannot resolve k_t to 1e-3, so the oracle refines once.
    fn grid_search_oracle(
        dyn_model: &TimeVaryingLinGauss,
        cost: &QuadraticCostExpansion,
        pi_bar: &TimeVaryingLinGauss,
        epsilon: f64,
        init_mean: &DVector<f64>,
        init_cov: &DMatrix<f64>,
    ) -> TimeVaryingLinGauss {
        let eval = |eta: f64| {
            let sur = surrogate_expand(cost, pi_bar, eta).unwrap();
            let (ctrl, _) = maxent_lqr_backward(dyn_model, &sur).unwrap();
            let kl = traj_kl(&ctrl, pi_bar, dyn_model, init_mean, init_cov).unwrap();
            (ctrl, kl)
        };
        let grid = |lo: f64, hi: f64| -> Vec<f64> {
            let n = 1000;
            (0..n)
                .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
                .collect()
        };
        let mut best = (f64::INFINITY, 0usize);
        let coarse = grid(1e-4, 1e4);
        for (i, &eta) in coarse.iter().enumerate() {
            let (_, kl) = eval(eta);
            let gap = (kl - epsilon).abs();
            if gap < best.0 {
                best = (gap, i);
            }
        }
        let lo = coarse[best.1.saturating_sub(1)];
        let hi = coarse[(best.1 + 1).min(coarse.len() - 1)];
        let fine = grid(lo, hi);
        let mut best_ctrl = None;
        let mut best_gap = f64::INFINITY;
        for &eta in &fine {
            let (ctrl, kl) = eval(eta);
            let gap = (kl - epsilon).abs();
            if gap < best_gap {
                best_gap = gap;
                best_ctrl = Some(ctrl);
            }
        }
        best_ctrl.unwrap()
    }

    #[test]
    fn c_step_scalar_example_matches_grid_search() {
        // Scalar system, T = 2, quadratic cost pulling u toward 1, pibar
        // centered at 0, eps = 0.5.
        let horizon = 2;
        let dyn_model = scalar_dynamics(horizon, 1.0, 1.0, 0.1);
        let pi_bar = TimeVaryingLinGauss::zero_controller(horizon, 1, 1, 1.0).unwrap();
        let mut cost = QuadraticCostExpansion::zeros(horizon, 1, 1);
        for t in 0..horizon {
            cost.hess_uu[t] = dmat(1, 1, &[1.0]);
            cost.grad_u[t] = DVector::from_vec(vec![-1.0]); // 0.5 (u - 1)^2 up to const
            cost.constant[t] = 0.5;
        }
        let init_mean = DVector::zeros(1);
        let init_cov = dmat(1, 1, &[0.01]);
        let eps = 0.5;
        let res = c_step(&dyn_model, &cost, &pi_bar, eps, &init_mean, &init_cov, None).unwrap();
        assert!(
            res.achieved_kl >= 0.475 && res.achieved_kl <= 0.525,
            "achieved KL {} outside [0.475, 0.525]",
            res.achieved_kl
        );
        let oracle = grid_search_oracle(&dyn_model, &cost, &pi_bar, eps, &init_mean, &init_cov);
        for t in 0..horizon {
            assert!(
                (res.controller.bias(t) - oracle.bias(t)).abs().max() < 1e-3,
                "k_t mismatch at t = {t}: {} vs {}",
                res.controller.bias(t)[0],
                oracle.bias(t)[0]
            );
        }
    }

    #[test]
    fn dual_trace_is_monotone_and_constraint_met() {
        let mut rng = crate::rng::rng_from(36, &[7]);
        for trial in 0..10 {
            let horizon = 3;
            let dyn_model = scalar_dynamics(horizon, 0.95, 0.7, 0.05);
            let pi_bar = random_lin_gauss(&mut rng, horizon, 1, 1);
            let mut cost = quadratic_cost(horizon, 1, 1, 1.0, 0.3);
            for t in 0..horizon {
                cost.grad_x[t] = random_vector(&mut rng, 1) * 2.0;
                cost.grad_u[t] = random_vector(&mut rng, 1) * 2.0;
            }
            let init_mean = random_vector(&mut rng, 1);
            let init_cov = dmat(1, 1, &[0.1]);
            let eps = 0.4;
            let res = c_step(&dyn_model, &cost, &pi_bar, eps, &init_mean, &init_cov, None).unwrap();
            if !res.constraint_slack {
                assert!(
                    (res.achieved_kl - eps).abs() <= KL_REL_TOL * eps,
                    "trial {trial}: KL {} vs eps {eps}",
                    res.achieved_kl
                );
            }
            assert!(res.achieved_kl <= 1.05 * eps);
            // Monotonicity of the dual: sort candidates by eta and check
            // the achieved KL never increases.
            let mut trace = res.dual.trace.clone();
            trace.sort_by(|a, b| a.eta.partial_cmp(&b.eta).unwrap());
            for w in trace.windows(2) {
                assert!(
                    w[1].kl <= w[0].kl + 1e-9,
                    "trial {trial}: dual not monotone: kl({}) = {} < kl({}) = {}",
                    w[0].eta,
                    w[0].kl,
                    w[1].eta,
                    w[1].kl
                );
            }
            assert!(res.dual.eta_lo < res.dual.eta_hi);
        }
    }

    #[test]
    fn dual_solver_handles_previous_local_policy_constraint() {
        // Constraining against the previous local policy is not an
        // algorithm mode, but the dual solver must handle it: two chained
        // steps, the second trust region centered on the first's output.
        let horizon = 3;
        let dyn_model = scalar_dynamics(horizon, 1.0, 1.0, 0.05);
        let mut cost = quadratic_cost(horizon, 1, 1, 1.0, 0.2);
        for t in 0..horizon {
            cost.grad_x[t] = DVector::from_vec(vec![1.5]);
        }
        let init_mean = DVector::from_vec(vec![1.0]);
        let init_cov = dmat(1, 1, &[0.05]);
        let prev = TimeVaryingLinGauss::zero_controller(horizon, 1, 1, 1.0).unwrap();
        let eps = 0.3;
        let first = c_step(&dyn_model, &cost, &prev, eps, &init_mean, &init_cov, None).unwrap();
        let second = c_step(
            &dyn_model,
            &cost,
            &first.controller,
            eps,
            &init_mean,
            &init_cov,
            Some(first.dual.eta),
        )
        .unwrap();
        assert!(second.achieved_kl <= 1.05 * eps);
        // Two constrained steps make at least as much progress as one.
        let cost_of = |ctrl: &TimeVaryingLinGauss| {
            let marg = propagate_marginals(ctrl, &dyn_model, &init_mean, &init_cov).unwrap();
            crate::trajdist::expected_cost(&marg, &cost).unwrap()
        };
        assert!(cost_of(&second.controller) <= cost_of(&first.controller) + 1e-9);
    }

    #[test]
    fn c_step_improves_on_pi_bar_when_constraint_active() {
        let mut rng = crate::rng::rng_from(37, &[8]);
        for _ in 0..10 {
            let horizon = 4;
            let dyn_model = scalar_dynamics(horizon, 0.9, 0.6, 0.04);
            let pi_bar = random_lin_gauss(&mut rng, horizon, 1, 1);
            let mut cost = quadratic_cost(horizon, 1, 1, 1.0, 0.2);
            for t in 0..horizon {
                cost.grad_x[t] = random_vector(&mut rng, 1);
            }
            let init_mean = random_vector(&mut rng, 1);
            let init_cov = dmat(1, 1, &[0.2]);
            let eps = 0.3;
            let res = c_step(&dyn_model, &cost, &pi_bar, eps, &init_mean, &init_cov, None).unwrap();
            if res.constraint_slack {
                continue;
            }
            let marg_new =
                propagate_marginals(&res.controller, &dyn_model, &init_mean, &init_cov).unwrap();
            let marg_bar = propagate_marginals(&pi_bar, &dyn_model, &init_mean, &init_cov).unwrap();
            let cost_new = crate::trajdist::expected_cost(&marg_new, &cost).unwrap();
            let cost_bar = crate::trajdist::expected_cost(&marg_bar, &cost).unwrap();
            assert!(
                cost_new <= cost_bar + 1e-9,
                "active C-step failed to improve: {cost_new} vs {cost_bar}"
            );
        }
    }
}

//! Desk-scale simulated control tasks with analytic cost expansions.
//!
//! Two families: a 2-D point mass (discrete double integrator, exactly
//! linear dynamics) that must navigate around obstacle penalties to reach
//! a target, and a torque-driven planar two-link reacher integrated by
//! fixed-step RK4, with targets encoded as target-relative end-effector
//! coordinates in the state. The reacher has a blind variant whose global
//! policy observes only joint angles and velocities, so no observation can
//! distinguish the conditions.
//!
//! Obstacles enter as twice-differentiable penalties (squared softplus of
//! the penetration distance), so the quadratic cost expansion exists
//! everywhere.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MdgpsError, Result};
use crate::policy::{GlobalPolicy, ObsSelector};
use crate::rng::split_seed;
use crate::trajdist::{symmetrize, QuadraticCostExpansion, TimeVaryingLinGauss};

/// A circular obstacle with a smooth penetration penalty.
#[derive(Debug, Clone)]
pub struct Obstacle {
    /// Center in target-relative coordinates.
    pub center: Vector2<f64>,
    pub radius: f64,
    pub weight: f64,
}

/// Cost weights and physics parameters per task family.
#[derive(Debug, Clone)]
pub enum EnvKind {
    /// State [position - target; velocity], action = acceleration.
    PointMass {
        dt: f64,
        w_pos: f64,
        w_vel: f64,
        w_u: f64,
        obstacles: Vec<Obstacle>,
        softplus_beta: f64,
    },
    /// State [q; qdot; ee - target], action = joint torques.
    TwoLink {
        dt: f64,
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        damping: f64,
        gravity: f64,
        w_ee: f64,
        w_vel: f64,
        w_u: f64,
    },
}

/// A fully specified task: dynamics stepper, analytic cost, initial-state
/// set, observation selector for the global policy, success predicate.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub horizon: usize,
    pub kind: EnvKind,
    init_states: Vec<DVector<f64>>,
    pub init_noise_std: f64,
    pub process_noise_std: f64,
    selector: ObsSelector,
    pub success_threshold: f64,
}

/// Tunable parameters forwarded from the experiment config. All defaults
/// are artifact choices, not published values.
#[derive(Debug, Clone)]
pub struct EnvParams {
    pub horizon: usize,
    pub n_conditions: usize,
    pub process_noise_std: f64,
    pub init_noise_std: f64,
    pub success_threshold: Option<f64>,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            horizon: 100,
            n_conditions: 5,
            process_noise_std: 1e-3,
            init_noise_std: 0.01,
            success_threshold: None,
        }
    }
}

const POINTMASS_DT: f64 = 0.05;
const REACHER_DT: f64 = 0.05;

impl EnvSpec {
    /// Build a task by name: `pointmass`, `lq_pointmass` (no obstacles),
    /// `reacher`, or `reacher_blind`.
    pub fn by_name(name: &str, params: &EnvParams) -> Result<EnvSpec> {
        match name {
            "pointmass" => Ok(Self::pointmass(params, true)),
            "lq_pointmass" => Ok(Self::pointmass(params, false)),
            "reacher" => Self::reacher(params, false),
            "reacher_blind" => Self::reacher(params, true),
            other => Err(MdgpsError::Environment(format!("unknown environment '{other}'"))),
        }
    }

    fn pointmass(params: &EnvParams, with_obstacles: bool) -> EnvSpec {
        let obstacles = if with_obstacles {
            vec![
                Obstacle {
                    center: Vector2::new(-0.55, 0.3),
                    radius: 0.25,
                    weight: 1.0,
                },
                Obstacle {
                    center: Vector2::new(-0.55, -0.3),
                    radius: 0.25,
                    weight: 1.0,
                },
            ]
        } else {
            Vec::new()
        };
        // Starting positions on an arc to the left of the target at the
        // origin, zero initial velocity.
        let n = params.n_conditions.max(1);
        let radius = 1.2_f64;
        let init_states = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                let angle = std::f64::consts::PI * (0.7 + 0.6 * frac);
                DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin(), 0.0, 0.0])
            })
            .collect();
        EnvSpec {
            name: if with_obstacles { "pointmass" } else { "lq_pointmass" }.to_string(),
            horizon: params.horizon,
            kind: EnvKind::PointMass {
                dt: POINTMASS_DT,
                w_pos: 1.0,
                w_vel: 0.1,
                w_u: 0.01,
                obstacles,
                softplus_beta: 8.0,
            },
            init_states,
            init_noise_std: params.init_noise_std,
            process_noise_std: params.process_noise_std,
            selector: ObsSelector::identity(4),
            success_threshold: params.success_threshold.unwrap_or(0.1),
        }
    }

    fn reacher(params: &EnvParams, blind: bool) -> Result<EnvSpec> {
        let (l1, l2) = (0.4, 0.4);
        let q0 = DVector::from_vec(vec![0.2, 1.2, 0.0, 0.0]);
        // Targets clustered on a small arc; the blind policy cannot tell
        // them apart, the local policies can.
        let n = params.n_conditions.max(1);
        let center_angle = -0.25_f64;
        let reach = 0.55_f64;
        let mut init_states = Vec::with_capacity(n);
        for i in 0..n {
            let frac = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let angle = center_angle + 0.11 * (frac - 0.5);
            let target = Vector2::new(reach * angle.cos(), reach * angle.sin());
            let ee = two_link_fk(l1, l2, q0[0], q0[1]);
            let mut x = DVector::zeros(6);
            x.rows_mut(0, 4).copy_from(&q0);
            x[4] = ee.x - target.x;
            x[5] = ee.y - target.y;
            init_states.push(x);
        }
        let selector = if blind {
            // Joint angles and velocities only; target-relative
            // end-effector coordinates are hidden from the global policy.
            ObsSelector::new(6, vec![0, 1, 2, 3])?
        } else {
            ObsSelector::identity(6)
        };
        Ok(EnvSpec {
            name: if blind { "reacher_blind" } else { "reacher" }.to_string(),
            horizon: params.horizon,
            kind: EnvKind::TwoLink {
                dt: REACHER_DT,
                m1: 1.0,
                m2: 1.0,
                l1,
                l2,
                damping: 0.4,
                gravity: 0.0,
                w_ee: 2.0,
                w_vel: 0.02,
                w_u: 0.001,
            },
            init_states,
            init_noise_std: params.init_noise_std,
            process_noise_std: params.process_noise_std,
            selector,
            success_threshold: params.success_threshold.unwrap_or(0.06),
        })
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMass { .. } => 4,
            EnvKind::TwoLink { .. } => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    /// Dimension of the per-step process-noise draw.
    pub fn noise_dim(&self) -> usize {
        4
    }

    pub fn n_conditions(&self) -> usize {
        self.init_states.len()
    }

    pub fn init_state(&self, condition: usize) -> &DVector<f64> {
        &self.init_states[condition]
    }

    pub fn selector(&self) -> &ObsSelector {
        &self.selector
    }

    /// Initial-state distribution used for marginal propagation.
    pub fn init_distribution(&self, condition: usize) -> (DVector<f64>, DMatrix<f64>) {
        let dx = self.state_dim();
        let var = self.init_noise_std * self.init_noise_std;
        let mut cov = DMatrix::zeros(dx, dx);
        match self.kind {
            EnvKind::PointMass { .. } => {
                for i in 0..4 {
                    cov[(i, i)] = var.max(1e-10);
                }
            }
            EnvKind::TwoLink { .. } => {
                // Noise enters on joints; target-relative coordinates move
                // with the joints but we leave their prior variance tiny.
                for i in 0..4 {
                    cov[(i, i)] = var.max(1e-10);
                }
                cov[(4, 4)] = 1e-10;
                cov[(5, 5)] = 1e-10;
            }
        }
        (self.init_states[condition].clone(), cov)
    }

    /// Exact time-varying linear dynamics, available when the task's
    /// dynamics are globally linear (the point-mass family).
    pub fn exact_linear_dynamics(&self, horizon: usize) -> Result<TimeVaryingLinGauss> {
        match &self.kind {
            EnvKind::PointMass { dt, .. } => {
                let mut gain = DMatrix::zeros(4, 6);
                for i in 0..4 {
                    gain[(i, i)] = 1.0;
                }
                gain[(0, 2)] = *dt;
                gain[(1, 3)] = *dt;
                gain[(2, 4)] = *dt;
                gain[(3, 5)] = *dt;
                let var = (self.process_noise_std * self.process_noise_std).max(1e-10);
                let cov = DMatrix::identity(4, 4) * var;
                TimeVaryingLinGauss::new(
                    vec![gain; horizon],
                    vec![DVector::zeros(4); horizon],
                    vec![cov; horizon],
                )
            }
            EnvKind::TwoLink { .. } => Err(MdgpsError::Environment(
                "two-link dynamics are nonlinear; no exact linearization".into(),
            )),
        }
    }
}

fn two_link_fk(l1: f64, l2: f64, q1: f64, q2: f64) -> Vector2<f64> {
    Vector2::new(
        l1 * q1.cos() + l2 * (q1 + q2).cos(),
        l1 * q1.sin() + l2 * (q1 + q2).sin(),
    )
}

/// Joint accelerations of the two-link arm (point masses at the link ends).
#[allow(clippy::too_many_arguments)]
fn two_link_accel(
    m1: f64,
    m2: f64,
    l1: f64,
    l2: f64,
    damping: f64,
    gravity: f64,
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
    tau: &Vector2<f64>,
) -> Vector2<f64> {
    let c2 = q[1].cos();
    let s2 = q[1].sin();
    let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
    let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
    let m22 = m2 * l2 * l2;
    let h = m2 * l1 * l2 * s2;
    let coriolis = Vector2::new(
        -h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]),
        h * qd[0] * qd[0],
    );
    let grav = Vector2::new(
        (m1 + m2) * gravity * l1 * q[0].cos() + m2 * gravity * l2 * (q[0] + q[1]).cos(),
        m2 * gravity * l2 * (q[0] + q[1]).cos(),
    );
    let rhs = tau - coriolis - grav - Vector2::new(damping * qd[0], damping * qd[1]);
    let det = m11 * m22 - m12 * m12;
    Vector2::new(
        (m22 * rhs[0] - m12 * rhs[1]) / det,
        (m11 * rhs[1] - m12 * rhs[0]) / det,
    )
}

/// One deterministic dynamics step plus additive process noise.
/// `noise` is the standard-normal draw for this step (length
/// [`EnvSpec::noise_dim`]); the caller owns the RNG.
pub fn env_step(spec: &EnvSpec, x: &DVector<f64>, u: &DVector<f64>, noise: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != spec.state_dim() {
        return Err(MdgpsError::Dimension {
            context: "env_step state",
            expected: spec.state_dim(),
            actual: x.len(),
        });
    }
    if u.len() != spec.action_dim() {
        return Err(MdgpsError::Dimension {
            context: "env_step action",
            expected: spec.action_dim(),
            actual: u.len(),
        });
    }
    if noise.len() != spec.noise_dim() {
        return Err(MdgpsError::Dimension {
            context: "env_step noise",
            expected: spec.noise_dim(),
            actual: noise.len(),
        });
    }
    let sigma = spec.process_noise_std;
    let next = match &spec.kind {
        EnvKind::PointMass { dt, .. } => {
            let mut next = DVector::zeros(4);
            next[0] = x[0] + dt * x[2];
            next[1] = x[1] + dt * x[3];
            next[2] = x[2] + dt * u[0];
            next[3] = x[3] + dt * u[1];
            for i in 0..4 {
                next[i] += sigma * noise[i];
            }
            next
        }
        EnvKind::TwoLink {
            dt,
            m1,
            m2,
            l1,
            l2,
            damping,
            gravity,
            ..
        } => {
            let q = Vector2::new(x[0], x[1]);
            let qd = Vector2::new(x[2], x[3]);
            let tau = Vector2::new(u[0], u[1]);
            // The target is implicit in the state: target = fk(q) - e.
            let ee = two_link_fk(*l1, *l2, q[0], q[1]);
            let target = Vector2::new(ee.x - x[4], ee.y - x[5]);

            let f = |q: &Vector2<f64>, qd: &Vector2<f64>| -> (Vector2<f64>, Vector2<f64>) {
                (
                    *qd,
                    two_link_accel(*m1, *m2, *l1, *l2, *damping, *gravity, q, qd, &tau),
                )
            };
            let (k1q, k1v) = f(&q, &qd);
            let (k2q, k2v) = f(&(q + k1q * (dt / 2.0)), &(qd + k1v * (dt / 2.0)));
            let (k3q, k3v) = f(&(q + k2q * (dt / 2.0)), &(qd + k2v * (dt / 2.0)));
            let (k4q, k4v) = f(&(q + k3q * *dt), &(qd + k3v * *dt));
            let mut q_next = q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
            let mut qd_next = qd + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
            q_next[0] += sigma * noise[0];
            q_next[1] += sigma * noise[1];
            qd_next[0] += sigma * noise[2];
            qd_next[1] += sigma * noise[3];
            let ee_next = two_link_fk(*l1, *l2, q_next[0], q_next[1]);
            DVector::from_vec(vec![
                q_next[0],
                q_next[1],
                qd_next[0],
                qd_next[1],
                ee_next.x - target.x,
                ee_next.y - target.y,
            ])
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(MdgpsError::NonFinite(format!(
            "env_step produced a non-finite state from x = {x:?}, u = {u:?}"
        )));
    }
    Ok(next)
}

fn softplus(beta: f64, z: f64) -> f64 {
    // Stable for large beta z; the exp underflows harmlessly on the
    // other tail.
    let bz = beta * z;
    if bz > 30.0 {
        z
    } else {
        bz.exp().ln_1p() / beta
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cost, gradient, and Hessian at one (x, u).
fn cost_terms(spec: &EnvSpec, x: &DVector<f64>, u: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let dx = spec.state_dim();
    let du = spec.action_dim();
    let mut value = 0.0;
    let mut gx = DVector::zeros(dx);
    let mut gu = DVector::zeros(du);
    let mut hxx = DMatrix::zeros(dx, dx);
    let mut huu = DMatrix::zeros(du, du);
    match &spec.kind {
        EnvKind::PointMass {
            w_pos,
            w_vel,
            w_u,
            obstacles,
            softplus_beta,
            ..
        } => {
            for i in 0..2 {
                value += w_pos * x[i] * x[i] + w_vel * x[i + 2] * x[i + 2] + w_u * u[i] * u[i];
                gx[i] += 2.0 * w_pos * x[i];
                gx[i + 2] += 2.0 * w_vel * x[i + 2];
                gu[i] += 2.0 * w_u * u[i];
                hxx[(i, i)] += 2.0 * w_pos;
                hxx[(i + 2, i + 2)] += 2.0 * w_vel;
                huu[(i, i)] += 2.0 * w_u;
            }
            let pos = Vector2::new(x[0], x[1]);
            for obst in obstacles {
                let diff = pos - obst.center;
                let dist = diff.norm();
                if dist < 1e-9 {
                    // Dead center: penalty value only; the direction is
                    // undefined, curvature handled by the flat expansion.
                    let s = softplus(*softplus_beta, obst.radius);
                    value += obst.weight * s * s;
                    continue;
                }
                // Penetration depth d(p) = r - |p - c|; penalty w * sp(d)^2.
                let pen = obst.radius - dist;
                let s = softplus(*softplus_beta, pen);
                let sp = sigmoid(*softplus_beta * pen); // d sp / d pen
                value += obst.weight * s * s;
                let n = diff / dist;
                // grad_p pen = -n; Hess_p pen = -(I - n n^T)/dist.
                let dpen = -n;
                let f1 = 2.0 * obst.weight * s * sp; // d penalty / d pen
                let f2 = 2.0 * obst.weight
                    * (sp * sp + s * *softplus_beta * sp * (1.0 - sp));
                for i in 0..2 {
                    gx[i] += f1 * dpen[i];
                }
                let eye = DMatrix::<f64>::identity(2, 2);
                let nn = DMatrix::from_fn(2, 2, |i, j| n[i] * n[j]);
                let hess_pen = -(eye - &nn) / dist;
                for i in 0..2 {
                    for j in 0..2 {
                        hxx[(i, j)] += f2 * dpen[i] * dpen[j] + f1 * hess_pen[(i, j)];
                    }
                }
            }
        }
        EnvKind::TwoLink {
            w_ee, w_vel, w_u, ..
        } => {
            for i in 0..2 {
                value += w_ee * x[4 + i] * x[4 + i] + w_vel * x[2 + i] * x[2 + i] + w_u * u[i] * u[i];
                gx[4 + i] += 2.0 * w_ee * x[4 + i];
                gx[2 + i] += 2.0 * w_vel * x[2 + i];
                gu[i] += 2.0 * w_u * u[i];
                hxx[(4 + i, 4 + i)] += 2.0 * w_ee;
                hxx[(2 + i, 2 + i)] += 2.0 * w_vel;
                huu[(i, i)] += 2.0 * w_u;
            }
        }
    }
    (value, gx, gu, hxx, huu)
}

/// Pointwise cost.
pub fn cost(spec: &EnvSpec, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    cost_terms(spec, x, u).0
}

/// Second-order expansion of the cost along a trajectory.
pub fn cost_expand(spec: &EnvSpec, states: &[DVector<f64>], actions: &[DVector<f64>]) -> Result<QuadraticCostExpansion> {
    if actions.len() != spec.horizon || states.len() < actions.len() {
        return Err(MdgpsError::Dimension {
            context: "cost_expand trajectory",
            expected: spec.horizon,
            actual: actions.len(),
        });
    }
    let horizon = actions.len();
    let mut exp = QuadraticCostExpansion::zeros(horizon, spec.state_dim(), spec.action_dim());
    for t in 0..horizon {
        let (value, gx, gu, hxx, huu) = cost_terms(spec, &states[t], &actions[t]);
        exp.constant[t] = value;
        exp.grad_x[t] = gx;
        exp.grad_u[t] = gu;
        exp.hess_xx[t] = symmetrize(&hxx);
        exp.hess_uu[t] = symmetrize(&huu);
        // No cross terms in either task family.
        exp.x_nom[t] = states[t].clone();
        exp.u_nom[t] = actions[t].clone();
    }
    Ok(exp)
}

/// Something that can act in an environment.
#[derive(Clone, Copy)]
pub enum Actor<'a> {
    Local(&'a TimeVaryingLinGauss),
    Global(&'a GlobalPolicy),
}

impl<'a> Actor<'a> {
    fn mean_and_chol(&self, t: usize, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            Actor::Local(ctrl) => Ok((ctrl.mean(t, x), ctrl.cov_pd(t).chol_lower())),
            Actor::Global(policy) => {
                let mean = policy.mean(x)?;
                let chol = nalgebra::Cholesky::new(policy.covariance().clone())
                    .ok_or_else(|| MdgpsError::NotPositiveDefinite {
                        context: "global policy covariance".into(),
                    })?;
                Ok((mean, chol.l()))
            }
        }
    }

    fn check_dims(&self, spec: &EnvSpec) -> Result<()> {
        let (in_dim, out_dim) = match self {
            Actor::Local(ctrl) => (ctrl.in_dim(), ctrl.out_dim()),
            Actor::Global(policy) => (policy.state_dim(), policy.action_dim()),
        };
        if in_dim != spec.state_dim() || out_dim != spec.action_dim() {
            return Err(MdgpsError::Dimension {
                context: "actor/environment dims",
                expected: spec.state_dim() + spec.action_dim(),
                actual: in_dim + out_dim,
            });
        }
        Ok(())
    }
}

/// One sampled episode.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub condition: usize,
    pub seed: u64,
    /// States x_1..x_{T+1} (the terminal state is kept for dynamics
    /// fitting).
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub total_cost: f64,
}

impl Rollout {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RolloutRecord {
    condition: usize,
    seed: u64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    costs: Vec<f64>,
    total_cost: f64,
}

/// Serialize rollouts to a structured text document for post-hoc
/// analysis.
pub fn save_rollouts(path: &std::path::Path, rollouts: &[Rollout]) -> Result<()> {
    let records: Vec<RolloutRecord> = rollouts
        .iter()
        .map(|r| RolloutRecord {
            condition: r.condition,
            seed: r.seed,
            states: r.states.iter().map(|s| s.iter().cloned().collect()).collect(),
            actions: r.actions.iter().map(|a| a.iter().cloned().collect()).collect(),
            costs: r.costs.clone(),
            total_cost: r.total_cost,
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&records)?)?;
    Ok(())
}

/// Read rollouts back from [`save_rollouts`] output.
pub fn load_rollouts(path: &std::path::Path) -> Result<Vec<Rollout>> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<RolloutRecord> = serde_json::from_str(&text)?;
    Ok(records
        .into_iter()
        .map(|r| Rollout {
            condition: r.condition,
            seed: r.seed,
            states: r.states.into_iter().map(DVector::from_vec).collect(),
            actions: r.actions.into_iter().map(DVector::from_vec).collect(),
            total_cost: r.total_cost,
            costs: r.costs,
        })
        .collect())
}

/// Distance-to-goal of the final state (the Figure-style metric).
pub fn final_distance(spec: &EnvSpec, rollout: &Rollout) -> f64 {
    let x = rollout.final_state();
    match spec.kind {
        EnvKind::PointMass { .. } => (x[0] * x[0] + x[1] * x[1]).sqrt(),
        EnvKind::TwoLink { .. } => (x[4] * x[4] + x[5] * x[5]).sqrt(),
    }
}

/// Sample independent rollouts from one condition. Per-rollout seeds are
/// derived as `split_seed(master_seed, [condition, sample])`; per step the
/// action noise is drawn before the dynamics noise.
pub fn sample_rollouts(
    spec: &EnvSpec,
    actor: Actor<'_>,
    condition: usize,
    n_samples: usize,
    master_seed: u64,
) -> Result<Vec<Rollout>> {
    actor.check_dims(spec)?;
    if condition >= spec.n_conditions() {
        return Err(MdgpsError::Environment(format!(
            "condition {condition} out of range ({} conditions)",
            spec.n_conditions()
        )));
    }
    if let Actor::Local(ctrl) = actor {
        if ctrl.horizon() != spec.horizon {
            return Err(MdgpsError::Dimension {
                context: "sample_rollouts controller horizon",
                expected: spec.horizon,
                actual: ctrl.horizon(),
            });
        }
    }
    let mut rollouts = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let seed = split_seed(master_seed, &[condition as u64, j as u64]);
        let mut rng = crate::rng::rng_from(seed, &[]);
        let mut x = spec.init_state(condition).clone();
        // Initial-state noise enters on the dynamical coordinates; the
        // target-relative coordinates stay consistent with the pose.
        match &spec.kind {
            EnvKind::PointMass { .. } => {
                for i in 0..4 {
                    x[i] += spec.init_noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            EnvKind::TwoLink { l1, l2, .. } => {
                let ee0 = two_link_fk(*l1, *l2, x[0], x[1]);
                let target = Vector2::new(ee0.x - x[4], ee0.y - x[5]);
                for i in 0..4 {
                    x[i] += spec.init_noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                let ee = two_link_fk(*l1, *l2, x[0], x[1]);
                x[4] = ee.x - target.x;
                x[5] = ee.y - target.y;
            }
        }

        let mut states = Vec::with_capacity(spec.horizon + 1);
        let mut actions = Vec::with_capacity(spec.horizon);
        let mut costs = Vec::with_capacity(spec.horizon);
        for t in 0..spec.horizon {
            let (mean, chol_l) = actor.mean_and_chol(t, &x)?;
            let z = DVector::from_fn(spec.action_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = &mean + &chol_l * z;
            let noise = DVector::from_fn(spec.noise_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let step_cost = cost(spec, &x, &u);
            let next = env_step(spec, &x, &u, &noise).map_err(|e| {
                MdgpsError::Environment(format!("condition {condition}, sample {j}, step {t}: {e}"))
            })?;
            states.push(x);
            actions.push(u);
            costs.push(step_cost);
            x = next;
        }
        states.push(x);
        let total_cost = costs.iter().sum();
        rollouts.push(Rollout {
            condition,
            seed,
            states,
            actions,
            costs,
            total_cost,
        });
    }
    Ok(rollouts)
}

/// Fraction of rollouts whose final state satisfies the success predicate.
/// An empty list is an error, not a zero rate.
pub fn success_rate(spec: &EnvSpec, rollouts: &[Rollout]) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(MdgpsError::Empty("success_rate rollouts"));
    }
    let hits = rollouts
        .iter()
        .filter(|r| final_distance(spec, r) < spec.success_threshold)
        .count();
    Ok(hits as f64 / rollouts.len() as f64)
}

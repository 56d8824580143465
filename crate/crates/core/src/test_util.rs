//! Random-instance generators shared by the unit and acceptance tests.
#![doc(hidden)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::trajdist::{symmetrize, TimeVaryingLinGauss};

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random symmetric positive definite matrix `A A^T + 0.1 I`.
pub fn random_psd(rng: &mut impl Rng, dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
    symmetrize(&(&a * a.transpose() + DMatrix::identity(dim, dim) * 0.1))
}

/// Random controller-shaped linear Gaussian (out = action, in = state).
pub fn random_lin_gauss(
    rng: &mut impl Rng,
    horizon: usize,
    in_dim: usize,
    out_dim: usize,
) -> TimeVaryingLinGauss {
    let mut gains = Vec::with_capacity(horizon);
    let mut biases = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        gains.push(DMatrix::from_fn(out_dim, in_dim, |_, _| {
            0.5 * rng.sample::<f64, _>(StandardNormal)
        }));
        biases.push(random_vector(rng, out_dim));
        covs.push(random_psd(rng, out_dim));
    }
    TimeVaryingLinGauss::new(gains, biases, covs).unwrap()
}

/// Draw from N(mean, cov) via the Cholesky factor.
pub fn sample_mvn(rng: &mut impl Rng, mean: &DVector<f64>, cov: &DMatrix<f64>) -> DVector<f64> {
    if cov.amax() == 0.0 {
        return mean.clone();
    }
    let chol = nalgebra::Cholesky::new(symmetrize(cov))
        .unwrap_or_else(|| nalgebra::Cholesky::new(symmetrize(cov) + DMatrix::identity(cov.nrows(), cov.ncols()) * 1e-12).expect("PSD"));
    let z = random_vector(rng, mean.len());
    mean + chol.l() * z
}

/// Small finite MDPs with exact trajectory enumeration. These are test
/// oracles: every quantity is computed by brute force over all
/// trajectories, independently of any library bound or formula.
pub mod tabular {
    use rand::Rng;

    /// Finite-horizon tabular MDP with time-varying transitions and costs.
    pub struct TabularMdp {
        pub n_states: usize,
        pub n_actions: usize,
        pub horizon: usize,
        /// Initial state distribution.
        pub init: Vec<f64>,
        /// trans[t][s][a][s'] = P(s' | s, a) at step t.
        pub trans: Vec<Vec<Vec<Vec<f64>>>>,
        /// cost[t][s][a] >= 0.
        pub cost: Vec<Vec<Vec<f64>>>,
    }

    /// policy[t][s][a] = P(a | s) at step t.
    pub type TabularPolicy = Vec<Vec<Vec<f64>>>;

    fn random_dist(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }

    /// Random MDP plus two random policies over it.
    pub fn random_instance(
        rng: &mut impl Rng,
        max_states: usize,
        max_actions: usize,
        max_horizon: usize,
    ) -> (TabularMdp, TabularPolicy, TabularPolicy) {
        let n_states = rng.random_range(2..=max_states);
        let n_actions = rng.random_range(2..=max_actions);
        let horizon = rng.random_range(2..=max_horizon);
        let init = random_dist(rng, n_states);
        let trans = (0..horizon)
            .map(|_| {
                (0..n_states)
                    .map(|_| (0..n_actions).map(|_| random_dist(rng, n_states)).collect())
                    .collect()
            })
            .collect();
        let cost = (0..horizon)
            .map(|_| {
                (0..n_states)
                    .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        let mdp = TabularMdp {
            n_states,
            n_actions,
            horizon,
            init,
            trans,
            cost,
        };
        let mut mk_policy = || -> TabularPolicy {
            (0..horizon)
                .map(|_| (0..n_states).map(|_| random_dist(rng, n_actions)).collect())
                .collect()
        };
        let p = mk_policy();
        let q = mk_policy();
        (mdp, p, q)
    }

    impl TabularMdp {
        /// Exact state marginals by full enumeration over all
        /// state-action trajectories.
        pub fn state_marginals(&self, policy: &TabularPolicy) -> Vec<Vec<f64>> {
            let mut marg = vec![vec![0.0; self.n_states]; self.horizon];
            // Recursive enumeration of every trajectory prefix.
            fn recurse(
                mdp: &TabularMdp,
                policy: &TabularPolicy,
                t: usize,
                s: usize,
                prob: f64,
                marg: &mut Vec<Vec<f64>>,
            ) {
                if t == mdp.horizon {
                    return;
                }
                marg[t][s] += prob;
                for a in 0..mdp.n_actions {
                    let pa = policy[t][s][a];
                    if pa == 0.0 {
                        continue;
                    }
                    for s2 in 0..mdp.n_states {
                        let pt = mdp.trans[t][s][a][s2];
                        if pt > 0.0 {
                            recurse(mdp, policy, t + 1, s2, prob * pa * pt, marg);
                        }
                    }
                }
            }
            for s in 0..self.n_states {
                if self.init[s] > 0.0 {
                    recurse(self, policy, 0, s, self.init[s], &mut marg);
                }
            }
            marg
        }

        /// Exact per-step expected costs under a policy (enumeration).
        pub fn expected_step_costs(&self, policy: &TabularPolicy) -> Vec<f64> {
            let marg = self.state_marginals(policy);
            (0..self.horizon)
                .map(|t| {
                    (0..self.n_states)
                        .map(|s| {
                            (0..self.n_actions)
                                .map(|a| marg[t][s] * policy[t][s][a] * self.cost[t][s][a])
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        }

        /// Max over all (s, a) of the step cost.
        pub fn max_step_cost(&self, t: usize) -> f64 {
            self.cost[t]
                .iter()
                .flat_map(|row| row.iter().cloned())
                .fold(f64::NEG_INFINITY, f64::max)
        }

        /// Max over states of KL(p(.|s) || q(.|s)) at step t.
        pub fn max_step_kl(&self, p: &TabularPolicy, q: &TabularPolicy, t: usize) -> f64 {
            (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| {
                            let pa = p[t][s][a];
                            if pa == 0.0 {
                                0.0
                            } else {
                                pa * (pa / q[t][s][a]).ln()
                            }
                        })
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

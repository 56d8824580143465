//! Flat, typed experiment configuration.
//!
//! Configs are flat key-value text; every field has an explicit default
//! and the checked-in files under `configs/` spell all of them out so a
//! run's provenance is diff-able.

use serde::{Deserialize, Serialize};

use crate::envs::EnvParams;
use crate::error::{MdgpsError, Result};
use crate::fitting::GmmSettings;
use crate::mdgps::{AlgorithmConfig, SStepSolver, SamplingMode, StepClamps, StepRule};
use crate::policy::{GlobalPolicy, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingName {
    OnPolicy,
    OffPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRuleName {
    Classic,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArch {
    Affine,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SStepSolverName {
    Sgd,
    ExactAffine,
}

impl std::fmt::Display for SamplingName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingName::OnPolicy => write!(f, "on_policy"),
            SamplingName::OffPolicy => write!(f, "off_policy"),
        }
    }
}

impl std::fmt::Display for StepRuleName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepRuleName::Classic => write!(f, "classic"),
            StepRuleName::Global => write!(f, "global"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: String,
    pub conditions: usize,
    pub samples_per_condition: usize,
    pub iterations: usize,
    pub sampling: SamplingName,
    pub step_rule: StepRuleName,
    pub initial_epsilon: f64,
    pub epsilon_rel_clamp: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub policy_arch: PolicyArch,
    pub init_policy_std: f64,
    pub sgd_batch: usize,
    pub sgd_steps: usize,
    pub sgd_learning_rate: f64,
    pub sgd_momentum: f64,
    pub gmm_components: usize,
    pub gmm_max_em_iters: usize,
    pub gmm_restarts: usize,
    pub gmm_prior_strength: f64,
    pub horizon: usize,
    pub process_noise_std: f64,
    pub init_noise_std: f64,
    /// Success-distance threshold; omit to use the task default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_threshold: Option<f64>,
    pub exact_dynamics: bool,
    pub s_step_solver: SStepSolverName,
    pub fit_policy_on_actions: bool,
    pub eval_samples: usize,
    /// Serialize each iteration's training rollouts into the output
    /// directory.
    pub save_rollouts: bool,
    pub master_seed: u64,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: "pointmass".into(),
            conditions: 5,
            samples_per_condition: 5,
            iterations: 12,
            sampling: SamplingName::OffPolicy,
            step_rule: StepRuleName::Classic,
            initial_epsilon: 2.0,
            epsilon_rel_clamp: 5.0,
            epsilon_min: 1e-4,
            epsilon_max: 10.0,
            policy_arch: PolicyArch::Mlp,
            init_policy_std: 1.0,
            sgd_batch: 32,
            sgd_steps: 2000,
            sgd_learning_rate: 1e-3,
            sgd_momentum: 0.9,
            gmm_components: 4,
            gmm_max_em_iters: 30,
            gmm_restarts: 2,
            gmm_prior_strength: 1.0,
            horizon: 100,
            process_noise_std: 1e-3,
            init_noise_std: 0.01,
            success_threshold: None,
            exact_dynamics: false,
            s_step_solver: SStepSolverName::Sgd,
            fit_policy_on_actions: false,
            eval_samples: 5,
            save_rollouts: false,
            master_seed: 0,
            output_dir: "runs/out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| MdgpsError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MdgpsError::Config(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conditions", self.conditions as f64),
            ("samples_per_condition", self.samples_per_condition as f64),
            ("iterations", self.iterations as f64),
            ("initial_epsilon", self.initial_epsilon),
            ("epsilon_rel_clamp", self.epsilon_rel_clamp),
            ("epsilon_min", self.epsilon_min),
            ("epsilon_max", self.epsilon_max),
            ("init_policy_std", self.init_policy_std),
            ("sgd_batch", self.sgd_batch as f64),
            ("sgd_learning_rate", self.sgd_learning_rate),
            ("gmm_components", self.gmm_components as f64),
            ("gmm_max_em_iters", self.gmm_max_em_iters as f64),
            ("gmm_restarts", self.gmm_restarts as f64),
            ("horizon", self.horizon as f64),
            ("eval_samples", self.eval_samples as f64),
        ];
        for (name, value) in positive {
            if value <= 0.0 || value.is_nan() {
                return Err(MdgpsError::Config(format!("field '{name}' must be positive, got {value}")));
            }
        }
        if self.sgd_momentum < 0.0 || self.sgd_momentum >= 1.0 {
            return Err(MdgpsError::Config(format!(
                "field 'sgd_momentum' must lie in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        if self.gmm_prior_strength < 0.0 {
            return Err(MdgpsError::Config("field 'gmm_prior_strength' must be nonnegative".into()));
        }
        if self.process_noise_std < 0.0 || self.init_noise_std < 0.0 {
            return Err(MdgpsError::Config("noise standard deviations must be nonnegative".into()));
        }
        if self.epsilon_min >= self.epsilon_max {
            return Err(MdgpsError::Config("epsilon_min must be below epsilon_max".into()));
        }
        if self.initial_epsilon < self.epsilon_min || self.initial_epsilon > self.epsilon_max {
            return Err(MdgpsError::Config(format!(
                "initial_epsilon {} outside [{}, {}]",
                self.initial_epsilon, self.epsilon_min, self.epsilon_max
            )));
        }
        if let Some(th) = self.success_threshold {
            if th <= 0.0 || th.is_nan() {
                return Err(MdgpsError::Config("success_threshold must be positive".into()));
            }
        }
        if self.s_step_solver == SStepSolverName::ExactAffine && self.policy_arch != PolicyArch::Affine {
            return Err(MdgpsError::Config(
                "s_step_solver = exact_affine requires policy_arch = affine".into(),
            ));
        }
        Ok(())
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams {
            horizon: self.horizon,
            n_conditions: self.conditions,
            process_noise_std: self.process_noise_std,
            init_noise_std: self.init_noise_std,
            success_threshold: self.success_threshold,
        }
    }

    pub fn algorithm_config(&self) -> AlgorithmConfig {
        AlgorithmConfig {
            sampling: match self.sampling {
                SamplingName::OnPolicy => SamplingMode::OnPolicy,
                SamplingName::OffPolicy => SamplingMode::OffPolicy,
            },
            step_rule: match self.step_rule {
                StepRuleName::Classic => StepRule::Classic,
                StepRuleName::Global => StepRule::Global,
            },
            initial_epsilon: self.initial_epsilon,
            clamps: StepClamps {
                relative: self.epsilon_rel_clamp,
                abs_min: self.epsilon_min,
                abs_max: self.epsilon_max,
            },
            samples_per_condition: self.samples_per_condition,
            gmm: GmmSettings {
                n_components: self.gmm_components,
                max_em_iters: self.gmm_max_em_iters,
                restarts: self.gmm_restarts,
                strength: self.gmm_prior_strength,
            },
            sgd: SgdConfig {
                batch_size: self.sgd_batch,
                steps: self.sgd_steps,
                learning_rate: self.sgd_learning_rate,
                momentum: self.sgd_momentum,
            },
            s_step_solver: match self.s_step_solver {
                SStepSolverName::Sgd => SStepSolver::Sgd,
                SStepSolverName::ExactAffine => SStepSolver::ExactAffine,
            },
            exact_dynamics: self.exact_dynamics,
            fit_policy_on_actions: self.fit_policy_on_actions,
            master_seed: self.master_seed,
            eval_samples: self.eval_samples,
        }
    }

    /// Build the initial global policy for an environment.
    pub fn build_policy(&self, env: &crate::envs::EnvSpec) -> Result<GlobalPolicy> {
        match self.policy_arch {
            PolicyArch::Affine => GlobalPolicy::zero_affine(
                env.action_dim(),
                env.selector().clone(),
                self.init_policy_std,
            ),
            PolicyArch::Mlp => GlobalPolicy::mlp_init(
                env.action_dim(),
                env.selector().clone(),
                self.init_policy_std,
                self.master_seed,
            ),
        }
    }
}

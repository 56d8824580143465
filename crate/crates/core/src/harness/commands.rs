//! The `train`, `eval`, and `table` commands behind the CLI.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::envs::{self, Actor, EnvSpec};
use crate::error::{MdgpsError, Result};
use crate::harness::config::{ExperimentConfig, SamplingName, StepRuleName};
use crate::harness::runlog::{RunLog, RunLogWriter};
use crate::mdgps::{run_iteration, AlgorithmState};
use crate::policy::{load_checkpoint, save_checkpoint};
use crate::rng::stream;

/// CLI overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub sampling: Option<SamplingName>,
    pub step_rule: Option<StepRuleName>,
    pub epsilon: Option<f64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations_completed: usize,
    pub final_success_rate: f64,
    pub final_global_mean_return: f64,
    pub final_mean_distance: f64,
    /// Per-iteration, per-condition KL budgets.
    pub epsilon_trace: Vec<Vec<f64>>,
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("policy_iter_{iteration:03}.json"))
}

/// Run a full training experiment: one run log row and one policy
/// checkpoint per iteration, plus a summary document at the end. A mid-run
/// failure keeps the rows already written and returns the error.
pub fn cmd_train(options: &TrainOptions) -> Result<TrainSummary> {
    let mut config = ExperimentConfig::load(&options.config_path)?;
    if let Some(seed) = options.seed {
        config.master_seed = seed;
    }
    if let Some(iters) = options.iterations {
        config.iterations = iters;
    }
    if let Some(sampling) = options.sampling {
        config.sampling = sampling;
    }
    if let Some(rule) = options.step_rule {
        config.step_rule = rule;
    }
    if let Some(eps) = options.epsilon {
        config.initial_epsilon = eps;
    }
    if let Some(out) = &options.output {
        config.output_dir = out.display().to_string();
    }
    config.validate()?;

    let out_dir = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    // The resolved config is part of the run's provenance.
    config.save(&out_dir.join("config_resolved.cfg"))?;

    let env = EnvSpec::by_name(&config.env, &config.env_params())?;
    let policy = config.build_policy(&env)?;
    let mut state = AlgorithmState::new(env, config.algorithm_config(), policy)?;

    let meta = vec![
        ("env".to_string(), config.env.clone()),
        ("conditions".to_string(), state.env.n_conditions().to_string()),
        ("samples_per_condition".to_string(), config.samples_per_condition.to_string()),
        ("sampling".to_string(), config.sampling.to_string()),
        ("step_rule".to_string(), config.step_rule.to_string()),
        ("seed".to_string(), config.master_seed.to_string()),
        ("horizon".to_string(), config.horizon.to_string()),
    ];
    let mut writer = RunLogWriter::create(
        &out_dir.join("runlog.csv"),
        state.env.n_conditions(),
        &meta,
    )?;

    let mut epsilon_trace = Vec::with_capacity(config.iterations);
    let mut last = None;
    for k in 1..=config.iterations {
        let started = Instant::now();
        let record = run_iteration(&mut state)?;
        let wall = started.elapsed().as_secs_f64();
        writer.write_row(&record, wall)?;
        save_checkpoint(&state.policy, &checkpoint_path(&out_dir, k))?;
        if config.save_rollouts {
            let flat: Vec<_> = state
                .last_samples()
                .iter()
                .flat_map(|per_cond| per_cond.iter().cloned())
                .collect();
            envs::save_rollouts(&out_dir.join(format!("rollouts_iter_{k:03}.json")), &flat)?;
        }
        epsilon_trace.push(state.epsilon.clone());
        log::info!(
            "iter {k:3}: global return {:.4}, success {:.2}, distance {:.4}",
            record.global_mean_return,
            record.success_rate,
            record.mean_final_distance
        );
        last = Some(record);
    }
    let last = last.ok_or_else(|| MdgpsError::Internal("no iterations ran".into()))?;
    let summary = TrainSummary {
        iterations_completed: config.iterations,
        final_success_rate: last.success_rate,
        final_global_mean_return: last.global_mean_return,
        final_mean_distance: last.mean_final_distance,
        epsilon_trace,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub env: String,
    pub n_rollouts: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Overrides for the environment build; defaults match training.
    pub horizon: Option<usize>,
    pub conditions: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: String,
    pub n_rollouts: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub min_final_distance: f64,
    pub max_final_distance: f64,
}

/// Evaluate a policy checkpoint on an environment.
pub fn cmd_eval(options: &EvalOptions) -> Result<EvalSummary> {
    if options.n_rollouts == 0 {
        return Err(MdgpsError::InvalidInput(
            "eval requires n_rollouts > 0".into(),
        ));
    }
    let policy = load_checkpoint(&options.checkpoint)?;
    let mut params = crate::envs::EnvParams::default();
    if let Some(h) = options.horizon {
        params.horizon = h;
    }
    if let Some(c) = options.conditions {
        params.n_conditions = c;
    }
    let env = EnvSpec::by_name(&options.env, &params)?;
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        return Err(MdgpsError::Dimension {
            context: "eval checkpoint/environment dims",
            expected: env.state_dim() + env.action_dim(),
            actual: policy.state_dim() + policy.action_dim(),
        });
    }
    let mut rollouts = Vec::new();
    for i in 0..env.n_conditions() {
        rollouts.extend(envs::sample_rollouts(
            &env,
            Actor::Global(&policy),
            i,
            options.n_rollouts,
            crate::rng::split_seed(options.seed, &[stream::EVAL_GLOBAL]),
        )?);
    }
    let distances: Vec<f64> = rollouts.iter().map(|r| envs::final_distance(&env, r)).collect();
    let summary = EvalSummary {
        env: options.env.clone(),
        n_rollouts: options.n_rollouts,
        mean_return: rollouts.iter().map(|r| r.total_cost).sum::<f64>() / rollouts.len() as f64,
        success_rate: envs::success_rate(&env, &rollouts)?,
        mean_final_distance: distances.iter().sum::<f64>() / distances.len() as f64,
        min_final_distance: distances.iter().cloned().fold(f64::INFINITY, f64::min),
        max_final_distance: distances.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    if let Some(path) = &options.output {
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

/// Iteration checkpoints reported by the success-rate table.
pub const TABLE_ITERATIONS: [usize; 4] = [3, 6, 9, 12];

/// Build a success-rate table over run directories at iterations
/// {3, 6, 9, 12}; cells for missing iterations show `--`, and a mean row
/// is appended when several runs are given.
pub fn cmd_table(run_dirs: &[PathBuf]) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(MdgpsError::Empty("table run directories"));
    }
    let mut lines = Vec::new();
    let mut per_run: Vec<Vec<Option<f64>>> = Vec::new();
    let width = run_dirs
        .iter()
        .map(|d| d.display().to_string().len())
        .max()
        .unwrap()
        .max(4);
    let header = format!(
        "{:<width$}  {}",
        "run",
        TABLE_ITERATIONS
            .iter()
            .map(|k| format!("{:>8}", format!("iter{k}")))
            .collect::<Vec<_>>()
            .join("  ")
    );
    lines.push(header);
    for dir in run_dirs {
        let log = RunLog::load(&dir.join("runlog.csv"))?;
        let cells: Vec<Option<f64>> = TABLE_ITERATIONS
            .iter()
            .map(|&k| log.value_at_iteration(k, "success_rate"))
            .collect();
        let rendered = cells
            .iter()
            .map(|c| match c {
                Some(v) => format!("{:>8.3}", v),
                None => format!("{:>8}", "--"),
            })
            .collect::<Vec<_>>()
            .join("  ");
        lines.push(format!("{:<width$}  {rendered}", dir.display().to_string()));
        per_run.push(cells);
    }
    if run_dirs.len() > 1 {
        let mean_cells: Vec<String> = (0..TABLE_ITERATIONS.len())
            .map(|j| {
                let have: Vec<f64> = per_run.iter().filter_map(|r| r[j]).collect();
                if have.len() == per_run.len() {
                    format!("{:>8.3}", have.iter().sum::<f64>() / have.len() as f64)
                } else {
                    format!("{:>8}", "--")
                }
            })
            .collect();
        lines.push(format!("{:<width$}  {}", "mean", mean_cells.join("  ")));
    }
    Ok(lines.join("\n"))
}

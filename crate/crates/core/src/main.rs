use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mdgps::harness::config::{SamplingName, StepRuleName};
use mdgps::harness::{cmd_eval, cmd_table, cmd_train, EvalOptions, TrainOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplingArg {
    #[value(name = "on_policy")]
    OnPolicy,
    #[value(name = "off_policy")]
    OffPolicy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StepRuleArg {
    Classic,
    Global,
}

#[derive(Parser)]
#[command(
    name = "mdgps",
    about = "KL-constrained trajectory optimization with supervised policy projection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Iteration-count override.
        #[arg(long)]
        iterations: Option<usize>,
        /// Sample from the global or the local policies.
        #[arg(long, value_enum)]
        sampling: Option<SamplingArg>,
        /// Step-size adaptation rule.
        #[arg(long = "step-rule", value_enum)]
        step_rule: Option<StepRuleArg>,
        /// Initial KL budget override.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Output directory override.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint on an environment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 20)]
        n_rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the structured summary.
        #[arg(long, default_value = "eval_summary.json")]
        output: PathBuf,
        /// Horizon override for the evaluation environment.
        #[arg(long)]
        horizon: Option<usize>,
        /// Condition-count override.
        #[arg(long)]
        conditions: Option<usize>,
    },
    /// Success-rate table over run directories at iterations 3/6/9/12.
    Table {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn run() -> mdgps::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            seed,
            iterations,
            sampling,
            step_rule,
            epsilon,
            output,
        } => {
            let options = TrainOptions {
                config_path: config,
                seed,
                iterations,
                sampling: sampling.map(|s| match s {
                    SamplingArg::OnPolicy => SamplingName::OnPolicy,
                    SamplingArg::OffPolicy => SamplingName::OffPolicy,
                }),
                step_rule: step_rule.map(|r| match r {
                    StepRuleArg::Classic => StepRuleName::Classic,
                    StepRuleArg::Global => StepRuleName::Global,
                }),
                epsilon,
                output,
            };
            let summary = cmd_train(&options)?;
            println!(
                "completed {} iterations: success rate {:.3}, mean return {:.4}, mean distance {:.4}",
                summary.iterations_completed,
                summary.final_success_rate,
                summary.final_global_mean_return,
                summary.final_mean_distance
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            env,
            n_rollouts,
            seed,
            output,
            horizon,
            conditions,
        } => {
            let summary = cmd_eval(&EvalOptions {
                checkpoint,
                env,
                n_rollouts,
                seed,
                output: Some(output),
                horizon,
                conditions,
            })?;
            println!(
                "env {}: mean return {:.4}, success rate {:.3}, final distance mean {:.4} (min {:.4}, max {:.4})",
                summary.env,
                summary.mean_return,
                summary.success_rate,
                summary.mean_final_distance,
                summary.min_final_distance,
                summary.max_final_distance
            );
            Ok(())
        }
        Command::Table { dirs } => {
            println!("{}", cmd_table(&dirs)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MDGPS_LOG_LEVEL"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line entry point: dataset generation, pre-training, fine-tuning,
//! evaluation, trajectory export and ablation reports.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure. Log
//! verbosity follows `RUST_LOG` (default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use diffplan::config::Config;
use diffplan::datagen::{generate_dataset, manifest_path, Dataset};
use diffplan::eval::{
    ablation_report, evaluate, export_trajectories, format_report, parse_report_input, DiffusionPolicy,
};
use diffplan::finetune::{finetune_task, FinetuneOutputs};
use diffplan::pretrain::{load_for_suite, pretrain, Outputs};
use diffplan::tasks::{suite_by_name, TaskSuite, DEFAULT_EPISODE_LENGTH};
use diffplan::Error;

#[derive(Parser)]
#[command(name = "diffplan", version, about = "Diffusion action planner: pre-training, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed; overrides the `seed` config key.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> diffplan::Result<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Config::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the noisy scripted controller on every task and write a dataset.
    GenData {
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long, required = true)]
        episodes_per_task: usize,
        /// Mixing weight of uniform action noise, in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EPISODE_LENGTH)]
        episode_length: usize,
        #[arg(long, required = true)]
        out: PathBuf,
    },
    /// Train a planner on a dataset.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        data: PathBuf,
        #[arg(long, required = true)]
        out: PathBuf,
        /// Metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on one task.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        #[arg(long, required = true)]
        task: String,
        #[arg(long, required = true)]
        out: PathBuf,
        /// Metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Report success rate and mean return of a checkpoint on one task.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        #[arg(long, required = true)]
        task: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Roll out a checkpoint and write the visited states and actions as CSV.
    ExportTraj {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        #[arg(long, required = true)]
        task: String,
        #[arg(short = 'n', required = true)]
        n: usize,
        #[arg(long, required = true)]
        out: PathBuf,
    },
    /// Summarize fine-tuning metrics files per variant.
    Report {
        /// Metrics CSVs, each `PATH` or `LABEL=PATH`. Without a label, runs
        /// are grouped by file stem minus a trailing seed tag like `_seed2`.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn suite_for(config: &Config) -> diffplan::Result<TaskSuite> {
    suite_by_name(&config.env.suite, config.env.episode_length)
}

fn run(command: Command) -> diffplan::Result<()> {
    match command {
        Command::GenData {
            suite,
            episodes_per_task,
            noise,
            seed,
            episode_length,
            out,
        } => {
            let suite = suite_by_name(&suite, episode_length)?;
            let ds = generate_dataset(&suite, episodes_per_task, noise, seed)?;
            ds.write(&out)?;
            let manifest = manifest_path(&out);
            ds.write_manifest(&manifest)?;
            for (task, s) in ds.stats() {
                println!(
                    "{task}: {} episodes, success {:.3}, mean return {:.2}",
                    s.episodes, s.success_rate, s.mean_return
                );
            }
            info!("wrote {} records to {} ({})", ds.len(), out.display(), manifest.display());
        }
        Command::Pretrain { cfg, data, out, metrics } => {
            let config = cfg.load()?;
            let suite = suite_for(&config)?;
            let ds = Dataset::read(&data)?;
            let metrics = metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.csv"));
            let o = pretrain(
                &config,
                &ds,
                &suite,
                &Outputs {
                    checkpoint: Some(out.clone()),
                    metrics: Some(metrics.clone()),
                },
            )?;
            println!(
                "loss {:.4} -> {:.4}; checkpoint {}, metrics {}",
                o.initial_loss().unwrap_or(f64::NAN),
                o.final_loss_avg().unwrap_or(f64::NAN),
                out.display(),
                metrics.display()
            );
        }
        Command::Finetune {
            cfg,
            ckpt,
            task,
            out,
            metrics,
        } => {
            let config = cfg.load()?;
            let suite = suite_for(&config)?;
            let spec = suite.get(&task)?;
            let planner = load_for_suite(&ckpt, &suite)?;
            let metrics = metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.csv"));
            let o = finetune_task(
                planner,
                spec,
                &config,
                &FinetuneOutputs {
                    checkpoint: Some(out.clone()),
                    metrics: Some(metrics.clone()),
                },
            )?;
            let last = o.rows.last();
            println!(
                "{task}: {} episodes, {} env steps, rolling success {:.3}; checkpoint {}, metrics {}",
                o.rows.len(),
                last.map_or(0, |r| r.env_steps),
                last.map_or(0.0, |r| r.rolling_success_rate),
                out.display(),
                metrics.display()
            );
        }
        Command::Eval {
            cfg,
            ckpt,
            task,
            episodes,
        } => {
            let config = cfg.load()?;
            let suite = suite_for(&config)?;
            let spec = suite.get(&task)?;
            let planner = load_for_suite(&ckpt, &suite)?;
            let plan = config.eval_plan(&planner.schedule)?;
            let mut policy = DiffusionPolicy { planner: &planner, plan };
            let n = episodes.unwrap_or(config.eval.episodes);
            let s = evaluate(&mut policy, spec, n, config.seed)?;
            println!(
                "task={} episodes={n} success_rate={:.4} mean_return={:.4}",
                s.task_id, s.success_rate, s.mean_return
            );
        }
        Command::ExportTraj {
            cfg,
            ckpt,
            task,
            n,
            out,
        } => {
            let config = cfg.load()?;
            let suite = suite_for(&config)?;
            let spec = suite.get(&task)?;
            let planner = load_for_suite(&ckpt, &suite)?;
            let plan = config.eval_plan(&planner.schedule)?;
            let mut policy = DiffusionPolicy { planner: &planner, plan };
            let records = export_trajectories(&mut policy, spec, n, config.seed, &out)?;
            println!("wrote {} episodes to {}", records.len(), out.display());
        }
        Command::Report { inputs, out } => {
            let inputs: Vec<_> = inputs.iter().map(|a| parse_report_input(a)).collect();
            let table = format_report(&ablation_report(&inputs)?);
            print!("{table}");
            if let Some(out) = out {
                std::fs::write(&out, &table)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Format(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Stage-one training: noise regression over the mixed multi-task dataset.
//!
//! Metrics CSV columns: `step,loss,loss_avg` followed by one `sr_<task>`
//! column per task, filled only on rows where success was evaluated.
//! `loss` is the batch loss at that step (before its update) and `loss_avg`
//! the mean batch loss since the previous row.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::datagen::Dataset;
use crate::diffusion::pretrain_loss_batch;
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, DiffusionPolicy};
use crate::net::{Adam, LayerStack};
use crate::planner::Planner;
use crate::seed::derive_seed;
use crate::tasks::TaskSuite;

const INIT_TAG: u64 = 0x1A17;
const PRETRAIN_TAG: u64 = 0x9E7A;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
    pub loss_avg: f64,
    pub success: Option<Vec<f64>>,
}

pub struct PretrainOutcome {
    pub planner: Planner,
    pub rows: Vec<PretrainRow>,
}

impl PretrainOutcome {
    /// Loss at the first step, i.e. of the initial parameters.
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn final_loss_avg(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss_avg)
    }
}

/// Where a run writes its artifacts; `None` fields are skipped.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// A fresh planner whose weights depend only on `config.seed`.
pub fn init_planner(config: &Config, state_dim: usize, action_dim: usize) -> Result<Planner> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[INIT_TAG]));
    Planner::new(
        config.net_config(state_dim, action_dim),
        config.schedule_kind()?,
        config.diffusion.steps,
        config.net.action_horizon,
        &mut rng,
    )
}

fn metrics_header(suite: &TaskSuite) -> String {
    let mut h = String::from("step,loss,loss_avg");
    for id in suite.ids() {
        write!(h, ",sr_{id}").expect("string write");
    }
    h
}

fn format_row(row: &PretrainRow, n_tasks: usize) -> String {
    let mut line = format!("{},{},{}", row.step, row.loss, row.loss_avg);
    for i in 0..n_tasks {
        match &row.success {
            Some(sr) => write!(line, ",{}", sr[i]),
            None => write!(line, ","),
        }
        .expect("string write");
    }
    line
}

fn success_rates(planner: &Planner, config: &Config, suite: &TaskSuite, seed: u64) -> Result<Vec<f64>> {
    let plan = config.eval_plan(&planner.schedule)?;
    suite
        .tasks()
        .iter()
        .map(|spec| {
            let mut policy = DiffusionPolicy {
                planner,
                plan: plan.clone(),
            };
            Ok(evaluate(&mut policy, spec, config.pretrain.eval_episodes, seed)?.success_rate)
        })
        .collect()
}

fn diverged(step: usize, what: &str, planner: &Planner, out: &Outputs) -> Error {
    let mut msg = format!(
        "step {step}: {what}; parameters finite: {}",
        planner.net.params.all_finite()
    );
    if let Some(ckpt) = &out.checkpoint {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".diverged");
        let snap = PathBuf::from(p);
        match planner.save(&snap) {
            Ok(()) => write!(msg, "; last parameters saved to {}", snap.display()),
            Err(e) => write!(msg, "; could not save snapshot: {e}"),
        }
        .expect("string write");
    }
    Error::Diverged(msg)
}

/// Runs `config.pretrain.steps` Adam steps on windows drawn uniformly from
/// `dataset`. Checkpoints every tenth of the run and at the end.
pub fn pretrain(config: &Config, dataset: &Dataset, suite: &TaskSuite, out: &Outputs) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("pre-training needs a non-empty dataset"));
    }
    if dataset.state_dim() < suite.max_state_dim() || dataset.action_dim() != suite.action_dim() {
        return Err(invalid("dataset dimensions do not match the task suite"));
    }
    let cfg = &config.pretrain;
    let mut planner = init_planner(config, dataset.state_dim(), dataset.action_dim())?;
    let mut adam = Adam::new(&planner.net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[PRETRAIN_TAG]));
    let (h, t_o) = (config.net.horizon, config.net.obs_horizon);

    let mut log = match &out.metrics {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{}", metrics_header(suite))?;
            Some(w)
        }
        None => None,
    };
    let checkpoint_every = (cfg.steps / 10).max(1);
    let mut rows = Vec::new();
    let mut interval_sum = 0.0;
    let mut interval_n = 0usize;
    for step in 1..=cfg.steps {
        let windows = dataset.sample_windows(cfg.batch_size, h, t_o, &mut rng)?;
        let batch: Vec<_> = windows.iter().map(|w| (&w.s_hist, &w.a_seq)).collect();
        let (loss, grads) = pretrain_loss_batch(&planner.net, &batch, &planner.schedule, &mut rng)?;
        if !loss.is_finite() {
            return Err(diverged(step, &format!("loss is {loss}"), &planner, out));
        }
        if let Err(e) = adam.update(&mut planner.net.params, &grads, cfg.lr) {
            return Err(diverged(step, &e.to_string(), &planner, out));
        }
        interval_sum += loss;
        interval_n += 1;
        let eval_now = cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.steps);
        if step == 1 || step % cfg.log_interval == 0 || step == cfg.steps || eval_now {
            let success = if eval_now {
                Some(success_rates(&planner, config, suite, derive_seed(config.seed, &[step as u64]))?)
            } else {
                None
            };
            let row = PretrainRow {
                step,
                loss,
                loss_avg: interval_sum / interval_n as f64,
                success,
            };
            info!("pretrain step {step}: loss {:.4} (avg {:.4})", row.loss, row.loss_avg);
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", format_row(&row, suite.tasks().len()))?;
            }
            rows.push(row);
            interval_sum = 0.0;
            interval_n = 0;
        }
        if let Some(ckpt) = &out.checkpoint {
            if step % checkpoint_every == 0 && step != cfg.steps {
                planner.save(ckpt)?;
            }
        }
    }
    if cfg.steps == 0 {
        warn!("pretrain.steps = 0; writing the initial parameters");
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(ckpt) = &out.checkpoint {
        planner.save(ckpt)?;
    }
    Ok(PretrainOutcome { planner, rows })
}

/// Loads a checkpoint and checks it fits the suite.
pub fn load_for_suite(path: &Path, suite: &TaskSuite) -> Result<Planner> {
    let planner = Planner::load(path)?;
    let c = planner.config();
    if c.state_dim < suite.max_state_dim() || c.action_dim != suite.action_dim() {
        return Err(invalid(format!(
            "checkpoint dims (S={}, A={}) do not fit suite (S={}, A={})",
            c.state_dim,
            c.action_dim,
            suite.max_state_dim(),
            suite.action_dim()
        )));
    }
    Ok(planner)
}

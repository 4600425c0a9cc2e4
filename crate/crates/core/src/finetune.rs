//! Stage-two, per-task policy-gradient fine-tuning over the denoising chain.
//!
//! Each planning call is one episode of a `K`-step decision process whose
//! only nonzero reward arrives at its last transition and equals the
//! discounted environment reward of the executed actions. Updates use a
//! clipped importance-sampled surrogate with `θ_old` snapshotted once per
//! round of `episodes_per_round` collected episodes, plus one of four
//! regularizers.
//!
//! Metrics CSV columns: `episode,env_steps,mean_seg_reward,episode_return,
//! rolling_success_rate,l_imp,l_reg,mean_rho,clip_fraction`. Rows for the
//! initial proficient-episode search leave the last four columns empty.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, RegularizerKind, RewardTransform};
use crate::diffusion::{
    bc_loss_batch, evaluate_transitions, gaussian_logprob, pretrain_loss_batch, transition_logprobs,
    ActionSequence, DenoisingTrace, StateHistory, TransitionEval, TransitionRef,
};
use crate::error::{invalid, Error, Result};
use crate::net::{Adam, Denoiser, GradientBundle};
use crate::planner::{ObsWindow, Planner};
use crate::schedule::{NoiseSchedule, SamplerPlan};
use crate::seed::derive_seed;
use crate::tasks::{EnvState, TaskSpec};

const ENV_TAG: u64 = 0xF1E0;
const POLICY_TAG: u64 = 0xF1E1;
const REG_TAG: u64 = 0xF1E2;

/// One planning call: the conditioning history, the recorded chain, and the
/// rewards of the actions it executed.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSegment {
    pub s_hist: StateHistory,
    pub trace: DenoisingTrace,
    /// `sum_i gamma^i r_i` over the executed actions.
    pub seg_reward: f64,
    /// Raw environment rewards of the executed actions.
    pub rewards: Vec<f64>,
    pub t: usize,
    pub episode_id: u64,
}

impl RolloutSegment {
    /// The generated sequence as executed (clamped `a^0`).
    pub fn clean_actions(&self) -> ActionSequence {
        self.trace.final_sample().clamped(-1.0, 1.0)
    }

    /// Per-transition rewards of the denoising decision process: zero
    /// everywhere except the final transition, which earns the segment reward.
    pub fn mdp_rewards(&self) -> Vec<f64> {
        let n = self.trace.steps.len();
        (0..n)
            .map(|i| if i + 1 == n { self.seg_reward } else { 0.0 })
            .collect()
    }
}

/// `sum_i gamma^i r_i`.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut w = 1.0;
    for r in rewards {
        total += w * r;
        w *= gamma;
    }
    total
}

/// Samples `a^0` with a recorded trace and executes up to `T_a` of its
/// actions. Returns the segment and whether the episode ended.
#[allow(clippy::too_many_arguments)]
pub fn collect_segment<R: Rng + ?Sized>(
    planner: &Planner,
    spec: &TaskSpec,
    env: &mut EnvState,
    window: &mut ObsWindow,
    plan: &SamplerPlan,
    gamma: f64,
    episode_id: u64,
    rng: &mut R,
) -> Result<RolloutSegment> {
    if env.done {
        return Err(Error::ContractViolation(
            "collect_segment on a finished episode".into(),
        ));
    }
    let s_hist = window.history();
    let (a0, trace) = planner.sample(&s_hist, plan, rng, true)?;
    let trace = trace.expect("recording requested");
    let t = env.t;
    let mut rewards = Vec::with_capacity(planner.action_horizon);
    for row in 0..planner.action_horizon {
        if env.done {
            break;
        }
        let out = spec.step(env, a0.row(row))?;
        window.push(&env.s);
        rewards.push(out.reward);
    }
    Ok(RolloutSegment {
        s_hist,
        trace,
        seg_reward: discounted_sum(&rewards, gamma),
        rewards,
        t,
        episode_id,
    })
}

#[derive(Debug, Clone)]
pub struct EpisodeRollout {
    pub episode_id: u64,
    pub segments: Vec<RolloutSegment>,
    pub total_return: f64,
    pub success: bool,
    pub env_steps: usize,
}

pub fn collect_episode<R: Rng + ?Sized>(
    planner: &Planner,
    spec: &TaskSpec,
    env_seed: u64,
    plan: &SamplerPlan,
    gamma: f64,
    episode_id: u64,
    rng: &mut R,
) -> Result<EpisodeRollout> {
    let mut env = spec.reset(env_seed);
    let c = planner.config();
    let mut window = ObsWindow::new(&env.s, c.obs_horizon, c.state_dim)?;
    let mut segments = Vec::new();
    while !env.done {
        segments.push(collect_segment(
            planner,
            spec,
            &mut env,
            &mut window,
            plan,
            gamma,
            episode_id,
            rng,
        )?);
    }
    Ok(EpisodeRollout {
        episode_id,
        total_return: segments.iter().flat_map(|s| &s.rewards).sum(),
        segments,
        success: env.success,
        env_steps: env.t,
    })
}

/// Every recorded transition of `segments`, segment-major.
pub fn transitions_of<'a>(segments: &[&'a RolloutSegment]) -> Vec<TransitionRef<'a>> {
    segments
        .iter()
        .flat_map(|seg| {
            (0..seg.trace.steps.len()).map(move |index| TransitionRef {
                state: &seg.s_hist,
                trace: &seg.trace,
                index,
            })
        })
        .collect()
}

/// `p_θ / p_θold` for one recorded transition.
pub fn importance_ratio(
    net: &Denoiser,
    net_old: &Denoiser,
    schedule: &NoiseSchedule,
    transition: TransitionRef<'_>,
) -> Result<f64> {
    let batch = [transition];
    let new = transition_logprobs(net, schedule, &batch)?[0];
    let old = transition_logprobs(net_old, schedule, &batch)?[0];
    Ok((new - old).exp())
}

/// `min(ρ r, clip(ρ, 1-ε, 1+ε) r)` and whether the unclipped branch is the
/// active one (ties count as unclipped, so gradients flow at `ρ = 1`).
pub fn clipped_term(rho: f64, r_hat: f64, eps: f64) -> (f64, bool) {
    let unclipped = rho * r_hat;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * r_hat;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgStats {
    pub loss: f64,
    pub mean_rho: f64,
    pub clip_fraction: f64,
}

/// Policy-gradient inputs: transitions with their segment's transformed
/// reward and the log-probability under `θ_old`.
pub struct PgBatch<'a> {
    pub transitions: Vec<TransitionRef<'a>>,
    pub r_hat: Vec<f64>,
    pub old_logp: Vec<f64>,
    pub n_segments: usize,
}

impl<'a> PgBatch<'a> {
    /// `r_hat[i]` belongs to `segments[i]`; old log-probabilities are
    /// evaluated under `net_old` on exactly this batch.
    pub fn new(
        segments: &[&'a RolloutSegment],
        r_hat: &[f64],
        net_old: &Denoiser,
        schedule: &NoiseSchedule,
    ) -> Result<PgBatch<'a>> {
        if segments.is_empty() {
            return Err(invalid("policy-gradient batch is empty"));
        }
        if segments.len() != r_hat.len() {
            return Err(invalid("one transformed reward per segment required"));
        }
        let transitions = transitions_of(segments);
        let r_hat = segments
            .iter()
            .zip(r_hat)
            .flat_map(|(seg, &r)| std::iter::repeat_n(r, seg.trace.steps.len()))
            .collect();
        let old_logp = transition_logprobs(net_old, schedule, &transitions)?;
        Ok(PgBatch {
            transitions,
            r_hat,
            old_logp,
            n_segments: segments.len(),
        })
    }
}

/// Gradient of `sum_i coef_i * logp_i` given evaluated means.
fn logp_weighted_grad(
    net: &Denoiser,
    eval: &TransitionEval,
    batch: &[TransitionRef<'_>],
    coef: &[f64],
) -> GradientBundle {
    let mut grad_out = Array2::zeros(eval.means.dim());
    for (i, t) in batch.iter().enumerate() {
        if coef[i] == 0.0 {
            continue;
        }
        let st = t.step();
        let mut row = grad_out.row_mut(i);
        let mean = eval.means.row(i);
        let dm = eval.dmean_deps.row(i);
        for (j, g) in row.iter_mut().enumerate() {
            *g = coef[i] * (st.a_out.as_slice()[j] - mean[j]) / st.var * dm[j];
        }
    }
    net.backward(&eval.cache, &grad_out)
}

fn logps_from_eval(
    eval: &TransitionEval,
    batch: &[TransitionRef<'_>],
) -> Result<Vec<f64>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let st = t.step();
            if !(st.var > 0.0) {
                return Err(Error::InvalidForFinetuning(format!(
                    "step k={} was sampled with zero variance",
                    st.step.k
                )));
            }
            gaussian_logprob(
                st.a_out.as_slice(),
                eval.means.row(i).as_slice().expect("row-major"),
                st.var,
            )
        })
        .collect()
}

/// `-(1/N_seg) sum_seg sum_k min(ρ_k r̂, clip(ρ_k) r̂)` and its gradient.
pub fn clipped_pg_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &PgBatch<'_>,
    eps: f64,
) -> Result<(PgStats, GradientBundle)> {
    if batch.transitions.is_empty() {
        return Err(invalid("policy-gradient batch is empty"));
    }
    let eval = evaluate_transitions(net, schedule, &batch.transitions)?;
    let logp = logps_from_eval(&eval, &batch.transitions)?;
    let n = batch.n_segments as f64;
    let mut total = 0.0;
    let mut rho_sum = 0.0;
    let mut clipped = 0usize;
    let mut coef = vec![0.0; logp.len()];
    for i in 0..logp.len() {
        let rho = (logp[i] - batch.old_logp[i]).exp();
        let (value, active) = clipped_term(rho, batch.r_hat[i], eps);
        total += value;
        rho_sum += rho;
        if active {
            coef[i] = -(batch.r_hat[i] * rho) / n;
        } else {
            clipped += 1;
        }
    }
    let grads = logp_weighted_grad(net, &eval, &batch.transitions, &coef);
    let m = logp.len() as f64;
    Ok((
        PgStats {
            loss: -total / n,
            mean_rho: rho_sum / m,
            clip_fraction: clipped as f64 / m,
        },
        grads,
    ))
}

/// Score-function estimator without importance weights:
/// loss `-(1/N_seg) sum r̂ log p_θ`.
pub fn reinforce_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &PgBatch<'_>,
) -> Result<(f64, GradientBundle)> {
    let eval = evaluate_transitions(net, schedule, &batch.transitions)?;
    let logp = logps_from_eval(&eval, &batch.transitions)?;
    let n = batch.n_segments as f64;
    let coef: Vec<f64> = batch.r_hat.iter().map(|r| -r / n).collect();
    let loss = -logp
        .iter()
        .zip(&batch.r_hat)
        .map(|(l, r)| l * r)
        .sum::<f64>()
        / n;
    Ok((loss, logp_weighted_grad(net, &eval, &batch.transitions, &coef)))
}

/// `(1/N_seg) sum ‖mean_θ - mean_pre‖² / (2 var)` over recorded transitions.
pub fn kl_loss(
    net: &Denoiser,
    net_pre: &Denoiser,
    schedule: &NoiseSchedule,
    transitions: &[TransitionRef<'_>],
    n_segments: usize,
) -> Result<(f64, GradientBundle)> {
    if transitions.is_empty() || n_segments == 0 {
        return Err(invalid("KL regularizer needs recorded transitions"));
    }
    let eval = evaluate_transitions(net, schedule, transitions)?;
    let pre = evaluate_transitions(net_pre, schedule, transitions)?;
    let n = n_segments as f64;
    let mut loss = 0.0;
    let mut grad_out = Array2::zeros(eval.means.dim());
    for (i, t) in transitions.iter().enumerate() {
        let var = t.step().var;
        if !(var > 0.0) {
            return Err(Error::InvalidForFinetuning("zero-variance transition".into()));
        }
        for j in 0..eval.means.ncols() {
            let d = eval.means[[i, j]] - pre.means[[i, j]];
            loss += d * d / (2.0 * var);
            grad_out[[i, j]] = d / var * eval.dmean_deps[[i, j]] / n;
        }
    }
    Ok((loss / n, net.backward(&eval.cache, &grad_out)))
}

/// Proficient episodes kept whole; the lowest-scoring one is evicted when full.
#[derive(Debug, Clone)]
pub struct TargetBuffer {
    capacity: usize,
    episodes: Vec<TargetEpisode>,
}

#[derive(Debug, Clone)]
pub struct TargetEpisode {
    pub score: f64,
    pub records: Vec<(StateHistory, ActionSequence)>,
}

impl TargetBuffer {
    pub fn new(capacity: usize) -> TargetBuffer {
        TargetBuffer {
            capacity: capacity.max(1),
            episodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> &[TargetEpisode] {
        &self.episodes
    }

    pub fn num_records(&self) -> usize {
        self.episodes.iter().map(|e| e.records.len()).sum()
    }

    /// Stores the episode's planning records; returns false if it was the
    /// lowest-scoring episode and got evicted straight away.
    pub fn admit(&mut self, rollout: &EpisodeRollout) -> bool {
        self.episodes.push(TargetEpisode {
            score: rollout.total_return,
            records: rollout
                .segments
                .iter()
                .map(|s| (s.s_hist.clone(), s.clean_actions()))
                .collect(),
        });
        if self.episodes.len() > self.capacity {
            // Lowest score goes; among ties the oldest.
            let worst = self
                .episodes
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("non-empty");
            self.episodes.remove(worst);
            return worst != self.episodes.len();
        }
        true
    }

    /// Uniform draws over all stored planning records.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Vec<(&StateHistory, &ActionSequence)> {
        let total = self.num_records();
        if total == 0 {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let mut idx = rng.random_range(0..total);
                for ep in &self.episodes {
                    if idx < ep.records.len() {
                        let (s, a) = &ep.records[idx];
                        return (s, a);
                    }
                    idx -= ep.records.len();
                }
                unreachable!("index below total")
            })
            .collect()
    }
}

/// FIFO of recent self-generated `(state history, a^0)` pairs.
#[derive(Debug, Clone)]
pub struct SampleReplay {
    capacity: usize,
    items: VecDeque<(StateHistory, ActionSequence)>,
}

impl SampleReplay {
    pub fn new(capacity: usize) -> SampleReplay {
        SampleReplay {
            capacity: capacity.max(1),
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn extend(&mut self, rollout: &EpisodeRollout) {
        for s in &rollout.segments {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back((s.s_hist.clone(), s.clean_actions()));
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(&StateHistory, &ActionSequence)> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let (s, a) = &self.items[rng.random_range(0..self.items.len())];
                (s, a)
            })
            .collect()
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct RewardNormalizer {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RewardNormalizer {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    pub fn transform(&self, x: f64, clip: f64) -> f64 {
        let std = self.std();
        let z = if std > 1e-8 { (x - self.mean) / std } else { x - self.mean };
        z.clamp(-clip, clip)
    }
}

/// Success-latched episodes, or returns in the top quantile of a recent window.
#[derive(Debug, Clone)]
pub struct ProficiencyRule {
    quantile: f64,
    window: usize,
    recent: VecDeque<f64>,
}

impl ProficiencyRule {
    pub fn new(quantile: f64, window: usize) -> ProficiencyRule {
        ProficiencyRule {
            quantile,
            window: window.max(1),
            recent: VecDeque::new(),
        }
    }

    /// Episodes needed before the quantile part of the rule applies.
    fn min_count(&self) -> usize {
        // Small slack so that q = 0.9 gives 10 despite rounding.
        (1.0 / (1.0 - self.quantile) - 1e-9).ceil() as usize
    }

    /// Records the episode and decides whether it is proficient.
    pub fn judge(&mut self, total_return: f64, success: bool) -> bool {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(total_return);
        if success {
            return true;
        }
        if self.recent.len() < self.min_count() {
            return false;
        }
        let mut sorted: Vec<f64> = self.recent.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let rank = ((self.quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        total_return >= sorted[rank - 1]
    }
}

/// Inputs shared by the regularizers for one update.
pub struct RegContext<'a> {
    pub pre: &'a Denoiser,
    pub target: &'a TargetBuffer,
    pub replay: &'a SampleReplay,
    pub transitions: &'a [TransitionRef<'a>],
    pub n_segments: usize,
    pub batch_size: usize,
}

pub fn regularizer_loss<R: Rng + ?Sized>(
    kind: RegularizerKind,
    net: &Denoiser,
    schedule: &NoiseSchedule,
    ctx: &RegContext<'_>,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    match kind {
        RegularizerKind::None => Ok((0.0, GradientBundle::zeros_like(&net.params))),
        RegularizerKind::Bc => {
            let batch = ctx.target.sample(ctx.batch_size, rng);
            bc_loss_batch(net, &batch, schedule, rng)
        }
        RegularizerKind::Pl => {
            let batch = ctx.replay.sample(ctx.batch_size, rng);
            if batch.is_empty() {
                return Err(Error::Unavailable("no self-generated samples yet".into()));
            }
            pretrain_loss_batch(net, &batch, schedule, rng)
        }
        RegularizerKind::Kl => kl_loss(net, ctx.pre, schedule, ctx.transitions, ctx.n_segments),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub episode: usize,
    pub env_steps: usize,
    pub mean_seg_reward: f64,
    pub episode_return: f64,
    pub rolling_success_rate: f64,
    /// Absent for the initial rollouts, which take no gradient steps.
    pub update: Option<UpdateStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub l_imp: f64,
    pub l_reg: f64,
    pub mean_rho: f64,
    pub clip_fraction: f64,
}

pub const METRICS_HEADER: &str =
    "episode,env_steps,mean_seg_reward,episode_return,rolling_success_rate,l_imp,l_reg,mean_rho,clip_fraction";

impl FinetuneRow {
    pub fn to_csv(&self) -> String {
        let mut line = format!(
            "{},{},{},{},{}",
            self.episode, self.env_steps, self.mean_seg_reward, self.episode_return, self.rolling_success_rate
        );
        match &self.update {
            Some(u) => line.push_str(&format!(",{},{},{},{}", u.l_imp, u.l_reg, u.mean_rho, u.clip_fraction)),
            None => line.push_str(",,,,"),
        }
        line
    }
}

pub struct FinetuneOutcome {
    pub planner: Planner,
    pub rows: Vec<FinetuneRow>,
    pub target_episodes: usize,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

fn task_tag(task_id: &str) -> u64 {
    // FNV-1a, only to separate random streams per task.
    task_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct RunLog {
    rows: Vec<FinetuneRow>,
    writer: Option<BufWriter<File>>,
    recent_success: VecDeque<bool>,
    window: usize,
    env_steps: usize,
}

impl RunLog {
    fn record(&mut self, ep: &EpisodeRollout, update: Option<UpdateStats>) -> Result<()> {
        if self.recent_success.len() == self.window {
            self.recent_success.pop_front();
        }
        self.recent_success.push_back(ep.success);
        self.env_steps += ep.env_steps;
        let n_seg = ep.segments.len().max(1) as f64;
        let row = FinetuneRow {
            episode: self.rows.len(),
            env_steps: self.env_steps,
            mean_seg_reward: ep.segments.iter().map(|s| s.seg_reward).sum::<f64>() / n_seg,
            episode_return: ep.total_return,
            rolling_success_rate: self.recent_success.iter().filter(|&&s| s).count() as f64
                / self.recent_success.len() as f64,
            update,
        };
        if let Some(w) = self.writer.as_mut() {
            writeln!(w, "{}", row.to_csv())?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Fine-tunes `planner` on one task. All randomness derives from
/// `config.seed` and the task id.
pub fn finetune_task(
    mut planner: Planner,
    spec: &TaskSpec,
    config: &Config,
    out: &FinetuneOutputs,
) -> Result<FinetuneOutcome> {
    let f = &config.finetune;
    let c = planner.config();
    if c.action_dim != spec.action_dim || c.state_dim < spec.state_dim {
        return Err(invalid(format!(
            "checkpoint (S={}, A={}) cannot drive task {}",
            c.state_dim, c.action_dim, spec.task_id
        )));
    }
    let plan = config.finetune_plan(&planner.schedule)?;
    if !plan.is_stochastic() {
        return Err(Error::InvalidForFinetuning("sampler plan has zero-variance steps".into()));
    }
    let tag = task_tag(&spec.task_id);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[POLICY_TAG, tag]));
    let mut reg_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[REG_TAG, tag]));
    let env_seed = |e: usize| derive_seed(config.seed, &[ENV_TAG, tag, e as u64]);

    let pre = planner.net.clone();
    let mut adam = Adam::new(&planner.net.params);
    let mut target = TargetBuffer::new(f.target_capacity);
    let mut replay = SampleReplay::new(f.replay_capacity);
    let mut normalizer = RewardNormalizer::default();
    let mut rule = ProficiencyRule::new(f.proficiency_quantile, f.proficiency_window);
    let mut log = RunLog {
        rows: Vec::new(),
        writer: match &out.metrics {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{METRICS_HEADER}")?;
                Some(w)
            }
            None => None,
        },
        recent_success: VecDeque::new(),
        window: f.rolling_window,
        env_steps: 0,
    };
    let mut episode = 0usize;
    let budget_left = |log: &RunLog, episode: usize| episode < f.episodes && log.env_steps < f.max_env_steps;

    // Initial rollouts with the pre-trained planner seed the buffers.
    let mut used_fallback = false;
    if f.n_init > 0 {
        let cap = f.n_init * f.init_cap_factor;
        let mut attempts: Vec<EpisodeRollout> = Vec::new();
        let mut found = 0;
        while found < f.n_init && attempts.len() < cap && budget_left(&log, episode) {
            let ep = collect_episode(&planner, spec, env_seed(episode), &plan, f.gamma, episode as u64, &mut policy_rng)?;
            episode += 1;
            for s in &ep.segments {
                normalizer.update(s.seg_reward);
            }
            replay.extend(&ep);
            if rule.judge(ep.total_return, ep.success) {
                target.admit(&ep);
                found += 1;
            }
            log.record(&ep, None)?;
            attempts.push(ep);
        }
        if found == 0 && !attempts.is_empty() {
            used_fallback = true;
            let keep = (((1.0 - f.proficiency_quantile) * attempts.len() as f64).ceil() as usize).max(1);
            warn!(
                "{}: no proficient episode in {} initial rollouts; admitting the top {keep} by return",
                spec.task_id,
                attempts.len()
            );
            attempts.sort_by(|a, b| b.total_return.total_cmp(&a.total_return));
            for ep in attempts.iter().take(keep) {
                target.admit(ep);
            }
        }
        info!(
            "{}: {} initial rollouts, {} target episodes",
            spec.task_id,
            attempts.len(),
            target.len()
        );
    }

    let mut lr = f.lr;
    let mut round = 0usize;
    while budget_left(&log, episode) {
        let theta_old = planner.net.clone();
        let mut round_eps = Vec::with_capacity(f.episodes_per_round);
        while round_eps.len() < f.episodes_per_round && budget_left(&log, episode + round_eps.len()) {
            let id = episode + round_eps.len();
            let ep = collect_episode(&planner, spec, env_seed(id), &plan, f.gamma, id as u64, &mut policy_rng)?;
            for s in &ep.segments {
                normalizer.update(s.seg_reward);
            }
            if rule.judge(ep.total_return, ep.success) {
                target.admit(&ep);
            }
            replay.extend(&ep);
            round_eps.push(ep);
        }
        episode += round_eps.len();
        let all: Vec<&RolloutSegment> = round_eps.iter().flat_map(|e| &e.segments).collect();
        let r_hat: Vec<f64> = all
            .iter()
            .map(|s| match f.reward_transform {
                RewardTransform::Standardize => normalizer.transform(s.seg_reward, f.reward_clip),
                RewardTransform::Raw => s.seg_reward,
            })
            .collect();
        let full_batch = PgBatch::new(&all, &r_hat, &theta_old, &planner.schedule)?;

        let mut acc = UpdateStats {
            l_imp: 0.0,
            l_reg: 0.0,
            mean_rho: 0.0,
            clip_fraction: 0.0,
        };
        for _ in 0..f.p_step {
            let sub;
            let batch = if f.batch_size == 0 || f.batch_size >= all.len() {
                &full_batch
            } else {
                let idx = sample_indices(&mut reg_rng, all.len(), f.batch_size).into_vec();
                let segs: Vec<&RolloutSegment> = idx.iter().map(|&i| all[i]).collect();
                let rh: Vec<f64> = idx.iter().map(|&i| r_hat[i]).collect();
                sub = PgBatch::new(&segs, &rh, &theta_old, &planner.schedule)?;
                &sub
            };
            let (stats, mut grads) = clipped_pg_loss(&planner.net, &planner.schedule, batch, f.clip_eps)?;
            let mut l_reg = 0.0;
            if f.lambda > 0.0 && f.regularizer != RegularizerKind::None {
                let ctx = RegContext {
                    pre: &pre,
                    target: &target,
                    replay: &replay,
                    transitions: &batch.transitions,
                    n_segments: batch.n_segments,
                    batch_size: f.reg_batch_size,
                };
                let (l, g) = regularizer_loss(f.regularizer, &planner.net, &planner.schedule, &ctx, &mut reg_rng)?;
                grads.add_scaled(&g, f.lambda);
                l_reg = l;
            }
            if !stats.loss.is_finite() || !l_reg.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} episode {episode}: loss {} / regularizer {l_reg}",
                    spec.task_id, stats.loss
                )));
            }
            adam.update(&mut planner.net.params, &grads, lr)
                .map_err(|e| Error::Diverged(format!("{} episode {episode}: {e}", spec.task_id)))?;
            let p = f.p_step as f64;
            acc.l_imp += stats.loss / p;
            acc.l_reg += l_reg / p;
            acc.mean_rho += stats.mean_rho / p;
            acc.clip_fraction += stats.clip_fraction / p;
        }
        round += 1;
        lr = f.lr * f.lr_decay.powi(round as i32).max(f.lr_floor);
        for ep in &round_eps {
            log.record(ep, Some(acc))?;
        }
        if round % 50 == 0 {
            let last = log.rows.last().expect("row just logged");
            info!(
                "{} episode {}: env steps {}, rolling success {:.2}, l_imp {:.4}, clip {:.3}",
                spec.task_id, last.episode, last.env_steps, last.rolling_success_rate, acc.l_imp, acc.clip_fraction
            );
        }
        if let Some(ckpt) = &out.checkpoint {
            if f.checkpoint_interval > 0 && round % f.checkpoint_interval == 0 {
                planner.save(ckpt)?;
            }
        }
    }
    if let Some(w) = log.writer.as_mut() {
        w.flush()?;
    }
    if let Some(ckpt) = &out.checkpoint {
        planner.save(ckpt)?;
    }
    Ok(FinetuneOutcome {
        planner,
        rows: log.rows,
        target_episodes: target.len(),
        used_fallback,
    })
}

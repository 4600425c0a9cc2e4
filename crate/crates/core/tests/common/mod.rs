//! Property checks shared by the integration tests and the acceptance runner.
//! Each check returns a one-line summary on success and a reason on failure.

#![allow(dead_code)]

use diffplan::config::RegularizerKind;
use diffplan::diffusion::{
    forward_noise, pretrain_loss_batch, sample_action_sequence, ActionSequence, StateHistory,
};
use diffplan::finetune::{
    clipped_pg_loss, clipped_term, collect_episode, discounted_sum, importance_ratio,
    regularizer_loss, reinforce_loss, transitions_of, EpisodeRollout, PgBatch, RegContext,
    RolloutSegment, SampleReplay, TargetBuffer,
};
use diffplan::net::{Denoiser, GradientBundle, LayerStack, NetConfig};
use diffplan::planner::Planner;
use diffplan::schedule::{build_schedule, ddim_subsequence, NoiseSchedule, SamplerPlan, ScheduleKind};
use diffplan::tasks::register_default_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn tiny_config(state_dim: usize) -> NetConfig {
    NetConfig {
        horizon: 4,
        action_dim: 2,
        obs_horizon: 2,
        state_dim,
        time_embed: 8,
        hidden: vec![16, 16],
    }
}

/// A small planner with nonzero biases so every parameter gets a gradient.
pub fn tiny_planner(seed: u64, state_dim: usize, action_horizon: usize) -> Planner {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Planner::new(tiny_config(state_dim), ScheduleKind::Cosine, 20, action_horizon, &mut rng).unwrap();
    for l in &mut p.net.params.layers {
        l.bias.mapv_inplace(|_| 0.2 * (rng.random::<f64>() - 0.5));
    }
    p
}

/// Stochastic DDIM plan without x0 clipping, so means are smooth in θ.
pub fn smooth_plan(schedule: &NoiseSchedule, steps: usize) -> SamplerPlan {
    ddim_subsequence(schedule, steps, 1.0).unwrap().with_min_std(0.1)
}

pub fn perturbed(net: &Denoiser, scale: f64, seed: u64) -> Denoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    for t in out.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
    }
    out
}

/// Segments with random conditioning states and rewards, recorded under `net`.
pub fn recorded_segments(planner: &Planner, plan: &SamplerPlan, n: usize, seed: u64) -> Vec<RolloutSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = planner.config().clone();
    (0..n)
        .map(|i| {
            let flat: Vec<f64> = (0..c.obs_horizon * c.state_dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let s_hist = StateHistory::from_flat(c.obs_horizon, c.state_dim, flat);
            let (_, trace) = sample_action_sequence(&planner.net, &s_hist, &planner.schedule, plan, &mut rng, true).unwrap();
            let rewards: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            RolloutSegment {
                s_hist,
                trace: trace.unwrap(),
                seg_reward: rewards.iter().sum(),
                rewards,
                t: 0,
                episode_id: i as u64,
            }
        })
        .collect()
}

/// Largest per-tensor relative error `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)` between
/// an analytic gradient and central differences of `loss`.
pub fn max_fd_error(net: &Denoiser, analytic: &GradientBundle, loss: &dyn Fn(&Denoiser) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (ti, g) in analytic.tensors().iter().enumerate() {
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_f = 0.0;
        for j in 0..g.len() {
            let orig = probe.params.tensors()[ti][j];
            probe.params.tensors_mut()[ti][j] = orig + h;
            let up = loss(&probe);
            probe.params.tensors_mut()[ti][j] = orig - h;
            let down = loss(&probe);
            probe.params.tensors_mut()[ti][j] = orig;
            let fd = (up - down) / (2.0 * h);
            num += (g[j] - fd).powi(2);
            den_a += g[j] * g[j];
            den_f += fd * fd;
        }
        let scale = den_a.max(den_f).sqrt();
        if scale > 0.0 {
            worst = worst.max(num.sqrt() / scale);
        }
    }
    worst
}

fn rollout_of(segments: Vec<RolloutSegment>, id: u64) -> EpisodeRollout {
    EpisodeRollout {
        episode_id: id,
        total_return: segments.iter().map(|s| s.seg_reward).sum(),
        env_steps: segments.len() * 3,
        success: true,
        segments,
    }
}

/// Analytic vs finite-difference gradients of all five training losses.
pub fn gradient_fidelity(seed: u64) -> Check {
    let planner = tiny_planner(seed, 3, 2);
    let schedule = &planner.schedule;
    let plan = smooth_plan(schedule, 5);
    let pre = perturbed(&planner.net, 0.05, seed + 1);
    let net = perturbed(&planner.net, 0.02, seed + 2);
    let segments = recorded_segments(&planner, &plan, 4, seed + 3);
    let refs: Vec<&RolloutSegment> = segments.iter().collect();
    let r_hat = [1.0, -0.5, 0.25, -1.5];
    let batch = PgBatch::new(&refs, &r_hat, &planner.net, schedule).unwrap();
    let transitions = transitions_of(&refs);

    let mut target = TargetBuffer::new(4);
    target.admit(&rollout_of(segments.clone(), 0));
    let mut replay = SampleReplay::new(64);
    replay.extend(&rollout_of(segments.clone(), 1));
    let ctx = RegContext {
        pre: &pre,
        target: &target,
        replay: &replay,
        transitions: &transitions,
        n_segments: refs.len(),
        batch_size: 6,
    };
    let pairs: Vec<(&StateHistory, ActionSequence)> = segments.iter().map(|s| (&s.s_hist, s.clean_actions())).collect();
    let pair_refs: Vec<(&StateHistory, &ActionSequence)> = pairs.iter().map(|(s, a)| (*s, a)).collect();
    let rng0 = ChaCha8Rng::seed_from_u64(seed + 4);

    let mut report = Vec::new();
    let mut check = |name: &str, grad: GradientBundle, loss: &dyn Fn(&Denoiser) -> f64| -> Result<(), String> {
        let err = max_fd_error(&net, &grad, loss);
        report.push(format!("{name} {err:.1e}"));
        if err <= 1e-4 {
            Ok(())
        } else {
            Err(format!("{name}: relative gradient error {err:.3e} > 1e-4"))
        }
    };

    let pre_loss = |n: &Denoiser| pretrain_loss_batch(n, &pair_refs, schedule, &mut rng0.clone()).unwrap();
    check("pretrain", pre_loss(&net).1, &|n| pre_loss(n).0)?;
    let pg = |n: &Denoiser| clipped_pg_loss(n, schedule, &batch, 0.2).unwrap();
    check("clipped_pg", pg(&net).1, &|n| pg(n).0.loss)?;
    // A tight clip range leaves some transitions on the constant branch.
    let tight = |n: &Denoiser| clipped_pg_loss(n, schedule, &batch, 0.002).unwrap();
    let (stats, g) = tight(&net);
    if !(stats.clip_fraction > 0.0 && stats.clip_fraction < 1.0) {
        return Err(format!("tight clip range clipped {} of transitions", stats.clip_fraction));
    }
    check("clipped_pg_tight", g, &|n| tight(n).0.loss)?;
    let reg = |kind: RegularizerKind, n: &Denoiser| regularizer_loss(kind, n, schedule, &ctx, &mut rng0.clone()).unwrap();
    check("bc", reg(RegularizerKind::Bc, &net).1, &|n| reg(RegularizerKind::Bc, n).0)?;
    check("kl", reg(RegularizerKind::Kl, &net).1, &|n| reg(RegularizerKind::Kl, n).0)?;
    check("pl", reg(RegularizerKind::Pl, &net).1, &|n| reg(RegularizerKind::Pl, n).0)?;
    Ok(report.join(", "))
}

/// ᾱ monotonicity, exact DDIM(η=1, K) = posterior variance, and forward-noise
/// moments by Monte Carlo.
pub fn schedule_identities(seed: u64) -> Check {
    for kind in [ScheduleKind::Cosine, ScheduleKind::DEFAULT_LINEAR] {
        let s = build_schedule(kind, 100).map_err(|e| e.to_string())?;
        let ab = s.alpha_bars();
        if !ab.windows(2).all(|w| w[1] < w[0]) || !(ab[0] <= 1.0 && *ab.last().unwrap() > 0.0) {
            return Err(format!("{} alpha_bar is not strictly decreasing in (0, 1]", kind.name()));
        }
        let plan = ddim_subsequence(&s, 100, 1.0).map_err(|e| e.to_string())?;
        for step in &plan.steps {
            if step.sigma2 != s.posterior_var(step.k) {
                return Err(format!(
                    "{} k={}: DDIM variance {} != posterior {}",
                    kind.name(),
                    step.k,
                    step.sigma2,
                    s.posterior_var(step.k)
                ));
            }
        }
    }
    let s = build_schedule(ScheduleKind::Cosine, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a0 = ActionSequence::from_flat(1, 2, vec![0.7, -0.3]);
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for k in [1, 30, 70, 100] {
        let ab = s.alpha_bar(k);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = ActionSequence::standard_normal(1, 2, &mut rng);
            let x = forward_noise(&a0, k, &eps, &s).unwrap();
            for j in 0..2 {
                sum[j] += x.as_slice()[j];
                sq[j] += x.as_slice()[j].powi(2);
            }
        }
        let nf = n as f64;
        for j in 0..2 {
            let mean = sum[j] / nf;
            let var = (sq[j] - nf * mean * mean) / (nf - 1.0);
            let want_var = 1.0 - ab;
            let z_mean = (mean - ab.sqrt() * a0.as_slice()[j]) / (want_var / nf).sqrt();
            let z_var = (var - want_var) / (want_var * (2.0 / (nf - 1.0)).sqrt());
            worst = worst.max(z_mean.abs()).max(z_var.abs());
        }
    }
    if worst > 4.0 {
        return Err(format!("forward-noise moment off by {worst:.2} standard errors"));
    }
    Ok(format!("moments within {worst:.2} SE"))
}

/// ρ(θ_old, θ_old) = 1, clipped gradient at θ_old equals the plain
/// score-function gradient, and the hand-computed clip cases.
pub fn ppo_identities(seed: u64) -> Check {
    let planner = tiny_planner(seed, 3, 2);
    let schedule = &planner.schedule;
    let segments = recorded_segments(&planner, &smooth_plan(schedule, 5), 6, seed + 1);
    let refs: Vec<&RolloutSegment> = segments.iter().collect();
    for t in transitions_of(&refs) {
        let rho = importance_ratio(&planner.net, &planner.net, schedule, t).map_err(|e| e.to_string())?;
        if rho != 1.0 {
            return Err(format!("ρ(θ_old, θ_old) = {rho}"));
        }
    }
    let r_hat = [1.0, -2.0, 0.5, 0.0, 3.0, -0.7];
    let batch = PgBatch::new(&refs, &r_hat, &planner.net, schedule).unwrap();
    let (_, g_clip) = clipped_pg_loss(&planner.net, schedule, &batch, 0.2).unwrap();
    let (_, g_pg) = reinforce_loss(&planner.net, schedule, &batch).unwrap();
    let mut diff = g_clip.clone();
    diff.add_scaled(&g_pg, -1.0);
    let gap = diff.norm() / g_pg.norm();
    if gap > 1e-10 {
        return Err(format!("clipped gradient at θ_old differs from the score-function gradient by {gap:.2e}"));
    }

    // One single-transition segment; ρ is forced through the stored old log-prob.
    let one = recorded_segments(&planner, &smooth_plan(schedule, 1), 1, seed + 2);
    let one_ref: Vec<&RolloutSegment> = one.iter().collect();
    let cases = [(2.0, 1.0, -1.2), (0.5, -1.0, 0.8), (2.0, -1.0, 2.0), (0.5, 1.0, -0.5)];
    for (rho, r, want) in cases {
        let mut b = PgBatch::new(&one_ref, &[r], &planner.net, schedule).unwrap();
        b.old_logp[0] -= f64::ln(rho);
        let (stats, _) = clipped_pg_loss(&planner.net, schedule, &b, 0.2).unwrap();
        let direct = -clipped_term(rho, r, 0.2).0;
        if (stats.loss - want).abs() > 1e-12 || (direct - want).abs() > 1e-12 {
            return Err(format!("ρ={rho}, r̂={r}: loss {} (direct {direct}), expected {want}", stats.loss));
        }
    }
    Ok(format!("gradient gap {gap:.1e}"))
}

/// For recorded rollouts on every task, the denoising-process return equals
/// the segment reward, which equals the discounted reward of replaying the
/// executed actions in a fresh environment.
pub fn mdp_faithfulness(seed: u64, traces: usize) -> Check {
    let suite = register_default_suite(24);
    let planner = tiny_planner(seed, suite.max_state_dim(), 3);
    let plan = smooth_plan(&planner.schedule, 5).with_clip_x0(true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = 0.97;
    let mut checked = 0;
    let mut episode = 0u64;
    while checked < traces {
        let spec = &suite.tasks()[episode as usize % suite.tasks().len()];
        let env_seed = seed ^ (episode << 8);
        let ep = collect_episode(&planner, spec, env_seed, &plan, gamma, episode, &mut rng).map_err(|e| e.to_string())?;
        let mut env = spec.reset(env_seed);
        for seg in &ep.segments {
            let mdp_return: f64 = seg.mdp_rewards().iter().sum();
            if mdp_return != seg.seg_reward {
                return Err(format!("MDP return {mdp_return} != seg_reward {}", seg.seg_reward));
            }
            let actions = seg.clean_actions();
            let mut replayed = Vec::new();
            for row in 0..planner.action_horizon {
                if env.done {
                    break;
                }
                replayed.push(spec.step(&mut env, actions.row(row)).unwrap().reward);
            }
            if discounted_sum(&replayed, gamma) != seg.seg_reward {
                return Err(format!("{}: replayed reward differs from seg_reward", spec.task_id));
            }
            checked += 1;
        }
        episode += 1;
    }
    Ok(format!("{checked} traces over {episode} episodes"))
}

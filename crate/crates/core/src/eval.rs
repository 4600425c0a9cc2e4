//! Receding-horizon evaluation, trajectory export and ablation reports.
//!
//! Trajectory CSV columns, in order:
//! `episode,t,s0..s{S-1},a0..a{A-1},reward,success` where `s` is the
//! task-native state before the action and `success` is the latched flag
//! after the step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::StateHistory;
use crate::error::{invalid, Error, Result};
use crate::planner::{ObsWindow, Planner};
use crate::schedule::SamplerPlan;
use crate::seed::derive_seed;
use crate::tasks::{random_action, EnvState, TaskSpec};

/// Stream tags keeping evaluation seeds apart from training seeds.
const EVAL_ENV_TAG: u64 = 0xE7A1;
const EVAL_POLICY_TAG: u64 = 0xE7A2;

/// Anything that can pick the next actions for an environment.
pub trait ActionPlanner {
    /// `(T_o, width)` of the state history this planner conditions on.
    fn history_shape(&self, spec: &TaskSpec) -> (usize, usize) {
        (1, spec.state_dim)
    }

    /// Returns at least one action to execute from the current state.
    fn plan(
        &mut self,
        spec: &TaskSpec,
        env: &EnvState,
        history: &StateHistory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>>;
}

/// A diffusion planner sampling with a fixed plan and executing `T_a` actions.
pub struct DiffusionPolicy<'a> {
    pub planner: &'a Planner,
    pub plan: SamplerPlan,
}

impl ActionPlanner for DiffusionPolicy<'_> {
    fn history_shape(&self, _spec: &TaskSpec) -> (usize, usize) {
        let c = self.planner.config();
        (c.obs_horizon, c.state_dim)
    }

    fn plan(
        &mut self,
        spec: &TaskSpec,
        _env: &EnvState,
        history: &StateHistory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let c = self.planner.config();
        if c.action_dim != spec.action_dim || c.state_dim < spec.state_dim {
            return Err(invalid(format!(
                "checkpoint (S={}, A={}) cannot drive task {} (S={}, A={})",
                c.state_dim, c.action_dim, spec.task_id, spec.state_dim, spec.action_dim
            )));
        }
        let (a0, _) = self.planner.sample(history, &self.plan, rng, false)?;
        Ok(a0.to_rows().into_iter().take(self.planner.action_horizon).collect())
    }
}

/// The task's scripted controller.
pub struct ScriptedPlanner;

impl ActionPlanner for ScriptedPlanner {
    fn plan(
        &mut self,
        spec: &TaskSpec,
        env: &EnvState,
        _history: &StateHistory,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(vec![spec.scripted_action(env).to_vec()])
    }
}

/// Uniform random actions; the random-policy baseline.
pub struct RandomPlanner;

impl ActionPlanner for RandomPlanner {
    fn plan(
        &mut self,
        spec: &TaskSpec,
        _env: &EnvState,
        _history: &StateHistory,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(vec![random_action(rng, spec.action_dim)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub reward: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub total_return: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub task_id: String,
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs one episode of receding-horizon control.
pub fn run_episode(
    policy: &mut dyn ActionPlanner,
    spec: &TaskSpec,
    env_seed: u64,
    rng: &mut ChaCha8Rng,
    episode: usize,
) -> Result<EpisodeRecord> {
    let mut env = spec.reset(env_seed);
    let (obs_horizon, width) = policy.history_shape(spec);
    let mut window = ObsWindow::new(&env.s, obs_horizon, width)?;
    let mut steps = Vec::with_capacity(spec.episode_length);
    let mut total_return = 0.0;
    while !env.done {
        let actions = policy.plan(spec, &env, &window.history(), rng)?;
        if actions.is_empty() {
            return Err(invalid("planner returned no actions"));
        }
        for a in actions {
            if env.done {
                break;
            }
            let s = env.s.clone();
            let a: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let out = spec.step(&mut env, &a)?;
            window.push(&env.s);
            total_return += out.reward;
            steps.push(StepRecord {
                t: env.t - 1,
                s,
                a,
                reward: out.reward,
                success: out.success,
            });
        }
    }
    Ok(EpisodeRecord {
        episode,
        steps,
        final_state: env.s.clone(),
        total_return,
        success: env.success,
    })
}

/// Evaluates `episodes` episodes; episode `i` uses environment and policy
/// streams derived from `(seed, i)`, so results do not depend on run order.
pub fn evaluate(
    policy: &mut dyn ActionPlanner,
    spec: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let records = rollouts(policy, spec, episodes, seed)?;
    let n = records.len() as f64;
    Ok(EvalSummary {
        task_id: spec.task_id.clone(),
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n,
        mean_return: records.iter().map(|r| r.total_return).sum::<f64>() / n,
        episodes: records,
    })
}

fn rollouts(
    policy: &mut dyn ActionPlanner,
    spec: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    (0..episodes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[EVAL_POLICY_TAG, i as u64]));
            let env_seed = derive_seed(seed, &[EVAL_ENV_TAG, i as u64]);
            run_episode(policy, spec, env_seed, &mut rng, i)
        })
        .collect()
}

pub fn trajectory_header(state_dim: usize, action_dim: usize) -> String {
    let mut h = String::from("episode,t");
    for i in 0..state_dim {
        write!(h, ",s{i}").expect("string write");
    }
    for i in 0..action_dim {
        write!(h, ",a{i}").expect("string write");
    }
    h.push_str(",reward,success");
    h
}

pub fn write_trajectories(records: &[EpisodeRecord], spec: &TaskSpec, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", trajectory_header(spec.state_dim, spec.action_dim))?;
    for ep in records {
        for st in &ep.steps {
            let mut line = format!("{},{}", ep.episode, st.t);
            for v in st.s.iter().chain(&st.a) {
                write!(line, ",{v}").expect("string write");
            }
            write!(line, ",{},{}", st.reward, st.success as u8).expect("string write");
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rolls out `n` episodes and writes them as CSV; `n = 0` writes the header only.
pub fn export_trajectories(
    policy: &mut dyn ActionPlanner,
    spec: &TaskSpec,
    n: usize,
    seed: u64,
    path: &Path,
) -> Result<Vec<EpisodeRecord>> {
    let records = rollouts(policy, spec, n, seed)?;
    write_trajectories(&records, spec, path)?;
    Ok(records)
}

/// Parses a trajectory CSV back into per-episode step lists.
pub fn read_trajectories(path: &Path, state_dim: usize, action_dim: usize) -> Result<Vec<(usize, Vec<StepRecord>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty trajectory file".into()))?;
    if header != trajectory_header(state_dim, action_dim) {
        return Err(Error::Format(format!("unexpected trajectory header `{header}`")));
    }
    let mut out: Vec<(usize, Vec<StepRecord>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::Format(format!("trajectory row {}: malformed", n + 1));
        let v: Vec<f64> = line
            .split(',')
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if v.len() != 4 + state_dim + action_dim {
            return Err(bad());
        }
        let episode = v[0] as usize;
        let step = StepRecord {
            t: v[1] as usize,
            s: v[2..2 + state_dim].to_vec(),
            a: v[2 + state_dim..2 + state_dim + action_dim].to_vec(),
            reward: v[2 + state_dim + action_dim],
            success: v[3 + state_dim + action_dim] != 0.0,
        };
        match out.last_mut() {
            Some((e, steps)) if *e == episode => steps.push(step),
            _ => out.push((episode, vec![step])),
        }
    }
    Ok(out)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Default label of a metrics file: its stem with a trailing seed tag
/// (`_seed3`, `-seed3`, `_s3`) removed.
pub fn label_from_path(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for sep in ["_seed", "-seed", "_s", "-s"] {
        if let Some(idx) = stem.rfind(sep) {
            let tail = &stem[idx + sep.len()..];
            if !tail.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) {
                return stem[..idx].to_owned();
            }
        }
    }
    stem
}

/// Splits a `LABEL=PATH` argument; a bare path gets [`label_from_path`].
pub fn parse_report_input(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_owned(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            (label_from_path(&p), p)
        }
    }
}

/// Last value of `column` in a metrics CSV.
pub fn final_metric(path: &Path, column: &str) -> Result<f64> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty metrics file", path.display())))?;
    let idx = header
        .split(',')
        .position(|c| c == column)
        .ok_or_else(|| Error::Format(format!("{}: no `{column}` column", path.display())))?;
    let last = lines
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| Error::Format(format!("{}: no data rows", path.display())))?;
    last.split(',')
        .nth(idx)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: bad `{column}` value", path.display())))
}

/// Groups runs by label and summarizes the final rolling success rate.
pub fn ablation_report(inputs: &[(String, PathBuf)]) -> Result<Vec<ReportRow>> {
    if inputs.is_empty() {
        return Err(invalid("report needs at least one metrics file"));
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for (label, path) in inputs {
        let v = final_metric(path, "rolling_success_rate")?;
        if !groups.contains_key(label.as_str()) {
            order.push(label.as_str());
        }
        groups.entry(label).or_default().push(v);
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let vals = &groups[label];
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            ReportRow {
                label: label.to_owned(),
                runs: vals.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  {:>4}  {:>15}\n", "variant", "runs", "final success");
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:>4}  {:>7.3} ± {:<5.3}",
            r.label, r.runs, r.mean, r.std
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::register_default_suite;

    #[test]
    fn scripted_planner_solves_reach() {
        let suite = register_default_suite(50);
        let s = evaluate(&mut ScriptedPlanner, suite.get("reach").unwrap(), 50, 1).unwrap();
        assert!(s.success_rate >= 0.95, "{}", s.success_rate);
    }

    #[test]
    fn evaluation_is_seeded() {
        let suite = register_default_suite(20);
        let spec = suite.get("push").unwrap();
        let a = evaluate(&mut RandomPlanner, spec, 5, 3).unwrap();
        let b = evaluate(&mut RandomPlanner, spec, 5, 3).unwrap();
        assert_eq!(a, b);
        let c = evaluate(&mut RandomPlanner, spec, 5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_episodes_rejected() {
        let suite = register_default_suite(20);
        assert!(evaluate(&mut RandomPlanner, suite.get("reach").unwrap(), 0, 0).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let suite = register_default_suite(15);
        let spec = suite.get("reach_obstacle").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let recs = export_trajectories(&mut RandomPlanner, spec, 3, 0, &path).unwrap();
        let back = read_trajectories(&path, spec.state_dim, 2).unwrap();
        assert_eq!(back.len(), 3);
        for ((e, steps), rec) in back.iter().zip(&recs) {
            assert_eq!(*e, rec.episode);
            assert_eq!(steps, &rec.steps);
        }
        export_trajectories(&mut RandomPlanner, spec, 0, 0, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn labels_drop_seed_suffix() {
        assert_eq!(label_from_path(Path::new("out/bc_seed2.csv")), "bc");
        assert_eq!(label_from_path(Path::new("kl-seed10.csv")), "kl");
        assert_eq!(label_from_path(Path::new("none.csv")), "none");
        assert_eq!(parse_report_input("x=runs/a.csv").0, "x");
    }

    #[test]
    fn report_groups_runs() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, v: f64| {
            let p = dir.path().join(name);
            fs::write(&p, format!("episode,rolling_success_rate\n0,0.1\n1,{v}\n")).unwrap();
            p
        };
        let a = write("bc_seed0.csv", 0.5);
        let b = write("bc_seed1.csv", 0.7);
        assert!(ablation_report(&[]).is_err());
        let one = ablation_report(&[("bc".into(), a.clone())]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].mean, 0.5);
        let dup = ablation_report(&[("x".into(), a.clone()), ("y".into(), a.clone())]).unwrap();
        assert_eq!((dup[0].mean, dup[0].std), (dup[1].mean, dup[1].std));
        let two = ablation_report(&[("bc".into(), a), ("bc".into(), b)]).unwrap();
        assert_eq!(two[0].runs, 2);
        assert!((two[0].mean - 0.6).abs() < 1e-12);
        assert!(format_report(&two).contains("bc"));
    }
}

//! Synthetic multi-task continuous-control suite.
//!
//! All tasks share a 2-D action space in `[-1, 1]^2` and a planar arena
//! `[-1, 1]^2`; they differ in state layout, dynamics and reward. Rewards are
//! dense: a shaped term in `[-2, 0]` plus a bonus of +1 on every step the
//! success predicate holds. Success is latched per episode.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, Error, Result};

pub const ACTION_DIM: usize = 2;
pub const ARENA: f64 = 1.0;
pub const DEFAULT_EPISODE_LENGTH: usize = 50;
pub const SHAPED_REWARD_MIN: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// The agent position moves by `velocity * action`.
    Point { velocity: f64 },
    /// Point agent that shoves a puck out of its contact radius.
    Push { velocity: f64, contact_radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `-|pos - goal|`.
    GoalDistance,
    /// Goal distance plus a constant penalty while inside the obstacle disk.
    ObstaclePenalty { radius: f64, penalty: f64 },
    /// `-(|puck - goal| + agent_weight * |agent - puck|)`.
    PuckToGoal { agent_weight: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dynamics: Dynamics,
    pub reward: RewardKind,
    /// Success when the tracked point is strictly closer than this to the goal.
    pub success_radius: f64,
    pub success_bonus: f64,
    pub episode_length: usize,
    /// Initial agent position is uniform in `[-start_half_width, start_half_width]^2`.
    pub start_half_width: f64,
    /// Goal is uniform in `[-goal_half_width, goal_half_width]^2` when randomized.
    pub goal_half_width: f64,
    pub randomize_goal: bool,
    pub fixed_goal: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub task_id: String,
    pub t: usize,
    /// Task-native state vector (unpadded).
    pub s: Vec<f64>,
    pub goal: [f64; 2],
    pub rng: ChaCha8Rng,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_arena(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-ARENA, ARENA), p[1].clamp(-ARENA, ARENA)]
}

fn segment_point_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let u = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist([a[0] + u * ab[0], a[1] + u * ab[1]], p)
}

fn pair(s: &[f64], at: usize) -> [f64; 2] {
    [s[at], s[at + 1]]
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 {
            return Err(invalid(format!("task {}: episode length 0", self.task_id)));
        }
        if self.action_dim != ACTION_DIM {
            return Err(invalid(format!("task {}: action dim must be 2", self.task_id)));
        }
        let expected = match (&self.dynamics, &self.reward) {
            (Dynamics::Push { .. }, _) => 4,
            (_, RewardKind::ObstaclePenalty { .. }) => 6,
            _ => 4,
        };
        if self.state_dim != expected {
            return Err(invalid(format!(
                "task {}: state dim {} but layout needs {expected}",
                self.task_id, self.state_dim
            )));
        }
        Ok(())
    }

    fn is_push(&self) -> bool {
        matches!(self.dynamics, Dynamics::Push { .. })
    }

    /// Point whose distance to the goal decides success.
    fn tracked(&self, s: &[f64]) -> [f64; 2] {
        if self.is_push() {
            pair(s, 2)
        } else {
            pair(s, 0)
        }
    }

    /// Goal of an episode as read from a task-native state.
    pub fn goal_of(&self, s: &[f64]) -> [f64; 2] {
        if self.randomize_goal && !self.is_push() {
            pair(s, 2)
        } else {
            self.fixed_goal
        }
    }

    /// Distance from the tracked point (agent, or puck for push) to the goal.
    pub fn goal_distance(&self, s: &[f64]) -> f64 {
        dist(self.tracked(s), self.goal_of(s))
    }

    /// Largest magnitude of a single-step reward.
    pub fn reward_bounds(&self) -> (f64, f64) {
        (SHAPED_REWARD_MIN, self.success_bonus)
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Uniform::new_inclusive(-self.start_half_width, self.start_half_width)
            .expect("finite box");
        let goal_box =
            Uniform::new_inclusive(-self.goal_half_width, self.goal_half_width).expect("finite box");
        let goal = if self.randomize_goal {
            [goal_box.sample(&mut rng), goal_box.sample(&mut rng)]
        } else {
            self.fixed_goal
        };
        let pos = [start.sample(&mut rng), start.sample(&mut rng)];
        let s = match (&self.dynamics, &self.reward) {
            (Dynamics::Push { contact_radius, .. }, _) => {
                let puck_box = Uniform::new_inclusive(-0.4, 0.4).expect("finite box");
                // Resample until the agent starts clear of the puck.
                let mut puck = [puck_box.sample(&mut rng), puck_box.sample(&mut rng)];
                while dist(pos, puck) < 2.0 * contact_radius || dist(puck, goal) < self.success_radius
                {
                    puck = [puck_box.sample(&mut rng), puck_box.sample(&mut rng)];
                }
                vec![pos[0], pos[1], puck[0], puck[1]]
            }
            (_, RewardKind::ObstaclePenalty { .. }) => {
                // The obstacle sits near the midpoint of the straight path.
                let jitter = Uniform::new_inclusive(-0.05, 0.05).expect("finite box");
                let obs = [
                    0.5 * (pos[0] + goal[0]) + jitter.sample(&mut rng),
                    0.5 * (pos[1] + goal[1]) + jitter.sample(&mut rng),
                ];
                vec![pos[0], pos[1], goal[0], goal[1], obs[0], obs[1]]
            }
            _ => vec![pos[0], pos[1], goal[0], goal[1]],
        };
        let mut env = EnvState {
            task_id: self.task_id.clone(),
            t: 0,
            s,
            goal,
            rng,
            done: false,
            success: false,
        };
        env.success = dist(self.tracked(&env.s), goal) < self.success_radius;
        env
    }

    fn shaped_reward(&self, s: &[f64], goal: [f64; 2]) -> f64 {
        let r = match &self.reward {
            RewardKind::GoalDistance => -dist(pair(s, 0), goal),
            RewardKind::ObstaclePenalty { radius, penalty } => {
                let inside = dist(pair(s, 0), pair(s, 4)) < *radius;
                -dist(pair(s, 0), goal) - if inside { *penalty } else { 0.0 }
            }
            RewardKind::PuckToGoal { agent_weight } => {
                -dist(pair(s, 2), goal) - agent_weight * dist(pair(s, 0), pair(s, 2))
            }
        };
        r.max(SHAPED_REWARD_MIN)
    }

    /// Advances `env` by one action (clamped to `[-1, 1]` first).
    pub fn step(&self, env: &mut EnvState, action: &[f64]) -> Result<StepOutcome> {
        if env.done {
            return Err(Error::ContractViolation(format!(
                "task {}: step on a finished episode",
                self.task_id
            )));
        }
        if env.task_id != self.task_id {
            return Err(invalid(format!(
                "env belongs to task {}, not {}",
                env.task_id, self.task_id
            )));
        }
        if action.len() != self.action_dim || action.iter().any(|a| !a.is_finite()) {
            return Err(invalid("action must be finite with A = 2 entries"));
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        match self.dynamics {
            Dynamics::Point { velocity } => {
                let p = clamp_arena([env.s[0] + velocity * a[0], env.s[1] + velocity * a[1]]);
                env.s[0] = p[0];
                env.s[1] = p[1];
            }
            Dynamics::Push {
                velocity,
                contact_radius,
            } => {
                let agent = clamp_arena([env.s[0] + velocity * a[0], env.s[1] + velocity * a[1]]);
                let mut puck = pair(&env.s, 2);
                let d = dist(agent, puck);
                if d < contact_radius {
                    let dir = if d > 1e-12 {
                        [(puck[0] - agent[0]) / d, (puck[1] - agent[1]) / d]
                    } else {
                        let n = (a[0] * a[0] + a[1] * a[1]).sqrt().max(1e-12);
                        [a[0] / n, a[1] / n]
                    };
                    puck = clamp_arena([
                        agent[0] + contact_radius * dir[0],
                        agent[1] + contact_radius * dir[1],
                    ]);
                }
                env.s[..2].copy_from_slice(&agent);
                env.s[2..4].copy_from_slice(&puck);
            }
        }
        env.t += 1;
        let in_goal = dist(self.tracked(&env.s), env.goal) < self.success_radius;
        env.success |= in_goal;
        let reward =
            self.shaped_reward(&env.s, env.goal) + if in_goal { self.success_bonus } else { 0.0 };
        env.done = env.t >= self.episode_length;
        Ok(StepOutcome {
            reward,
            done: env.done,
            success: env.success,
        })
    }

    /// Hand-written proportional controller that solves the task.
    pub fn scripted_action(&self, env: &EnvState) -> [f64; 2] {
        // Proportional step toward `to`, saturated at unit speed.
        let toward = |from: [f64; 2], to: [f64; 2], velocity: f64| {
            let d = [(to[0] - from[0]) / velocity, (to[1] - from[1]) / velocity];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if n > 1.0 {
                [d[0] / n, d[1] / n]
            } else {
                d
            }
        };
        let pos = pair(&env.s, 0);
        match (&self.dynamics, &self.reward) {
            (Dynamics::Point { velocity }, RewardKind::ObstaclePenalty { radius, .. }) => {
                let obs = pair(&env.s, 4);
                let margin = radius + 0.08;
                let to_goal = [env.goal[0] - pos[0], env.goal[1] - pos[1]];
                let gd = (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt();
                let rel = [pos[0] - obs[0], pos[1] - obs[1]];
                let od = (rel[0].powi(2) + rel[1].powi(2)).sqrt().max(1e-9);
                // Ahead of us and close: steer to a waypoint on the near side of the disk.
                let ahead = rel[0] * to_goal[0] + rel[1] * to_goal[1] < 0.0;
                let goal_inside = dist(env.goal, obs) < margin;
                if ahead && od < margin + 0.25 && !goal_inside && gd > 1e-9 {
                    let perp = [-to_goal[1] / gd, to_goal[0] / gd];
                    let side = if rel[0] * perp[0] + rel[1] * perp[1] >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    };
                    let waypoint = [
                        obs[0] + side * perp[0] * (margin + 0.05),
                        obs[1] + side * perp[1] * (margin + 0.05),
                    ];
                    let dir = [waypoint[0] - pos[0], waypoint[1] - pos[1]];
                    let n = (dir[0].powi(2) + dir[1].powi(2)).sqrt().max(1e-9);
                    return [dir[0] / n, dir[1] / n];
                }
                toward(pos, env.goal, *velocity)
            }
            (Dynamics::Point { velocity }, _) => toward(pos, env.goal, *velocity),
            (
                Dynamics::Push {
                    velocity,
                    contact_radius,
                },
                _,
            ) => {
                let r = *contact_radius;
                let puck = pair(&env.s, 2);
                let gd = dist(puck, env.goal).max(1e-9);
                let dir = [(env.goal[0] - puck[0]) / gd, (env.goal[1] - puck[1]) / gd];
                let perp = [-dir[1], dir[0]];
                let rel = [pos[0] - puck[0], pos[1] - puck[1]];
                let along = rel[0] * dir[0] + rel[1] * dir[1];
                let lateral = rel[0] * perp[0] + rel[1] * perp[1];
                if along < -0.5 * r && lateral.abs() < 0.04 {
                    // Lined up: aim just behind the puck center so contact pushes it goalward.
                    let target = [puck[0] - dir[0] * 0.03, puck[1] - dir[1] * 0.03];
                    return toward(pos, target, *velocity);
                }
                let behind = [puck[0] - dir[0] * (r + 0.05), puck[1] - dir[1] * (r + 0.05)];
                if segment_point_distance(pos, behind, puck) > r + 0.02 {
                    return toward(pos, behind, *velocity);
                }
                // The direct path would bump the puck: detour via its flank.
                let side = if lateral >= 0.0 { 1.0 } else { -1.0 };
                let flank = [
                    puck[0] + side * perp[0] * (r + 0.08) - dir[0] * 0.05,
                    puck[1] + side * perp[1] * (r + 0.08) - dir[1] * 0.05,
                ];
                toward(pos, flank, *velocity)
            }
        }
    }
}

/// The registered tasks; every task has the same action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<TaskSuite> {
        if tasks.is_empty() {
            return Err(invalid("task suite is empty"));
        }
        for t in &tasks {
            t.validate()?;
        }
        if tasks.iter().any(|t| t.action_dim != tasks[0].action_dim) {
            return Err(invalid("all tasks must share one action space"));
        }
        Ok(TaskSuite { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.task_id.as_str()).collect()
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown task `{task_id}` (known: {})",
                    self.ids().join(", ")
                ))
            })
    }

    pub fn index_of(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    pub fn reset(&self, task_id: &str, seed: u64) -> Result<EnvState> {
        Ok(self.get(task_id)?.reset(seed))
    }

    /// State width every planner input is padded to.
    pub fn max_state_dim(&self) -> usize {
        self.tasks.iter().map(|t| t.state_dim).max().unwrap_or(0)
    }

    pub fn action_dim(&self) -> usize {
        self.tasks[0].action_dim
    }
}

impl fmt::Display for TaskSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tasks {
            writeln!(
                f,
                "{:<16} S={} L={} goal={}",
                t.task_id,
                t.state_dim,
                t.episode_length,
                if t.randomize_goal { "random" } else { "fixed" }
            )?;
        }
        Ok(())
    }
}

/// Four tasks: `reach`, `reach_obstacle`, `push`, `slow_reach`.
pub fn register_default_suite(episode_length: usize) -> TaskSuite {
    let base = TaskSpec {
        task_id: "reach".into(),
        state_dim: 4,
        action_dim: ACTION_DIM,
        dynamics: Dynamics::Point { velocity: 0.1 },
        reward: RewardKind::GoalDistance,
        success_radius: 0.05,
        success_bonus: 1.0,
        episode_length,
        start_half_width: 0.9,
        goal_half_width: 0.9,
        randomize_goal: true,
        fixed_goal: [0.0, 0.0],
    };
    let obstacle = TaskSpec {
        task_id: "reach_obstacle".into(),
        state_dim: 6,
        reward: RewardKind::ObstaclePenalty {
            radius: 0.15,
            penalty: 0.5,
        },
        ..base.clone()
    };
    let push = TaskSpec {
        task_id: "push".into(),
        state_dim: 4,
        dynamics: Dynamics::Push {
            velocity: 0.1,
            contact_radius: 0.1,
        },
        reward: RewardKind::PuckToGoal { agent_weight: 0.5 },
        success_radius: 0.1,
        start_half_width: 0.8,
        randomize_goal: false,
        fixed_goal: [0.5, 0.5],
        ..base.clone()
    };
    let slow = TaskSpec {
        task_id: "slow_reach".into(),
        dynamics: Dynamics::Point { velocity: 0.05 },
        ..base.clone()
    };
    TaskSuite::new(vec![base, obstacle, push, slow]).expect("default suite is valid")
}

pub fn suite_by_name(name: &str, episode_length: usize) -> Result<TaskSuite> {
    match name {
        "default" => Ok(register_default_suite(episode_length)),
        _ => Err(invalid(format!("unknown suite `{name}` (expected default)"))),
    }
}

/// Uniform random actions in `[-1, 1]^A`.
pub fn random_action<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let u = Uniform::new_inclusive(-1.0, 1.0).expect("finite");
    (0..dim).map(|_| u.sample(rng)).collect()
}

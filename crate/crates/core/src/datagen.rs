//! Offline multi-task dataset: generation with a noisy scripted controller,
//! a binary file format, and the reward-blind training-window sampler.
//!
//! File layout: one ASCII header line
//!
//! ```text
//! DIFFPLAN-DATASET v1 state_dim=6 action_dim=2 records=N episodes=E tasks=reach,push
//! ```
//!
//! followed by `N` records of little-endian `f64`, each laid out as
//! `[task_index, episode_id, t, s[S], a[A], r, s_next[S], done, success]`.
//! States are zero-padded to `state_dim`. Records of an episode are contiguous
//! and ordered by `t`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{ActionSequence, StateHistory};
use crate::error::{invalid, Error, Result};
use crate::seed::derive_seed;
use crate::tasks::{random_action, TaskSuite};

const MAGIC: &str = "DIFFPLAN-DATASET";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    /// Index into [`Dataset::task_ids`].
    pub task: usize,
    pub episode_id: u64,
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpan {
    pub task: usize,
    pub episode_id: u64,
    pub start: usize,
    pub len: usize,
}

/// Per-task summary written to the sidecar manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    state_dim: usize,
    action_dim: usize,
    task_ids: Vec<String>,
    records: Vec<TransitionRecord>,
    episodes: Vec<EpisodeSpan>,
}

/// A pre-training sample. Deliberately carries no reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub s_hist: StateHistory,
    pub a_seq: ActionSequence,
    pub task: usize,
}

/// Zero-pads (or passes through) a task-native state to `width`.
pub fn pad_state(s: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    out[..s.len()].copy_from_slice(s);
    out
}

impl Dataset {
    /// Builds a dataset and indexes its episodes; records must be grouped by
    /// episode with `t` counting up from 0.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        task_ids: Vec<String>,
        records: Vec<TransitionRecord>,
    ) -> Result<Dataset> {
        let mut episodes: Vec<EpisodeSpan> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.s.len() != state_dim || r.s_next.len() != state_dim || r.a.len() != action_dim {
                return Err(Error::Format(format!("record {i}: wrong field widths")));
            }
            if r.task >= task_ids.len() {
                return Err(Error::Format(format!("record {i}: task index {}", r.task)));
            }
            match episodes.last_mut() {
                Some(ep) if ep.episode_id == r.episode_id && ep.task == r.task => {
                    if r.t != ep.len {
                        return Err(Error::Format(format!(
                            "record {i}: t={} but episode has {} steps so far",
                            r.t, ep.len
                        )));
                    }
                    if records[i - 1].s_next != r.s {
                        return Err(Error::Format(format!(
                            "record {i}: s does not continue previous s_next"
                        )));
                    }
                    ep.len += 1;
                }
                _ => {
                    if r.t != 0 {
                        return Err(Error::Format(format!("record {i}: episode starts at t={}", r.t)));
                    }
                    episodes.push(EpisodeSpan {
                        task: r.task,
                        episode_id: r.episode_id,
                        start: i,
                        len: 1,
                    });
                }
            }
        }
        Ok(Dataset {
            state_dim,
            action_dim,
            task_ids,
            records,
            episodes,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn episodes(&self) -> &[EpisodeSpan] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stats(&self) -> BTreeMap<String, TaskStats> {
        let mut acc: Vec<(usize, usize, f64)> = vec![(0, 0, 0.0); self.task_ids.len()];
        for ep in &self.episodes {
            let recs = &self.records[ep.start..ep.start + ep.len];
            let slot = &mut acc[ep.task];
            slot.0 += 1;
            slot.1 += recs.last().is_some_and(|r| r.success) as usize;
            slot.2 += recs.iter().map(|r| r.r).sum::<f64>();
        }
        self.task_ids
            .iter()
            .zip(acc)
            .map(|(id, (n, wins, ret))| {
                let denom = n.max(1) as f64;
                (
                    id.clone(),
                    TaskStats {
                        episodes: n,
                        success_rate: wins as f64 / denom,
                        mean_return: ret / denom,
                    },
                )
            })
            .collect()
    }

    /// Window anchored at record `index`.
    pub fn window_at(&self, index: usize, horizon: usize, obs_horizon: usize) -> Result<TrainingWindow> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| invalid(format!("record {index} out of range")))?;
        if horizon == 0 || obs_horizon == 0 {
            return Err(invalid("horizon and obs_horizon must be positive"));
        }
        let start = index - rec.t;
        let ep_len = self.episode_len_from(start);
        let mut s_rows = Vec::with_capacity(obs_horizon);
        for j in 0..obs_horizon {
            // Oldest first; times before 0 repeat s_0.
            let back = obs_horizon - 1 - j;
            let tt = rec.t.saturating_sub(back);
            s_rows.push(self.records[start + tt].s.clone());
        }
        let mut a_rows = Vec::with_capacity(horizon);
        for j in 0..horizon {
            let tt = (rec.t + j).min(ep_len - 1);
            a_rows.push(self.records[start + tt].a.clone());
        }
        Ok(TrainingWindow {
            s_hist: StateHistory::from_rows(&s_rows)?,
            a_seq: ActionSequence::from_rows(&a_rows)?,
            task: rec.task,
        })
    }

    fn episode_len_from(&self, start: usize) -> usize {
        let idx = self
            .episodes
            .binary_search_by_key(&start, |e| e.start)
            .expect("record belongs to an indexed episode");
        self.episodes[idx].len
    }

    /// Uniform over all (episode, t) pairs.
    pub fn sample_windows<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        horizon: usize,
        obs_horizon: usize,
        rng: &mut R,
    ) -> Result<Vec<TrainingWindow>> {
        if self.records.is_empty() {
            return Err(invalid("cannot sample windows from an empty dataset"));
        }
        (0..batch_size)
            .map(|_| self.window_at(rng.random_range(0..self.records.len()), horizon, obs_horizon))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "{MAGIC} {VERSION} state_dim={} action_dim={} records={} episodes={} tasks={}",
            self.state_dim,
            self.action_dim,
            self.records.len(),
            self.episodes.len(),
            self.task_ids.join(",")
        )?;
        for r in &self.records {
            let head = [r.task as f64, r.episode_id as f64, r.t as f64];
            let tail = [r.done as u8 as f64, r.success as u8 as f64];
            for v in head
                .iter()
                .chain(&r.s)
                .chain(&r.a)
                .chain(std::iter::once(&r.r))
                .chain(&r.s_next)
                .chain(&tail)
            {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let mut rd = BufReader::new(File::open(path)?);
        let mut header = String::new();
        rd.read_line(&mut header)?;
        let mut fields = header.trim_end().split(' ');
        if fields.next() != Some(MAGIC) || fields.next() != Some(VERSION) {
            return Err(Error::Format(format!(
                "{}: not a {MAGIC} {VERSION} file",
                path.display()
            )));
        }
        let kv: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let num = |key: &str| -> Result<usize> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("header field `{key}` missing or invalid")))
        };
        let (state_dim, action_dim, n) = (num("state_dim")?, num("action_dim")?, num("records")?);
        let task_ids: Vec<String> = kv
            .get("tasks")
            .filter(|t| !t.is_empty())
            .map(|t| t.split(',').map(str::to_owned).collect())
            .unwrap_or_default();
        let width = 3 + 2 * state_dim + action_dim + 3;
        let mut buf = vec![0u8; width * 8];
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            rd.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("record {i} truncated: {e}")))?;
            let v: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let (s0, a0) = (3, 3 + state_dim);
            let r_at = a0 + action_dim;
            let sn = r_at + 1;
            let flags = sn + state_dim;
            records.push(TransitionRecord {
                task: v[0] as usize,
                episode_id: v[1] as u64,
                t: v[2] as usize,
                s: v[s0..a0].to_vec(),
                a: v[a0..r_at].to_vec(),
                r: v[r_at],
                s_next: v[sn..flags].to_vec(),
                done: v[flags] != 0.0,
                success: v[flags + 1] != 0.0,
            });
        }
        if rd.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        let ds = Dataset::new(state_dim, action_dim, task_ids, records)?;
        let episodes = num("episodes")?;
        if ds.episodes.len() != episodes {
            return Err(Error::Format(format!(
                "header says {episodes} episodes, found {}",
                ds.episodes.len()
            )));
        }
        Ok(ds)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, st) in self.stats() {
            writeln!(w, "{id}.episodes = {}", st.episodes)?;
            writeln!(w, "{id}.success_rate = {}", st.success_rate)?;
            writeln!(w, "{id}.mean_return = {}", st.mean_return)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sidecar manifest path for a dataset file.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Reads a `task.key = value` manifest.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, TaskStats>> {
    let text = std::fs::read_to_string(path)?;
    let mut raw: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: no `=`", n + 1)))?;
        let (task, field) = key
            .trim()
            .rsplit_once('.')
            .ok_or_else(|| Error::Format(format!("manifest line {}: key without task", n + 1)))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad number", n + 1)))?;
        raw.entry(task.to_owned())
            .or_default()
            .insert(field.to_owned(), v);
    }
    raw.into_iter()
        .map(|(task, f)| {
            let get = |k: &str| {
                f.get(k)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("manifest: {task}.{k} missing")))
            };
            Ok((
                task.clone(),
                TaskStats {
                    episodes: get("episodes")? as usize,
                    success_rate: get("success_rate")?,
                    mean_return: get("mean_return")?,
                },
            ))
        })
        .collect()
}

/// Rolls out the scripted controller mixed with uniform noise,
/// `a = (1 - noise) a_ctrl + noise u`, on every task of the suite.
pub fn generate_dataset(
    suite: &TaskSuite,
    episodes_per_task: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(invalid(format!("noise_level {noise_level} outside [0, 1]")));
    }
    let width = suite.max_state_dim();
    let mut records = Vec::new();
    for (ti, spec) in suite.tasks().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ti as u64, 1]));
        for e in 0..episodes_per_task {
            let episode_id = e as u64;
            let mut env = spec.reset(derive_seed(seed, &[ti as u64, 0, episode_id]));
            while !env.done {
                let ctrl = spec.scripted_action(&env);
                let u = random_action(&mut rng, spec.action_dim);
                let a: Vec<f64> = ctrl
                    .iter()
                    .zip(&u)
                    .map(|(c, u)| (1.0 - noise_level) * c + noise_level * u)
                    .collect();
                let s = pad_state(&env.s, width);
                let t = env.t;
                let out = spec.step(&mut env, &a)?;
                records.push(TransitionRecord {
                    task: ti,
                    episode_id,
                    t,
                    s,
                    a,
                    r: out.reward,
                    s_next: pad_state(&env.s, width),
                    done: out.done,
                    success: out.success,
                });
            }
        }
    }
    let ids = suite.ids().into_iter().map(str::to_owned).collect();
    Dataset::new(width, suite.action_dim(), ids, records)
}

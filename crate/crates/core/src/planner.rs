//! A denoiser bundled with its noise schedule and execution horizon, plus the
//! checkpoint file format.
//!
//! A checkpoint starts with one ASCII header line, e.g.
//!
//! ```text
//! DIFFPLAN-CKPT v1 layers=98x256,256x256,256x24 H=12 A=2 To=2 S=6 E=32 K=100 schedule=cosine Ta=8
//! ```
//!
//! `layers` lists `fan_in x fan_out` per dense layer, input layer first. The
//! rest of the file is little-endian `f64`: for each layer its weight matrix
//! in row-major order (`fan_in` rows of `fan_out` values) followed by its
//! bias vector (`fan_out` values). Nothing follows the last bias.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::diffusion::{sample_action_sequence, ActionSequence, DenoisingTrace, StateHistory};
use crate::error::{invalid, Error, Result};
use crate::net::{Dense, Denoiser, DenoiserParams, NetConfig};
use crate::schedule::{build_schedule, NoiseSchedule, SamplerPlan, ScheduleKind};

const MAGIC: &str = "DIFFPLAN-CKPT";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    pub net: Denoiser,
    pub schedule: NoiseSchedule,
    /// Actions executed from each generated sequence before replanning (`T_a`).
    pub action_horizon: usize,
}

impl Planner {
    pub fn new<R: Rng + ?Sized>(
        config: NetConfig,
        schedule_kind: ScheduleKind,
        diffusion_steps: usize,
        action_horizon: usize,
        rng: &mut R,
    ) -> Result<Planner> {
        let schedule = build_schedule(schedule_kind, diffusion_steps)?;
        let net = Denoiser::new(config, rng)?;
        Planner::from_parts(net, schedule, action_horizon)
    }

    pub fn from_parts(net: Denoiser, schedule: NoiseSchedule, action_horizon: usize) -> Result<Planner> {
        if action_horizon == 0 || action_horizon > net.config().horizon {
            return Err(invalid(format!(
                "execution horizon {action_horizon} must be in 1..={}",
                net.config().horizon
            )));
        }
        Ok(Planner {
            net,
            schedule,
            action_horizon,
        })
    }

    pub fn config(&self) -> &NetConfig {
        self.net.config()
    }

    /// Draws one action sequence (clamped to `[-1, 1]`) for a state history.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        s_hist: &StateHistory,
        plan: &SamplerPlan,
        rng: &mut R,
        record: bool,
    ) -> Result<(ActionSequence, Option<DenoisingTrace>)> {
        sample_action_sequence(&self.net, s_hist, &self.schedule, plan, rng, record)
    }

    fn header(&self) -> String {
        let c = self.config();
        let layers: Vec<String> = c
            .layer_shapes()
            .iter()
            .map(|(i, o)| format!("{i}x{o}"))
            .collect();
        format!(
            "{MAGIC} {VERSION} layers={} H={} A={} To={} S={} E={} K={} schedule={} Ta={}",
            layers.join(","),
            c.horizon,
            c.action_dim,
            c.obs_horizon,
            c.state_dim,
            c.time_embed,
            self.schedule.len(),
            self.schedule.kind(),
            self.action_horizon
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", self.header())?;
        for layer in &self.net.params.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Planner> {
        let mut rd = BufReader::new(File::open(path)?);
        let mut header = String::new();
        rd.read_line(&mut header)?;
        let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
        let mut fields = header.trim_end().split(' ');
        if fields.next() != Some(MAGIC) || fields.next() != Some(VERSION) {
            return Err(bad(format!("not a {MAGIC} {VERSION} checkpoint")));
        }
        let kv: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let get = |key: &str| {
            kv.get(key)
                .copied()
                .ok_or_else(|| bad(format!("header field `{key}` missing")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| bad(format!("header field `{key}` is not a count")))
        };
        let shapes: Vec<(usize, usize)> = get("layers")?
            .split(',')
            .map(|s| {
                let (i, o) = s.split_once('x')?;
                Some((i.parse().ok()?, o.parse().ok()?))
            })
            .collect::<Option<_>>()
            .ok_or_else(|| bad("malformed layer list".into()))?;
        let config = NetConfig {
            horizon: num("H")?,
            action_dim: num("A")?,
            obs_horizon: num("To")?,
            state_dim: num("S")?,
            time_embed: num("E")?,
            hidden: shapes[..shapes.len().saturating_sub(1)]
                .iter()
                .map(|&(_, o)| o)
                .collect(),
        };
        if config.layer_shapes() != shapes {
            return Err(bad("layer shapes disagree with H, A, To, S, E".into()));
        }
        let kind: ScheduleKind = get("schedule")?.parse()?;
        let schedule = build_schedule(kind, num("K")?)?;

        let mut read_vals = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            rd.read_exact(&mut buf)
                .map_err(|e| bad(format!("truncated weights: {e}")))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let mut layers = Vec::with_capacity(shapes.len());
        for &(i, o) in &shapes {
            let weight = Array2::from_shape_vec((i, o), read_vals(i * o)?).expect("sized buffer");
            let bias = Array1::from_vec(read_vals(o)?);
            layers.push(Dense { weight, bias });
        }
        if rd.read(&mut [0u8; 1])? != 0 {
            return Err(bad("trailing bytes after last layer".into()));
        }
        let net = Denoiser::from_params(config, DenoiserParams { layers })?;
        Planner::from_parts(net, schedule, num("Ta")?)
    }
}

/// The last `T_o` states, zero-padded to the planner's state width. Before
/// `T_o` states have been seen, the first state fills the older rows.
#[derive(Debug, Clone)]
pub struct ObsWindow {
    rows: VecDeque<Vec<f64>>,
    obs_horizon: usize,
    width: usize,
}

impl ObsWindow {
    pub fn new(s0: &[f64], obs_horizon: usize, width: usize) -> Result<ObsWindow> {
        if s0.len() > width {
            return Err(invalid(format!(
                "state of width {} does not fit planner state width {width}",
                s0.len()
            )));
        }
        let padded = crate::datagen::pad_state(s0, width);
        Ok(ObsWindow {
            rows: std::iter::repeat_n(padded, obs_horizon).collect(),
            obs_horizon,
            width,
        })
    }

    pub fn push(&mut self, s: &[f64]) {
        self.rows.pop_front();
        self.rows.push_back(crate::datagen::pad_state(s, self.width));
    }

    pub fn history(&self) -> StateHistory {
        let mut flat = Vec::with_capacity(self.obs_horizon * self.width);
        for r in &self.rows {
            flat.extend_from_slice(r);
        }
        StateHistory::from_flat(self.obs_horizon, self.width, flat)
    }
}

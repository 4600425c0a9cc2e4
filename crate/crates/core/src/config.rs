//! Run configuration: a TOML file with sections `diffusion`, `net`, `env`,
//! `pretrain`, `finetune` and `eval`. Every key has a default, unknown keys
//! are rejected, and `section.key=value` overrides are applied on top of the
//! file before validation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::net::NetConfig;
use crate::schedule::{ddim_subsequence, NoiseSchedule, SamplerPlan, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; commands derive every random stream from it.
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub net: NetSection,
    pub env: EnvConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// `cosine` or `linear`.
    pub schedule: String,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub horizon: usize,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub time_embed: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub suite: String,
    pub episode_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_interval: usize,
    /// Evaluate success rates every this many steps (0 disables periodic evaluation).
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Bc,
    None,
    Kl,
    Pl,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 4] = [
        RegularizerKind::Bc,
        RegularizerKind::None,
        RegularizerKind::Kl,
        RegularizerKind::Pl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RegularizerKind::Bc => "bc",
            RegularizerKind::None => "none",
            RegularizerKind::Kl => "kl",
            RegularizerKind::Pl => "pl",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err("finetune.regularizer", format!("`{s}` is not one of bc, none, kl, pl")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardTransform {
    /// Running per-task standardization, clamped to `[-reward_clip, reward_clip]`.
    Standardize,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub clip_eps: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub ddim_steps: usize,
    pub eta: f64,
    /// Variance floor for sampler steps whose nominal variance is smaller.
    pub min_std: f64,
    pub clip_x0: bool,
    pub p_step: usize,
    /// Episodes collected under one `θ_old` snapshot before its `p_step` updates.
    pub episodes_per_round: usize,
    pub n_init: usize,
    /// Initial rollouts give up after `init_cap_factor * n_init` episodes.
    pub init_cap_factor: usize,
    pub regularizer: RegularizerKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub replay_capacity: usize,
    pub target_capacity: usize,
    pub proficiency_quantile: f64,
    pub proficiency_window: usize,
    /// Segments per policy-gradient minibatch (0 uses all segments of the round).
    pub batch_size: usize,
    pub reg_batch_size: usize,
    pub reward_transform: RewardTransform,
    pub reward_clip: f64,
    pub episodes: usize,
    pub max_env_steps: usize,
    pub rolling_window: usize,
    /// Write an intermediate checkpoint every this many episodes (0 disables).
    pub checkpoint_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub eta: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            diffusion: DiffusionConfig::default(),
            net: NetSection::default(),
            env: EnvConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            schedule: "cosine".into(),
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            horizon: 12,
            obs_horizon: 2,
            action_horizon: 8,
            time_embed: 32,
            hidden: vec![256, 256, 256],
        }
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            suite: "default".into(),
            episode_length: 50,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 20_000,
            batch_size: 256,
            lr: 1e-4,
            log_interval: 100,
            eval_interval: 0,
            eval_episodes: 20,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            clip_eps: 0.2,
            lambda: 1.0,
            gamma: 1.0,
            ddim_steps: 10,
            eta: 1.0,
            min_std: 0.1,
            clip_x0: true,
            p_step: 10,
            episodes_per_round: 1,
            n_init: 10,
            init_cap_factor: 20,
            regularizer: RegularizerKind::Bc,
            lr: 1e-5,
            lr_decay: 0.9999,
            lr_floor: 0.1,
            replay_capacity: 4096,
            target_capacity: 50,
            proficiency_quantile: 0.9,
            proficiency_window: 100,
            batch_size: 0,
            reg_batch_size: 64,
            reward_transform: RewardTransform::Standardize,
            reward_clip: 5.0,
            episodes: 1000,
            max_env_steps: 200_000,
            rolling_window: 20,
            checkpoint_interval: 0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 50,
            eta: 1.0,
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`finetune.regularizer=kl`).
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "empty path segment"));
    }
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{p}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Maps a deserialization error onto the dotted key at its source location.
fn deserialize_error(err: toml::de::Error, text: &str) -> Error {
    let msg = err.message().trim().to_owned();
    let Some(span) = err.span() else {
        return config_err("<config>", msg);
    };
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_owned();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_owned();
        }
        offset += line.len();
        if offset > span.start {
            break;
        }
    }
    let full = match (section.is_empty(), key.is_empty()) {
        (_, true) if !section.is_empty() => section,
        (true, _) => key,
        _ => format!("{section}.{key}"),
    };
    config_err(if full.is_empty() { "<config>" } else { &full }, msg)
}

impl Config {
    /// Builds a config from TOML text plus overrides, then validates it.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Config> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("<file>", e.message().trim()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).expect("table serializes");
        let cfg: Config =
            toml::from_str(&merged).map_err(|e| deserialize_error(e, &merged))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Config::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        match self.diffusion.schedule.as_str() {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear {
                beta_start: self.diffusion.beta_start,
                beta_end: self.diffusion.beta_end,
            }),
            other => Err(config_err(
                "diffusion.schedule",
                format!("`{other}` is not cosine or linear"),
            )),
        }
    }

    pub fn net_config(&self, state_dim: usize, action_dim: usize) -> NetConfig {
        NetConfig {
            horizon: self.net.horizon,
            action_dim,
            obs_horizon: self.net.obs_horizon,
            state_dim,
            time_embed: self.net.time_embed,
            hidden: self.net.hidden.clone(),
        }
    }

    /// Sampler used for fine-tuning rollouts.
    pub fn finetune_plan(&self, schedule: &NoiseSchedule) -> Result<SamplerPlan> {
        let f = &self.finetune;
        Ok(ddim_subsequence(schedule, f.ddim_steps, f.eta)?
            .with_clip_x0(f.clip_x0)
            .with_min_std(f.min_std))
    }

    /// Sampler used for evaluation: the fine-tuning plan with `eval.eta`.
    /// The variance floor only applies to stochastic plans.
    pub fn eval_plan(&self, schedule: &NoiseSchedule) -> Result<SamplerPlan> {
        let f = &self.finetune;
        let plan = ddim_subsequence(schedule, f.ddim_steps, self.eval.eta)?.with_clip_x0(f.clip_x0);
        Ok(if self.eval.eta > 0.0 {
            plan.with_min_std(f.min_std)
        } else {
            plan
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn need(ok: bool, key: &str, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(config_err(key, msg))
            }
        }
        self.schedule_kind()?;
        let d = &self.diffusion;
        need(d.steps >= 1, "diffusion.steps", "must be >= 1")?;
        if d.schedule == "linear" {
            need(
                0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0,
                "diffusion.beta_start",
                "need 0 < beta_start <= beta_end < 1",
            )?;
        }
        let n = &self.net;
        need(n.horizon >= 1, "net.horizon", "must be >= 1")?;
        need(n.obs_horizon >= 1, "net.obs_horizon", "must be >= 1")?;
        need(
            (1..=n.horizon).contains(&n.action_horizon),
            "net.action_horizon",
            "must be in 1..=net.horizon",
        )?;
        need(
            n.time_embed >= 2 && n.time_embed % 2 == 0,
            "net.time_embed",
            "must be even and >= 2",
        )?;
        need(n.hidden.iter().all(|&h| h > 0), "net.hidden", "widths must be positive")?;
        need(self.env.episode_length >= 1, "env.episode_length", "must be >= 1")?;
        let p = &self.pretrain;
        need(p.batch_size >= 1, "pretrain.batch_size", "must be >= 1")?;
        need(p.lr > 0.0 && p.lr.is_finite(), "pretrain.lr", "must be positive")?;
        need(p.log_interval >= 1, "pretrain.log_interval", "must be >= 1")?;
        let f = &self.finetune;
        need(f.clip_eps > 0.0, "finetune.clip_eps", "must be > 0")?;
        need(f.lambda >= 0.0, "finetune.lambda", "must be >= 0")?;
        need(f.gamma > 0.0 && f.gamma <= 1.0, "finetune.gamma", "must be in (0, 1]")?;
        need(
            f.ddim_steps >= 1 && f.ddim_steps <= d.steps,
            "finetune.ddim_steps",
            "must be in 1..=diffusion.steps",
        )?;
        need(f.eta > 0.0 && f.eta <= 1.0, "finetune.eta", "must be in (0, 1]; fine-tuning needs a stochastic sampler")?;
        need(f.min_std >= 0.0, "finetune.min_std", "must be >= 0")?;
        need(f.p_step >= 1, "finetune.p_step", "must be >= 1")?;
        need(f.episodes_per_round >= 1, "finetune.episodes_per_round", "must be >= 1")?;
        need(f.init_cap_factor >= 1, "finetune.init_cap_factor", "must be >= 1")?;
        need(f.lr > 0.0 && f.lr.is_finite(), "finetune.lr", "must be positive")?;
        need(f.lr_decay > 0.0 && f.lr_decay <= 1.0, "finetune.lr_decay", "must be in (0, 1]")?;
        need((0.0..=1.0).contains(&f.lr_floor), "finetune.lr_floor", "must be in [0, 1]")?;
        need(f.replay_capacity >= 1, "finetune.replay_capacity", "must be >= 1")?;
        need(f.target_capacity >= 1, "finetune.target_capacity", "must be >= 1")?;
        need(
            (0.0..1.0).contains(&f.proficiency_quantile),
            "finetune.proficiency_quantile",
            "must be in [0, 1)",
        )?;
        need(f.proficiency_window >= 1, "finetune.proficiency_window", "must be >= 1")?;
        need(f.reg_batch_size >= 1, "finetune.reg_batch_size", "must be >= 1")?;
        need(f.reward_clip > 0.0, "finetune.reward_clip", "must be > 0")?;
        need(f.rolling_window >= 1, "finetune.rolling_window", "must be >= 1")?;
        need(self.eval.episodes >= 1, "eval.episodes", "must be >= 1")?;
        need((0.0..=1.0).contains(&self.eval.eta), "eval.eta", "must be in [0, 1]")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.diffusion.steps, 100);
        assert_eq!(cfg.net.horizon, 12);
        assert_eq!(cfg.finetune.p_step, 10);
        assert_eq!(cfg.finetune.regularizer, RegularizerKind::Bc);
    }

    #[test]
    fn overrides_beat_file() {
        let text = "[finetune]\nlambda = 0.5\nregularizer = \"kl\"\n";
        let cfg = Config::from_toml_str(
            text,
            &["finetune.lambda=0.25".into(), "net.hidden=[32, 32]".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.finetune.lambda, 0.25);
        assert_eq!(cfg.finetune.regularizer, RegularizerKind::Kl);
        assert_eq!(cfg.net.hidden, vec![32, 32]);
        assert_eq!(cfg.seed, 9);
        let cfg = Config::from_toml_str("", &["finetune.regularizer=pl".into()]).unwrap();
        assert_eq!(cfg.finetune.regularizer, RegularizerKind::Pl);
    }

    #[test]
    fn errors_name_the_key() {
        let e = Config::from_toml_str("[finetune]\ngamma = 1.5\n", &[]).unwrap_err();
        assert_eq!(key_of(e), "finetune.gamma");
        let e = Config::from_toml_str("[net]\nwidth = 3\n", &[]).unwrap_err();
        assert_eq!(key_of(e), "net.width");
        let e = Config::from_toml_str("[pretrain]\nlr = \"fast\"\n", &[]).unwrap_err();
        assert_eq!(key_of(e), "pretrain.lr");
        let e = Config::from_toml_str("", &["finetune.clip_eps=0".into()]).unwrap_err();
        assert_eq!(key_of(e), "finetune.clip_eps");
        let e = Config::from_toml_str("", &["finetune.regularizer=l2".into()]).unwrap_err();
        assert_eq!(key_of(e), "finetune.regularizer");
        let e = Config::from_toml_str("", &["diffusion.schedule=sigmoid".into()]).unwrap_err();
        assert_eq!(key_of(e), "diffusion.schedule");
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = Config::default();
        cfg.finetune.regularizer = RegularizerKind::None;
        cfg.net.hidden = vec![8];
        let back = Config::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn eval_plan_floor_only_when_stochastic() {
        let cfg = Config::from_toml_str("", &["eval.eta=0".into()]).unwrap();
        let sched = crate::schedule::build_schedule(cfg.schedule_kind().unwrap(), 100).unwrap();
        let plan = cfg.eval_plan(&sched).unwrap();
        assert!(plan.steps.iter().all(|s| plan.variance(s) == 0.0));
        let plan = cfg.finetune_plan(&sched).unwrap();
        assert!(plan.steps.iter().all(|s| plan.variance(s) > 0.0));
    }
}

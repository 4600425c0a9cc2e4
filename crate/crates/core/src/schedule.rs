//! Noise schedules and sampler plans.
//!
//! Diffusion steps are indexed `k = 1..=K`; `k = 0` is the clean sample.
//! Per-step arrays store step `k` at slot `k - 1`, and the accessors take
//! the 1-based step directly.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Offset of the cosine schedule, keeps `beta` away from zero near `k = 0`.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp for `beta` under the cosine schedule.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Cosine,
    Linear { beta_start: f64, beta_end: f64 },
}

impl ScheduleKind {
    pub const DEFAULT_LINEAR: ScheduleKind = ScheduleKind::Linear {
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear { .. } => "linear",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => write!(f, "linear:{beta_start:e}:{beta_end:e}"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    /// Accepts `cosine`, `linear`, or `linear:<beta_start>:<beta_end>`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        match parts.next() {
            Some("cosine") if parts.next().is_none() => Ok(ScheduleKind::Cosine),
            Some("linear") => {
                let rest: Vec<&str> = parts.collect();
                match rest.as_slice() {
                    [] => Ok(Self::DEFAULT_LINEAR),
                    [a, b] => {
                        let beta_start = a
                            .parse()
                            .map_err(|_| invalid(format!("bad beta_start `{a}`")))?;
                        let beta_end = b
                            .parse()
                            .map_err(|_| invalid(format!("bad beta_end `{b}`")))?;
                        Ok(ScheduleKind::Linear {
                            beta_start,
                            beta_end,
                        })
                    }
                    _ => Err(invalid(format!("bad schedule kind `{s}`"))),
                }
            }
            _ => Err(invalid(format!(
                "unknown schedule kind `{s}` (expected cosine or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    posterior_vars: Vec<f64>,
}

fn cosine_f(k: f64, steps: f64) -> f64 {
    let x = ((k / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * FRAC_PI_2;
    x.cos().powi(2)
}

/// Builds a schedule of `steps` diffusion steps.
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs K >= 1"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let total = steps as f64;
            let f0 = cosine_f(0.0, total);
            let mut prev = 1.0;
            (1..=steps)
                .map(|k| {
                    let ab = cosine_f(k as f64, total) / f0;
                    let beta = (1.0 - ab / prev).min(MAX_BETA);
                    prev = ab;
                    beta
                })
                .collect()
        }
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        } => {
            let denom = (steps.max(2) - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
                .collect()
        }
    };
    if let Some((i, b)) = betas
        .iter()
        .enumerate()
        .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
    {
        return Err(invalid(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
    }

    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let sigmas = betas.iter().map(|b| b.sqrt()).collect();
    let posterior_vars = (0..steps)
        .map(|i| {
            let ab_prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            (1.0 - alphas[i]) * (1.0 - ab_prev) / (1.0 - alpha_bars[i])
        })
        .collect();

    let schedule = NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
        sigmas,
        posterior_vars,
    };
    schedule.check_invariants()?;
    Ok(schedule)
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `K`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn slot(&self, k: usize) -> usize {
        assert!(
            (1..=self.len()).contains(&k),
            "diffusion step {k} outside 1..={}",
            self.len()
        );
        k - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[self.slot(k)]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[self.slot(k)]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[self.slot(k)]
        }
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[self.slot(k)]
    }

    pub fn posterior_var(&self, k: usize) -> f64 {
        self.posterior_vars[self.slot(k)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut prev = 1.0;
        for k in 1..=self.len() {
            let (b, ab) = (self.beta(k), self.alpha_bar(k));
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("beta[{k}] = {b} outside (0, 1)")));
            }
            if ab >= prev {
                return Err(invalid(format!("alpha_bar not decreasing at k={k}")));
            }
            if (ab - prev * self.alpha(k)).abs() > 1e-12 {
                return Err(invalid(format!("alpha_bar product broken at k={k}")));
            }
            if self.posterior_var(k) > b {
                return Err(invalid(format!("posterior variance exceeds beta at k={k}")));
            }
            prev = ab;
        }
        Ok(())
    }
}

/// Variance used by the full-length ancestral sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// `sigma_k^2 = beta_k`.
    SqrtBeta,
    /// The forward-process posterior variance.
    Posterior,
}

impl FromStr for VarianceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_beta" => Ok(VarianceMode::SqrtBeta),
            "posterior" => Ok(VarianceMode::Posterior),
            _ => Err(invalid(format!(
                "unknown variance mode `{s}` (expected sqrt_beta or posterior)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanKind {
    Ancestral(VarianceMode),
    Ddim { eta: f64 },
}

/// One reverse transition `k -> k_prev` with its nominal variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStep {
    pub k: usize,
    pub k_prev: usize,
    pub sigma2: f64,
}

/// Ordered reverse steps from `K` down to 0.
///
/// `min_var` floors the noise actually injected (and recorded) at each step;
/// the nominal `sigma2` still enters the DDIM mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub kind: PlanKind,
    pub steps: Vec<PlanStep>,
    pub clip_x0: bool,
    pub min_var: f64,
    num_train_steps: usize,
}

impl SamplerPlan {
    /// Every step `K, K-1, ..., 1` with ancestral (DDPM) means.
    pub fn ancestral(schedule: &NoiseSchedule, mode: VarianceMode) -> SamplerPlan {
        let steps = (1..=schedule.len())
            .rev()
            .map(|k| PlanStep {
                k,
                k_prev: k - 1,
                sigma2: match mode {
                    VarianceMode::SqrtBeta => schedule.beta(k),
                    VarianceMode::Posterior => schedule.posterior_var(k),
                },
            })
            .collect();
        SamplerPlan {
            kind: PlanKind::Ancestral(mode),
            steps,
            clip_x0: false,
            min_var: 0.0,
            num_train_steps: schedule.len(),
        }
    }

    pub fn with_clip_x0(mut self, clip: bool) -> Self {
        self.clip_x0 = clip;
        self
    }

    pub fn with_min_std(mut self, min_std: f64) -> Self {
        self.min_var = min_std * min_std;
        self
    }

    /// Variance of the Gaussian actually drawn from at `step`.
    pub fn variance(&self, step: &PlanStep) -> f64 {
        step.sigma2.max(self.min_var)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.k).collect()
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_train_steps != schedule.len() {
            return Err(invalid(format!(
                "sampler plan built for K={} used with K={}",
                self.num_train_steps,
                schedule.len()
            )));
        }
        Ok(())
    }

    /// True when every recorded transition has positive variance.
    pub fn is_stochastic(&self) -> bool {
        self.steps.iter().all(|s| self.variance(s) > 0.0)
    }
}

/// Evenly spaced DDIM subsequence of `steps` indices from `K` down to 1.
pub fn ddim_subsequence(schedule: &NoiseSchedule, steps: usize, eta: f64) -> Result<SamplerPlan> {
    let total = schedule.len();
    if steps < 1 || steps > total {
        return Err(invalid(format!("DDIM steps {steps} outside 1..={total}")));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(invalid(format!("DDIM eta {eta} must be finite and >= 0")));
    }
    let indices: Vec<usize> = if steps == 1 {
        vec![total]
    } else {
        let stride = (total - 1) as f64 / (steps - 1) as f64;
        (0..steps)
            .map(|i| (total as f64 - i as f64 * stride).round() as usize)
            .collect()
    };
    let plan_steps = indices
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let k_prev = indices.get(i + 1).copied().unwrap_or(0);
            let ab = schedule.alpha_bar(k);
            let ab_prev = schedule.alpha_bar(k_prev);
            // Adjacent steps use 1 - alpha_k directly so a full-length plan
            // reproduces the posterior variance bit for bit.
            let one_minus_ratio = if k_prev + 1 == k {
                1.0 - schedule.alpha(k)
            } else {
                1.0 - ab / ab_prev
            };
            let sigma2 = eta * eta * (one_minus_ratio * (1.0 - ab_prev) / (1.0 - ab));
            PlanStep { k, k_prev, sigma2 }
        })
        .collect();
    Ok(SamplerPlan {
        kind: PlanKind::Ddim { eta },
        steps: plan_steps,
        clip_x0: false,
        min_var: 0.0,
        num_train_steps: total,
    })
}

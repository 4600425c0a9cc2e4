//! Forward noising, reverse sampling and the denoising losses.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{invalid, Error, Result};
use crate::net::{Denoiser, ForwardCache, GradientBundle, NoiseExample};
use crate::schedule::{NoiseSchedule, PlanKind, PlanStep, SamplerPlan};

macro_rules! matrix_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Array2<f64>);

        impl $name {
            pub fn zeros(rows: usize, cols: usize) -> Self {
                Self(Array2::zeros((rows, cols)))
            }

            pub fn from_array(data: Array2<f64>) -> Self {
                Self(data.as_standard_layout().into_owned())
            }

            /// Row-major values; panics if `values.len() != rows * cols`.
            pub fn from_flat(rows: usize, cols: usize, values: Vec<f64>) -> Self {
                Self(Array2::from_shape_vec((rows, cols), values).expect("shape matches length"))
            }

            pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(invalid("ragged rows"));
                }
                Ok(Self::from_flat(rows.len(), cols, rows.concat()))
            }

            pub fn dim(&self) -> (usize, usize) {
                self.0.dim()
            }

            pub fn as_array(&self) -> &Array2<f64> {
                &self.0
            }

            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice().expect("standard layout")
            }

            pub fn as_slice_mut(&mut self) -> &mut [f64] {
                self.0.as_slice_mut().expect("standard layout")
            }

            pub fn row(&self, i: usize) -> &[f64] {
                let cols = self.0.ncols();
                &self.as_slice()[i * cols..(i + 1) * cols]
            }

            pub fn to_rows(&self) -> Vec<Vec<f64>> {
                self.0.rows().into_iter().map(|r| r.to_vec()).collect()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }
    };
}

matrix_newtype!(
    /// `H x A` block of planned actions at one denoising level.
    ActionSequence
);

matrix_newtype!(
    /// `T_o x S` recent states, most recent last.
    StateHistory
);

impl ActionSequence {
    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self(Array2::from_shape_simple_fn((rows, cols), || {
            rng.sample(StandardNormal)
        }))
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self(self.0.mapv(|v| v.clamp(lo, hi)))
    }

    pub fn squared_distance(&self, other: &ActionSequence) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// `sqrt(abar_k) a0 + sqrt(1 - abar_k) eps`.
pub fn forward_noise(
    a0: &ActionSequence,
    k: usize,
    eps: &ActionSequence,
    schedule: &NoiseSchedule,
) -> Result<ActionSequence> {
    if a0.dim() != eps.dim() {
        return Err(invalid("noise shape differs from clean sample"));
    }
    if !(1..=schedule.len()).contains(&k) {
        return Err(invalid(format!("diffusion step {k} outside 1..={}", schedule.len())));
    }
    let ab = schedule.alpha_bar(k);
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = a0.clone();
    for (o, e) in out.as_slice_mut().iter_mut().zip(eps.as_slice()) {
        *o = c0 * *o + c1 * e;
    }
    Ok(out)
}

/// Ancestral reverse mean for one coordinate: returns the mean and its
/// derivative with respect to the predicted noise.
pub fn ancestral_mean(alpha: f64, alpha_bar: f64, a: f64, eps: f64) -> (f64, f64) {
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    (inv_sqrt_alpha * (a - coef * eps), -inv_sqrt_alpha * coef)
}

/// Per-coordinate mean of one reverse transition and its derivative with
/// respect to the predicted noise.
pub fn transition_mean(
    schedule: &NoiseSchedule,
    kind: PlanKind,
    clip_x0: bool,
    step: &PlanStep,
    a_in: &[f64],
    eps: &[f64],
    mean: &mut [f64],
    dmean_deps: &mut [f64],
) {
    let k = step.k;
    match kind {
        PlanKind::Ancestral(_) => {
            let (alpha, alpha_bar) = (schedule.alpha(k), schedule.alpha_bar(k));
            for i in 0..a_in.len() {
                (mean[i], dmean_deps[i]) = ancestral_mean(alpha, alpha_bar, a_in[i], eps[i]);
            }
        }
        PlanKind::Ddim { .. } => {
            let ab = schedule.alpha_bar(k);
            let ab_prev = schedule.alpha_bar(step.k_prev);
            let (sqrt_ab, sqrt_1m_ab) = (ab.sqrt(), (1.0 - ab).sqrt());
            let sqrt_ab_prev = ab_prev.sqrt();
            let dir = (1.0 - ab_prev - step.sigma2).max(0.0).sqrt();
            for i in 0..a_in.len() {
                let x0 = (a_in[i] - sqrt_1m_ab * eps[i]) / sqrt_ab;
                let (x0, dx0) = if clip_x0 && x0.abs() > 1.0 {
                    (x0.signum(), 0.0)
                } else {
                    (x0, -sqrt_1m_ab / sqrt_ab)
                };
                mean[i] = sqrt_ab_prev * x0 + dir * eps[i];
                dmean_deps[i] = sqrt_ab_prev * dx0 + dir;
            }
        }
    }
}

/// Mean of the ancestral reverse kernel at step `k`.
pub fn reverse_step_mean(
    net: &Denoiser,
    a_k: &ActionSequence,
    s: &StateHistory,
    k: usize,
    schedule: &NoiseSchedule,
) -> Result<ActionSequence> {
    if !(1..=schedule.len()).contains(&k) {
        return Err(invalid(format!("diffusion step {k} outside 1..={}", schedule.len())));
    }
    let eps = net.predict_noise(a_k, s, k)?;
    let step = PlanStep {
        k,
        k_prev: k - 1,
        sigma2: schedule.beta(k),
    };
    let mut mean = a_k.clone();
    let mut scratch = vec![0.0; mean.as_slice().len()];
    transition_mean(
        schedule,
        PlanKind::Ancestral(crate::schedule::VarianceMode::SqrtBeta),
        false,
        &step,
        a_k.as_slice(),
        eps.as_slice(),
        mean.as_slice_mut(),
        &mut scratch,
    );
    Ok(mean)
}

/// Log-density of an isotropic Gaussian `N(mean, var I)` at `x`.
pub fn gaussian_logprob(x: &[f64], mean: &[f64], var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(invalid(format!("variance {var} must be positive")));
    }
    if x.len() != mean.len() {
        return Err(invalid("dimension mismatch"));
    }
    let norm = (2.0 * PI * var).ln();
    Ok(x.iter()
        .zip(mean)
        .map(|(a, m)| -0.5 * ((a - m) * (a - m) / var + norm))
        .sum())
}

/// One recorded reverse transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: PlanStep,
    pub a_in: ActionSequence,
    pub mean: ActionSequence,
    /// Variance actually used to draw `a_out`.
    pub var: f64,
    pub a_out: ActionSequence,
    /// `None` when the transition was deterministic.
    pub logp: Option<f64>,
}

/// The denoising chain of one planning call, ordered from `K` towards 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingTrace {
    pub kind: PlanKind,
    pub clip_x0: bool,
    pub steps: Vec<TraceStep>,
}

impl DenoisingTrace {
    /// The un-clamped `a^0`.
    pub fn final_sample(&self) -> &ActionSequence {
        &self.steps.last().expect("non-empty trace").a_out
    }

    pub fn is_finetune_valid(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.var > 0.0 && s.logp.is_some())
    }

    pub fn total_logp(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.logp).sum()
    }
}

/// Runs the reverse chain from unit Gaussian noise and clamps the result to
/// `[-1, 1]`. Log-probabilities in the trace refer to the un-clamped values.
pub fn sample_action_sequence<R: Rng + ?Sized>(
    net: &Denoiser,
    s: &StateHistory,
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    rng: &mut R,
    record: bool,
) -> Result<(ActionSequence, Option<DenoisingTrace>)> {
    plan.check_schedule(schedule)?;
    let cfg = net.config();
    let mut a = ActionSequence::standard_normal(cfg.horizon, cfg.action_dim, rng);
    let mut steps = Vec::with_capacity(if record { plan.len() } else { 0 });
    let n = cfg.action_len();
    let mut dmean = vec![0.0; n];
    for step in &plan.steps {
        let eps = net.predict_noise(&a, s, step.k)?;
        let mut mean = ActionSequence::zeros(cfg.horizon, cfg.action_dim);
        transition_mean(
            schedule,
            plan.kind,
            plan.clip_x0,
            step,
            a.as_slice(),
            eps.as_slice(),
            mean.as_slice_mut(),
            &mut dmean,
        );
        let var = plan.variance(step);
        let std = var.sqrt();
        let mut out = mean.clone();
        if var > 0.0 {
            for v in out.as_slice_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
        }
        if record {
            let logp = if var > 0.0 {
                Some(gaussian_logprob(out.as_slice(), mean.as_slice(), var)?)
            } else {
                None
            };
            steps.push(TraceStep {
                step: *step,
                a_in: a.clone(),
                mean,
                var,
                a_out: out.clone(),
                logp,
            });
        }
        a = out;
    }
    let trace = record.then(|| DenoisingTrace {
        kind: plan.kind,
        clip_x0: plan.clip_x0,
        steps,
    });
    Ok((a.clamped(-1.0, 1.0), trace))
}

/// A recorded transition paired with the state history it was conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct TransitionRef<'a> {
    pub state: &'a StateHistory,
    pub trace: &'a DenoisingTrace,
    pub index: usize,
}

impl TransitionRef<'_> {
    pub fn step(&self) -> &TraceStep {
        &self.trace.steps[self.index]
    }
}

/// Reverse-step means of a batch of recorded transitions under one network.
pub struct TransitionEval {
    /// `n x (H*A)`.
    pub means: Array2<f64>,
    /// Derivative of each mean coordinate with respect to the predicted noise.
    pub dmean_deps: Array2<f64>,
    pub cache: ForwardCache,
}

pub fn evaluate_transitions(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &[TransitionRef<'_>],
) -> Result<TransitionEval> {
    let x = net.assemble(
        batch
            .iter()
            .map(|t| (&t.step().a_in, t.state, t.step().step.k)),
    )?;
    let (eps, cache) = net.forward(&x);
    let mut means = Array2::zeros(eps.dim());
    let mut dmean_deps = Array2::zeros(eps.dim());
    for (i, t) in batch.iter().enumerate() {
        let st = t.step();
        transition_mean(
            schedule,
            t.trace.kind,
            t.trace.clip_x0,
            &st.step,
            st.a_in.as_slice(),
            eps.row(i).as_slice().expect("row-major"),
            means.row_mut(i).into_slice().expect("row-major"),
            dmean_deps.row_mut(i).into_slice().expect("row-major"),
        );
    }
    Ok(TransitionEval {
        means,
        dmean_deps,
        cache,
    })
}

/// Log-probabilities of recorded transitions under `net`, using the recorded
/// variances and outputs.
pub fn transition_logprobs(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &[TransitionRef<'_>],
) -> Result<Vec<f64>> {
    let eval = evaluate_transitions(net, schedule, batch)?;
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

fn denoising_loss_batch<R: Rng + ?Sized>(
    net: &Denoiser,
    batch: &[(&StateHistory, &ActionSequence)],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let ks = Uniform::new_inclusive(1, schedule.len()).expect("K >= 1");
    let mut noisy = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut steps = Vec::with_capacity(batch.len());
    for (_, a0) in batch {
        let k = ks.sample(rng);
        let eps = ActionSequence::standard_normal(a0.horizon(), a0.action_dim(), rng);
        noisy.push(forward_noise(a0, k, &eps, schedule)?);
        targets.push(eps);
        steps.push(k);
    }
    let examples: Vec<NoiseExample<'_>> = batch
        .iter()
        .enumerate()
        .map(|(i, (s, _))| NoiseExample {
            noisy: &noisy[i],
            state: s,
            k: steps[i],
            target: &targets[i],
        })
        .collect();
    net.loss_and_grad(&examples)
}

/// Noise-regression loss on `(state history, clean action sequence)` pairs,
/// with an independent `(k, eps)` draw per element.
pub fn pretrain_loss_batch<R: Rng + ?Sized>(
    net: &Denoiser,
    batch: &[(&StateHistory, &ActionSequence)],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    denoising_loss_batch(net, batch, schedule, rng)
}

/// Behavior-clone surrogate: the same regression, fed with target-policy
/// samples and still conditioned on their state histories.
pub fn bc_loss_batch<R: Rng + ?Sized>(
    net: &Denoiser,
    batch: &[(&StateHistory, &ActionSequence)],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    if batch.is_empty() {
        return Err(Error::Unavailable(
            "target buffer is empty; seed it before computing the BC loss".into(),
        ));
    }
    denoising_loss_batch(net, batch, schedule, rng)
}

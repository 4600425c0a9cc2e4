//! Conditional noise-prediction network.
//!
//! A plain multilayer perceptron over the concatenation of the flattened
//! noisy action sequence, the flattened state history and a sinusoidal
//! embedding of the diffusion step. Hidden layers use SiLU; the output layer
//! is linear and zero-initialized so a fresh network predicts zero noise.
//!
//! Everything runs in `f64` with an explicit backward pass.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diffusion::{ActionSequence, StateHistory};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Planning horizon `H` (rows of an action sequence).
    pub horizon: usize,
    pub action_dim: usize,
    /// Observation horizon `T_o` (rows of a state history).
    pub obs_horizon: usize,
    pub state_dim: usize,
    /// Width of the diffusion-step embedding; must be even.
    pub time_embed: usize,
    pub hidden: Vec<usize>,
}

impl NetConfig {
    pub fn action_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn state_len(&self) -> usize {
        self.obs_horizon * self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.action_len() + self.state_len() + self.time_embed
    }

    /// `(fan_in, fan_out)` for every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.action_len());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 {
            return Err(invalid("action sequence must have H >= 1 and A >= 1"));
        }
        if self.obs_horizon == 0 || self.state_dim == 0 {
            return Err(invalid("state history must have T_o >= 1 and S >= 1"));
        }
        if self.time_embed == 0 || self.time_embed % 2 != 0 {
            return Err(invalid("time embedding width must be even and positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step with log-spaced frequencies.
pub fn time_embedding(k: usize, width: usize, out: &mut [f64]) {
    let half = width / 2;
    let step = k as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (step * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Shared access to the weight/bias arrays of parameters and gradients.
///
/// Tensor `2 * l` is the weight of layer `l`, tensor `2 * l + 1` its bias.
pub trait LayerStack {
    fn layers(&self) -> &[Dense];
    fn layers_mut(&mut self) -> &mut [Dense];

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn num_values(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn congruent<O: LayerStack>(&self, other: &O) -> bool {
        self.layers().len() == other.layers().len()
            && self
                .layers()
                .iter()
                .zip(other.layers())
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub layers: Vec<Dense>,
}

impl LayerStack for DenoiserParams {
    fn layers(&self) -> &[Dense] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }
}

/// One gradient array per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<Dense>,
}

impl LayerStack for GradientBundle {
    fn layers(&self) -> &[Dense] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }
}

impl GradientBundle {
    pub fn zeros_like<L: LayerStack>(like: &L) -> GradientBundle {
        GradientBundle {
            layers: like
                .layers()
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the network input first).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

/// One row of a supervised noise-regression batch.
#[derive(Debug, Clone, Copy)]
pub struct NoiseExample<'a> {
    pub noisy: &'a ActionSequence,
    pub state: &'a StateHistory,
    pub k: usize,
    pub target: &'a ActionSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: NetConfig,
    pub params: DenoiserParams,
}

impl Denoiser {
    /// Fan-in scaled uniform init for hidden layers, zeros for the output layer.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Denoiser> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                if i == last {
                    return Dense::zeros(fan_in, fan_out);
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Dense {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
                    bias: Array1::from_shape_simple_fn(fan_out, || dist.sample(rng)),
                }
            })
            .collect();
        Ok(Denoiser {
            config,
            params: DenoiserParams { layers },
        })
    }

    pub fn from_params(config: NetConfig, params: DenoiserParams) -> Result<Denoiser> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let ok = shapes.len() == params.layers.len()
            && shapes
                .iter()
                .zip(&params.layers)
                .all(|(&(i, o), l)| l.weight.dim() == (i, o) && l.bias.len() == o);
        if !ok {
            return Err(invalid("parameter shapes do not match network config"));
        }
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn check_shapes(&self, a: &ActionSequence, s: &StateHistory) -> Result<()> {
        let c = &self.config;
        if a.dim() != (c.horizon, c.action_dim) {
            return Err(invalid(format!(
                "action sequence shape {:?}, expected ({}, {})",
                a.dim(),
                c.horizon,
                c.action_dim
            )));
        }
        if s.dim() != (c.obs_horizon, c.state_dim) {
            return Err(invalid(format!(
                "state history shape {:?}, expected ({}, {})",
                s.dim(),
                c.obs_horizon,
                c.state_dim
            )));
        }
        Ok(())
    }

    /// Stacks `(a_k, s, k)` triples into a network input matrix.
    pub fn assemble<'a, I>(&self, rows: I) -> Result<Array2<f64>>
    where
        I: ExactSizeIterator<Item = (&'a ActionSequence, &'a StateHistory, usize)>,
    {
        let c = &self.config;
        let (na, ns) = (c.action_len(), c.state_len());
        let mut x = Array2::zeros((rows.len(), c.input_dim()));
        for (mut row, (a, s, k)) in x.rows_mut().into_iter().zip(rows) {
            self.check_shapes(a, s)?;
            if k == 0 {
                return Err(invalid("diffusion step must be >= 1"));
            }
            let row = row.as_slice_mut().expect("row-major");
            row[..na].copy_from_slice(a.as_slice());
            row[na..na + ns].copy_from_slice(s.as_slice());
            time_embedding(k, c.time_embed, &mut row[na + ns..]);
        }
        Ok(x)
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let n_layers = self.params.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut h = x.clone();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(h);
            if i + 1 == n_layers {
                return (z, ForwardCache { inputs, pre });
            }
            h = z.mapv(silu);
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Forward pass without keeping intermediates.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let n_layers = self.params.layers.len();
        let mut h = x.dot(&self.params.layers[0].weight);
        h += &self.params.layers[0].bias;
        for layer in &self.params.layers[1..n_layers] {
            h.mapv_inplace(silu);
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            h = z;
        }
        h
    }

    /// Gradients of `sum(grad_out * output)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> GradientBundle {
        let n_layers = self.params.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        let mut g = grad_out.clone();
        for i in (0..n_layers).rev() {
            let layer = &self.params.layers[i];
            let input = &cache.inputs[i];
            grads.push(Dense {
                weight: input.t().dot(&g),
                bias: g.sum_axis(Axis(0)),
            });
            if i == 0 {
                break;
            }
            let mut dh = g.dot(&layer.weight.t());
            ndarray::Zip::from(&mut dh)
                .and(&cache.pre[i - 1])
                .for_each(|d, &z| *d *= silu_grad(z));
            g = dh;
        }
        grads.reverse();
        GradientBundle { layers: grads }
    }

    /// Predicted noise for a single noisy action sequence.
    pub fn predict_noise(
        &self,
        a_k: &ActionSequence,
        s: &StateHistory,
        k: usize,
    ) -> Result<ActionSequence> {
        let x = self.assemble(std::iter::once((a_k, s, k)))?;
        let out = self.apply(&x);
        Ok(ActionSequence::from_flat(
            self.config.horizon,
            self.config.action_dim,
            out.row(0).to_vec(),
        ))
    }

    /// Batched prediction; row `i` of the result belongs to input row `i`.
    pub fn predict_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        self.apply(x)
    }

    /// Mean over the batch of the squared error summed over coordinates.
    pub fn loss_and_grad(&self, batch: &[NoiseExample<'_>]) -> Result<(f64, GradientBundle)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for ex in batch {
            if ex.target.dim() != ex.noisy.dim() {
                return Err(invalid("target noise shape differs from input"));
            }
        }
        let x = self.assemble(batch.iter().map(|ex| (ex.noisy, ex.state, ex.k)))?;
        let (pred, cache) = self.forward(&x);
        let n = batch.len() as f64;
        let mut grad_out = Array2::zeros(pred.dim());
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let target = ArrayView1::from(ex.target.as_slice());
            for ((g, &p), &t) in grad_out.row_mut(i).iter_mut().zip(pred.row(i)).zip(target) {
                let d = p - t;
                loss += d * d;
                *g = 2.0 * d / n;
            }
        }
        Ok((loss / n, self.backward(&cache, &grad_out)))
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: GradientBundle,
    pub v: GradientBundle,
}

impl AdamMoments {
    pub fn new<L: LayerStack>(like: &L) -> AdamMoments {
        AdamMoments {
            m: GradientBundle::zeros_like(like),
            v: GradientBundle::zeros_like(like),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam step (`step` is 1-based). Nothing is modified when rejected.
pub fn adam_update(
    params: &mut DenoiserParams,
    grads: &GradientBundle,
    moments: &mut AdamMoments,
    lr: f64,
    step: u64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate {lr} must be positive")));
    }
    if step == 0 {
        return Err(invalid("adam step counter is 1-based"));
    }
    if !params.congruent(grads) || !params.congruent(&moments.m) || !params.congruent(&moments.v)
    {
        return Err(invalid("gradient shapes do not match parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::UpdateRejected(
            "non-finite gradient; training has diverged".into(),
        ));
    }
    let bc1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(step as f64);
    let mut m_t = moments.m.tensors_mut();
    let mut v_t = moments.v.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m_t.iter_mut())
        .zip(v_t.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Adam with its own step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    moments: AdamMoments,
    step: u64,
}

impl Adam {
    pub fn new(params: &DenoiserParams) -> Adam {
        Adam {
            moments: AdamMoments::new(params),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(
        &mut self,
        params: &mut DenoiserParams,
        grads: &GradientBundle,
        lr: f64,
    ) -> Result<()> {
        adam_update(params, grads, &mut self.moments, lr, self.step + 1)?;
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small() -> NetConfig {
        NetConfig {
            horizon: 4,
            action_dim: 2,
            obs_horizon: 2,
            state_dim: 3,
            time_embed: 8,
            hidden: vec![16, 16],
        }
    }

    fn randomize(net: &mut Denoiser, rng: &mut ChaCha8Rng, scale: f64) {
        for t in net.params.tensors_mut() {
            for v in t.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, h: usize, a: usize) -> ActionSequence {
        ActionSequence::from_flat(h, a, (0..h * a).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn random_state(rng: &mut ChaCha8Rng, t: usize, s: usize) -> StateHistory {
        StateHistory::from_flat(t, s, (0..t * s).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::new(small(), &mut rng).unwrap();
        let a = random_seq(&mut rng, 4, 2);
        let s = random_state(&mut rng, 2, 3);
        let out = net.predict_noise(&a, &s, 7).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(out.dim(), a.dim());
    }

    #[test]
    fn prediction_is_deterministic_and_shape_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let a = random_seq(&mut rng, 4, 2);
        let s = random_state(&mut rng, 2, 3);
        let x = net.predict_noise(&a, &s, 3).unwrap();
        let y = net.predict_noise(&a, &s, 3).unwrap();
        assert_eq!(x, y);
        let bad = random_seq(&mut rng, 3, 2);
        assert!(matches!(
            net.predict_noise(&bad, &s, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn output_is_lipschitz_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let a = random_seq(&mut rng, 4, 2);
        let s = random_state(&mut rng, 2, 3);
        let base = net.predict_noise(&a, &s, 5).unwrap();
        let mut prev_ratio: Option<f64> = None;
        for delta in [1e-3, 1e-4, 1e-5] {
            let mut pert = a.clone();
            pert.as_slice_mut()[2] += delta;
            let out = net.predict_noise(&pert, &s, 5).unwrap();
            let change = out
                .as_slice()
                .iter()
                .zip(base.as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let ratio = change / delta;
            assert!(ratio < 100.0);
            if let Some(p) = prev_ratio {
                // Directional derivative converges as delta shrinks.
                assert!((ratio - p).abs() < 1e-2 * (1.0 + ratio));
            }
            prev_ratio = Some(ratio);
        }
    }

    #[test]
    fn perfect_target_gives_zero_loss_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let a = random_seq(&mut rng, 4, 2);
        let s = random_state(&mut rng, 2, 3);
        let target = net.predict_noise(&a, &s, 2).unwrap();
        let ex = NoiseExample {
            noisy: &a,
            state: &s,
            k: 2,
            target: &target,
        };
        let (loss, grads) = net.loss_and_grad(&[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let seqs: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 4, 2)).collect();
        let targets: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 4, 2)).collect();
        let states: Vec<_> = (0..3).map(|_| random_state(&mut rng, 2, 3)).collect();
        let batch: Vec<_> = (0..3)
            .map(|i| NoiseExample {
                noisy: &seqs[i],
                state: &states[i],
                k: i + 1,
                target: &targets[i],
            })
            .collect();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).copied().collect();
        let (l1, g1) = net.loss_and_grad(&batch).unwrap();
        let (l2, g2) = net.loss_and_grad(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1);
        let mut diff = g1.clone();
        diff.add_scaled(&g2, -1.0);
        assert!(diff.norm() < 1e-12 * g1.norm());
    }

    #[test]
    fn batch_rows_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let seqs: Vec<_> = (0..4).map(|_| random_seq(&mut rng, 4, 2)).collect();
        let states: Vec<_> = (0..4).map(|_| random_state(&mut rng, 2, 3)).collect();
        let x = net
            .assemble((0..4).map(|i| (&seqs[i], &states[i], i + 1)))
            .unwrap();
        let y = net
            .assemble([3, 1, 0, 2].iter().map(|&i| (&seqs[i], &states[i], i + 1)))
            .unwrap();
        let (ox, oy) = (net.apply(&x), net.apply(&y));
        for (row_y, i) in [3usize, 1, 0, 2].iter().enumerate() {
            for (p, q) in ox.row(*i).iter().zip(oy.row(row_y)) {
                assert!((p - q).abs() <= 1e-14 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Denoiser::new(small(), &mut rng).unwrap();
        assert!(matches!(net.loss_and_grad(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let before = net.params.clone();
        let grads = GradientBundle::zeros_like(&net.params);
        let mut adam = Adam::new(&net.params);
        adam.update(&mut net.params, &grads, 1e-3).unwrap();
        assert_eq!(before, net.params);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // One scalar through the recurrence: m = 0.1 g, v = 0.001 g^2,
        // m_hat = g, v_hat = g^2, dw = -lr * g / (|g| + eps).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        let mut grads = GradientBundle::zeros_like(&net.params);
        let g = 0.37;
        grads.layers[0].weight[[0, 0]] = g;
        let w0 = net.params.layers[0].weight[[0, 0]];
        let lr = 0.01;
        let mut moments = AdamMoments::new(&net.params);
        adam_update(&mut net.params, &grads, &mut moments, lr, 1).unwrap();
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let expected = w0 - lr * (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999)).sqrt() + 1e-8);
        // Bias correction makes the first step ~lr * sign(g).
        assert!((w0 - expected - lr).abs() < 1e-9);
        assert!((net.params.layers[0].weight[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(moments.m.layers[0].weight[[0, 0]], m);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.3);
        let mut grads = GradientBundle::zeros_like(&net.params);
        for t in grads.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let run = |params: &DenoiserParams| {
            let mut p = params.clone();
            let mut adam = Adam::new(&p);
            adam.update(&mut p, &grads, 1e-3).unwrap();
            adam.update(&mut p, &grads, 1e-3).unwrap();
            p
        };
        assert_eq!(run(&net.params), run(&net.params));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Denoiser::new(small(), &mut rng).unwrap();
        let before = net.params.clone();
        let mut grads = GradientBundle::zeros_like(&net.params);
        grads.layers[1].bias[0] = f64::NAN;
        let mut adam = Adam::new(&net.params);
        assert!(matches!(
            adam.update(&mut net.params, &grads, 1e-3),
            Err(Error::UpdateRejected(_))
        ));
        assert_eq!(before, net.params);
        assert_eq!(adam.steps_taken(), 0);
    }
}

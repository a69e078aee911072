//! Small dense Q-networks with an optional courier-embedding convolution,
//! Adam with elementwise gradient clipping, experience replay, and a
//! double-network DQN learner. A tabular Q-learning reference lives in
//! [`toy`].

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod toy;

pub const CONV_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("input length {got} does not match the network's {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("layer {layer} shape mismatch: {reason}")]
    Shape { layer: usize, reason: &'static str },
    #[error("non-finite loss {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => (z > 0.0) as u8 as f64,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Feed-forward Q-network over a flat parameter vector.
///
/// With the convolution enabled the input is `[x0, (a, b, c) * n]`, and the
/// first dense layer sees `[x0, e_1, .., e_n]` with `e_i = β·(a_i, b_i, c_i)`.
/// Parameter layout: β first (if present), then per layer the row-major
/// weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QNetDoc", into = "QNetDoc")]
pub struct QNet {
    conv: bool,
    /// Fixed per-input multipliers applied before the first layer.
    input_scale: Vec<f64>,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDoc {
    #[serde(flatten)]
    shape: LayerShape,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Stored form of a network: explicit parts, validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QNetDoc {
    conv_beta: Option<[f64; CONV_WINDOW]>,
    input_scale: Vec<f64>,
    layers: Vec<LayerDoc>,
}

impl From<QNet> for QNetDoc {
    fn from(net: QNet) -> Self {
        let layers = (0..net.layers.len())
            .map(|i| {
                let (w, b) = net.layer_params(i);
                LayerDoc { shape: net.layers[i], weights: w.to_vec(), bias: b.to_vec() }
            })
            .collect();
        QNetDoc { conv_beta: net.conv_beta(), input_scale: net.input_scale.clone(), layers }
    }
}

impl TryFrom<QNetDoc> for QNet {
    type Error = NetError;

    fn try_from(doc: QNetDoc) -> Result<Self, NetError> {
        let layers = doc.layers.into_iter().map(|l| (l.shape, l.weights, l.bias)).collect();
        QNet::from_parts(doc.conv_beta, doc.input_scale, layers)
    }
}

struct Cache {
    /// Scaled input.
    x: Vec<f64>,
    /// Input to each dense layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each dense layer.
    pre: Vec<Vec<f64>>,
}

/// Glorot-uniform bound for a layer.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

impl QNet {
    /// Dense network with `sizes = [in, h1, .., out]`, relu hidden layers and
    /// the given output activation.
    pub fn dense(sizes: &[usize], output: Activation, seed: u64) -> Self {
        Self::build(false, sizes, output, seed)
    }

    /// Convolution front over `couriers` triples, then dense layers
    /// `[1 + couriers, hidden.., outputs]`.
    pub fn conv(couriers: usize, hidden: &[usize], outputs: usize, output: Activation, seed: u64) -> Self {
        let mut sizes = vec![1 + couriers];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Self::build(true, &sizes, output, seed)
    }

    fn build(conv: bool, sizes: &[usize], output: Activation, seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least an input and an output size");
        let layers: Vec<LayerShape> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 2 == sizes.len() { output } else { Activation::Relu },
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        if conv {
            let b = glorot(CONV_WINDOW, 1);
            params.extend((0..CONV_WINDOW).map(|_| rng.random_range(-b..=b)));
        }
        for l in &layers {
            let b = glorot(l.inputs, l.outputs);
            params.extend((0..l.inputs * l.outputs).map(|_| rng.random_range(-b..=b)));
            params.extend(core::iter::repeat_n(0.0, l.outputs));
        }
        let input_len = if conv { 1 + CONV_WINDOW * (sizes[0] - 1) } else { sizes[0] };
        QNet { conv, input_scale: vec![1.0; input_len], layers, params }
    }

    /// Rebuilds a network from explicit parts, validating shapes.
    pub fn from_parts(
        conv_beta: Option<[f64; CONV_WINDOW]>,
        input_scale: Vec<f64>,
        layers: Vec<(LayerShape, Vec<f64>, Vec<f64>)>,
    ) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Shape { layer: 0, reason: "network has no layers" });
        }
        let mut params = Vec::new();
        if let Some(b) = conv_beta {
            params.extend_from_slice(&b);
        }
        let mut shapes = Vec::new();
        for (i, (shape, w, b)) in layers.into_iter().enumerate() {
            if w.len() != shape.inputs * shape.outputs {
                return Err(NetError::Shape { layer: i, reason: "weight count differs from inputs x outputs" });
            }
            if b.len() != shape.outputs {
                return Err(NetError::Shape { layer: i, reason: "bias length differs from outputs" });
            }
            if let Some(prev) = shapes.last().map(|s: &LayerShape| s.outputs) {
                if prev != shape.inputs {
                    return Err(NetError::Shape { layer: i, reason: "inputs differ from previous layer outputs" });
                }
            }
            params.extend(w);
            params.extend(b);
            shapes.push(shape);
        }
        let conv = conv_beta.is_some();
        if conv && shapes[0].inputs == 0 {
            return Err(NetError::Shape { layer: 0, reason: "convolution needs the order input" });
        }
        let input_len = if conv { 1 + CONV_WINDOW * (shapes[0].inputs - 1) } else { shapes[0].inputs };
        if input_scale.len() != input_len {
            return Err(NetError::Shape { layer: 0, reason: "input scale length differs from input length" });
        }
        if params.iter().chain(&input_scale).any(|p| !p.is_finite()) {
            return Err(NetError::Shape { layer: 0, reason: "non-finite parameter" });
        }
        Ok(QNet { conv, input_scale, layers: shapes, params })
    }

    pub fn with_input_scale(mut self, scale: Vec<f64>) -> Self {
        assert_eq!(scale.len(), self.input_len());
        self.input_scale = scale;
        self
    }

    pub fn has_conv(&self) -> bool {
        self.conv
    }

    pub fn input_len(&self) -> usize {
        self.input_scale.len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn conv_beta(&self) -> Option<[f64; CONV_WINDOW]> {
        self.conv.then(|| [self.params[0], self.params[1], self.params[2]])
    }

    fn conv_offset(&self) -> usize {
        if self.conv { CONV_WINDOW } else { 0 }
    }

    /// `(weights, bias)` of layer `i`.
    pub fn layer_params(&self, i: usize) -> (&[f64], &[f64]) {
        let mut off = self.conv_offset();
        for l in &self.layers[..i] {
            off += l.inputs * l.outputs + l.outputs;
        }
        let l = self.layers[i];
        let w = &self.params[off..off + l.inputs * l.outputs];
        let b = &self.params[off + l.inputs * l.outputs..off + l.inputs * l.outputs + l.outputs];
        (w, b)
    }

    pub fn layer_params_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let mut off = self.conv_offset();
        for l in &self.layers[..i] {
            off += l.inputs * l.outputs + l.outputs;
        }
        let l = self.layers[i];
        let (w, rest) = self.params[off..].split_at_mut(l.inputs * l.outputs);
        (w, &mut rest[..l.outputs])
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        if !self.conv {
            return x.to_vec();
        }
        let beta = &self.params[..CONV_WINDOW];
        let mut e = Vec::with_capacity(self.layers[0].inputs);
        e.push(x[0]);
        for chunk in x[1..].chunks_exact(CONV_WINDOW) {
            e.push(chunk.iter().zip(beta).map(|(a, b)| a * b).sum());
        }
        e
    }

    fn forward_cache(&self, x: &[f64]) -> Result<(Vec<f64>, Cache), NetError> {
        if x.len() != self.input_len() {
            return Err(NetError::InputLength { got: x.len(), expected: self.input_len() });
        }
        let xs: Vec<f64> = x.iter().zip(&self.input_scale).map(|(a, s)| a * s).collect();
        let mut h = self.embed(&xs);
        let mut cache = Cache { x: xs, inputs: Vec::new(), pre: Vec::new() };
        let mut off = self.conv_offset();
        for l in &self.layers {
            let w = &self.params[off..off + l.inputs * l.outputs];
            let b = &self.params[off + l.inputs * l.outputs..off + l.inputs * l.outputs + l.outputs];
            off += l.inputs * l.outputs + l.outputs;
            let z: Vec<f64> = (0..l.outputs)
                .map(|o| b[o] + w[o * l.inputs..(o + 1) * l.inputs].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let out = z.iter().map(|v| l.activation.apply(*v)).collect();
            cache.inputs.push(core::mem::replace(&mut h, out));
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward_cache(x).map(|(q, _)| q)
    }

    /// Q values for `x`. Panics on a length mismatch.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        match self.try_forward(x) {
            Ok(q) => q,
            Err(e) => panic!("{e}"),
        }
    }

    /// Adds `d loss / d params` to `grad` given `dq = d loss / d q`.
    fn backward(&self, cache: &Cache, dq: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = self.conv_offset();
        for l in &self.layers {
            offsets.push(off);
            off += l.inputs * l.outputs + l.outputs;
        }
        let mut delta: Vec<f64> = dq.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            for (d, z) in delta.iter_mut().zip(&cache.pre[i]) {
                *d *= l.activation.derivative(*z);
            }
            let off = offsets[i];
            let input = &cache.inputs[i];
            let w = &self.params[off..off + l.inputs * l.outputs];
            let mut dinput = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = o * l.inputs;
                for j in 0..l.inputs {
                    grad[off + row + j] += d * input[j];
                    dinput[j] += d * w[row + j];
                }
                grad[off + l.inputs * l.outputs + o] += d;
            }
            delta = dinput;
        }
        if self.conv {
            for (c, chunk) in cache.x[1..].chunks_exact(CONV_WINDOW).enumerate() {
                for k in 0..CONV_WINDOW {
                    grad[k] += delta[1 + c] * chunk[k];
                }
            }
        }
    }

    /// Squared error `(q(x)[a] - y)^2` and its parameter gradient.
    pub fn loss_gradient(&self, x: &[f64], a: usize, y: f64) -> (f64, Vec<f64>) {
        let (q, cache) = self.forward_cache(x).expect("input length");
        let mut grad = vec![0.0; self.params.len()];
        let mut dq = vec![0.0; q.len()];
        dq[a] = 2.0 * (q[a] - y);
        self.backward(&cache, &dq, &mut grad);
        ((q[a] - y) * (q[a] - y), grad)
    }

    /// Pre-activations of every dense layer; used to steer probes away
    /// from relu kinks.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.forward_cache(x).expect("input length").1.pre
    }

    pub fn copy_from(&mut self, other: &QNet) {
        assert_eq!(self.params.len(), other.params.len());
        self.params.copy_from_slice(&other.params);
    }

    /// FNV-1a hash of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().chain(&self.input_scale) {
            for b in p.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= c.lr * mhat / (libm::sqrt(vhat) + c.eps);
        }
    }
}

pub fn clip_elementwise(grad: &mut [f64], limit: f64) {
    for g in grad {
        *g = g.clamp(-limit, limit);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s2: Vec<f64>,
    pub done: bool,
    /// Valid actions in `s2`.
    pub mask2: Vec<bool>,
}

/// FIFO experience buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// `max(decay^learned * eps0, eps_min)`.
pub fn epsilon(learned: u64, eps0: f64, decay: f64, eps_min: f64) -> f64 {
    (libm::pow(decay, learned as f64) * eps0).max(eps_min)
}

/// Greedy index over valid entries; ties go to the lowest index.
pub fn masked_argmax(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (v, ok)) in q.iter().zip(mask).enumerate() {
        if *ok && best.is_none_or(|b| *v > q[b]) {
            best = Some(i);
        }
    }
    best
}

/// Epsilon-greedy over valid actions. Panics if no action is valid.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], mask: &[bool], eps: f64, rng: &mut R) -> usize {
    assert_eq!(q.len(), mask.len());
    if eps > 0.0 && rng.random::<f64>() < eps {
        let valid: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
        assert!(!valid.is_empty(), "no valid action");
        return valid[rng.random_range(0..valid.len())];
    }
    masked_argmax(q, mask).expect("no valid action")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Learn every this many environment steps.
    pub learn_every: u64,
    /// Hard target sync every this many decisions.
    pub target_sync: u64,
    pub eps0: f64,
    pub eps_decay: f64,
    pub eps_min: f64,
    pub grad_clip: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            gamma: 0.8,
            adam: AdamConfig::default(),
            batch_size: 300,
            buffer_capacity: 1000,
            learn_every: 5,
            target_sync: 100,
            eps0: 0.95,
            eps_decay: 0.99,
            eps_min: 0.005,
            grad_clip: 0.5,
        }
    }
}

/// Value net, target net, replay and optimizer for one decision problem.
#[derive(Debug, Clone)]
pub struct DqnLearner {
    pub config: DqnConfig,
    pub value: QNet,
    pub target: QNet,
    pub buffer: ReplayBuffer,
    adam: AdamState,
    rng: ChaCha8Rng,
    /// Learning updates performed since exploration was last restarted.
    learned: u64,
    total_learned: u64,
    decisions: u64,
    env_steps: u64,
    eps0: f64,
    pub last_loss: Option<f64>,
}

impl DqnLearner {
    pub fn new(value: QNet, config: DqnConfig, seed: u64) -> Self {
        DqnLearner {
            target: value.clone(),
            adam: AdamState::new(value.params().len(), config.adam),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
            value,
            learned: 0,
            total_learned: 0,
            decisions: 0,
            env_steps: 0,
            eps0: config.eps0,
            last_loss: None,
            config,
        }
    }

    pub fn epsilon(&self) -> f64 {
        epsilon(self.learned, self.eps0, self.config.eps_decay, self.config.eps_min)
    }

    /// Resets the decay counter and starts exploring from `eps0` again.
    pub fn restart_exploration(&mut self, eps0: f64) {
        self.eps0 = eps0;
        self.learned = 0;
    }

    pub fn learn_count(&self) -> u64 {
        self.total_learned
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    /// Epsilon-greedy training decision; syncs the target every
    /// `target_sync` decisions.
    pub fn act<R: Rng + ?Sized>(&mut self, s: &[f64], mask: &[bool], rng: &mut R) -> usize {
        let q = self.value.forward(s);
        let a = select_action(&q, mask, self.epsilon(), rng);
        self.decisions += 1;
        if self.decisions % self.config.target_sync == 0 {
            self.sync_target();
        }
        a
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.value);
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// Counts an environment step and learns when one is due.
    pub fn on_env_step(&mut self) -> Result<Option<f64>, NetError> {
        self.env_steps += 1;
        if self.env_steps % self.config.learn_every != 0 || self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        self.learn().map(Some)
    }

    /// One gradient step on a uniformly sampled batch.
    pub fn learn(&mut self) -> Result<f64, NetError> {
        let batch: Vec<Transition> =
            self.buffer.sample(self.config.batch_size, &mut self.rng).into_iter().cloned().collect();
        let loss = learn_batch(&mut self.value, &self.target, &batch, &self.config, &mut self.adam)?;
        self.learned += 1;
        self.total_learned += 1;
        self.last_loss = Some(loss);
        Ok(loss)
    }
}

/// TD targets from `target`, MSE loss, clipped gradients, one Adam step.
pub fn learn_batch(
    value: &mut QNet,
    target: &QNet,
    batch: &[Transition],
    config: &DqnConfig,
    adam: &mut AdamState,
) -> Result<f64, NetError> {
    assert!(!batch.is_empty(), "empty batch");
    let n = batch.len() as f64;
    let mut grad = vec![0.0; value.params().len()];
    let mut loss = 0.0;
    for t in batch {
        let y = if t.done {
            t.r
        } else {
            let q2 = target.try_forward(&t.s2)?;
            t.r + config.gamma * masked_argmax(&q2, &t.mask2).map(|i| q2[i]).unwrap_or(0.0)
        };
        let (q, cache) = value.forward_cache(&t.s)?;
        let err = q[t.a] - y;
        loss += err * err / n;
        let mut dq = vec![0.0; q.len()];
        dq[t.a] = 2.0 * err / n;
        value.backward(&cache, &dq, &mut grad);
    }
    if !loss.is_finite() {
        return Err(NetError::NonFinite(loss));
    }
    clip_elementwise(&mut grad, config.grad_clip);
    adam.step(value.params_mut(), &grad);
    if value.params().iter().any(|p| !p.is_finite()) {
        return Err(NetError::NonFinite(loss));
    }
    Ok(loss)
}

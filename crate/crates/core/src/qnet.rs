//! Fully connected Q-network: rectifier hidden layers, identity output layer.
//!
//! Parameter gradients (for TD learning) and input gradients (for the attacks) are both
//! computed by hand-written backpropagation over this fixed architecture family.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dqn::Transition;
use crate::error::{Error, Result};
use crate::{argmax, argmin};

/// Row-major `outputs x inputs` weight matrix plus bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    layers: Vec<DenseLayer>,
}

/// Scalar losses on the Q-values whose input gradient the attacks follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputLoss {
    /// `-log softmax(Q)[action]`.
    CrossEntropy { action: usize },
    /// `max(Q[action] - max_{j != action} Q[j], -confidence)`; zero once the action is displaced.
    MarginAway { action: usize, confidence: f64 },
    /// `max(max_{j != target} Q[j] - Q[target], -confidence)`; zero once the target leads.
    MarginToward { target: usize, confidence: f64 },
}

impl InputLoss {
    fn action(&self) -> usize {
        match *self {
            InputLoss::CrossEntropy { action } | InputLoss::MarginAway { action, .. } => action,
            InputLoss::MarginToward { target, .. } => target,
        }
    }

    /// Loss value and its gradient with respect to the Q-values.
    pub fn evaluate(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let mut dq = vec![0.0; q.len()];
        match *self {
            InputLoss::CrossEntropy { action } => {
                let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = q.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (d, e) in dq.iter_mut().zip(&exps) {
                    *d = e / sum;
                }
                dq[action] -= 1.0;
                let loss = -(q[action] - max - sum.ln());
                (loss, dq)
            }
            InputLoss::MarginAway { action, confidence } => {
                let Some(other) = best_other(q, action) else {
                    return (0.0, dq);
                };
                let diff = q[action] - q[other];
                if diff > -confidence {
                    dq[action] = 1.0;
                    dq[other] = -1.0;
                    (diff, dq)
                } else {
                    (-confidence, dq)
                }
            }
            InputLoss::MarginToward { target, confidence } => {
                let Some(other) = best_other(q, target) else {
                    return (0.0, dq);
                };
                let diff = q[other] - q[target];
                if diff > -confidence {
                    dq[other] = 1.0;
                    dq[target] = -1.0;
                    (diff, dq)
                } else {
                    (-confidence, dq)
                }
            }
        }
    }
}

fn best_other(q: &[f64], excluded: usize) -> Option<usize> {
    (0..q.len())
        .filter(|&j| j != excluded)
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if q[b] >= q[j] => Some(b),
            _ => Some(j),
        })
}

/// Per-parameter gradients shaped exactly like the network, plus the loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<DenseLayer>,
    pub loss: f64,
}

impl GradientBundle {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
                .collect(),
            loss: 0.0,
        }
    }

    /// Flattened in the same order as [`QNetwork::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

struct Trace {
    /// `activations[0]` is the input; `activations[i + 1]` is the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl QNetwork {
    /// Builds a network with uniform Glorot initialisation from `seed`.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output sizes, all positive; got {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layers: layer_sizes
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        })
    }

    /// Builds a network from explicit layers, validating that consecutive shapes chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::InvalidArgument(format!("layer {i} has inconsistent shape")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::dim(layers[i - 1].outputs, l.inputs));
            }
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::dim(self.parameter_count(), params.len()));
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in &self.layers {
            h.write_usize(l.inputs);
            h.write_usize(l.outputs);
            for v in l.weights.iter().chain(&l.biases) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    fn check_input(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), state.len()));
        }
        Ok(())
    }

    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_input(state)?;
        let mut x = state.to_vec();
        let mut y = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut x, &mut y);
        }
        Ok(x)
    }

    /// Greedy action under this network (ties to the lowest index).
    pub fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(state)?))
    }

    /// Action with the smallest Q-value (ties to the lowest index).
    pub fn least_q_action(&self, state: &[f64]) -> Result<usize> {
        Ok(argmin(&self.forward(state)?))
    }

    fn forward_trace(&self, state: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(state.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::with_capacity(layer.outputs);
            layer.apply(&activations[i], &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(y);
        }
        Trace { activations }
    }

    /// Backpropagates `d loss / d Q` through a forward trace. Accumulates parameter
    /// gradients into `grads` when given, and returns `d loss / d input`.
    fn backward(&self, trace: &Trace, dq: &[f64], mut grads: Option<&mut GradientBundle>) -> Vec<f64> {
        let mut delta = dq.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.activations[i];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gl.biases[o] += d;
                    let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, &x) in row.iter_mut().zip(input) {
                        *w += d * x;
                    }
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if i > 0 {
                // Rectifier derivative, taken as 0 at the kink.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Value of `loss` at `state` and its gradient with respect to `state`.
    pub fn input_loss_gradient(&self, state: &[f64], loss: &InputLoss) -> Result<(f64, Vec<f64>)> {
        self.check_input(state)?;
        if loss.action() >= self.output_dim() {
            return Err(Error::InvalidAction {
                index: loss.action(),
                count: self.output_dim(),
            });
        }
        let trace = self.forward_trace(state);
        let q = trace.activations.last().expect("non-empty network");
        let (value, dq) = loss.evaluate(q);
        Ok((value, self.backward(&trace, &dq, None)))
    }

    pub fn input_gradient(&self, state: &[f64], loss: &InputLoss) -> Result<Vec<f64>> {
        Ok(self.input_loss_gradient(state, loss)?.1)
    }

    /// `theta <- theta - lr * grad`. Leaves the network untouched if the update would
    /// produce a non-finite parameter.
    pub fn sgd_step(&mut self, grads: &GradientBundle, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.inputs != l.inputs || g.outputs != l.outputs)
        {
            return Err(Error::InvalidArgument("gradient shape does not match network".into()));
        }
        let mut next = self.clone();
        for (layer, g) in next.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b -= learning_rate * gb;
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite("parameters after sgd step".into()));
        }
        *self = next;
        Ok(())
    }

    /// Adds independent Gaussian noise with standard deviation `sigma` to every parameter.
    pub fn perturbed<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, sigma).expect("sigma validated by caller");
        let mut out = self.clone();
        for l in &mut out.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w += normal.sample(rng);
            }
        }
        out
    }
}

fn flatten_layers(layers: &[DenseLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
        .collect()
}

/// Adam first and second moment estimates for one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(net: &QNetwork, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "adam needs betas in [0, 1) and a positive epsilon".into(),
            ));
        }
        let n = net.parameter_count();
        Ok(Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
    }

    /// Bias-corrected Adam update. Like [`QNetwork::sgd_step`], leaves both the network
    /// and the moments untouched when the result would be non-finite.
    pub fn step(&mut self, net: &mut QNetwork, grads: &GradientBundle, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let g = grads.flatten();
        if g.len() != self.m.len() || net.parameter_count() != self.m.len() {
            return Err(Error::InvalidArgument("gradient shape does not match network".into()));
        }
        let t = self.t + 1;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut params = net.parameters();
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        for i in 0..params.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            params[i] -= learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters after adam step".into()));
        }
        net.set_parameters(&params)?;
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}

/// Frozen parameter snapshot used to compute TD targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork(QNetwork);

impl TargetNetwork {
    pub fn new(net: &QNetwork) -> Self {
        Self(net.clone())
    }

    /// Overwrites the snapshot with a deep copy of `net`.
    pub fn sync(&mut self, net: &QNetwork) -> Result<()> {
        if net.layer_sizes() != self.0.layer_sizes() {
            return Err(Error::InvalidArgument(format!(
                "cannot sync target {:?} from network {:?}",
                self.0.layer_sizes(),
                net.layer_sizes()
            )));
        }
        self.0.clone_from(net);
        Ok(())
    }

    pub fn network(&self) -> &QNetwork {
        &self.0
    }

    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.0.forward(state)
    }
}

/// TD target `r + gamma * max_a' Q_target(s', a')`, or `r` for terminal transitions.
pub fn td_target(target: &TargetNetwork, t: &Transition, gamma: f64) -> Result<f64> {
    if t.terminal {
        return Ok(t.reward);
    }
    let next = target.forward(&t.next_state)?;
    let best = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(t.reward + gamma * best)
}

/// Mean squared TD error over `batch` and its gradient with respect to the online
/// network's parameters. The target branch is treated as a constant.
pub fn td_loss(
    net: &QNetwork,
    target: &TargetNetwork,
    batch: &[Transition],
    gamma: f64,
) -> Result<GradientBundle> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = GradientBundle::zeros_like(net);
    let mut dq = vec![0.0; net.output_dim()];
    let mut loss = 0.0;
    for t in batch {
        net.check_input(&t.state)?;
        if t.action >= net.output_dim() {
            return Err(Error::InvalidAction {
                index: t.action,
                count: net.output_dim(),
            });
        }
        let y = td_target(target, t, gamma)?;
        let trace = net.forward_trace(&t.state);
        let q = trace.activations.last().expect("non-empty network")[t.action];
        let err = q - y;
        loss += err * err / n;
        dq.iter_mut().for_each(|d| *d = 0.0);
        dq[t.action] = 2.0 * err / n;
        net.backward(&trace, &dq, Some(&mut grads));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("td loss".into()));
    }
    grads.loss = loss;
    Ok(grads)
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Seeds that produced a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub init_seed: u64,
    pub train_seed: Option<u64>,
}

/// Versioned on-disk form of a network. JSON floats round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub seeds: SeedLineage,
    pub layers: Vec<DenseLayer>,
}

impl Checkpoint {
    pub fn new(net: &QNetwork, seeds: SeedLineage) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_sizes: net.layer_sizes(),
            seeds,
            layers: net.layers.clone(),
        }
    }

    pub fn into_network(self) -> Result<QNetwork> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let net = QNetwork::from_layers(self.layers)?;
        if net.layer_sizes() != self.layer_sizes {
            return Err(Error::InvalidConfig("checkpoint layer sizes disagree with layers".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

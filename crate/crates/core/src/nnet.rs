//! Dense feed-forward classifier with analytic gradients.
//!
//! A [`MlpModel`] is a chain of [`Dense`] layers whose final output is fed to
//! a softmax. Everything is `f64`. Gradients are computed by a hand-written
//! backward pass, both with respect to parameters (for training) and with
//! respect to the input (for attacks).
//!
//! Weights are row-major with shape `(out_dim, in_dim)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::seed;

const SEED_TAG_SHUFFLE: u64 = 0x5348_5546;

/// One labelled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        Self { x, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            t => Err(Error::ModelFormat(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-ln p[y]` on softmax probabilities.
    NegLogLikelihood,
    /// `sum_c (onehot[c] - p[c])^2`.
    SquaredError,
}

/// A dense layer: `activation(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(invalid("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(invalid("layer parameters must be finite"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(invalid("layer dimensions must be positive"));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(in_dim, out_dim, weights, vec![0.0; out_dim], activation)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[k]` is the input of layer `k`; the last entry is the logits.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Trace {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace has logits")
    }

    /// Input of the final layer (the input itself for single-layer models).
    pub fn features(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Parameter-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    /// Flattened in the same order as [`MlpModel::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for v in self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flatten()
        {
            *v *= factor;
        }
    }
}

/// Dense classifier; the last layer's output goes through a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

impl MlpModel {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        let classes = layers.last().map(|l| l.out_dim).unwrap_or(0);
        if classes < 2 {
            return Err(invalid("model needs at least two output classes"));
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers and an identity output layer, Glorot-initialised.
    pub fn glorot<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let act = if k == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense::glorot(d[0], d[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for layer in &self.layers {
            let z = layer.affine(acts.last().expect("non-empty"));
            acts.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(z);
        }
        let probs = softmax(acts.last().expect("non-empty"));
        Ok(Trace { acts, pre, probs })
    }

    /// Softmax probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.probs)
    }

    /// Predicted label; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.trace(x)?.predicted())
    }

    pub fn loss(&self, x: &[f64], label: usize, kind: LossKind) -> Result<f64> {
        self.check_label(label)?;
        let trace = self.trace(x)?;
        Ok(loss_from_trace(&trace, label, kind))
    }

    /// Gradient of the loss with respect to the input.
    pub fn grad_input(&self, x: &[f64], label: usize, kind: LossKind) -> Result<Vec<f64>> {
        self.check_label(label)?;
        let trace = self.trace(x)?;
        let d_logits = loss_grad_logits(&trace, label, kind);
        Ok(self.backward(&trace, &d_logits, None, None))
    }

    /// Gradient of the mean loss over `batch` with respect to the parameters.
    pub fn grad_params(&self, batch: &[Sample], kind: LossKind) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        if batch.is_empty() {
            return Ok(grads);
        }
        for s in batch {
            self.check_label(s.label)?;
            let trace = self.trace(&s.x)?;
            let d_logits = loss_grad_logits(&trace, s.label, kind);
            self.backward(&trace, &d_logits, None, Some(&mut grads));
        }
        grads.scale(1.0 / batch.len() as f64);
        Ok(grads)
    }

    /// Backpropagates `d_logits` (plus an optional gradient arriving at the
    /// final layer's input) and returns the input gradient. Parameter
    /// gradients are accumulated into `grads` when given.
    pub fn backward(
        &self,
        trace: &Trace,
        d_logits: &[f64],
        d_features: Option<&[f64]>,
        mut grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut upstream = d_logits.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = upstream
                .iter()
                .zip(&trace.pre[k])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let input = &trace.acts[k];
            if let Some(g) = grads.as_deref_mut() {
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[k][o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                    g.biases[k][o] += d;
                }
            }
            let mut down = vec![0.0; layer.in_dim];
            for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&dz) {
                if d == 0.0 {
                    continue;
                }
                for (acc, &w) in down.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            if k == last {
                if let Some(df) = d_features {
                    for (acc, &v) in down.iter_mut().zip(df) {
                        *acc += v;
                    }
                }
            }
            upstream = down;
        }
        upstream
    }

    /// Binary parameter dump; see [`MlpModel::from_bytes`] for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
            out.extend_from_slice(&l.activation.tag().to_le_bytes());
        }
        for v in self.params_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the layout written by [`MlpModel::to_bytes`]:
    ///
    /// | offset | type      | field                                    |
    /// |--------|-----------|------------------------------------------|
    /// | 0      | `[u8; 4]` | magic `VGMM`                             |
    /// | 4      | `u32`     | format version (1)                       |
    /// | 8      | `u32`     | input dimension                          |
    /// | 12     | `u32`     | layer count `n`                          |
    /// | 16     | `n × (u32, u32)` | per layer: output dim, activation tag (0 identity, 1 relu) |
    /// | ...    | `f64`s    | per layer: weights row-major `(out, in)`, then bias |
    ///
    /// All integers and floats are little-endian.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::ModelFormat("truncated header".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {version}"
            )));
        }
        let input_dim = read_u32(&mut cur)? as usize;
        let n_layers = read_u32(&mut cur)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::ModelFormat(format!(
                "implausible layer count {n_layers}"
            )));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let out = read_u32(&mut cur)? as usize;
            let act = Activation::from_tag(read_u32(&mut cur)?)?;
            shapes.push((out, act));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut in_dim = input_dim;
        for (out_dim, act) in shapes {
            let weights = read_f64s(&mut cur, in_dim * out_dim)?;
            let bias = read_f64s(&mut cur, out_dim)?;
            layers.push(Dense::new(in_dim, out_dim, weights, bias, act)?);
            in_dim = out_dim;
        }
        if !cur.is_empty() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", cur.len())));
        }
        Self::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for s in samples {
            if self.predict(&s.x)? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"VGMM";
const MODEL_FORMAT_VERSION: u32 = 1;

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| Error::ModelFormat("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(cur: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    if cur.len() < n * 8 {
        return Err(Error::ModelFormat("truncated parameter block".into()));
    }
    let (head, tail) = cur.split_at(n * 8);
    *cur = tail;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Loss of a traced forward pass. The label must already be validated.
pub fn loss_from_trace(trace: &Trace, label: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::NegLogLikelihood => {
            let z = trace.logits();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let v = lse - z[label];
            // clamp rounding noise, keep NaN visible
            if v < 0.0 {
                0.0
            } else {
                v
            }
        }
        LossKind::SquaredError => trace
            .probs
            .iter()
            .enumerate()
            .map(|(c, p)| {
                let t = if c == label { 1.0 } else { 0.0 };
                (t - p) * (t - p)
            })
            .sum(),
    }
}

/// Gradient of the loss with respect to the logits.
pub fn loss_grad_logits(trace: &Trace, label: usize, kind: LossKind) -> Vec<f64> {
    let p = &trace.probs;
    match kind {
        LossKind::NegLogLikelihood => p
            .iter()
            .enumerate()
            .map(|(c, &pc)| if c == label { pc - 1.0 } else { pc })
            .collect(),
        LossKind::SquaredError => {
            // dL/dp_c = 2 (p_c - onehot_c); chain through the softmax Jacobian.
            let g: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(c, &pc)| 2.0 * (pc - if c == label { 1.0 } else { 0.0 }))
                .collect();
            let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            p.iter().zip(&g).map(|(pj, gj)| pj * (gj - dot)).collect()
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the hidden-distribution term of the joint objective.
    pub lambda: f64,
    /// Weight of the soft nearest neighbour term on penultimate features.
    pub snnl_weight: f64,
    pub hidden_layers: Vec<usize>,
    /// Hidden-distribution samples generated per label.
    pub hidden_per_label: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 60,
            batch_size: 32,
            seed: 0,
            lambda: 1.0,
            snnl_weight: 0.5,
            hidden_layers: vec![64, 64],
            hidden_per_label: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        self.validate_for_training()
    }

    /// Like [`TrainConfig::validate`] but allows zero epochs.
    fn validate_for_training(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be non-negative"));
        }
        if !(self.snnl_weight >= 0.0 && self.snnl_weight.is_finite()) {
            return Err(invalid("snnl_weight must be non-negative"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// An additional loss on the final layer's input features of a batch.
///
/// Returns the (already weighted) loss and its gradient per feature row.
pub trait FeatureLoss: Sync {
    fn loss_and_grad(&self, features: &[&[f64]], labels: &[usize]) -> (f64, Vec<Vec<f64>>);
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean batch objective per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Mini-batch SGD with a fixed learning rate on the NLL loss.
///
/// Each batch minimises `(1/B) Σ w_i ℓ_i + Σ extra(features, labels)`, where
/// `w_i` defaults to 1. Batches are reshuffled every epoch from a stream
/// derived from `config.seed`.
pub fn sgd_train(
    model: MlpModel,
    samples: &[Sample],
    weights: Option<&[f64]>,
    config: &TrainConfig,
    extra: &[&dyn FeatureLoss],
) -> Result<TrainOutcome> {
    config.validate_for_training()?;
    if !(config.learning_rate > 0.0) {
        return Err(invalid("learning_rate must be positive"));
    }
    if config.epochs > 0 && samples.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::DimensionMismatch {
                expected: samples.len(),
                actual: w.len(),
            });
        }
    }
    for s in samples {
        model.check_input(&s.x)?;
        model.check_label(s.label)?;
    }

    let mut model = model;
    let mut rng = seed::rng_for(config.seed, SEED_TAG_SHUFFLE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let loss = sgd_step(
                &mut model,
                samples,
                weights,
                batch,
                config.learning_rate,
                extra,
            );
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

fn sgd_step(
    model: &mut MlpModel,
    samples: &[Sample],
    weights: Option<&[f64]>,
    batch: &[usize],
    lr: f64,
    extra: &[&dyn FeatureLoss],
) -> f64 {
    let inv_b = 1.0 / batch.len() as f64;
    let traces: Vec<Trace> = batch
        .iter()
        .map(|&i| model.trace(&samples[i].x).expect("inputs validated"))
        .collect();

    let mut loss = 0.0;
    let mut feature_grads: Vec<Vec<f64>> = Vec::new();
    if !extra.is_empty() {
        let feats: Vec<&[f64]> = traces.iter().map(|t| t.features()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| samples[i].label).collect();
        feature_grads = vec![vec![0.0; feats[0].len()]; batch.len()];
        for term in extra {
            let (l, g) = term.loss_and_grad(&feats, &labels);
            loss += l;
            for (acc, row) in feature_grads.iter_mut().zip(g) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
    }

    let mut grads = Gradients::zeros_like(model);
    for (pos, (&i, trace)) in batch.iter().zip(&traces).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let label = samples[i].label;
        loss += w * inv_b * loss_from_trace(trace, label, LossKind::NegLogLikelihood);
        let mut d = loss_grad_logits(trace, label, LossKind::NegLogLikelihood);
        for v in &mut d {
            *v *= w * inv_b;
        }
        let df = feature_grads.get(pos).map(|v| v.as_slice());
        model.backward(trace, &d, df, Some(&mut grads));
    }

    for (layer, (gw, gb)) in model
        .layers
        .iter_mut()
        .zip(grads.weights.iter().zip(&grads.biases))
    {
        for (p, g) in layer.weights.iter_mut().zip(gw) {
            *p -= lr * g;
        }
        for (p, g) in layer.bias.iter_mut().zip(gb) {
            *p -= lr * g;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer() -> MlpModel {
        MlpModel::new(vec![Dense::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn zero_input_is_uniform() {
        let m = identity_layer();
        let p = m.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let m = identity_layer();
        let p = m.forward(&[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        let nll = m
            .loss(&[3f64.ln(), 0.0], 1, LossKind::NegLogLikelihood)
            .unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_reports_dims() {
        let m = identity_layer();
        match m.forward(&[1.0, 2.0, 3.0]) {
            Err(Error::DimensionMismatch { expected, actual }) => {
                assert_eq!((expected, actual), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let m = identity_layer();
        assert!(matches!(
            m.loss(&[0.0, 0.0], 2, LossKind::NegLogLikelihood),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn uniform_output_nll_is_ln_classes() {
        let layer = Dense::new(3, 5, vec![0.0; 15], vec![0.0; 5], Activation::Identity).unwrap();
        let m = MlpModel::new(vec![layer]).unwrap();
        let l = m
            .loss(&[0.3, -1.0, 2.0], 4, LossKind::NegLogLikelihood)
            .unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_output_has_zero_loss() {
        let layer = Dense::new(
            1,
            2,
            vec![0.0, 0.0],
            vec![800.0, -800.0],
            Activation::Identity,
        )
        .unwrap();
        let m = MlpModel::new(vec![layer]).unwrap();
        assert_eq!(m.loss(&[1.0], 0, LossKind::NegLogLikelihood).unwrap(), 0.0);
        assert_eq!(m.loss(&[1.0], 0, LossKind::SquaredError).unwrap(), 0.0);
        let g = m
            .grad_params(&[Sample::new(vec![1.0], 0)], LossKind::NegLogLikelihood)
            .unwrap();
        assert!(g.norm() <= 1e-6);
    }

    #[test]
    fn constant_model_has_zero_input_gradient() {
        let l1 = Dense::new(
            3,
            4,
            vec![0.0; 12],
            vec![0.1, -0.2, 0.3, 0.0],
            Activation::Relu,
        )
        .unwrap();
        let l2 = Dense::new(
            4,
            3,
            vec![0.0; 12],
            vec![1.0, 2.0, 3.0],
            Activation::Identity,
        )
        .unwrap();
        let m = MlpModel::new(vec![l1, l2]).unwrap();
        for kind in [LossKind::NegLogLikelihood, LossKind::SquaredError] {
            let g = m.grad_input(&[0.5, 0.2, 0.9], 1, kind).unwrap();
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_nll_input_gradient_closed_form() {
        let w = vec![0.5, -1.0, 2.0, 0.3, 0.7, -0.4];
        let layer =
            Dense::new(2, 3, w.clone(), vec![0.1, 0.0, -0.1], Activation::Identity).unwrap();
        let m = MlpModel::new(vec![layer]).unwrap();
        let x = [0.8, -0.3];
        let p = m.forward(&x).unwrap();
        let y = 2;
        let g = m.grad_input(&x, y, LossKind::NegLogLikelihood).unwrap();
        for j in 0..2 {
            let expect: f64 = (0..3)
                .map(|c| w[c * 2 + j] * (p[c] - if c == y { 1.0 } else { 0.0 }))
                .sum();
            assert!((g[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn final_bias_gradient_is_residual() {
        let mut rng = seed::rng(3);
        let m = MlpModel::glorot(4, &[5], 3, &mut rng).unwrap();
        let s = Sample::new(vec![0.2, 0.4, -0.1, 0.9], 1);
        let p = m.forward(&s.x).unwrap();
        let g = m
            .grad_params(std::slice::from_ref(&s), LossKind::NegLogLikelihood)
            .unwrap();
        for (c, pc) in p.iter().enumerate() {
            let expect = pc - if c == 1 { 1.0 } else { 0.0 };
            assert!((g.biases[1][c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_chain_is_checked() {
        let a = Dense::new(2, 3, vec![0.0; 6], vec![0.0; 3], Activation::Relu).unwrap();
        let b = Dense::new(4, 2, vec![0.0; 8], vec![0.0; 2], Activation::Identity).unwrap();
        assert!(MlpModel::new(vec![a, b]).is_err());
        assert!(Dense::new(
            2,
            2,
            vec![f64::NAN, 0.0, 0.0, 0.0],
            vec![0.0; 2],
            Activation::Relu
        )
        .is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut rng = seed::rng(9);
        let m = MlpModel::glorot(2, &[4], 2, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = sgd_train(
            m.clone(),
            &[Sample::new(vec![0.0, 1.0], 0)],
            None,
            &cfg,
            &[],
        )
        .unwrap();
        assert_eq!(out.model, m);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut rng = seed::rng(1);
        let m = MlpModel::glorot(2, &[8], 2, &mut rng).unwrap();
        let data: Vec<Sample> = (0..8)
            .map(|i| Sample::new(vec![1e200 * i as f64, -1e200], i % 2))
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e10,
            ..TrainConfig::default()
        };
        match sgd_train(m, &data, None, &cfg, &[]) {
            Err(Error::Diverged { epoch, loss }) => {
                assert!(epoch < cfg.epochs);
                assert!(!loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let mut rng = seed::rng(5);
        let m = MlpModel::glorot(6, &[7, 5], 3, &mut rng).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"VGMM");
        let back = MlpModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(MlpModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

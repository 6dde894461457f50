//! Learned feature transformations.
//!
//! A small 1-D convolutional network is trained with softmax cross-entropy
//! on one representation kind; the activations feeding its classifier head
//! serve as the feature space for the estimators.

mod gradcheck;
mod io;
mod net;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureMatrix, FeatureTag};
use crate::rng::{purpose, rng_from};
use crate::traces::{RepKind, RepVector};

pub use gradcheck::{gradient_check, gradient_check_with, GradientCheck};
pub use io::{load_model, save_model, MODEL_HEADER};
use net::{softmax_xent, Network};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error("representation kind mismatch: model expects {expected:?}, got {found:?}")]
    KindMismatch { expected: RepKind, found: RepKind },
    #[error("input length {found} does not match model input length {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("training data covers {0} classes, need at least 2")]
    TooFewClasses(usize),
    #[error("{n} training samples is fewer than the batch size {batch}")]
    TooFewSamples { n: usize, batch: usize },
    #[error("{labels} labels for {samples} samples")]
    LabelCount { labels: usize, samples: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("non-finite value in input row {0}")]
    NonFiniteInput(usize),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    #[default]
    Relu,
    Tanh,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d { channels: usize, kernel: usize, stride: usize },
    Activation,
    GlobalAvgPool,
    Flatten,
    Dense { units: usize },
}

/// Body of the default network; the classifier head is appended on build.
pub fn default_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1d {
            channels: 32,
            kernel: 8,
            stride: 4,
        },
        LayerSpec::Activation,
        LayerSpec::Conv1d {
            channels: 64,
            kernel: 8,
            stride: 4,
        },
        LayerSpec::Activation,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { units: 128 },
        LayerSpec::Activation,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub layers: Vec<LayerSpec>,
    pub activation: ActivationKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            layers: default_layers(),
            activation: ActivationKind::Relu,
            learning_rate: 0.002,
            batch_size: 128,
            epochs: 40,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |s: &str| Err(EmbeddingError::InvalidConfig(s.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A network with its parameters and input scaling.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    config: EmbeddingConfig,
    kind: RepKind,
    input_len: usize,
    num_classes: usize,
    input_scale: f64,
    params: Vec<f64>,
    trained: bool,
    loss_history: Vec<f64>,
    net: Network,
}

impl EmbeddingModel {
    fn build(
        config: EmbeddingConfig,
        input_len: usize,
        num_classes: usize,
    ) -> Result<(Network, EmbeddingConfig), EmbeddingError> {
        config.validate()?;
        if num_classes < 2 {
            return Err(EmbeddingError::TooFewClasses(num_classes));
        }
        let net = Network::build(&config.layers, config.activation, input_len, num_classes)?;
        if net.feature_dim() < 2 {
            return Err(EmbeddingError::Architecture(format!(
                "feature dimension {} is below 2",
                net.feature_dim()
            )));
        }
        Ok((net, config))
    }

    /// Fresh model with uniform `±sqrt(6 / (fan_in + fan_out))` weights and
    /// zero biases.
    pub fn init(config: EmbeddingConfig, kind: RepKind, input_len: usize, num_classes: usize) -> Result<Self, EmbeddingError> {
        let (net, config) = Self::build(config, input_len, num_classes)?;
        let mut params = vec![0.0; net.n_params];
        let mut rng = rng_from(config.seed, &[purpose::EMBEDDING, 0]);
        for layer in &net.layers {
            if let Some((fan_in, fan_out, off, count)) = layer.weight_block() {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut params[off..off + count] {
                    *w = rng.random_range(-a..=a);
                }
            }
        }
        Ok(Self::assemble(config, kind, input_len, num_classes, net, params))
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(config: EmbeddingConfig, kind: RepKind, input_len: usize, num_classes: usize) -> Result<Self, EmbeddingError> {
        let (net, config) = Self::build(config, input_len, num_classes)?;
        let params = vec![0.0; net.n_params];
        Ok(Self::assemble(config, kind, input_len, num_classes, net, params))
    }

    fn assemble(
        config: EmbeddingConfig,
        kind: RepKind,
        input_len: usize,
        num_classes: usize,
        net: Network,
        params: Vec<f64>,
    ) -> Self {
        EmbeddingModel {
            config,
            kind,
            input_len,
            num_classes,
            input_scale: 1.0,
            params,
            trained: false,
            loss_history: Vec::new(),
            net,
        }
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn kind(&self) -> RepKind {
        self.kind
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Mean training loss of each epoch.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// Replaces the parameter vector (length must match).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), EmbeddingError> {
        if params.len() != self.params.len() {
            return Err(EmbeddingError::Format(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn prepare(&self, row: usize, rep: &RepVector) -> Result<Vec<f64>, EmbeddingError> {
        if rep.kind != self.kind {
            return Err(EmbeddingError::KindMismatch {
                expected: self.kind,
                found: rep.kind,
            });
        }
        if rep.len() != self.input_len {
            return Err(EmbeddingError::LengthMismatch {
                expected: self.input_len,
                found: rep.len(),
            });
        }
        if rep.values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFiniteInput(row));
        }
        Ok(rep.values.iter().map(|v| v * self.input_scale).collect())
    }

    fn prepare_all(&self, data: &[RepVector]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        data.iter().enumerate().map(|(i, r)| self.prepare(i, r)).collect()
    }

    fn feature_of(&self, x: &[f64]) -> Vec<f64> {
        self.net
            .forward(&self.params, x, self.net.feature_act)
            .pop()
            .expect("forward output")
    }

    fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        self.net
            .forward(&self.params, x, self.net.layers.len())
            .pop()
            .expect("forward output")
    }

    pub fn logits(&self, rep: &RepVector) -> Result<Vec<f64>, EmbeddingError> {
        Ok(self.logits_of(&self.prepare(0, rep)?))
    }

    /// Arg-max class of the classifier head; ties go to the lower class.
    pub fn predict(&self, data: &[RepVector]) -> Result<Vec<usize>, EmbeddingError> {
        let inputs = self.prepare_all(data)?;
        Ok(inputs
            .par_iter()
            .map(|x| {
                let z = self.logits_of(x);
                let mut best = 0;
                for (c, &v) in z.iter().enumerate() {
                    if v > z[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of `data` the classifier head mislabels.
    pub fn classification_error(&self, data: &[RepVector], labels: &[usize]) -> Result<f64, EmbeddingError> {
        check_labels(data.len(), labels, self.num_classes)?;
        if data.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        let pred = self.predict(data)?;
        let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
        Ok(wrong as f64 / data.len() as f64)
    }

    /// Mean cross-entropy over `data` and its gradient.
    pub fn loss_and_gradient(&self, data: &[RepVector], labels: &[usize]) -> Result<(f64, Vec<f64>), EmbeddingError> {
        check_labels(data.len(), labels, self.num_classes)?;
        if data.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        let inputs = self.prepare_all(data)?;
        let idx: Vec<usize> = (0..inputs.len()).collect();
        let (loss, mut grad) = batch_gradient(&self.net, &self.params, &inputs, labels, &idx);
        let n = inputs.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }
}

fn check_labels(n: usize, labels: &[usize], classes: usize) -> Result<(), EmbeddingError> {
    if labels.len() != n {
        return Err(EmbeddingError::LabelCount {
            labels: labels.len(),
            samples: n,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(EmbeddingError::LabelRange { label, classes });
    }
    Ok(())
}

const GRAD_CHUNK: usize = 8;

/// Summed loss and summed gradient over `batch`. Chunks are reduced in a
/// fixed order so the result does not depend on thread scheduling.
fn batch_gradient(net: &Network, params: &[f64], inputs: &[Vec<f64>], labels: &[usize], batch: &[usize]) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            let mut g_out = Vec::new();
            for &i in chunk {
                let acts = net.forward(params, &inputs[i], net.layers.len());
                loss += softmax_xent(acts.last().expect("logits"), labels[i], &mut g_out);
                net.backward(params, &acts, g_out.clone(), &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

/// Trains a fresh model on one representation kind for exactly
/// `cfg.epochs` epochs of momentum SGD.
pub fn train_embedding(
    train: &[RepVector],
    labels: &[usize],
    num_classes: usize,
    cfg: &EmbeddingConfig,
) -> Result<EmbeddingModel, EmbeddingError> {
    cfg.validate()?;
    let first = train.first().ok_or(EmbeddingError::Empty)?;
    check_labels(train.len(), labels, num_classes)?;
    let mut seen = vec![false; num_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    let present = seen.iter().filter(|&&s| s).count();
    if present < 2 {
        return Err(EmbeddingError::TooFewClasses(present));
    }
    if train.len() < cfg.batch_size {
        return Err(EmbeddingError::TooFewSamples {
            n: train.len(),
            batch: cfg.batch_size,
        });
    }
    let mut model = EmbeddingModel::init(cfg.clone(), first.kind, first.len(), num_classes)?;
    if first.kind == RepKind::Timing {
        let max = train
            .iter()
            .flat_map(|r| r.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 && max.is_finite() {
            model.input_scale = 1.0 / max;
        }
    }
    let inputs = model.prepare_all(train)?;

    let mut rng = rng_from(cfg.seed, &[purpose::EMBEDDING, 1]);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut velocity = vec![0.0; model.params.len()];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = batch_gradient(&model.net, &model.params, &inputs, labels, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(EmbeddingError::Diverged { epoch, batch: b });
            }
            epoch_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            for ((w, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g * scale;
                *w -= cfg.learning_rate * *v;
            }
            if model.params.iter().any(|w| !w.is_finite()) {
                return Err(EmbeddingError::Diverged { epoch, batch: b });
            }
        }
        let mean = epoch_loss / inputs.len() as f64;
        log::debug!("embedding {:?} epoch {epoch}: loss {mean:.5}", first.kind);
        model.loss_history.push(mean);
    }
    model.trained = true;
    Ok(model)
}

/// Penultimate-layer activations of every row, row-major. Labels are not an
/// input here, so no label information can reach the features.
pub fn embed_rows(model: &EmbeddingModel, data: &[RepVector]) -> Result<Vec<f64>, EmbeddingError> {
    let inputs = model.prepare_all(data)?;
    let rows: Vec<Vec<f64>> = inputs.par_iter().map(|x| model.feature_of(x)).collect();
    Ok(rows.concat())
}

/// Embeds `data` and attaches the given labels.
pub fn embed(model: &EmbeddingModel, data: &[RepVector], labels: Vec<usize>) -> Result<FeatureMatrix, EmbeddingError> {
    let rows = embed_rows(model, data)?;
    let tag = FeatureTag::learned(model.kind);
    Ok(FeatureMatrix::new(rows, model.feature_dim(), labels, model.num_classes, tag)?)
}

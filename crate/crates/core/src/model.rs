//! Desk-scale downstream predictor: segment-aware hashed n-gram features
//! feeding linear/logistic models trained by mini-batch SGD, with the
//! classic robust-training baselines (Gaussian noise injection, input
//! dropout, PGD adversarial training) and step-capped text-adversarial
//! training.
//!
//! The feature space is split into three equal blocks, one per modality
//! kind, in canonical order (tabular, image, text). The segment-aware
//! featurizer hashes word n-grams into the block of the segment's modality
//! tag, so features are a bag over segments: permuting segment order changes
//! nothing, and a missing modality leaves its block all zeros. The
//! embedding-baseline featurizer instead assigns blocks by segment
//! *position* without recovering boundaries, which makes it order-sensitive
//! on purpose, mirroring embedding-based baselines.
//!
//! Hash: FNV-1a 64-bit over the n-gram words joined by 0x1f; the top bit
//! picks the count sign, the rest the index within the block. Feature
//! values stay small integers, so accumulation order cannot change results.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, Task};
use crate::pipeline::{TextSegment, UnifiedText};
use crate::rng;

/// Hard cap on adversarial training intensity relative to naive training.
pub const MAX_ADVERSARIAL_MULTIPLIER: u32 = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model/featurizer config: {0}")]
    BadConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("label does not match model task")]
    LabelMismatch,
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged { epoch: u32, step: u64, loss: f64 },
    #[error("training data is empty")]
    EmptyData,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &byte in bytes {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Dense feature vector with the per-modality block layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub block_size: usize,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector {
            values: vec![0.0; dim],
            block_size: dim / 3,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Index range of block `index` (0 = tabular, 1 = image, 2 = text for
    /// the segment-aware featurizer; positional for the embedding baseline).
    pub fn block_range(&self, index: usize) -> std::ops::Range<usize> {
        let start = index * self.block_size;
        start..start + self.block_size
    }
}

fn accumulate_ngrams(values: &mut [f64], block: usize, block_size: usize, text: &str, ngram: usize) {
    let words: Vec<&str> = text.split_whitespace().collect();
    let base = block * block_size;
    for size in 1..=ngram {
        if words.len() < size {
            break;
        }
        for window in words.windows(size) {
            let gram = window.join("\x1f");
            let hash = fnv1a64(gram.as_bytes());
            let index = base + (hash % block_size as u64) as usize;
            let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
            values[index] += sign;
        }
    }
}

/// Segment-aware featurizer: n-grams never cross segment boundaries and
/// land in the block of the segment's modality tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim: usize,
    pub ngram: usize,
}

impl Featurizer {
    pub fn new(dim: usize, ngram: usize) -> Result<Self, ModelError> {
        if dim < 3 || !dim.is_multiple_of(3) {
            return Err(ModelError::BadConfig(format!(
                "feature dim {dim} must be a positive multiple of 3"
            )));
        }
        if !(1..=3).contains(&ngram) {
            return Err(ModelError::BadConfig(format!("ngram {ngram} must be in 1..=3")));
        }
        Ok(Featurizer { dim, ngram })
    }

    pub fn block_size(&self) -> usize {
        self.dim / 3
    }

    pub fn featurize(&self, unified: &UnifiedText) -> FeatureVector {
        self.featurize_segments(&unified.segments)
    }

    pub fn featurize_segments(&self, segments: &[TextSegment]) -> FeatureVector {
        let mut out = FeatureVector::zeros(self.dim);
        for segment in segments {
            accumulate_ngrams(
                &mut out.values,
                segment.modality.canonical_index(),
                self.block_size(),
                &segment.text,
                self.ngram,
            );
        }
        out
    }
}

/// Embedding-baseline featurizer: block = segment position in presented
/// order (positions past the third fold into the last block). No boundary
/// recovery, hence order-sensitive; a `None` slot leaves zeros, the
/// zero-fill convention for missing modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingFeaturizer {
    pub dim: usize,
    pub ngram: usize,
}

impl EmbeddingFeaturizer {
    pub fn new(dim: usize, ngram: usize) -> Result<Self, ModelError> {
        Featurizer::new(dim, ngram)?;
        Ok(EmbeddingFeaturizer { dim, ngram })
    }

    pub fn featurize_slots(&self, slots: &[Option<&str>]) -> FeatureVector {
        let block_size = self.dim / 3;
        let mut out = FeatureVector::zeros(self.dim);
        for (position, slot) in slots.iter().enumerate() {
            if let Some(text) = slot {
                accumulate_ngrams(&mut out.values, position.min(2), block_size, text, self.ngram);
            }
        }
        out
    }
}

/// Linear (classification: softmax; regression: scalar) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub task: Task,
    pub dim: usize,
    /// Row-major `outputs x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(task: Task, dim: usize) -> Self {
        let outputs = match task {
            Task::Classification { num_classes } => num_classes as usize,
            Task::Regression => 1,
        };
        LinearModel {
            task,
            dim,
            weights: vec![0.0; outputs * dim],
            bias: vec![0.0; outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (c, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            *slot += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    /// Argmax class (lowest index wins ties) or the scalar score.
    pub fn predict(&self, x: &FeatureVector) -> Label {
        let logits = self.logits(&x.values);
        match self.task {
            Task::Classification { .. } => {
                let mut best = 0usize;
                for (c, &z) in logits.iter().enumerate() {
                    if z > logits[best] {
                        best = c;
                    }
                }
                Label::Class(best as u32)
            }
            Task::Regression => Label::Score(logits[0]),
        }
    }
}

/// Loss plus gradients over parameters and over the input (the latter feeds
/// PGD).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_input: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy (classification) or squared error (regression).
pub fn loss_and_gradient(model: &LinearModel, x: &FeatureVector, label: &Label) -> Result<LossGrad, ModelError> {
    loss_and_gradient_values(model, &x.values, label)
}

fn loss_and_gradient_values(model: &LinearModel, x: &[f64], label: &Label) -> Result<LossGrad, ModelError> {
    if x.len() != model.dim {
        return Err(ModelError::ShapeMismatch {
            expected: model.dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let outputs = model.outputs();
    let logits = model.logits(x);
    let (loss, dz) = match (&model.task, label) {
        (Task::Classification { num_classes }, Label::Class(y)) => {
            if *y >= *num_classes {
                return Err(ModelError::LabelMismatch);
            }
            let probs = softmax(&logits);
            let y = *y as usize;
            let loss = -probs[y].max(f64::MIN_POSITIVE).ln();
            let mut dz = probs;
            dz[y] -= 1.0;
            (loss, dz)
        }
        (Task::Regression, Label::Score(y)) => {
            let error = logits[0] - y;
            (error * error, vec![2.0 * error])
        }
        _ => return Err(ModelError::LabelMismatch),
    };
    let mut d_weights = vec![0.0; outputs * model.dim];
    let mut d_input = vec![0.0; model.dim];
    for (c, &dz_c) in dz.iter().enumerate() {
        let grad_row = &mut d_weights[c * model.dim..(c + 1) * model.dim];
        for (slot, &v) in grad_row.iter_mut().zip(x) {
            *slot = dz_c * v;
        }
        let weight_row = &model.weights[c * model.dim..(c + 1) * model.dim];
        for (slot, &w) in d_input.iter_mut().zip(weight_row) {
            *slot += dz_c * w;
        }
    }
    Ok(LossGrad {
        loss,
        d_weights,
        d_bias: dz,
        d_input,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// K steps of input-gradient-sign ascent, each iterate projected into the
/// L-infinity ball of radius epsilon around `x`. Never decreases the loss of
/// a linear model.
pub fn pgd_attack(
    model: &LinearModel,
    x: &FeatureVector,
    epsilon: f64,
    alpha: f64,
    steps: u32,
    label: &Label,
) -> Result<FeatureVector, ModelError> {
    if epsilon < 0.0 {
        return Err(ModelError::BadConfig("epsilon must be >= 0".into()));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut current = x.values.clone();
    for _ in 0..steps {
        let grad = loss_and_gradient_values(model, &current, label)?;
        for (j, value) in current.iter_mut().enumerate() {
            let lo = x.values[j] - epsilon;
            let hi = x.values[j] + epsilon;
            *value = (*value + alpha * sign(grad.d_input[j])).clamp(lo, hi);
        }
    }
    Ok(FeatureVector {
        values: current,
        block_size: x.block_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrainMode {
    Naive,
    NoiseInjection { sigma: f64 },
    Dropout { rate: f64 },
    Pgd { epsilon: f64, alpha: f64, steps: u32 },
    TextAdversarial { multiplier: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::BadConfig("epochs must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(ModelError::BadConfig("learning_rate must be positive".into()));
        }
        if self.l2 < 0.0 {
            return Err(ModelError::BadConfig("l2 must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig("batch_size must be >= 1".into()));
        }
        match &self.mode {
            TrainMode::Naive => {}
            TrainMode::NoiseInjection { sigma } => {
                if *sigma < 0.0 || !sigma.is_finite() {
                    return Err(ModelError::BadConfig("noise sigma must be finite and >= 0".into()));
                }
            }
            TrainMode::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(ModelError::BadConfig("dropout rate must be in [0, 1)".into()));
                }
            }
            TrainMode::Pgd { epsilon, alpha, steps } => {
                if *epsilon < 0.0 {
                    return Err(ModelError::BadConfig("pgd epsilon must be >= 0".into()));
                }
                if !alpha.is_finite() || *alpha <= 0.0 {
                    return Err(ModelError::BadConfig("pgd alpha must be positive".into()));
                }
                if *steps == 0 {
                    return Err(ModelError::BadConfig("pgd steps must be >= 1".into()));
                }
            }
            TrainMode::TextAdversarial { multiplier } => {
                if *multiplier == 0 || *multiplier > MAX_ADVERSARIAL_MULTIPLIER {
                    return Err(ModelError::BadConfig(format!(
                        "adversarial iteration multiplier {multiplier} must be in 1..={MAX_ADVERSARIAL_MULTIPLIER}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// On-disk model checkpoint: JSON with the feature-space layout (dimension,
/// n-gram order, three equal modality blocks), parameters, task, and the
/// hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub feature_dim: usize,
    pub ngram: usize,
    pub block_size: usize,
    pub model: LinearModel,
    pub stats: TrainStats,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn new(
        feature_dim: usize,
        ngram: usize,
        model: LinearModel,
        stats: TrainStats,
        config_hash: String,
    ) -> Self {
        Checkpoint {
            schema_version: 1,
            feature_dim,
            ngram,
            block_size: feature_dim / 3,
            model,
            stats,
            config_hash,
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        out.push('\n');
        out
    }

    pub fn from_json(raw: &str) -> Result<Self, ModelError> {
        serde_json::from_str(raw).map_err(|e| ModelError::BadConfig(format!("checkpoint parse: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Gradient steps taken.
    pub steps: u64,
    /// Steps a naive run over the clean data would take; the adversarial
    /// cap is `multiplier * naive_steps`.
    pub naive_steps: u64,
}

fn naive_step_count(n: usize, config: &TrainConfig) -> u64 {
    let per_epoch = n.div_ceil(config.batch_size) as u64;
    u64::from(config.epochs) * per_epoch
}

/// Mini-batch SGD with seeded shuffling. Robust-training modes transform
/// each input at presentation time: Gaussian noise, inverted dropout, or a
/// PGD attack against the current model. Deterministic given the seed.
pub fn train(
    model: LinearModel,
    data: &[(FeatureVector, Label)],
    config: &TrainConfig,
    seed: u64,
) -> Result<(LinearModel, TrainStats), ModelError> {
    config.validate()?;
    let refs: Vec<(&FeatureVector, &Label)> = data.iter().map(|(x, y)| (x, y)).collect();
    let cap = naive_step_count(data.len(), config);
    sgd_loop(model, &refs, &[], config, seed, cap)
}

/// Adversarially augmented SGD: per epoch, the epoch's pre-generated
/// adversarial instances join the clean data, with total gradient steps hard
/// capped at `multiplier * naive_steps`.
pub fn train_adversarial_text(
    model: LinearModel,
    clean: &[(FeatureVector, Label)],
    per_epoch_adversarial: &[Vec<(FeatureVector, Label)>],
    config: &TrainConfig,
    seed: u64,
) -> Result<(LinearModel, TrainStats), ModelError> {
    config.validate()?;
    let TrainMode::TextAdversarial { multiplier } = config.mode else {
        return Err(ModelError::BadConfig(
            "train_adversarial_text requires the text_adversarial mode".into(),
        ));
    };
    if per_epoch_adversarial.len() != config.epochs as usize {
        return Err(ModelError::BadConfig(format!(
            "expected {} epochs of adversarial data, got {}",
            config.epochs,
            per_epoch_adversarial.len()
        )));
    }
    let refs: Vec<(&FeatureVector, &Label)> = clean.iter().map(|(x, y)| (x, y)).collect();
    let extras: Vec<Vec<(&FeatureVector, &Label)>> = per_epoch_adversarial
        .iter()
        .map(|epoch| epoch.iter().map(|(x, y)| (x, y)).collect())
        .collect();
    let cap = u64::from(multiplier) * naive_step_count(clean.len(), config);
    sgd_loop(model, &refs, &extras, config, seed, cap)
}

fn sgd_loop(
    mut model: LinearModel,
    clean: &[(&FeatureVector, &Label)],
    per_epoch_extras: &[Vec<(&FeatureVector, &Label)>],
    config: &TrainConfig,
    seed: u64,
    step_cap: u64,
) -> Result<(LinearModel, TrainStats), ModelError> {
    if clean.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let dim = model.dim;
    let outputs = model.outputs();
    let mut steps: u64 = 0;
    let naive_steps = naive_step_count(clean.len(), config);

    'epochs: for epoch in 0..config.epochs {
        let mut items: Vec<(&FeatureVector, &Label)> = clean.to_vec();
        if let Some(extras) = per_epoch_extras.get(epoch as usize) {
            items.extend(extras.iter().copied());
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_stream = rng::stream(seed, "train_shuffle", &epoch.to_string());
            order.shuffle(&mut shuffle_stream);
        }
        let mut presentation_stream = rng::stream(seed, "train_present", &epoch.to_string());

        for batch in order.chunks(config.batch_size) {
            if steps >= step_cap {
                break 'epochs;
            }
            let mut grad_w = vec![0.0; outputs * dim];
            let mut grad_b = vec![0.0; outputs];
            for &item in batch {
                let (x, y) = items[item];
                let presented = present_input(&model, x, y, &config.mode, &mut presentation_stream)?;
                let grad = match &presented {
                    Some(values) => loss_and_gradient_values(&model, values, y)?,
                    None => loss_and_gradient_values(&model, &x.values, y)?,
                };
                if !grad.loss.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        step: steps,
                        loss: grad.loss,
                    });
                }
                for (slot, g) in grad_w.iter_mut().zip(&grad.d_weights) {
                    *slot += g;
                }
                for (slot, g) in grad_b.iter_mut().zip(&grad.d_bias) {
                    *slot += g;
                }
            }
            let scale = config.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad_w) {
                *w -= scale * g + config.learning_rate * config.l2 * *w;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad_b) {
                *b -= scale * g;
            }
            steps += 1;
        }
    }
    debug_assert!(steps <= step_cap, "step cap violated: {steps} > {step_cap}");
    Ok((model, TrainStats { steps, naive_steps }))
}

/// Presentation-time input transform for the robust-training modes. `None`
/// means the original input is used as-is.
fn present_input(
    model: &LinearModel,
    x: &FeatureVector,
    label: &Label,
    mode: &TrainMode,
    stream: &mut ChaCha12Rng,
) -> Result<Option<Vec<f64>>, ModelError> {
    match mode {
        TrainMode::Naive | TrainMode::TextAdversarial { .. } => Ok(None),
        TrainMode::NoiseInjection { sigma } => {
            if *sigma == 0.0 {
                return Ok(None);
            }
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| ModelError::BadConfig(format!("noise sigma: {e}")))?;
            Ok(Some(
                x.values.iter().map(|v| v + normal.sample(stream)).collect(),
            ))
        }
        TrainMode::Dropout { rate } => {
            if *rate == 0.0 {
                return Ok(None);
            }
            let keep_scale = 1.0 / (1.0 - rate);
            Ok(Some(
                x.values
                    .iter()
                    .map(|v| {
                        if stream.random_bool(*rate) {
                            0.0
                        } else {
                            v * keep_scale
                        }
                    })
                    .collect(),
            ))
        }
        TrainMode::Pgd { epsilon, alpha, steps } => {
            let attacked = pgd_attack(model, x, *epsilon, *alpha, *steps, label)?;
            Ok(Some(attacked.values))
        }
    }
}

//! Graph encoder, per-domain classifiers, and supervised source training.
//!
//! The encoder is a two-layer graph convolution shared by every source
//! domain (hard parameter sharing); each domain gets its own linear-softmax
//! classifier head. The target model is a [`Hypothesis`] — an encoder plus
//! one classifier — initialized from the trained source models and adapted
//! separately.
//!
//! Forward passes are recorded on a [`Tape`] so the same code path serves
//! training and the gradient checks in the test suite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmagError};
use crate::graph::DomainSet;
use crate::seeding::seeded_rng;
use crate::tensor::{Adam, Matrix, Tape, ValueId};

/// Two-layer graph convolution: `X = A_hat * relu(A_hat * F * W1 + b1) * W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Linear-softmax classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub w: Matrix,
    pub b: Matrix,
}

/// A complete node classifier: encoder plus classification head. Source
/// domains share one encoder; the target model owns its copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub encoder: Encoder,
    pub classifier: Classifier,
}

/// Uniform Glorot initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl Encoder {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Encoder {
        Encoder {
            w1: glorot(input_dim, hidden_dim, rng),
            b1: Matrix::zeros(1, hidden_dim),
            w2: glorot(hidden_dim, hidden_dim, rng),
            b2: Matrix::zeros(1, hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Plain (untracked) forward pass over precomputed `A_hat` and features.
    pub fn encode(&self, a_hat: &Matrix, features: &Matrix) -> Matrix {
        let u = a_hat.matmul(features).matmul(&self.w1).add_row_broadcast(&self.b1);
        let h1 = u.map(|v| if v > 0.0 { v } else { 0.0 });
        a_hat.matmul(&h1.matmul(&self.w2)).add_row_broadcast(&self.b2)
    }
}

impl Classifier {
    pub fn init(hidden_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Classifier {
        Classifier {
            w: glorot(hidden_dim, num_classes, rng),
            b: Matrix::zeros(1, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }

    pub fn params(&self) -> [&Matrix; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.w, &mut self.b]
    }

    /// Plain (untracked) class probabilities for the given embeddings.
    pub fn predict(&self, x: &Matrix) -> Matrix {
        softmax_rows_plain(&x.matmul(&self.w).add_row_broadcast(&self.b))
    }
}

impl Hypothesis {
    pub fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.encoder.params().to_vec();
        v.extend(self.classifier.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let [w1, b1, w2, b2] = self.encoder.params_mut();
        let [w, b] = self.classifier.params_mut();
        vec![w1, b1, w2, b2, w, b]
    }
}

/// Row-wise softmax on a plain matrix (max-subtracted).
pub fn softmax_rows_plain(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape-side forward passes
// ---------------------------------------------------------------------------

/// Encoder parameters registered on a tape.
#[derive(Clone, Copy)]
pub struct EncoderVars {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

#[derive(Clone, Copy)]
pub struct ClassifierVars {
    pub w: ValueId,
    pub b: ValueId,
}

pub fn encoder_to_tape(tape: &Tape, enc: &Encoder) -> EncoderVars {
    EncoderVars {
        w1: tape.input(enc.w1.clone()),
        b1: tape.input(enc.b1.clone()),
        w2: tape.input(enc.w2.clone()),
        b2: tape.input(enc.b2.clone()),
    }
}

pub fn classifier_to_tape(tape: &Tape, cls: &Classifier) -> ClassifierVars {
    ClassifierVars {
        w: tape.input(cls.w.clone()),
        b: tape.input(cls.b.clone()),
    }
}

impl EncoderVars {
    pub fn list(&self) -> [ValueId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl ClassifierVars {
    pub fn list(&self) -> [ValueId; 2] {
        [self.w, self.b]
    }
}

/// Tracked encoder forward pass. `a_hat` is the normalized adjacency and
/// `af` the precomputed product `A_hat * F` (both typically constants).
/// `hidden_mask`, when present, is multiplied into the post-ReLU hidden
/// layer (used for inverted dropout during training).
pub fn encode_on_tape(
    tape: &Tape,
    a_hat: ValueId,
    af: ValueId,
    vars: &EncoderVars,
    hidden_mask: Option<ValueId>,
) -> ValueId {
    let u = tape.add(tape.matmul(af, vars.w1), vars.b1);
    let mut h1 = tape.relu(u);
    if let Some(mask) = hidden_mask {
        h1 = tape.mul_elem(h1, mask);
    }
    tape.add(tape.matmul(a_hat, tape.matmul(h1, vars.w2)), vars.b2)
}

/// Tracked logits `X * W + b`.
pub fn logits_on_tape(tape: &Tape, x: ValueId, vars: &ClassifierVars) -> ValueId {
    tape.add(tape.matmul(x, vars.w), vars.b)
}

/// Tracked class probabilities.
pub fn classify_on_tape(tape: &Tape, x: ValueId, vars: &ClassifierVars) -> ValueId {
    tape.softmax_rows(logits_on_tape(tape, x, vars))
}

/// Mean cross-entropy `-log P[v, y_v]` over the masked nodes.
pub fn ce_loss_on_tape(
    tape: &Tape,
    probs: ValueId,
    labels: &[usize],
    mask: &[bool],
) -> Result<ValueId> {
    let (rows, num_classes) = tape.shape(probs);
    assert_eq!(rows, labels.len(), "label count mismatch");
    assert_eq!(rows, mask.len(), "mask length mismatch");
    let selected: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if selected.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "ce_loss",
            details: "mask selects zero nodes".into(),
        });
    }
    let mut onehot = Matrix::zeros(selected.len(), num_classes);
    for (r, &i) in selected.iter().enumerate() {
        assert!(labels[i] < num_classes, "label out of range");
        onehot.set(r, labels[i], 1.0);
    }
    let picked = tape.slice_rows(probs, &selected);
    let logp = tape.log(picked);
    let y = tape.constant(onehot);
    let total = tape.sum(tape.mul_elem(logp, y));
    Ok(tape.scalar_mul(total, -1.0 / selected.len() as f64))
}

/// Adds `0.5 * wd * ||theta||^2` for every parameter to `loss`, so the
/// gradient contribution is the familiar `wd * theta`.
pub fn add_l2_penalty(tape: &Tape, loss: ValueId, params: &[ValueId], wd: f64) -> ValueId {
    if wd == 0.0 {
        return loss;
    }
    let mut total = loss;
    for &p in params {
        let pen = tape.scalar_mul(tape.sum(tape.square(p)), 0.5 * wd);
        total = tape.add(total, pen);
    }
    total
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

/// Hyperparameters for supervised source-model training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceTrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without an improvement of at
    /// least `early_stop_min_delta` in the training loss.
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// Inverted-dropout rate on the hidden layer; 0 disables it.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            hidden_dim: 64,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            max_epochs: 2000,
            early_stop_patience: 50,
            early_stop_min_delta: 1e-5,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Trained source models plus the per-epoch loss curve.
#[derive(Debug, Clone)]
pub struct SourceModels {
    pub encoder: Encoder,
    pub classifiers: Vec<Classifier>,
    /// Total (summed over sources) training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains the shared encoder and one classifier per source by minimizing the
/// sum over sources of the mean masked cross-entropy, with L2 regularization
/// folded into the loss and Adam as the optimizer.
pub fn train_source_models(set: &DomainSet, cfg: &SourceTrainConfig) -> Result<SourceModels> {
    let mut init_rng = seeded_rng(cfg.seed, "source_models/init");
    let mut encoder = Encoder::init(set.feature_dim, cfg.hidden_dim, &mut init_rng);
    let mut classifiers: Vec<Classifier> = (0..set.num_sources())
        .map(|_| Classifier::init(cfg.hidden_dim, set.num_classes, &mut init_rng))
        .collect();

    // A_hat * F never changes; precompute it per source.
    let af: Vec<Matrix> = set
        .sources
        .iter()
        .map(|g| g.adj_norm.matmul(&g.features))
        .collect();

    let mut dropout_rng = seeded_rng(cfg.seed, "source_models/dropout");
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let tape = Tape::new();
        let evars = encoder_to_tape(&tape, &encoder);
        let cvars: Vec<ClassifierVars> = classifiers
            .iter()
            .map(|c| classifier_to_tape(&tape, c))
            .collect();

        let mut total: Option<ValueId> = None;
        for (k, graph) in set.sources.iter().enumerate() {
            let a_hat = tape.constant(graph.adj_norm.clone());
            let af_id = tape.constant(af[k].clone());
            let mask_id = dropout_mask(&tape, cfg.dropout, graph.num_nodes, cfg.hidden_dim, &mut dropout_rng);
            let x = encode_on_tape(&tape, a_hat, af_id, &evars, mask_id);
            let probs = classify_on_tape(&tape, x, &cvars[k]);
            let labels = graph.labels.as_ref().expect("source graphs are labeled");
            let mask = vec![true; graph.num_nodes];
            let lk = ce_loss_on_tape(&tape, probs, labels, &mask)?;
            total = Some(match total {
                None => lk,
                Some(t) => tape.add(t, lk),
            });
        }
        let data_loss = total.expect("at least one source");

        let mut all_vars: Vec<ValueId> = evars.list().to_vec();
        for cv in &cvars {
            all_vars.extend(cv.list());
        }
        let loss = add_l2_penalty(&tape, data_loss, &all_vars, cfg.weight_decay);

        let loss_value = tape.item(loss);
        if !loss_value.is_finite() {
            return Err(SelmagError::NonFiniteLoss {
                epoch,
                context: "source model training".into(),
            });
        }
        losses.push(loss_value);

        let grads = tape.backward(loss);
        let gvec: Vec<Matrix> = all_vars
            .iter()
            .map(|&v| grads.grad_or_zeros(&tape, v))
            .collect();
        let mut prefs: Vec<&mut Matrix> = encoder.params_mut().into_iter().collect();
        for c in classifiers.iter_mut() {
            prefs.extend(c.params_mut());
        }
        opt.step(&mut prefs, &gvec);

        if best - loss_value >= cfg.early_stop_min_delta {
            best = loss_value;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    Ok(SourceModels {
        encoder,
        classifiers,
        loss_curve: losses,
    })
}

/// Scaled Bernoulli mask for inverted dropout, or `None` when disabled.
fn dropout_mask(
    tape: &Tape,
    rate: f64,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Option<ValueId> {
    if rate <= 0.0 {
        return None;
    }
    assert!(rate < 1.0, "dropout rate must be below 1");
    let keep = 1.0 - rate;
    let m = Matrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    Some(tape.constant(m))
}

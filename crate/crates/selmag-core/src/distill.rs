//! Soft pseudo-labels for the unlabeled target graph and the
//! knowledge-distillation loss that trains the target model against them.
//!
//! Each source hypothesis (shared encoder + per-source classifier) is applied
//! to the *target* graph, producing one predictive distribution per node and
//! source. The pseudo-label of a node is the convex combination of those K
//! distributions, weighted by the global selection scores. The distillation
//! loss is then the mean soft cross-entropy between the pseudo-labels and the
//! target model's predictions.
//!
//! Source models are frozen during target training, so their predictions on
//! the target graph never change; compute them once with
//! [`source_predictions`] and reuse the result across epochs. Only the mixing
//! weights move, which is why [`pseudo_labels_on_tape`] takes the weights as a
//! tape value but the predictions as pre-registered constants.

use std::cell::Cell;

use crate::error::{Result, SelmagError};
use crate::graph::Graph;
use crate::models::{Classifier, Encoder};
use crate::tensor::{Matrix, Tape, ValueId, LOG_CLAMP};

thread_local! {
    static KD_EVALUATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of distillation-loss evaluations performed by the current thread.
/// Test instrumentation: the loss-toggle reductions assert that a run with
/// the distillation term switched off never evaluates it.
pub fn kd_evaluations() -> usize {
    KD_EVALUATIONS.with(|c| c.get())
}

fn count_kd_evaluation() {
    KD_EVALUATIONS.with(|c| c.set(c.get() + 1));
}

/// How far the global-score vector may deviate from summing to 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Applies every source hypothesis to the target graph and returns the
/// per-source predictive distributions (each `num_target_nodes x num_classes`,
/// rows summing to 1). The encoder is shared; classifier `k` belongs to
/// source `k`. Call once and cache: the models are frozen, so these matrices
/// are constant throughout target training.
pub fn source_predictions(
    encoder: &Encoder,
    classifiers: &[Classifier],
    target: &Graph,
) -> Result<Vec<Matrix>> {
    if classifiers.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "source_predictions",
            details: "no classifiers given".into(),
        });
    }
    if target.feature_dim() != encoder.input_dim() {
        return Err(SelmagError::ShapeMismatch {
            op: "source_predictions",
            details: format!(
                "target feature dim {} vs encoder input dim {}",
                target.feature_dim(),
                encoder.input_dim()
            ),
        });
    }
    let embeddings = encoder.encode(&target.adj_norm, &target.features);
    Ok(classifiers
        .iter()
        .map(|c| c.predict(&embeddings))
        .collect())
}

fn validate_mixture(
    op: &'static str,
    num_preds: usize,
    num_weights: usize,
    weight_sum: f64,
) -> Result<()> {
    if num_preds == 0 {
        return Err(SelmagError::InvalidArgument {
            op,
            details: "no source predictions given".into(),
        });
    }
    if num_weights != num_preds {
        return Err(SelmagError::ShapeMismatch {
            op,
            details: format!("{num_preds} prediction matrices but {num_weights} weights"),
        });
    }
    if !weight_sum.is_finite() || (weight_sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(SelmagError::InvalidArgument {
            op,
            details: format!("weights must sum to 1 +/- {WEIGHT_SUM_TOLERANCE}, got {weight_sum}"),
        });
    }
    Ok(())
}

/// Convex combination of the source predictive distributions:
/// `Ybar = sum_k s_global[k] * preds[k]`. Every output row sums to 1 (up to
/// floating-point error) whenever the inputs are row-stochastic and the
/// weights sum to 1.
///
/// Errors when the weight vector does not sum to 1 within
/// [`WEIGHT_SUM_TOLERANCE`], when a weight is negative, or when the
/// prediction matrices disagree in shape.
pub fn pseudo_labels(preds: &[Matrix], s_global: &[f64]) -> Result<Matrix> {
    validate_mixture(
        "pseudo_labels",
        preds.len(),
        s_global.len(),
        s_global.iter().sum(),
    )?;
    if let Some(w) = s_global.iter().find(|w| **w < 0.0) {
        return Err(SelmagError::InvalidArgument {
            op: "pseudo_labels",
            details: format!("negative weight {w}"),
        });
    }
    let (n, r) = preds[0].shape();
    let mut out = Matrix::zeros(n, r);
    for (p, &w) in preds.iter().zip(s_global) {
        if p.shape() != (n, r) {
            return Err(SelmagError::ShapeMismatch {
                op: "pseudo_labels",
                details: format!("prediction shapes differ: {:?} vs {:?}", (n, r), p.shape()),
            });
        }
        out.add_assign(&p.scale(w));
    }
    Ok(out)
}

/// Tape-valued pseudo-labels: the predictions enter as constants (frozen
/// source models) while `s_global` is a live `K x 1` tape value, so gradients
/// flow into the selector that produced the weights. Scalar weight `k` is
/// broadcast to `n x r` via `ones_{n x 1} * (w_k * ones_{1 x r})`.
pub fn pseudo_labels_on_tape(tape: &Tape, preds: &[Matrix], s_global: ValueId) -> Result<ValueId> {
    let (k_rows, k_cols) = tape.shape(s_global);
    validate_mixture(
        "pseudo_labels_on_tape",
        preds.len(),
        k_rows * k_cols,
        tape.with_value(s_global, |w| w.sum()),
    )?;
    if k_cols != 1 {
        return Err(SelmagError::ShapeMismatch {
            op: "pseudo_labels_on_tape",
            details: format!("weights must be a column vector, got {k_rows}x{k_cols}"),
        });
    }
    let (n, r) = preds[0].shape();
    let ones_n1 = tape.constant(Matrix::ones(n, 1));
    let ones_1r = tape.constant(Matrix::ones(1, r));
    let mut total: Option<ValueId> = None;
    for (k, p) in preds.iter().enumerate() {
        if p.shape() != (n, r) {
            return Err(SelmagError::ShapeMismatch {
                op: "pseudo_labels_on_tape",
                details: format!("prediction shapes differ: {:?} vs {:?}", (n, r), p.shape()),
            });
        }
        let w_k = tape.slice_rows(s_global, &[k]);
        let w_row = tape.matmul(w_k, ones_1r);
        let w_full = tape.matmul(ones_n1, w_row);
        let term = tape.mul_elem(w_full, tape.constant(p.clone()));
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("at least one source"))
}

/// Knowledge-distillation loss: mean over target nodes of the soft
/// cross-entropy `-sum_i Ybar[v][i] * ln pred[v][i]`. Logs are clamped at
/// [`LOG_CLAMP`], so a perfect one-hot match scores (numerically) zero
/// instead of NaN.
pub fn kd_loss(pseudo: &Matrix, predictions: &Matrix) -> Result<f64> {
    if pseudo.shape() != predictions.shape() {
        return Err(SelmagError::ShapeMismatch {
            op: "kd_loss",
            details: format!("{:?} vs {:?}", pseudo.shape(), predictions.shape()),
        });
    }
    if pseudo.rows() == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "kd_loss",
            details: "no target nodes".into(),
        });
    }
    count_kd_evaluation();
    let mut total = 0.0;
    for (y, p) in pseudo.data().iter().zip(predictions.data()) {
        total -= y * p.max(LOG_CLAMP).ln();
    }
    Ok(total / pseudo.rows() as f64)
}

/// Tape-valued distillation loss. Both arguments may be live tape values:
/// the pseudo-labels carry gradients into the selector weights and the
/// predictions carry gradients into the target model.
pub fn kd_loss_on_tape(tape: &Tape, pseudo: ValueId, predictions: ValueId) -> Result<ValueId> {
    let shape = tape.shape(pseudo);
    if shape != tape.shape(predictions) {
        return Err(SelmagError::ShapeMismatch {
            op: "kd_loss_on_tape",
            details: format!("{:?} vs {:?}", shape, tape.shape(predictions)),
        });
    }
    if shape.0 == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "kd_loss_on_tape",
            details: "no target nodes".into(),
        });
    }
    count_kd_evaluation();
    let ce = tape.sum(tape.mul_elem(pseudo, tape.log(predictions)));
    Ok(tape.scalar_mul(ce, -1.0 / shape.0 as f64))
}

//! Meta-learned selective adaptation.
//!
//! The selectors cannot be trained directly on the unlabeled target, so they
//! are trained on *episodes*: one source graph plays the target ("pseudo
//! target"), the remaining sources play the source pool. Each episode adapts
//! a fresh target model for a few plain-gradient steps on the blended
//! alignment + distillation objective (the inner loop), then scores the
//! adapted model's supervised cross-entropy on the pseudo target's labeled
//! nodes and backpropagates through the *unrolled* inner trajectory into the
//! selector parameters (the outer step).
//!
//! The inner loop must stay differentiable with respect to the selectors, so
//! each step's parameter gradient is not obtained by running the tape's
//! backward pass; instead the closed-form derivative of the step loss with
//! respect to every target-model matrix is built *forward* out of tape
//! primitives (see [`adaptation_step`]). The transport plan and the ReLU
//! activation pattern enter those formulas as constants evaluated at the
//! current iterate: the plan because the alignment loss treats the solved
//! plan as fixed (its own solver already re-runs every step), the ReLU mask
//! because the derivative of `relu` is piecewise constant.
//!
//! After meta-training the selectors are frozen and the same inner procedure
//! runs on the real target ([`final_adapt`]), re-reading the adapted
//! parameters off a short-lived tape each cycle so memory stays bounded.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{kd_loss_on_tape, pseudo_labels_on_tape, source_predictions};
use crate::error::{Result, SelmagError};
use crate::graph::{split_label_mask, DomainSet, Graph};
use crate::models::{ce_loss_on_tape, Classifier, Encoder, Hypothesis, SourceModels};
use crate::ot::{selot_loss, SelotSource, SinkhornOptions, TransportPlan};
use crate::seeding::seeded_rng;
use crate::tensor::{Adam, Matrix, Tape, ValueId};
use crate::transfer::{
    build_transfer_scores, global_select_on_tape, local_select_on_tape, pool_target,
    selector_to_tape, transfer_score, SelectorParams, SelectorVars, SslArtifacts, SslConfig,
    TransferScores, NUM_TASKS,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Hyperparameters of the adaptation objective and the meta-training loop.
///
/// `lambda` blends the two adaptation losses (`lambda` on the selective
/// transport alignment, `1 - lambda` on distillation). `inner_steps` /
/// `inner_lr` govern the plain-gradient inner loop; `outer_lr` is the Adam
/// rate for the selector updates. `weight_decay` shrinks the target-model
/// parameters multiplicatively during inner steps (decoupled form, so the
/// reported adaptation loss stays the pure blend). `label_ratio` is the
/// fraction of pseudo-target nodes whose labels the outer loss may see.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub weight_decay: f64,
    pub max_outer_epochs: usize,
    pub label_ratio: f64,
    pub seed: u64,
    /// Per-solve iteration cap for the transport solver.
    pub sinkhorn_max_iters: usize,
    /// Marginal-violation tolerance for the transport solver.
    pub sinkhorn_tolerance: f64,
    /// Stop after this many epochs without the outer loss improving by at
    /// least `plateau_min_delta`.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            epsilon: 0.01,
            inner_steps: 5,
            inner_lr: 0.01,
            outer_lr: 0.001,
            weight_decay: 5e-4,
            max_outer_epochs: 200,
            label_ratio: 0.1,
            seed: 0,
            // A 500-iteration budget at 1e-6 keeps desk-scale plans accurate
            // to well below the gradient noise while staying ~10x cheaper
            // than running every solve to high-precision convergence.
            sinkhorn_max_iters: 500,
            sinkhorn_tolerance: 1e-6,
            plateau_patience: 30,
            plateau_min_delta: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |details: String| {
            Err(SelmagError::InvalidArgument {
                op: "TrainConfig",
                details,
            })
        };
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.inner_lr < 0.0 || !self.inner_lr.is_finite() {
            return bad(format!("inner_lr must be >= 0, got {}", self.inner_lr));
        }
        if self.outer_lr < 0.0 || !self.outer_lr.is_finite() {
            return bad(format!("outer_lr must be >= 0, got {}", self.outer_lr));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return bad(format!("label_ratio must lie in (0, 1], got {}", self.label_ratio));
        }
        if self.sinkhorn_max_iters == 0 {
            return bad("sinkhorn_max_iters must be positive".into());
        }
        if self.sinkhorn_tolerance <= 0.0 {
            return bad(format!(
                "sinkhorn_tolerance must be positive, got {}",
                self.sinkhorn_tolerance
            ));
        }
        Ok(())
    }

    pub fn sinkhorn_options(&self) -> SinkhornOptions {
        SinkhornOptions {
            max_iters: self.sinkhorn_max_iters,
            tolerance: self.sinkhorn_tolerance,
            check_every: 5,
            record_trace: false,
        }
    }
}

/// Which selector outputs to replace with neutral constants (used by the
/// ablation variants). Disabling the graph-level selector substitutes a
/// uniform mixture for `s_global` everywhere it appears (transport-cost
/// scaling and the pseudo-label mixture); disabling the node-level selector
/// substitutes all-ones node weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectorToggles {
    pub disable_global: bool,
    pub disable_local: bool,
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// One meta-training episode: a pseudo target drawn from the source pool and
/// the complement as pseudo sources (indices into `DomainSet::sources`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub pseudo_target: usize,
    pub pseudo_sources: Vec<usize>,
}

/// Uniformly samples the pseudo target; the pseudo sources are the remaining
/// domains in index order. Requires at least two sources.
pub fn sample_episode(num_sources: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    if num_sources < 2 {
        return Err(SelmagError::InvalidArgument {
            op: "sample_episode",
            details: format!("need at least 2 sources, got {num_sources}"),
        });
    }
    let pseudo_target = rng.gen_range(0..num_sources);
    let pseudo_sources = (0..num_sources).filter(|&i| i != pseudo_target).collect();
    Ok(Episode {
        pseudo_target,
        pseudo_sources,
    })
}

// ---------------------------------------------------------------------------
// Pairwise exchange scores
// ---------------------------------------------------------------------------

/// Probe-task exchange losses for every ordered source pair: `raw[k][j]`
/// holds the three losses of source `k`'s pretrained probe heads evaluated
/// on source graph `j`. Computed once before meta-training (the heads are
/// frozen, so episode features never change).
#[derive(Debug, Clone)]
pub struct PairwiseScores {
    pub raw: Vec<Vec<[f64; NUM_TASKS]>>,
}

/// Evaluates all K x K exchange scores, one worker thread per scoring
/// module (the evaluations are pure and independent).
pub fn pairwise_transfer_scores(
    artifacts: &SslArtifacts,
    set: &DomainSet,
    cfg: &SslConfig,
    base_seed: u64,
) -> Result<PairwiseScores> {
    let k = set.num_sources();
    if artifacts.source_modules.len() != k {
        return Err(SelmagError::InvalidArgument {
            op: "pairwise_transfer_scores",
            details: format!(
                "{} pretrained modules for {k} sources",
                artifacts.source_modules.len()
            ),
        });
    }
    let rows: Vec<Result<Vec<[f64; NUM_TASKS]>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k)
            .map(|i| {
                let modules = &artifacts.source_modules[i];
                scope.spawn(move || {
                    set.sources
                        .iter()
                        .map(|g| transfer_score(modules, g, cfg, base_seed))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let raw = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PairwiseScores { raw })
}

impl PairwiseScores {
    /// Selector features for one episode: the pseudo sources' losses on the
    /// pseudo target, standardized against the pseudo target's own scores.
    pub fn features_for(
        &self,
        pseudo_target: usize,
        pseudo_sources: &[usize],
    ) -> Result<TransferScores> {
        let k = self.raw.len();
        if pseudo_target >= k
            || pseudo_sources.is_empty()
            || pseudo_sources
                .iter()
                .any(|&s| s >= k || s == pseudo_target)
        {
            return Err(SelmagError::InvalidArgument {
                op: "features_for",
                details: format!(
                    "invalid episode: target {pseudo_target}, sources {pseudo_sources:?}, K={k}"
                ),
            });
        }
        let rows: Vec<[f64; NUM_TASKS]> = pseudo_sources
            .iter()
            .map(|&s| self.raw[s][pseudo_target])
            .collect();
        build_transfer_scores(rows, self.raw[pseudo_target][pseudo_target])
    }
}

// ---------------------------------------------------------------------------
// Adaptation problems
// ---------------------------------------------------------------------------

/// Everything the inner loop reads that is fixed for one adaptation run:
/// the (pseudo-)target graph, frozen-encoder source embeddings, frozen
/// source predictions on the target, the pooled target representation fed
/// to the node-level selector, and the selector input features.
pub struct AdaptationProblem<'a> {
    pub target: &'a Graph,
    /// `K' x 2*NUM_TASKS` selector features for the participating sources.
    pub features: Matrix,
    pub source_embeddings: Vec<Matrix>,
    pub source_predictions: Vec<Matrix>,
    pub pooled_target: Matrix,
    /// Precomputed `A_hat * F` of the target graph.
    pub af: Matrix,
    /// Average of the participating source classifiers (target-model init).
    pub classifier_mean: Classifier,
}

/// Element-wise average of the given classification heads.
pub fn mean_classifier(classifiers: &[Classifier]) -> Result<Classifier> {
    if classifiers.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "mean_classifier",
            details: "no classifiers".into(),
        });
    }
    let mut w = Matrix::zeros(classifiers[0].w.rows(), classifiers[0].w.cols());
    let mut b = Matrix::zeros(classifiers[0].b.rows(), classifiers[0].b.cols());
    let scale = 1.0 / classifiers.len() as f64;
    for c in classifiers {
        if c.w.shape() != w.shape() || c.b.shape() != b.shape() {
            return Err(SelmagError::ShapeMismatch {
                op: "mean_classifier",
                details: "classifier shapes differ".into(),
            });
        }
        w.add_assign(&c.w.scale(scale));
        b.add_assign(&c.b.scale(scale));
    }
    Ok(Classifier { w, b })
}

/// Assembles the frozen data for adapting to `target` from the given
/// sources. `classifiers` must align with `sources`; `features` is the
/// selector input matrix (one row per source, in the same order).
pub fn build_adaptation_problem<'a>(
    models: &SourceModels,
    target: &'a Graph,
    sources: &[&Graph],
    classifiers: &[Classifier],
    features: Matrix,
) -> Result<AdaptationProblem<'a>> {
    if sources.is_empty() || sources.len() != classifiers.len() {
        return Err(SelmagError::InvalidArgument {
            op: "build_adaptation_problem",
            details: format!(
                "{} sources but {} classifiers",
                sources.len(),
                classifiers.len()
            ),
        });
    }
    if features.shape() != (sources.len(), 2 * NUM_TASKS) {
        return Err(SelmagError::ShapeMismatch {
            op: "build_adaptation_problem",
            details: format!(
                "selector features must be {}x{}, got {:?}",
                sources.len(),
                2 * NUM_TASKS,
                features.shape()
            ),
        });
    }
    for g in sources.iter().chain(std::iter::once(&target)) {
        if g.feature_dim() != models.encoder.input_dim() {
            return Err(SelmagError::ShapeMismatch {
                op: "build_adaptation_problem",
                details: format!(
                    "graph {} has feature dim {}, encoder expects {}",
                    g.name,
                    g.feature_dim(),
                    models.encoder.input_dim()
                ),
            });
        }
    }
    let source_embeddings: Vec<Matrix> = sources
        .iter()
        .map(|g| models.encoder.encode(&g.adj_norm, &g.features))
        .collect();
    let target_frozen = models.encoder.encode(&target.adj_norm, &target.features);
    let pooled_target = pool_target(&target_frozen)?;
    let source_preds = source_predictions(&models.encoder, classifiers, target)?;
    let classifier_mean = mean_classifier(classifiers)?;
    Ok(AdaptationProblem {
        target,
        features,
        source_embeddings,
        source_predictions: source_preds,
        pooled_target,
        af: target.adj_norm.matmul(&target.features),
        classifier_mean,
    })
}

// ---------------------------------------------------------------------------
// Tape bindings
// ---------------------------------------------------------------------------

/// Selector-dependent tape expressions shared by every inner step of one
/// adaptation run, plus the constant graph operands.
pub struct EpisodeBindings {
    pub sel: SelectorVars,
    /// `K' x 1` graph-level mixture weights.
    pub s_global: ValueId,
    /// Per source: frozen embeddings, the matching `s_global` entry, and the
    /// node-level weights.
    pub sources: Vec<SelotSource>,
    /// `n_t x R` soft pseudo-labels (live in the selector parameters).
    pub pseudo: ValueId,
    a_hat: ValueId,
    a_hat_t: ValueId,
    af: ValueId,
    af_t: ValueId,
    ones_1n: ValueId,
    num_target_nodes: usize,
}

/// Registers one adaptation run's frozen data and selector expressions on
/// the tape. See [`SelectorToggles`] for the ablation substitutions.
pub fn bind_episode_with(
    tape: &Tape,
    selectors: &SelectorParams,
    problem: &AdaptationProblem,
    toggles: SelectorToggles,
) -> Result<EpisodeBindings> {
    let k = problem.source_embeddings.len();
    if k == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "bind_episode",
            details: "no sources".into(),
        });
    }
    let h = selectors.hidden_dim();
    for emb in &problem.source_embeddings {
        if emb.cols() != h {
            return Err(SelmagError::ShapeMismatch {
                op: "bind_episode",
                details: format!(
                    "source embeddings have dim {}, selectors expect {h}",
                    emb.cols()
                ),
            });
        }
    }
    if problem.pooled_target.shape() != (1, 2 * h) {
        return Err(SelmagError::ShapeMismatch {
            op: "bind_episode",
            details: format!(
                "pooled target must be 1x{}, got {:?}",
                2 * h,
                problem.pooled_target.shape()
            ),
        });
    }

    let sel = selector_to_tape(tape, selectors);
    let s_global = if toggles.disable_global {
        tape.constant(Matrix::from_fn(k, 1, |_, _| 1.0 / k as f64))
    } else {
        let feats = tape.constant(problem.features.clone());
        global_select_on_tape(tape, &sel, feats)
    };
    let pooled = tape.constant(problem.pooled_target.clone());
    let mut sources = Vec::with_capacity(k);
    for (i, emb) in problem.source_embeddings.iter().enumerate() {
        let emb_id = tape.constant(emb.clone());
        let s_local = if toggles.disable_local {
            tape.constant(Matrix::ones(emb.rows(), 1))
        } else {
            local_select_on_tape(tape, &sel, emb_id, pooled)
        };
        sources.push(SelotSource {
            embeddings: emb_id,
            s_global: tape.slice_rows(s_global, &[i]),
            s_local,
        });
    }
    let pseudo = pseudo_labels_on_tape(tape, &problem.source_predictions, s_global)?;

    let n_t = problem.target.num_nodes;
    Ok(EpisodeBindings {
        sel,
        s_global,
        sources,
        pseudo,
        a_hat: tape.constant(problem.target.adj_norm.clone()),
        a_hat_t: tape.constant(problem.target.adj_norm.transpose()),
        af: tape.constant(problem.af.clone()),
        af_t: tape.constant(problem.af.transpose()),
        ones_1n: tape.constant(Matrix::ones(1, n_t)),
        num_target_nodes: n_t,
    })
}

/// [`bind_episode_with`] with both selectors active.
pub fn bind_episode(
    tape: &Tape,
    selectors: &SelectorParams,
    problem: &AdaptationProblem,
) -> Result<EpisodeBindings> {
    bind_episode_with(tape, selectors, problem, SelectorToggles::default())
}

/// Registers a target model's six matrices as constants (the usual inner
/// loop: the init is not itself trained).
pub fn hypothesis_to_constants(tape: &Tape, h: &Hypothesis) -> [ValueId; 6] {
    [
        tape.constant(h.encoder.w1.clone()),
        tape.constant(h.encoder.b1.clone()),
        tape.constant(h.encoder.w2.clone()),
        tape.constant(h.encoder.b2.clone()),
        tape.constant(h.classifier.w.clone()),
        tape.constant(h.classifier.b.clone()),
    ]
}

/// Reads the (possibly adapted) parameter values back into a plain model.
pub fn read_hypothesis(tape: &Tape, params: &[ValueId; 6]) -> Hypothesis {
    Hypothesis {
        encoder: Encoder {
            w1: tape.value(params[0]),
            b1: tape.value(params[1]),
            w2: tape.value(params[2]),
            b2: tape.value(params[3]),
        },
        classifier: Classifier {
            w: tape.value(params[4]),
            b: tape.value(params[5]),
        },
    }
}

// ---------------------------------------------------------------------------
// Adaptation loss and the differentiable inner loop
// ---------------------------------------------------------------------------

struct ForwardPass {
    /// Pre-activation of the hidden layer.
    u: ValueId,
    h1: ValueId,
    /// Target embeddings under the current parameters.
    x: ValueId,
    probs: ValueId,
}

fn forward_pass(tape: &Tape, bind: &EpisodeBindings, params: &[ValueId; 6]) -> ForwardPass {
    let u = tape.add(tape.matmul(bind.af, params[0]), params[1]);
    let h1 = tape.relu(u);
    let x = tape.add(tape.matmul(bind.a_hat, tape.matmul(h1, params[2])), params[3]);
    let logits = tape.add(tape.matmul(x, params[4]), params[5]);
    let probs = tape.softmax_rows(logits);
    ForwardPass { u, h1, x, probs }
}

/// One evaluation of the blended adaptation objective.
pub struct AdaptationOutcome {
    /// `lambda * alignment + (1 - lambda) * distillation`.
    pub loss: ValueId,
    pub alignment: ValueId,
    pub distillation: ValueId,
    pub plan: TransportPlan,
    forward: ForwardPass,
}

/// Evaluates the adaptation objective for the given target-model parameters.
/// The result is tape-differentiable in both the model parameters and the
/// selector parameters (through the transport-cost weights and the
/// pseudo-label mixture). `warm` optionally seeds the transport solver with
/// the previous step's potentials.
pub fn adaptation_loss(
    tape: &Tape,
    bind: &EpisodeBindings,
    params: &[ValueId; 6],
    cfg: &TrainConfig,
    warm: Option<(&[f64], &[f64])>,
) -> Result<AdaptationOutcome> {
    let fw = forward_pass(tape, bind, params);
    let opts = cfg.sinkhorn_options();
    let selot = selot_loss(tape, &bind.sources, fw.x, cfg.epsilon, &opts, warm)?;
    // At lambda = 1 the distillation term is switched off entirely: it is
    // never evaluated, not merely scaled to zero.
    let (loss, kd) = if cfg.lambda >= 1.0 {
        (selot.loss, tape.constant(Matrix::scalar(0.0)))
    } else {
        let kd = kd_loss_on_tape(tape, bind.pseudo, fw.probs)?;
        let blend = tape.add(
            tape.scalar_mul(selot.loss, cfg.lambda),
            tape.scalar_mul(kd, 1.0 - cfg.lambda),
        );
        (blend, kd)
    };
    Ok(AdaptationOutcome {
        loss,
        alignment: selot.loss,
        distillation: kd,
        plan: selot.plan,
        forward: fw,
    })
}

/// Builds the derivative of the blended adaptation loss with respect to each
/// target-model matrix as tape expressions, so a descent step made from them
/// stays differentiable in the selector parameters.
///
/// Derivation sketch (n target nodes, embeddings X, logits Z):
/// - Distillation part `-(1/n) sum Ybar log softmax(Z)` has
///   `dL/dZ = (1/n) (rowsum(Ybar) * P - Ybar)`.
/// - Alignment part `sum_k sum_ij Gamma_k[ij] w_k[i] ||z_i - x_j||^2` (plan
///   Gamma fixed) has `dL/dx_j = 2 (q_j x_j - S_j)` with
///   `q = sum_k Gamma_k^T w_k` and `S = sum_k Gamma_k^T (w_k . Z_k)`.
/// - The remaining factors are the usual linear/ReLU chain through the
///   two-layer graph encoder, with the ReLU pattern frozen at the current
///   iterate.
fn step_gradients(
    tape: &Tape,
    bind: &EpisodeBindings,
    params: &[ValueId; 6],
    out: &AdaptationOutcome,
    cfg: &TrainConfig,
) -> [ValueId; 6] {
    let n = bind.num_target_nodes;
    let fw = &out.forward;
    let (_, r) = tape.shape(fw.probs);
    let h = tape.shape(fw.x).1;
    let ones_r1 = tape.constant(Matrix::ones(r, 1));
    let ones_1r = tape.constant(Matrix::ones(1, r));
    let ones_1h = tape.constant(Matrix::ones(1, h));

    // Distillation gradient at the logits.
    let row_mass = tape.matmul(tape.matmul(bind.pseudo, ones_r1), ones_1r);
    let g_z = tape.scalar_mul(
        tape.sub(tape.mul_elem(row_mass, fw.probs), bind.pseudo),
        (1.0 - cfg.lambda) / n as f64,
    );

    // Alignment gradient at the embeddings.
    let mut q: Option<ValueId> = None;
    let mut s_acc: Option<ValueId> = None;
    let mut offset = 0usize;
    for src in &bind.sources {
        let n_k = tape.shape(src.embeddings).0;
        let mut gamma_t = Matrix::zeros(n, n_k);
        for i in 0..n_k {
            for j in 0..n {
                gamma_t.set(j, i, out.plan.gamma.get(offset + i, j));
            }
        }
        offset += n_k;
        let gamma_t = tape.constant(gamma_t);
        let w_k = tape.matmul(src.s_local, src.s_global); // n_k x 1
        let q_k = tape.matmul(gamma_t, w_k); // n x 1
        let weighted = tape.mul_elem(tape.matmul(w_k, ones_1h), src.embeddings);
        let s_k = tape.matmul(gamma_t, weighted); // n x h
        q = Some(match q {
            Some(acc) => tape.add(acc, q_k),
            None => q_k,
        });
        s_acc = Some(match s_acc {
            Some(acc) => tape.add(acc, s_k),
            None => s_k,
        });
    }
    let q = q.expect("at least one source");
    let s_acc = s_acc.expect("at least one source");
    let g_x_align = tape.scalar_mul(
        tape.sub(tape.mul_elem(tape.matmul(q, ones_1h), fw.x), s_acc),
        2.0 * cfg.lambda,
    );

    // Chain through the classifier and the encoder.
    let g_wc = tape.matmul(tape.transpose(fw.x), g_z);
    let g_bc = tape.matmul(bind.ones_1n, g_z);
    let g_x = tape.add(g_x_align, tape.matmul(g_z, tape.transpose(params[4])));
    let g_b2 = tape.matmul(bind.ones_1n, g_x);
    let back = tape.matmul(bind.a_hat_t, g_x);
    let g_w2 = tape.matmul(tape.transpose(fw.h1), back);
    let g_h1 = tape.matmul(back, tape.transpose(params[2]));
    let mask = tape.constant(tape.with_value(fw.u, |u| {
        u.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }));
    let g_u = tape.mul_elem(g_h1, mask);
    let g_w1 = tape.matmul(bind.af_t, g_u);
    let g_b1 = tape.matmul(bind.ones_1n, g_u);

    [g_w1, g_b1, g_w2, g_b2, g_wc, g_bc]
}

/// One inner step: evaluate the adaptation loss, build the closed-form
/// gradients, and return the descended parameters
/// `(1 - lr * weight_decay) * theta - lr * grad` as new tape values, along
/// with the step's loss. Aborts (error) on a non-finite loss. `warm` is
/// updated with the solved transport potentials.
pub fn adaptation_step(
    tape: &Tape,
    bind: &EpisodeBindings,
    params: [ValueId; 6],
    cfg: &TrainConfig,
    warm: &mut Option<(Vec<f64>, Vec<f64>)>,
) -> Result<([ValueId; 6], f64)> {
    let out = adaptation_loss(
        tape,
        bind,
        &params,
        cfg,
        warm.as_ref().map(|(f, g)| (f.as_slice(), g.as_slice())),
    )?;
    let loss = tape.item(out.loss);
    if !loss.is_finite() {
        return Err(SelmagError::NonFinite {
            context: "adaptation step loss".into(),
        });
    }
    *warm = Some((out.plan.f_potential.clone(), out.plan.g_potential.clone()));
    let grads = step_gradients(tape, bind, &params, &out, cfg);
    let keep = 1.0 - cfg.inner_lr * cfg.weight_decay;
    let mut next = params;
    for i in 0..6 {
        next[i] = tape.sub(
            tape.scalar_mul(params[i], keep),
            tape.scalar_mul(grads[i], cfg.inner_lr),
        );
    }
    Ok((next, loss))
}

/// The unrolled inner loop: `steps` plain-gradient steps from `init`. The
/// returned parameters are tape expressions in the selector parameters (and
/// in `init`, if `init` was registered as inputs).
pub struct AdaptedTrajectory {
    pub params: [ValueId; 6],
    pub step_losses: Vec<f64>,
}

pub fn inner_adapt(
    tape: &Tape,
    bind: &EpisodeBindings,
    init: [ValueId; 6],
    steps: usize,
    cfg: &TrainConfig,
    warm: &mut Option<(Vec<f64>, Vec<f64>)>,
) -> Result<AdaptedTrajectory> {
    let mut params = init;
    let mut step_losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, loss) = adaptation_step(tape, bind, params, cfg, warm)?;
        params = next;
        step_losses.push(loss);
    }
    Ok(AdaptedTrajectory { params, step_losses })
}

// ---------------------------------------------------------------------------
// Outer updates
// ---------------------------------------------------------------------------

/// Supervised cross-entropy of the given (adapted) parameters on the masked
/// nodes of the episode's pseudo target.
pub fn outer_loss(
    tape: &Tape,
    bind: &EpisodeBindings,
    params: &[ValueId; 6],
    labels: &[usize],
    mask: &[bool],
) -> Result<ValueId> {
    let fw = forward_pass(tape, bind, params);
    ce_loss_on_tape(tape, fw.probs, labels, mask)
}

/// One outer update: backpropagates the evaluation loss through the unrolled
/// inner trajectory into the selector parameters and applies one Adam step.
/// Errors (without touching the selectors) on a non-finite loss or gradient.
/// Returns the outer loss value.
pub fn outer_step(
    tape: &Tape,
    bind: &EpisodeBindings,
    adapted: &[ValueId; 6],
    labels: &[usize],
    mask: &[bool],
    selectors: &mut SelectorParams,
    opt: &mut Adam,
) -> Result<f64> {
    let ce = outer_loss(tape, bind, adapted, labels, mask)?;
    let loss = tape.item(ce);
    if !loss.is_finite() {
        return Err(SelmagError::NonFinite {
            context: "outer evaluation loss".into(),
        });
    }
    let grads = tape.backward(ce);
    let ids = bind.sel.list();
    let mut grad_mats = Vec::with_capacity(ids.len());
    for id in ids {
        let g = grads.grad_or_zeros(tape, id);
        if !g.is_finite() {
            return Err(SelmagError::NonFinite {
                context: "selector meta-gradient".into(),
            });
        }
        grad_mats.push(g);
    }
    let mut params = selectors.params_mut();
    opt.step(&mut params, &grad_mats);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Meta-training
// ---------------------------------------------------------------------------

/// One completed meta-epoch. `s_global` is reported by *global* source index
/// (length K); the slot of the episode's pseudo target is 0.
#[derive(Debug, Clone)]
pub struct MetaEpochRecord {
    pub epoch: usize,
    pub pseudo_target: usize,
    pub outer_loss: f64,
    pub s_global: Vec<f64>,
}

pub struct MetaOutcome {
    pub selectors: SelectorParams,
    pub log: Vec<MetaEpochRecord>,
    /// Episodes aborted by numerical failures: (epoch, reason).
    pub skipped: Vec<(usize, String)>,
}

const SELECTOR_INIT_STREAM: &str = "meta/selector_init";

/// [`meta_train_observed`] without an observer.
pub fn meta_train_with(
    set: &DomainSet,
    models: &SourceModels,
    pairwise: &PairwiseScores,
    toggles: SelectorToggles,
    cfg: &TrainConfig,
) -> Result<MetaOutcome> {
    meta_train_observed(set, models, pairwise, toggles, cfg, &mut |_| {})
}

/// The meta-training loop: sample an episode, adapt a fresh target model for
/// `inner_steps` steps, update the selectors through the unrolled
/// trajectory; stop at `max_outer_epochs` or when the outer loss plateaus.
/// Numerical failures skip the episode and training continues. `on_epoch`
/// sees every completed epoch record as it is produced, so callers can
/// flush logs incrementally.
pub fn meta_train_observed(
    set: &DomainSet,
    models: &SourceModels,
    pairwise: &PairwiseScores,
    toggles: SelectorToggles,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&MetaEpochRecord),
) -> Result<MetaOutcome> {
    cfg.validate()?;
    let k = set.num_sources();
    if k < 2 {
        return Err(SelmagError::InvalidArgument {
            op: "meta_train",
            details: format!("need at least 2 sources, got {k}"),
        });
    }
    if pairwise.raw.len() != k {
        return Err(SelmagError::InvalidArgument {
            op: "meta_train",
            details: format!("pairwise table has {} rows for {k} sources", pairwise.raw.len()),
        });
    }

    let mut init_rng = seeded_rng(cfg.seed, SELECTOR_INIT_STREAM);
    let mut selectors = SelectorParams::init(models.encoder.hidden_dim(), &mut init_rng);
    let mut opt = Adam::new(cfg.outer_lr);
    let mut episode_rng = seeded_rng(cfg.seed, "meta/episodes");
    let mut mask_rng = seeded_rng(cfg.seed, "meta/label_mask");

    let mut log = Vec::new();
    let mut skipped = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_outer_epochs {
        // Draw all randomness up front so error paths cannot desynchronize
        // the streams.
        let episode = sample_episode(k, &mut episode_rng)?;
        let pseudo_target = &set.sources[episode.pseudo_target];
        let mask = split_label_mask(pseudo_target.num_nodes, cfg.label_ratio, &mut mask_rng);

        let mut run = || -> Result<(f64, Vec<f64>)> {
            let scores = pairwise.features_for(episode.pseudo_target, &episode.pseudo_sources)?;
            let source_graphs: Vec<&Graph> = episode
                .pseudo_sources
                .iter()
                .map(|&i| &set.sources[i])
                .collect();
            let classifiers: Vec<Classifier> = episode
                .pseudo_sources
                .iter()
                .map(|&i| models.classifiers[i].clone())
                .collect();
            let problem = build_adaptation_problem(
                models,
                pseudo_target,
                &source_graphs,
                &classifiers,
                scores.normalized_features.clone(),
            )?;
            let init = Hypothesis {
                encoder: models.encoder.clone(),
                classifier: problem.classifier_mean.clone(),
            };
            let labels = pseudo_target.labels.as_ref().ok_or_else(|| {
                SelmagError::InvalidArgument {
                    op: "meta_train",
                    details: format!("source graph {} has no labels", pseudo_target.name),
                }
            })?;

            let tape = Tape::new();
            let bind = bind_episode_with(&tape, &selectors, &problem, toggles)?;
            let snapshot = tape.value(bind.s_global);
            let params0 = hypothesis_to_constants(&tape, &init);
            let mut warm = None;
            let traj = inner_adapt(&tape, &bind, params0, cfg.inner_steps, cfg, &mut warm)?;
            let loss = outer_step(
                &tape,
                &bind,
                &traj.params,
                labels,
                &mask,
                &mut selectors,
                &mut opt,
            )?;
            Ok((loss, snapshot.into_data()))
        };

        match run() {
            Ok((outer, weights)) => {
                let mut s_global = vec![0.0; k];
                for (w, &src) in weights.iter().zip(&episode.pseudo_sources) {
                    s_global[src] = *w;
                }
                let record = MetaEpochRecord {
                    epoch,
                    pseudo_target: episode.pseudo_target,
                    outer_loss: outer,
                    s_global,
                };
                on_epoch(&record);
                log.push(record);
                if best - outer > cfg.plateau_min_delta {
                    best = outer;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.plateau_patience {
                        break;
                    }
                }
            }
            Err(e) => skipped.push((epoch, e.to_string())),
        }
    }

    Ok(MetaOutcome {
        selectors,
        log,
        skipped,
    })
}

/// [`meta_train_with`] with both selectors active.
pub fn meta_train(
    set: &DomainSet,
    models: &SourceModels,
    pairwise: &PairwiseScores,
    cfg: &TrainConfig,
) -> Result<MetaOutcome> {
    meta_train_with(set, models, pairwise, SelectorToggles::default(), cfg)
}

// ---------------------------------------------------------------------------
// Final adaptation
// ---------------------------------------------------------------------------

pub struct FinalAdaptOutcome {
    pub hypothesis: Hypothesis,
    /// Mean adaptation loss of each cycle of `inner_steps` steps.
    pub cycle_losses: Vec<f64>,
}

/// Adapts a fresh target model on the real target with all sources and
/// frozen selectors: up to `max_outer_epochs` cycles of `inner_steps`
/// gradient steps, stopping early when the cycle loss plateaus. Each cycle
/// runs on a fresh short-lived tape; the adapted parameters are read back as
/// plain matrices in between, and the transport potentials warm-start the
/// next cycle. Fully deterministic given its inputs.
pub fn final_adapt_with(
    set: &DomainSet,
    models: &SourceModels,
    target_scores: &TransferScores,
    selectors: &SelectorParams,
    toggles: SelectorToggles,
    cfg: &TrainConfig,
) -> Result<FinalAdaptOutcome> {
    cfg.validate()?;
    let sources: Vec<&Graph> = set.sources.iter().collect();
    let problem = build_adaptation_problem(
        models,
        &set.target,
        &sources,
        &models.classifiers,
        target_scores.normalized_features.clone(),
    )?;
    let mut hypothesis = Hypothesis {
        encoder: models.encoder.clone(),
        classifier: problem.classifier_mean.clone(),
    };
    let mut cycle_losses = Vec::new();
    if cfg.inner_steps == 0 {
        return Ok(FinalAdaptOutcome {
            hypothesis,
            cycle_losses,
        });
    }
    let mut warm = None;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for _ in 0..cfg.max_outer_epochs {
        let tape = Tape::new();
        let bind = bind_episode_with(&tape, selectors, &problem, toggles)?;
        let params = hypothesis_to_constants(&tape, &hypothesis);
        let traj = inner_adapt(&tape, &bind, params, cfg.inner_steps, cfg, &mut warm)?;
        hypothesis = read_hypothesis(&tape, &traj.params);
        let mean = traj.step_losses.iter().sum::<f64>() / traj.step_losses.len() as f64;
        cycle_losses.push(mean);
        if best - mean > cfg.plateau_min_delta {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                break;
            }
        }
    }
    Ok(FinalAdaptOutcome {
        hypothesis,
        cycle_losses,
    })
}

/// [`final_adapt_with`] with both selectors active.
pub fn final_adapt(
    set: &DomainSet,
    models: &SourceModels,
    target_scores: &TransferScores,
    selectors: &SelectorParams,
    cfg: &TrainConfig,
) -> Result<FinalAdaptOutcome> {
    final_adapt_with(
        set,
        models,
        target_scores,
        selectors,
        SelectorToggles::default(),
        cfg,
    )
}

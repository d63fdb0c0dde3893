//! Node-classification metrics, reference baselines, ablation variants, and
//! the selector-analysis harness.
//!
//! Two internal controls anchor every experiment: `direct` trains one model
//! on the pooled sources and applies it to the target unchanged, and
//! `uniform_ot` runs the adaptation engine with all selectivity switched off
//! (uniform graph weights, unit node weights). The full method and its
//! ablation variants are measured against these on identical suites and
//! seeds; the experiment-config hash ties the runs together so only the
//! documented switch can differ.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmagError};
use crate::graph::{DomainSet, Graph};
use crate::meta::{
    final_adapt_with, meta_train_observed, pairwise_transfer_scores, FinalAdaptOutcome,
    MetaEpochRecord, PairwiseScores, SelectorToggles, TrainConfig,
};
use crate::models::{train_source_models, Hypothesis, SourceModels, SourceTrainConfig};
use crate::seeding::derive_seed;
use crate::tensor::{Matrix, Tape};
use crate::transfer::{
    global_select, local_select_on_tape, pool_target, pretrain_all, score_all, selector_to_tape,
    SelectorParams, SslArtifacts, SslConfig, TransferScores, NUM_TASKS,
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Target-node classification metrics for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_auroc: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub n_eval: usize,
}

/// Header matching [`EvalReport::csv_row`].
pub const REPORT_CSV_HEADER: &str = "run_id,variant,seed,acc,auroc,macro_f1";

impl EvalReport {
    pub fn csv_row(&self, run_id: &str, variant: &str, seed: u64) -> String {
        format!(
            "{run_id},{variant},{seed},{},{},{}",
            self.accuracy, self.macro_auroc, self.macro_f1
        )
    }
}

/// Fraction of exact class matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(SelmagError::InvalidArgument {
            op: "accuracy",
            details: format!("{} predictions vs {} labels", pred.len(), truth.len()),
        });
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// 1-based ranks with ties assigned their midrank. Scores must be finite.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUROC of `scores` against the positive indicator, with
/// midrank tie handling; `None` when either class is empty.
fn rank_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUROC per class, averaged over the classes that have both
/// positives and negatives; classes lacking either are skipped. Errors when
/// every class is degenerate.
pub fn macro_auroc(probs: &Matrix, truth: &[usize]) -> Result<f64> {
    if probs.rows() == 0 || probs.rows() != truth.len() {
        return Err(SelmagError::InvalidArgument {
            op: "macro_auroc",
            details: format!("{} score rows vs {} labels", probs.rows(), truth.len()),
        });
    }
    if truth.iter().any(|&y| y >= probs.cols()) {
        return Err(SelmagError::InvalidArgument {
            op: "macro_auroc",
            details: "label outside the score columns".into(),
        });
    }
    if probs.data().iter().any(|v| !v.is_finite()) {
        return Err(SelmagError::NonFinite {
            context: "macro_auroc scores".into(),
        });
    }
    let mut per_class = Vec::new();
    for c in 0..probs.cols() {
        let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, c)).collect();
        let positive: Vec<bool> = truth.iter().map(|&y| y == c).collect();
        if let Some(a) = rank_auroc(&scores, &positive) {
            per_class.push(a);
        }
    }
    if per_class.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "macro_auroc",
            details: "no class has both positives and negatives".into(),
        });
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Per-class F1 (`2TP / (2TP + FP + FN)`, empty classes scoring 0) and
/// their mean over all `num_classes` classes.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(SelmagError::InvalidArgument {
            op: "macro_f1",
            details: format!("{} predictions vs {} labels", pred.len(), truth.len()),
        });
    }
    if num_classes == 0 || pred.iter().chain(truth).any(|&y| y >= num_classes) {
        return Err(SelmagError::InvalidArgument {
            op: "macro_f1",
            details: "class index outside range".into(),
        });
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == c && t == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == c && t != c)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p != c && t == c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        per_class.push(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom });
    }
    let mean = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok((mean, per_class))
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let mut best = 0;
            for j in 1..probs.cols() {
                if probs.get(i, j) > probs.get(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// All metrics of a probabilistic prediction against true classes; the
/// class count is the score-column count.
pub fn evaluate_predictions(probs: &Matrix, truth: &[usize]) -> Result<EvalReport> {
    let pred = argmax_rows(probs);
    let acc = accuracy(&pred, truth)?;
    let auroc = macro_auroc(probs, truth)?;
    let (f1, per_class_f1) = macro_f1(&pred, truth, probs.cols())?;
    Ok(EvalReport {
        accuracy: acc,
        macro_auroc: auroc,
        macro_f1: f1,
        per_class_f1,
        n_eval: truth.len(),
    })
}

/// Spearman rank correlation (midranks for ties). Errors when either side
/// has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(SelmagError::InvalidArgument {
            op: "spearman",
            details: format!("need two equal-length samples, got {} and {}", a.len(), b.len()),
        });
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean).powi(2);
        var_b += (y - mean).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(SelmagError::InvalidArgument {
            op: "spearman",
            details: "constant ranking has no defined correlation".into(),
        });
    }
    Ok(cov / (var_a * var_b).sqrt())
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Everything a full run needs: supervised source training, probe
/// pretraining, and the adaptation/meta-training hyperparameters. The
/// top-level `seed` drives every random stream; the seed fields inside the
/// sub-configs are overridden with values derived from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: SourceTrainConfig,
    pub ssl: SslConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            source: SourceTrainConfig::default(),
            ssl: SslConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// Source-training config with its stream seed derived from the
    /// experiment seed.
    pub fn source_config(&self) -> SourceTrainConfig {
        SourceTrainConfig {
            seed: derive_seed(self.seed, "experiment/source"),
            ..self.source.clone()
        }
    }

    /// Base seed for probe pretraining and scoring.
    pub fn ssl_seed(&self) -> u64 {
        derive_seed(self.seed, "experiment/ssl")
    }

    /// Meta-training config with its stream seed derived from the
    /// experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "experiment/meta"),
            ..self.train.clone()
        }
    }
}

/// Stable FNV-1a hash of the serialized config. Baselines and ablation
/// variants of one experiment log the same hash, proving they differ only
/// in the documented switch.
pub fn experiment_config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// Shared run plumbing
// ---------------------------------------------------------------------------

/// Disjoint union of all source graphs (block-diagonal adjacency, stacked
/// features and labels) for pooled supervised training.
pub fn pooled_source_graph(set: &DomainSet) -> Result<Graph> {
    if set.sources.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "pooled_source_graph",
            details: "no source graphs".into(),
        });
    }
    let total: usize = set.sources.iter().map(|g| g.num_nodes).sum();
    let mut features = Matrix::zeros(total, set.feature_dim);
    let mut edges = Vec::new();
    let mut labels = Vec::with_capacity(total);
    let mut offset = 0;
    for g in &set.sources {
        let source_labels = g.labels.as_ref().ok_or_else(|| SelmagError::InvalidArgument {
            op: "pooled_source_graph",
            details: format!("source graph {} has no labels", g.name),
        })?;
        for i in 0..g.num_nodes {
            features.row_mut(offset + i).copy_from_slice(g.features.row(i));
        }
        edges.extend(g.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
        labels.extend_from_slice(source_labels);
        offset += g.num_nodes;
    }
    Graph::build(
        "pooled_sources",
        features,
        &edges,
        Some(labels),
        set.num_classes,
    )
}

/// Applies a model to the target graph and scores it against held-out
/// labels.
pub fn evaluate_hypothesis(
    hypothesis: &Hypothesis,
    target: &Graph,
    eval_labels: &[usize],
) -> Result<EvalReport> {
    if eval_labels.len() != target.num_nodes {
        return Err(SelmagError::InvalidArgument {
            op: "evaluate_hypothesis",
            details: format!(
                "{} labels for {} target nodes",
                eval_labels.len(),
                target.num_nodes
            ),
        });
    }
    let embeddings = hypothesis.encoder.encode(&target.adj_norm, &target.features);
    let probs = hypothesis.classifier.predict(&embeddings);
    evaluate_predictions(&probs, eval_labels)
}

/// Inert selector features (all zeros) for runs whose graph-level selector
/// is disabled; the feature values are never read in those runs.
pub fn uniform_scores(num_sources: usize) -> TransferScores {
    TransferScores {
        raw_loss: vec![[1.0; NUM_TASKS]; num_sources],
        self_reference: [1.0; NUM_TASKS],
        normalized_features: Matrix::zeros(num_sources, 2 * NUM_TASKS),
    }
}

/// Everything produced by the pretraining stage: supervised source models,
/// probe modules, and the pairwise exchange-score table.
pub struct PretrainArtifacts {
    pub models: SourceModels,
    pub ssl: SslArtifacts,
    pub pairwise: PairwiseScores,
}

/// Supervised source training, probe pretraining, and the K x K exchange
/// evaluations.
pub fn pretrain_stage(set: &DomainSet, cfg: &ExperimentConfig) -> Result<PretrainArtifacts> {
    cfg.validate()?;
    let models = train_source_models(set, &cfg.source_config())?;
    let ssl = pretrain_all(set, Some(&models.encoder), &cfg.ssl, cfg.ssl_seed())?;
    let pairwise = pairwise_transfer_scores(&ssl, set, &cfg.ssl, cfg.ssl_seed())?;
    Ok(PretrainArtifacts {
        models,
        ssl,
        pairwise,
    })
}

/// Which loss terms and selectors an ablation variant removes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationSpec {
    pub no_global: bool,
    pub no_local: bool,
    pub no_kd: bool,
}

impl AblationSpec {
    /// Parses `full`, `no_global`, `no_local`, `no_kd`, or a
    /// `+`-joined combination of the switches.
    pub fn parse(variant: &str) -> Result<AblationSpec> {
        if variant == "full" {
            return Ok(AblationSpec::default());
        }
        let mut spec = AblationSpec::default();
        if variant.is_empty() {
            return Err(SelmagError::InvalidArgument {
                op: "AblationSpec",
                details: "empty variant name".into(),
            });
        }
        for part in variant.split('+') {
            match part {
                "no_global" => spec.no_global = true,
                "no_local" => spec.no_local = true,
                "no_kd" => spec.no_kd = true,
                other => {
                    return Err(SelmagError::InvalidArgument {
                        op: "AblationSpec",
                        details: format!("unknown variant {other:?}"),
                    })
                }
            }
        }
        Ok(spec)
    }

    pub fn toggles(&self) -> SelectorToggles {
        SelectorToggles {
            disable_global: self.no_global,
            disable_local: self.no_local,
        }
    }

    /// The meta/adaptation config with this variant's loss override applied.
    pub fn train_config(&self, cfg: &ExperimentConfig) -> TrainConfig {
        let mut t = cfg.train_config();
        if self.no_kd {
            t.lambda = 1.0;
        }
        t
    }
}

/// Selector meta-training results for one variant.
pub struct MetaStage {
    pub selectors: SelectorParams,
    pub log: Vec<MetaEpochRecord>,
    pub skipped: Vec<(usize, String)>,
}

/// Meta-trains the selectors; skipped (zero selectors, empty log) when both
/// are disabled, since nothing trainable remains.
pub fn meta_stage(
    set: &DomainSet,
    pre: &PretrainArtifacts,
    spec: AblationSpec,
    cfg: &ExperimentConfig,
) -> Result<MetaStage> {
    meta_stage_observed(set, pre, spec, cfg, &mut |_| {})
}

/// [`meta_stage`] forwarding every completed epoch record to `on_epoch` so
/// callers can flush logs incrementally.
pub fn meta_stage_observed(
    set: &DomainSet,
    pre: &PretrainArtifacts,
    spec: AblationSpec,
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&MetaEpochRecord),
) -> Result<MetaStage> {
    let toggles = spec.toggles();
    if toggles.disable_global && toggles.disable_local {
        return Ok(MetaStage {
            selectors: SelectorParams::zeros(pre.models.encoder.hidden_dim()),
            log: Vec::new(),
            skipped: Vec::new(),
        });
    }
    let out = meta_train_observed(
        set,
        &pre.models,
        &pre.pairwise,
        toggles,
        &spec.train_config(cfg),
        on_epoch,
    )?;
    Ok(MetaStage {
        selectors: out.selectors,
        log: out.log,
        skipped: out.skipped,
    })
}

/// Scores the real target and runs the final adaptation with the given
/// (frozen) selectors.
pub fn adapt_stage(
    set: &DomainSet,
    pre: &PretrainArtifacts,
    spec: AblationSpec,
    selectors: &SelectorParams,
    cfg: &ExperimentConfig,
) -> Result<(TransferScores, FinalAdaptOutcome)> {
    let toggles = spec.toggles();
    let target_scores = if toggles.disable_global {
        uniform_scores(set.num_sources())
    } else {
        score_all(&pre.ssl, &set.target, &cfg.ssl, cfg.ssl_seed())?
    };
    let adapted = final_adapt_with(
        set,
        &pre.models,
        &target_scores,
        selectors,
        toggles,
        &spec.train_config(cfg),
    )?;
    Ok((target_scores, adapted))
}

/// Everything produced by meta-training plus final adaptation.
pub struct TrainStage {
    pub selectors: SelectorParams,
    pub meta_log: Vec<MetaEpochRecord>,
    pub meta_skipped: Vec<(usize, String)>,
    pub target_scores: TransferScores,
    pub adapted: FinalAdaptOutcome,
}

/// Meta-trains the selectors and runs the final adaptation on the real
/// target.
pub fn train_stage(
    set: &DomainSet,
    pre: &PretrainArtifacts,
    spec: AblationSpec,
    cfg: &ExperimentConfig,
) -> Result<TrainStage> {
    let meta = meta_stage(set, pre, spec, cfg)?;
    let (target_scores, adapted) = adapt_stage(set, pre, spec, &meta.selectors, cfg)?;
    Ok(TrainStage {
        selectors: meta.selectors,
        meta_log: meta.log,
        meta_skipped: meta.skipped,
        target_scores,
        adapted,
    })
}

// ---------------------------------------------------------------------------
// Baselines and ablations
// ---------------------------------------------------------------------------

/// Trains the pooled-source model used by the `direct` baseline.
pub fn train_direct(set: &DomainSet, cfg: &ExperimentConfig) -> Result<Hypothesis> {
    let pooled = pooled_source_graph(set)?;
    let pooled_set = DomainSet {
        sources: vec![pooled],
        target: set.target.clone(),
        num_classes: set.num_classes,
        feature_dim: set.feature_dim,
    };
    let models = train_source_models(&pooled_set, &cfg.source_config())?;
    let SourceModels {
        encoder,
        classifiers,
        ..
    } = models;
    Ok(Hypothesis {
        encoder,
        classifier: classifiers.into_iter().next().expect("one pooled classifier"),
    })
}

/// Adaptation with all selectivity disabled: uniform graph weights, unit
/// node weights, loss blend per config.
fn adapt_uniform(
    set: &DomainSet,
    models: &SourceModels,
    train_cfg: &TrainConfig,
) -> Result<Hypothesis> {
    let toggles = SelectorToggles {
        disable_global: true,
        disable_local: true,
    };
    let out = final_adapt_with(
        set,
        models,
        &uniform_scores(set.num_sources()),
        &SelectorParams::zeros(models.encoder.hidden_dim()),
        toggles,
        train_cfg,
    )?;
    Ok(out.hypothesis)
}

/// Runs one of the reference pipelines end to end: `direct` (pooled source
/// model applied unchanged), `uniform_ot` (unselective adaptation), or
/// `selmag` (the full method).
pub fn run_baseline(
    name: &str,
    set: &DomainSet,
    eval_labels: &[usize],
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    match name {
        "direct" => {
            let hypothesis = train_direct(set, cfg)?;
            evaluate_hypothesis(&hypothesis, &set.target, eval_labels)
        }
        "uniform_ot" => {
            let models = train_source_models(set, &cfg.source_config())?;
            let hypothesis = adapt_uniform(set, &models, &cfg.train_config())?;
            evaluate_hypothesis(&hypothesis, &set.target, eval_labels)
        }
        "selmag" => {
            let pre = pretrain_stage(set, cfg)?;
            let stage = train_stage(set, &pre, AblationSpec::default(), cfg)?;
            evaluate_hypothesis(&stage.adapted.hypothesis, &set.target, eval_labels)
        }
        other => Err(SelmagError::InvalidArgument {
            op: "run_baseline",
            details: format!("unknown baseline {other:?}"),
        }),
    }
}

/// Runs an ablation variant end to end. With both selectors removed the
/// pipeline reduces to the `uniform_ot` baseline and is routed through the
/// identical code path (probe pretraining and meta-training have no effect
/// left to contribute).
pub fn run_ablation(
    variant: &str,
    set: &DomainSet,
    eval_labels: &[usize],
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let spec = AblationSpec::parse(variant)?;
    cfg.validate()?;
    if spec.no_global && spec.no_local && !spec.no_kd {
        return run_baseline("uniform_ot", set, eval_labels, cfg);
    }
    let pre = pretrain_stage(set, cfg)?;
    let stage = train_stage(set, &pre, spec, cfg)?;
    evaluate_hypothesis(&stage.adapted.hypothesis, &set.target, eval_labels)
}

/// Runs a baseline or ablation variant against pretraining artifacts shared
/// across variants, so per-variant runs differ only in the documented switch.
/// `direct` trains its own pooled model and ignores the artifacts;
/// `uniform_ot` reuses the supervised source models and skips the probes.
pub fn run_variant_with_artifacts(
    name: &str,
    set: &DomainSet,
    eval_labels: &[usize],
    pre: &PretrainArtifacts,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    match name {
        "direct" => {
            let hypothesis = train_direct(set, cfg)?;
            evaluate_hypothesis(&hypothesis, &set.target, eval_labels)
        }
        "uniform_ot" => {
            let hypothesis = adapt_uniform(set, &pre.models, &cfg.train_config())?;
            evaluate_hypothesis(&hypothesis, &set.target, eval_labels)
        }
        variant => {
            let spec = AblationSpec::parse(variant)?;
            if spec.no_global && spec.no_local && !spec.no_kd {
                let hypothesis = adapt_uniform(set, &pre.models, &spec.train_config(cfg))?;
                return evaluate_hypothesis(&hypothesis, &set.target, eval_labels);
            }
            let stage = train_stage(set, pre, spec, cfg)?;
            evaluate_hypothesis(&stage.adapted.hypothesis, &set.target, eval_labels)
        }
    }
}

// ---------------------------------------------------------------------------
// Selector analysis
// ---------------------------------------------------------------------------

/// Per-source selector diagnostics against single-source adaptation quality.
#[derive(Debug, Clone)]
pub struct SelectorAnalysisRow {
    pub source: usize,
    pub s_global: f64,
    pub mean_s_local: f64,
    pub single_source_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SelectorAnalysis {
    pub rows: Vec<SelectorAnalysisRow>,
    /// Rank correlation between `s_global` and single-source accuracy.
    pub spearman: f64,
}

/// For each source: its learned graph weight on the real target, its mean
/// node weight, and the accuracy of adapting from that source alone
/// (unselective engine with K = 1). Also reports the rank correlation
/// between graph weight and single-source accuracy.
pub fn selector_analysis(
    set: &DomainSet,
    eval_labels: &[usize],
    pre: &PretrainArtifacts,
    selectors: &SelectorParams,
    cfg: &ExperimentConfig,
) -> Result<SelectorAnalysis> {
    cfg.validate()?;
    let scores = score_all(&pre.ssl, &set.target, &cfg.ssl, cfg.ssl_seed())?;
    let s_global = global_select(selectors, &scores)?;
    let target_emb = pre
        .models
        .encoder
        .encode(&set.target.adj_norm, &set.target.features);
    let pooled = pool_target(&target_emb)?;
    let train_cfg = cfg.train_config();

    let mut rows = Vec::with_capacity(set.num_sources());
    let mut accuracies = Vec::with_capacity(set.num_sources());
    for k in 0..set.num_sources() {
        let source = &set.sources[k];
        let embeddings = pre.models.encoder.encode(&source.adj_norm, &source.features);
        let tape = Tape::new();
        let sel = selector_to_tape(&tape, selectors);
        let s_local = local_select_on_tape(
            &tape,
            &sel,
            tape.constant(embeddings),
            tape.constant(pooled.clone()),
        );
        let weights = tape.value(s_local);
        let mean_s_local = weights.data().iter().sum::<f64>() / weights.rows() as f64;

        let sub_set = DomainSet {
            sources: vec![source.clone()],
            target: set.target.clone(),
            num_classes: set.num_classes,
            feature_dim: set.feature_dim,
        };
        let sub_models = SourceModels {
            encoder: pre.models.encoder.clone(),
            classifiers: vec![pre.models.classifiers[k].clone()],
            loss_curve: Vec::new(),
        };
        let hypothesis = adapt_uniform(&sub_set, &sub_models, &train_cfg)?;
        let acc = evaluate_hypothesis(&hypothesis, &set.target, eval_labels)?.accuracy;
        accuracies.push(acc);
        rows.push(SelectorAnalysisRow {
            source: k,
            s_global: s_global[k],
            mean_s_local,
            single_source_accuracy: acc,
        });
    }
    // A constant ranking (e.g. uniform weights from a disabled selector)
    // carries no ordering signal; report zero correlation instead of failing.
    let rho = spearman(&s_global, &accuracies).unwrap_or(0.0);
    Ok(SelectorAnalysis {
        rows,
        spearman: rho,
    })
}

/// CSV rendering: one row per source, four columns.
pub fn selector_analysis_csv(analysis: &SelectorAnalysis) -> String {
    let mut out = String::from("source,s_global,mean_s_local,single_source_accuracy\n");
    for row in &analysis.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.source, row.s_global, row.mean_s_local, row.single_source_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::kd_evaluations;
    use crate::synth::{generate_suite, DomainShift, ShiftSchedule, SuiteBaseParams};
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 0, 1], &[1, 2, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn perfectly_ordered_scores_give_unit_auroc() {
        let probs = Matrix::from_rows(&[
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.3, 0.7],
            vec![0.1, 0.9],
        ]);
        let truth = [0, 0, 1, 1];
        assert_eq!(macro_auroc(&probs, &truth).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_sit_at_chance_level() {
        let probs = Matrix::from_fn(8, 3, |_, _| 1.0 / 3.0);
        let truth = [0, 1, 2, 0, 1, 2, 0, 1];
        assert_eq!(macro_auroc(&probs, &truth).unwrap(), 0.5);
    }

    #[test]
    fn one_inversion_among_eight_pairs_scores_seven_eighths() {
        // Four positives, two negatives; exactly one discordant pair
        // (positive 0.3 below negative 0.4) out of eight.
        let class1 = [0.9, 0.8, 0.7, 0.3, 0.4, 0.2];
        let probs = Matrix::from_fn(6, 2, |i, j| if j == 1 { class1[i] } else { 1.0 - class1[i] });
        let truth = [1, 1, 1, 1, 0, 0];
        let auroc = macro_auroc(&probs, &truth).unwrap();
        assert!((auroc - 0.875).abs() < 1e-12, "auroc {auroc}");
    }

    #[test]
    fn auroc_requires_some_mixed_class() {
        let probs = Matrix::from_fn(4, 2, |i, _| 0.2 + 0.1 * i as f64);
        assert!(macro_auroc(&probs, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn auroc_is_invariant_under_monotone_score_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = Matrix::from_fn(40, 3, |_, _| rng.gen_range(0.0..1.0));
        let truth: Vec<usize> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        let base = macro_auroc(&probs, &truth).unwrap();
        let cubed = probs.map(|v| v.powi(3));
        let transformed = macro_auroc(&cubed, &truth).unwrap();
        assert!((base - transformed).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_handles_perfect_and_all_wrong_predictions() {
        let (perfect, _) = macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(perfect, 1.0);
        let (wrong, per_class) = macro_f1(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(wrong, 0.0);
        assert_eq!(per_class, vec![0.0, 0.0]);
    }

    #[test]
    fn macro_f1_matches_hand_counted_precision_recall() {
        // Class 0: TP=1 FP=1 FN=1 -> 1/2. Class 1: TP=2 FP=1 FN=0 -> 4/5.
        // Class 2: TP=1 FP=0 FN=1 -> 2/3. Macro mean = 59/90.
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 2, 0];
        let (macro_mean, per_class) = macro_f1(&pred, &truth, 3).unwrap();
        assert!((per_class[0] - 0.5).abs() < 1e-12);
        assert!((per_class[1] - 0.8).abs() < 1e-12);
        assert!((per_class[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((macro_mean - 59.0 / 90.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_invariant_under_sample_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let probs = Matrix::from_fn(30, 3, |_, _| rng.gen_range(0.01..1.0));
        let truth: Vec<usize> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let report = evaluate_predictions(&probs, &truth).unwrap();
        let mut order: Vec<usize> = (0..30).collect();
        order.shuffle(&mut rng);
        let shuffled_probs = Matrix::from_fn(30, 3, |i, j| probs.get(order[i], j));
        let shuffled_truth: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let shuffled = evaluate_predictions(&shuffled_probs, &shuffled_truth).unwrap();
        assert!((report.accuracy - shuffled.accuracy).abs() < 1e-15);
        assert!((report.macro_auroc - shuffled.macro_auroc).abs() < 1e-12);
        assert!((report.macro_f1 - shuffled.macro_f1).abs() < 1e-15);
    }

    #[test]
    fn spearman_matches_rank_identities() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&a, &[8.0, 6.0, 4.0, 2.0]).unwrap(), -1.0);
        assert!(spearman(&a, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn report_row_matches_the_header_schema() {
        let report = EvalReport {
            accuracy: 0.75,
            macro_auroc: 0.875,
            macro_f1: 0.5,
            per_class_f1: vec![0.5, 0.5],
            n_eval: 4,
        };
        let row = report.csv_row("run1", "direct", 7);
        assert_eq!(row, "run1,direct,7,0.75,0.875,0.5");
        assert_eq!(REPORT_CSV_HEADER.split(',').count(), row.split(',').count());
    }

    #[test]
    fn config_hash_is_stable_and_seed_sensitive() {
        let cfg = ExperimentConfig::default();
        assert_eq!(experiment_config_hash(&cfg), experiment_config_hash(&cfg));
        let other = ExperimentConfig {
            seed: 1,
            ..ExperimentConfig::default()
        };
        assert_ne!(experiment_config_hash(&cfg), experiment_config_hash(&other));
        let parsed: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(experiment_config_hash(&parsed), experiment_config_hash(&cfg));
        assert!(serde_json::from_str::<ExperimentConfig>("{\"bogus\": 3}").is_err());
    }

    #[test]
    fn derived_stream_seeds_differ_per_stage() {
        let cfg = ExperimentConfig::default();
        let source_seed = cfg.source_config().seed;
        let train_seed = cfg.train_config().seed;
        assert_ne!(source_seed, cfg.ssl_seed());
        assert_ne!(train_seed, cfg.ssl_seed());
        assert_ne!(source_seed, train_seed);
    }

    #[test]
    fn ablation_names_parse_and_reject() {
        assert_eq!(AblationSpec::parse("full").unwrap(), AblationSpec::default());
        assert!(AblationSpec::parse("no_kd").unwrap().no_kd);
        let combo = AblationSpec::parse("no_global+no_local").unwrap();
        assert!(combo.no_global && combo.no_local && !combo.no_kd);
        assert!(AblationSpec::parse("bogus").is_err());
        assert!(AblationSpec::parse("full+no_kd").is_err());
        assert!(AblationSpec::parse("").is_err());
        let cfg = ExperimentConfig::default();
        assert_eq!(AblationSpec::parse("no_kd").unwrap().train_config(&cfg).lambda, 1.0);
        assert_eq!(
            AblationSpec::parse("no_local").unwrap().train_config(&cfg).lambda,
            cfg.train.lambda
        );
    }

    #[test]
    fn pooled_graph_stacks_sources_block_diagonally() {
        let g1 = Graph::build(
            "a",
            Matrix::from_fn(3, 2, |i, j| (i + j) as f64),
            &[(0, 1), (1, 2)],
            Some(vec![0, 1, 0]),
            2,
        )
        .unwrap();
        let g2 = Graph::build(
            "b",
            Matrix::from_fn(2, 2, |i, j| (i * j) as f64 + 5.0),
            &[(0, 1)],
            Some(vec![1, 1]),
            2,
        )
        .unwrap();
        let target = Graph::build("t", Matrix::zeros(2, 2), &[(0, 1)], None, 2).unwrap();
        let set = DomainSet {
            sources: vec![g1, g2],
            target,
            num_classes: 2,
            feature_dim: 2,
        };
        let pooled = pooled_source_graph(&set).unwrap();
        assert_eq!(pooled.num_nodes, 5);
        assert_eq!(pooled.labels, Some(vec![0, 1, 0, 1, 1]));
        assert_eq!(pooled.edges, vec![(0, 1), (1, 2), (3, 4)]);
        assert_eq!(pooled.features.get(3, 0), 5.0);
        // No mixing across the blocks.
        for i in 0..3 {
            for j in 3..5 {
                assert_eq!(pooled.adj_norm.get(i, j), 0.0);
            }
        }
    }

    /// Small suite for pipeline tests; `shift` scales the domain drift
    /// applied to every non-iid source (0 = fully iid suite).
    fn small_suite(seed: u64, nodes: usize, num_sources: usize, shift: f64) -> crate::synth::GeneratedSuite {
        let base = SuiteBaseParams {
            num_nodes: nodes,
            num_classes: 3,
            feature_dim: 8,
            p_intra: 0.15,
            p_inter: 0.02,
            noise_sigma: 0.4,
            mean_scale: 0.9,
            seed,
        };
        let mut sources = vec![DomainShift::default()];
        for j in 1..num_sources {
            sources.push(DomainShift {
                rotation_angle: 0.35 * j as f64 * shift,
                mean_shift_sigma: 0.15 * j as f64 * shift,
                label_flip_ratio: 0.05 * j as f64 * shift,
                ..DomainShift::default()
            });
        }
        let schedule = ShiftSchedule {
            sources,
            target: DomainShift::default(),
        };
        generate_suite(&base, &schedule).unwrap()
    }

    fn quick_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            source: SourceTrainConfig {
                hidden_dim: 16,
                max_epochs: 300,
                early_stop_patience: 30,
                ..SourceTrainConfig::default()
            },
            ssl: SslConfig {
                hidden_dim: 8,
                epochs: 15,
                num_groups: 3,
                ..SslConfig::default()
            },
            train: TrainConfig {
                max_outer_epochs: 8,
                inner_steps: 3,
                sinkhorn_max_iters: 500,
                sinkhorn_tolerance: 1e-6,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn direct_baseline_separates_the_iid_suite() {
        let suite = small_suite(101, 60, 3, 0.0);
        let cfg = quick_config(101);
        let report = run_baseline(
            "direct",
            &suite.domain_set,
            &suite.target_eval_labels,
            &cfg,
        )
        .unwrap();
        assert!(
            report.accuracy >= 0.9,
            "direct accuracy {} below 0.9 on the no-shift suite",
            report.accuracy
        );
        assert!(report.macro_auroc > 0.9);
    }

    #[test]
    fn unknown_baseline_and_report_ranges() {
        let suite = small_suite(103, 30, 2, 0.0);
        let cfg = quick_config(103);
        assert!(run_baseline("bogus", &suite.domain_set, &suite.target_eval_labels, &cfg).is_err());
        let report = run_baseline(
            "direct",
            &suite.domain_set,
            &suite.target_eval_labels,
            &cfg,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert!((0.0..=1.0).contains(&report.macro_auroc));
        assert!((0.0..=1.0).contains(&report.macro_f1));
        assert_eq!(report.per_class_f1.len(), 3);
        assert_eq!(report.n_eval, 30);
    }

    #[test]
    fn doubly_disabled_ablation_equals_the_uniform_baseline() {
        let suite = small_suite(107, 40, 3, 1.0);
        let cfg = quick_config(107);
        let baseline = run_baseline(
            "uniform_ot",
            &suite.domain_set,
            &suite.target_eval_labels,
            &cfg,
        )
        .unwrap();
        let ablated = run_ablation(
            "no_global+no_local",
            &suite.domain_set,
            &suite.target_eval_labels,
            &cfg,
        )
        .unwrap();
        assert_eq!(baseline, ablated);
    }

    #[test]
    fn shared_artifact_variants_match_the_standalone_runners() {
        let suite = small_suite(111, 40, 3, 1.0);
        let cfg = quick_config(111);
        let pre = pretrain_stage(&suite.domain_set, &cfg).unwrap();
        for name in ["direct", "uniform_ot"] {
            let standalone =
                run_baseline(name, &suite.domain_set, &suite.target_eval_labels, &cfg).unwrap();
            let shared = run_variant_with_artifacts(
                name,
                &suite.domain_set,
                &suite.target_eval_labels,
                &pre,
                &cfg,
            )
            .unwrap();
            assert_eq!(standalone, shared, "variant {name}");
        }
        let standalone = run_ablation(
            "no_global+no_local",
            &suite.domain_set,
            &suite.target_eval_labels,
            &cfg,
        )
        .unwrap();
        let shared = run_variant_with_artifacts(
            "no_global+no_local",
            &suite.domain_set,
            &suite.target_eval_labels,
            &pre,
            &cfg,
        )
        .unwrap();
        assert_eq!(standalone, shared);
    }

    #[test]
    fn no_kd_variant_never_evaluates_the_distillation_loss() {
        let suite = small_suite(109, 30, 3, 1.0);
        let cfg = ExperimentConfig {
            train: TrainConfig {
                max_outer_epochs: 2,
                inner_steps: 2,
                sinkhorn_max_iters: 400,
                sinkhorn_tolerance: 1e-6,
                ..TrainConfig::default()
            },
            ..quick_config(109)
        };
        let before = kd_evaluations();
        run_ablation("no_kd", &suite.domain_set, &suite.target_eval_labels, &cfg).unwrap();
        assert_eq!(
            kd_evaluations(),
            before,
            "distillation loss evaluated despite being switched off"
        );
        run_ablation("no_local", &suite.domain_set, &suite.target_eval_labels, &cfg).unwrap();
        assert!(
            kd_evaluations() > before,
            "control run with the loss enabled did not evaluate it"
        );
    }

    #[test]
    fn adaptation_on_the_iid_suite_stays_close_to_direct() {
        let seeds = [211u64, 223, 227, 229, 233];
        let gaps: Vec<(f64, f64)> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    scope.spawn(move || {
                        let suite = small_suite(seed, 50, 3, 0.0);
                        let cfg = quick_config(seed);
                        let direct = run_baseline(
                            "direct",
                            &suite.domain_set,
                            &suite.target_eval_labels,
                            &cfg,
                        )
                        .unwrap();
                        let full = run_baseline(
                            "selmag",
                            &suite.domain_set,
                            &suite.target_eval_labels,
                            &cfg,
                        )
                        .unwrap();
                        (direct.accuracy, full.accuracy)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (seed, (direct, full)) in seeds.iter().zip(&gaps) {
            assert!(
                direct - full <= 0.05,
                "seed {seed}: adapted accuracy {full} fell more than 0.05 below direct {direct}"
            );
        }
    }

    #[test]
    fn selector_analysis_emits_one_row_per_source() {
        let suite = small_suite(127, 40, 3, 1.0);
        let cfg = ExperimentConfig {
            train: TrainConfig {
                max_outer_epochs: 3,
                inner_steps: 2,
                sinkhorn_max_iters: 400,
                sinkhorn_tolerance: 1e-6,
                ..TrainConfig::default()
            },
            ..quick_config(127)
        };
        let pre = pretrain_stage(&suite.domain_set, &cfg).unwrap();
        let stage = train_stage(&suite.domain_set, &pre, AblationSpec::default(), &cfg).unwrap();
        let analysis = selector_analysis(
            &suite.domain_set,
            &suite.target_eval_labels,
            &pre,
            &stage.selectors,
            &cfg,
        )
        .unwrap();
        assert_eq!(analysis.rows.len(), 3);
        let weight_sum: f64 = analysis.rows.iter().map(|r| r.s_global).sum();
        assert!((weight_sum - 1.0).abs() < 1e-9);
        for row in &analysis.rows {
            assert!((0.0..=1.0).contains(&row.mean_s_local));
            assert!((0.0..=1.0).contains(&row.single_source_accuracy));
        }
        assert!((-1.0..=1.0).contains(&analysis.spearman));
        let csv = selector_analysis_csv(&analysis);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 4);
    }
}

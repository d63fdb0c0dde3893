//! Transferability probes and learned source selectors.
//!
//! Three self-supervised probe tasks are trained per graph on fresh encoder
//! copies: masked-attribute reconstruction, edge prediction from embedding
//! dot products, and prediction of the neighborhood's K-Means group
//! distribution. Evaluating one graph's trained probes on another graph
//! ("exchanging" the modules) yields raw transfer losses; the graph-level
//! selector turns standardized versions of those losses into a probability
//! vector over sources, and the node-level selector scores individual
//! source nodes against a pooled target summary. Both selectors are small
//! MLPs whose parameters are trained end-to-end by the meta loop.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmagError};
use crate::graph::{DomainSet, Graph};
use crate::models::{encode_on_tape, encoder_to_tape, glorot, Encoder, EncoderVars};
use crate::seeding::{derive_seed, seeded_rng};
use crate::tensor::{softplus, Adam, Matrix, Tape, ValueId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NUM_TASKS: usize = 3;
pub const TASK_NAMES: [&str; NUM_TASKS] = ["node", "edge", "context"];
pub const TASK_NODE: usize = 0;
pub const TASK_EDGE: usize = 1;
pub const TASK_CONTEXT: usize = 2;

/// Hidden width of both selector MLPs.
pub const SELECTOR_HIDDEN: usize = 16;

/// Floor applied to raw losses before taking logs in feature construction.
const LOG_LOSS_FLOOR: f64 = 1e-12;

/// Configuration for probe pretraining and scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Hidden width of the per-graph probe encoders.
    pub hidden_dim: usize,
    /// Fraction of nodes whose attributes are masked for reconstruction.
    pub mask_ratio: f64,
    /// Negative pairs per evaluation; defaults to the positive count.
    pub num_neg: Option<usize>,
    /// Number of K-Means groups for the context task.
    pub num_groups: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Start probe encoders from the supervised shared encoder instead of
    /// fresh per-graph initializations.
    pub share_encoder: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            hidden_dim: 64,
            mask_ratio: 0.15,
            num_neg: None,
            num_groups: 10,
            epochs: 300,
            learning_rate: 0.01,
            share_encoder: false,
        }
    }
}

/// Trained probe heads for one graph. The attribute head maps embeddings
/// back to attribute space; the edge scorer has no parameters beyond the
/// embeddings; the context head predicts a distribution over the shared
/// K-Means groups (whose centroids are fit once on all graphs' attributes
/// and are not trained).
#[derive(Debug, Clone, PartialEq)]
pub struct SslHeads {
    pub node_w: Matrix,
    pub node_b: Matrix,
    pub ctx_w: Matrix,
    pub ctx_b: Matrix,
    pub centroids: Matrix,
}

impl SslHeads {
    pub fn init(hidden_dim: usize, feature_dim: usize, centroids: Matrix, rng: &mut ChaCha8Rng) -> SslHeads {
        let m = centroids.rows();
        SslHeads {
            node_w: glorot(hidden_dim, feature_dim, rng),
            node_b: Matrix::zeros(1, feature_dim),
            ctx_w: glorot(hidden_dim, m, rng),
            ctx_b: Matrix::zeros(1, m),
            centroids,
        }
    }
}

/// A graph's trained probe package: its encoder copy, heads, the final
/// losses under the graph's canonical evaluation seed, and the training
/// curve of the joint loss.
#[derive(Debug, Clone)]
pub struct SslModules {
    pub encoder: Encoder,
    pub heads: SslHeads,
    pub final_losses: [f64; NUM_TASKS],
    pub loss_curve: Vec<f64>,
}

// ---------------------------------------------------------------------------
// K-Means
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; at most 50 iterations or until
/// the largest centroid movement drops below 1e-6. Empty clusters keep
/// their previous centroid.
pub fn fit_kmeans(data: &Matrix, m: usize, seed: u64) -> Result<Matrix> {
    let n = data.rows();
    if m == 0 || m > n {
        return Err(SelmagError::InvalidArgument {
            op: "fit_kmeans",
            details: format!("need 1 <= groups <= {n} rows, got {m}"),
        });
    }
    let d = data.cols();
    let mut rng = seeded_rng(seed, "kmeans");

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(m);
    centroids.push(data.row(rng.gen_range(0..n)).to_vec());
    let mut nearest_sq: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), &centroids[0]))
        .collect();
    while centroids.len() < m {
        let total: f64 = nearest_sq.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with a centroid; pick any.
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in nearest_sq.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        };
        centroids.push(data.row(pick).to_vec());
        for i in 0..n {
            let dd = sq_dist(data.row(i), centroids.last().unwrap());
            if dd < nearest_sq[i] {
                nearest_sq[i] = dd;
            }
        }
    }

    for _ in 0..50 {
        // Assign.
        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let row = data.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let dd = sq_dist(row, cen);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, &x) in sums[best].iter_mut().zip(row) {
                *s += x;
            }
        }
        // Update, tracking movement.
        let mut movement = 0.0f64;
        for c in 0..m {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..d {
                let new = sums[c][j] / counts[c] as f64;
                movement = movement.max((new - centroids[c][j]).abs());
                centroids[c][j] = new;
            }
        }
        if movement < 1e-6 {
            break;
        }
    }

    let mut out = Matrix::zeros(m, d);
    for (c, cen) in centroids.iter().enumerate() {
        out.row_mut(c).copy_from_slice(cen);
    }
    Ok(out)
}

/// Nearest centroid per row (ties to the lowest index).
pub fn assign_groups(data: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..data.rows())
        .map(|i| {
            let row = data.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..centroids.rows() {
                let dd = sq_dist(row, centroids.row(c));
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Sum of squared distances to the nearest centroid.
pub fn kmeans_inertia(data: &Matrix, centroids: &Matrix) -> f64 {
    (0..data.rows())
        .map(|i| {
            let row = data.row(i);
            (0..centroids.rows())
                .map(|c| sq_dist(row, centroids.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Probe losses (tape expressions + plain wrappers)
// ---------------------------------------------------------------------------

/// Neighbor lists including the self-loop.
fn neighbors_with_self(graph: &Graph) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = (0..graph.num_nodes).map(|v| vec![v]).collect();
    for &(u, v) in &graph.edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    adj
}

/// Per-node empirical distribution of neighbor groups (self-loop included).
pub fn context_targets(graph: &Graph, groups: &[usize], num_groups: usize) -> Matrix {
    let adj = neighbors_with_self(graph);
    let mut t = Matrix::zeros(graph.num_nodes, num_groups);
    for (v, neigh) in adj.iter().enumerate() {
        let w = 1.0 / neigh.len() as f64;
        for &u in neigh {
            let cur = t.get(v, groups[u]);
            t.set(v, groups[u], cur + w);
        }
    }
    t
}

fn sample_mask_indices(n: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = (mask_ratio * n as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

fn sample_negative_pairs(graph: &Graph, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    use std::collections::HashSet;
    let edge_set: HashSet<(usize, usize)> = graph.edges.iter().copied().collect();
    let n = graph.num_nodes;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let max_attempts = 100 * count.max(1);
    while out.len() < count && attempts < max_attempts {
        attempts += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let pair = (a.min(b), a.max(b));
        if !edge_set.contains(&pair) {
            out.push(pair);
        }
    }
    out
}

/// Tracked masked-attribute reconstruction loss. Re-encodes the graph with
/// the masked rows zeroed and measures MSE against the original attributes
/// of the masked nodes.
fn node_loss_expr(
    tape: &Tape,
    graph: &Graph,
    enc: &EncoderVars,
    node_w: ValueId,
    node_b: ValueId,
    mask: &[usize],
) -> ValueId {
    let mut masked = graph.features.clone();
    for &v in mask {
        for x in masked.row_mut(v) {
            *x = 0.0;
        }
    }
    let originals = graph.features.gather_rows(mask);
    let a_hat = tape.constant(graph.adj_norm.clone());
    let af = tape.constant(graph.adj_norm.matmul(&masked));
    let x = encode_on_tape(tape, a_hat, af, enc, None);
    let xm = tape.slice_rows(x, mask);
    let recon = tape.add(tape.matmul(xm, node_w), node_b);
    let diff = tape.sub(recon, tape.constant(originals));
    tape.mean(tape.square(diff))
}

/// Tracked edge-prediction BCE over positive and negative pairs. The score
/// of a pair is `sigmoid(x_u . x_v)`; per-pair loss is
/// `softplus(z) - y * z`, the stable form of binary cross-entropy.
fn edge_loss_expr(
    tape: &Tape,
    embeddings: ValueId,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> ValueId {
    let h = tape.shape(embeddings).1;
    let mut us = Vec::with_capacity(positives.len() + negatives.len());
    let mut vs = Vec::with_capacity(us.capacity());
    let mut labels = Matrix::zeros(positives.len() + negatives.len(), 1);
    for (r, &(u, v)) in positives.iter().chain(negatives).enumerate() {
        us.push(u);
        vs.push(v);
        if r < positives.len() {
            labels.set(r, 0, 1.0);
        }
    }
    let xu = tape.slice_rows(embeddings, &us);
    let xv = tape.slice_rows(embeddings, &vs);
    let ones_h1 = tape.constant(Matrix::ones(h, 1));
    let z = tape.matmul(tape.mul_elem(xu, xv), ones_h1);
    let sp = softplus(tape, z);
    let y = tape.constant(labels);
    tape.mean(tape.sub(sp, tape.mul_elem(y, z)))
}

/// Tracked context cross-entropy: mean over nodes of
/// `-sum_m c_v[m] log softmax(head(x_v))[m]`.
fn context_loss_expr(
    tape: &Tape,
    embeddings: ValueId,
    ctx_w: ValueId,
    ctx_b: ValueId,
    targets: &Matrix,
) -> ValueId {
    let n = targets.rows();
    let logits = tape.add(tape.matmul(embeddings, ctx_w), ctx_b);
    let logp = tape.log(tape.softmax_rows(logits));
    let t = tape.constant(targets.clone());
    tape.scalar_mul(tape.sum(tape.mul_elem(t, logp)), -1.0 / n as f64)
}

/// Masked-attribute reconstruction loss of trained parameters on a graph.
pub fn ssl_node_loss(
    encoder: &Encoder,
    heads: &SslHeads,
    graph: &Graph,
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    if !(0.0 < mask_ratio && mask_ratio < 1.0) {
        return Err(SelmagError::InvalidArgument {
            op: "ssl_node_loss",
            details: format!("mask_ratio must be in (0,1), got {mask_ratio}"),
        });
    }
    let mut rng = seeded_rng(seed, "ssl/mask");
    let mask = sample_mask_indices(graph.num_nodes, mask_ratio, &mut rng);
    if mask.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "ssl_node_loss",
            details: "mask selects zero nodes".into(),
        });
    }
    let tape = Tape::new();
    let enc = encoder_to_tape(&tape, encoder);
    let (nw, nb) = (tape.constant(heads.node_w.clone()), tape.constant(heads.node_b.clone()));
    let loss = node_loss_expr(&tape, graph, &enc, nw, nb, &mask);
    Ok(tape.item(loss))
}

/// Edge-prediction BCE of trained parameters on a graph.
pub fn ssl_edge_loss(encoder: &Encoder, graph: &Graph, num_neg: usize, seed: u64) -> Result<f64> {
    if graph.edges.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "ssl_edge_loss",
            details: "graph has no edges".into(),
        });
    }
    let mut rng = seeded_rng(seed, "ssl/neg");
    let negatives = sample_negative_pairs(graph, num_neg, &mut rng);
    let tape = Tape::new();
    let enc = encoder_to_tape(&tape, encoder);
    let a_hat = tape.constant(graph.adj_norm.clone());
    let af = tape.constant(graph.adj_norm.matmul(&graph.features));
    let x = encode_on_tape(&tape, a_hat, af, &enc, None);
    let loss = edge_loss_expr(&tape, x, &graph.edges, &negatives);
    Ok(tape.item(loss))
}

/// Context-distribution cross-entropy of trained parameters on a graph.
pub fn ssl_context_loss(encoder: &Encoder, heads: &SslHeads, graph: &Graph) -> Result<f64> {
    if heads.centroids.rows() == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "ssl_context_loss",
            details: "empty centroid set".into(),
        });
    }
    let groups = assign_groups(&graph.features, &heads.centroids);
    let targets = context_targets(graph, &groups, heads.centroids.rows());
    let tape = Tape::new();
    let enc = encoder_to_tape(&tape, encoder);
    let a_hat = tape.constant(graph.adj_norm.clone());
    let af = tape.constant(graph.adj_norm.matmul(&graph.features));
    let x = encode_on_tape(&tape, a_hat, af, &enc, None);
    let (cw, cb) = (tape.constant(heads.ctx_w.clone()), tape.constant(heads.ctx_b.clone()));
    let loss = context_loss_expr(&tape, x, cw, cb, &targets);
    Ok(tape.item(loss))
}

// ---------------------------------------------------------------------------
// Pretraining and exchange scoring
// ---------------------------------------------------------------------------

/// Deterministic fingerprint of a graph's contents, used to derive
/// evaluation seeds that agree whenever two graphs are identical (so
/// exchanging a graph's modules with itself reproduces its own score).
fn graph_content_seed(graph: &Graph) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x100000001b3);
    };
    eat(graph.num_nodes as u64);
    eat(graph.num_classes as u64);
    eat(graph.features.cols() as u64);
    for &v in graph.features.data() {
        eat(v.to_bits());
    }
    for &(u, v) in &graph.edges {
        eat(u as u64);
        eat(v as u64);
    }
    h
}

fn eval_seed_for(base_seed: u64, graph: &Graph) -> u64 {
    derive_seed(base_seed, &format!("ssl/eval/{:016x}", graph_content_seed(graph)))
}

fn num_neg_for(cfg: &SslConfig, graph: &Graph) -> usize {
    cfg.num_neg.unwrap_or(graph.edges.len())
}

/// Number of seeded repetitions averaged for the stochastic probe losses
/// (mask choice, negative pairs) during exchange scoring.
const SCORE_REPS: usize = 4;

/// The three probe losses of a trained module package on a graph, under the
/// graph's canonical evaluation seeds. No parameters are updated. The two
/// sampled losses are averaged over a few seeded draws to cut estimator
/// variance; the context loss is deterministic.
pub fn transfer_score(
    modules: &SslModules,
    graph: &Graph,
    cfg: &SslConfig,
    base_seed: u64,
) -> Result<[f64; NUM_TASKS]> {
    let seed = eval_seed_for(base_seed, graph);
    let mut node = 0.0;
    let mut edge = 0.0;
    for rep in 0..SCORE_REPS {
        let rep_seed = derive_seed(seed, &format!("rep/{rep}"));
        node += ssl_node_loss(&modules.encoder, &modules.heads, graph, cfg.mask_ratio, rep_seed)?;
        edge += ssl_edge_loss(&modules.encoder, graph, num_neg_for(cfg, graph), rep_seed)?;
    }
    node /= SCORE_REPS as f64;
    edge /= SCORE_REPS as f64;
    let context = ssl_context_loss(&modules.encoder, &modules.heads, graph)?;
    Ok([node, edge, context])
}

/// Jointly trains the three probes on one graph (equal weights, Adam) from
/// the given encoder initialization. Masks and negative pairs are resampled
/// every epoch from a per-graph stream.
pub fn pretrain_ssl(
    encoder_init: &Encoder,
    graph: &Graph,
    centroids: &Matrix,
    cfg: &SslConfig,
    base_seed: u64,
) -> Result<SslModules> {
    let mut encoder = encoder_init.clone();
    let mut heads = SslHeads::init(
        encoder.hidden_dim(),
        graph.feature_dim(),
        centroids.clone(),
        &mut seeded_rng(base_seed, &format!("ssl/heads_init/{}", graph.name)),
    );
    let mut sample_rng = seeded_rng(base_seed, &format!("ssl/train/{}", graph.name));
    let groups = assign_groups(&graph.features, centroids);
    let targets = context_targets(graph, &groups, centroids.rows());
    let num_neg = num_neg_for(cfg, graph);

    let mut opt = Adam::new(cfg.learning_rate);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mask = sample_mask_indices(graph.num_nodes, cfg.mask_ratio, &mut sample_rng);
        if mask.is_empty() {
            return Err(SelmagError::InvalidArgument {
                op: "pretrain_ssl",
                details: "mask selects zero nodes".into(),
            });
        }
        if graph.edges.is_empty() {
            return Err(SelmagError::InvalidArgument {
                op: "pretrain_ssl",
                details: "graph has no edges".into(),
            });
        }
        let negatives = sample_negative_pairs(graph, num_neg, &mut sample_rng);

        let tape = Tape::new();
        let enc = encoder_to_tape(&tape, &encoder);
        let nw = tape.input(heads.node_w.clone());
        let nb = tape.input(heads.node_b.clone());
        let cw = tape.input(heads.ctx_w.clone());
        let cb = tape.input(heads.ctx_b.clone());

        let node = node_loss_expr(&tape, graph, &enc, nw, nb, &mask);
        let a_hat = tape.constant(graph.adj_norm.clone());
        let af = tape.constant(graph.adj_norm.matmul(&graph.features));
        let x = encode_on_tape(&tape, a_hat, af, &enc, None);
        let edge = edge_loss_expr(&tape, x, &graph.edges, &negatives);
        let context = context_loss_expr(&tape, x, cw, cb, &targets);
        let total = tape.add(tape.add(node, edge), context);

        let value = tape.item(total);
        if !value.is_finite() {
            return Err(SelmagError::NonFiniteLoss {
                epoch,
                context: format!("ssl pretraining on {}", graph.name),
            });
        }
        loss_curve.push(value);

        let grads = tape.backward(total);
        let leaf_ids = [enc.w1, enc.b1, enc.w2, enc.b2, nw, nb, cw, cb];
        let grad_mats: Vec<Matrix> = leaf_ids
            .iter()
            .map(|&id| grads.grad_or_zeros(&tape, id))
            .collect();
        let [ew1, eb1, ew2, eb2] = encoder.params_mut();
        let mut params: Vec<&mut Matrix> = vec![ew1, eb1, ew2, eb2];
        params.push(&mut heads.node_w);
        params.push(&mut heads.node_b);
        params.push(&mut heads.ctx_w);
        params.push(&mut heads.ctx_b);
        opt.step(&mut params, &grad_mats);
    }

    let mut modules = SslModules {
        encoder,
        heads,
        final_losses: [0.0; NUM_TASKS],
        loss_curve,
    };
    modules.final_losses = transfer_score(&modules, graph, cfg, base_seed)?;
    Ok(modules)
}

/// Probe packages for every graph in the suite plus the shared centroids.
#[derive(Debug, Clone)]
pub struct SslArtifacts {
    pub centroids: Matrix,
    pub source_modules: Vec<SslModules>,
    pub target_modules: SslModules,
}

/// Fits K-Means on the union of all graphs' attributes, then pretrains the
/// probes of every source and the target. `supervised` provides the shared
/// encoder when `cfg.share_encoder` is set; otherwise per-graph fresh
/// initializations are drawn from named seed streams.
pub fn pretrain_all(
    set: &DomainSet,
    supervised: Option<&Encoder>,
    cfg: &SslConfig,
    base_seed: u64,
) -> Result<SslArtifacts> {
    let total_rows: usize = set.sources.iter().map(|g| g.num_nodes).sum::<usize>() + set.target.num_nodes;
    let mut all = Matrix::zeros(total_rows, set.feature_dim);
    let mut offset = 0;
    for g in set.sources.iter().chain(std::iter::once(&set.target)) {
        for i in 0..g.num_nodes {
            all.row_mut(offset + i).copy_from_slice(g.features.row(i));
        }
        offset += g.num_nodes;
    }
    let centroids = fit_kmeans(&all, cfg.num_groups, derive_seed(base_seed, "ssl/kmeans"))?;

    let init_for = |graph: &Graph| -> Result<Encoder> {
        if cfg.share_encoder {
            let enc = supervised.ok_or_else(|| SelmagError::InvalidArgument {
                op: "pretrain_all",
                details: "share_encoder set but no supervised encoder given".into(),
            })?;
            Ok(enc.clone())
        } else {
            let mut rng = seeded_rng(base_seed, &format!("ssl/encoder_init/{}", graph.name));
            Ok(Encoder::init(set.feature_dim, cfg.hidden_dim, &mut rng))
        }
    };

    let mut source_modules = Vec::with_capacity(set.sources.len());
    for g in &set.sources {
        source_modules.push(pretrain_ssl(&init_for(g)?, g, &centroids, cfg, base_seed)?);
    }
    let target_modules = pretrain_ssl(&init_for(&set.target)?, &set.target, &centroids, cfg, base_seed)?;
    Ok(SslArtifacts {
        centroids,
        source_modules,
        target_modules,
    })
}

// ---------------------------------------------------------------------------
// Transfer scores and selector features
// ---------------------------------------------------------------------------

/// Raw exchange losses for all sources against one target plus the target's
/// self-reference, and the standardized feature matrix fed to the
/// graph-level selector.
#[derive(Debug, Clone)]
pub struct TransferScores {
    /// `raw_loss[j][t]`: task `t` loss of source `j`'s modules on the target.
    pub raw_loss: Vec<[f64; NUM_TASKS]>,
    /// Task losses of the target's own modules on itself.
    pub self_reference: [f64; NUM_TASKS],
    /// `K x 2*NUM_TASKS` selector input: per task, the z-scored (across
    /// sources) negative log-loss, then the reference value under the same
    /// standardization.
    pub normalized_features: Matrix,
}

/// Builds selector features from raw losses: negative logs are z-scored
/// across the K sources per task, and the target self-reference is mapped
/// through the same per-task affine transform so "relative drop" is
/// preserved. A shared shift or scaling of all raw losses cancels exactly.
pub fn build_transfer_scores(
    raw_loss: Vec<[f64; NUM_TASKS]>,
    self_reference: [f64; NUM_TASKS],
) -> Result<TransferScores> {
    let k = raw_loss.len();
    if k == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "build_transfer_scores",
            details: "no sources".into(),
        });
    }
    for row in raw_loss.iter().chain(std::iter::once(&self_reference)) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SelmagError::NonFinite {
                context: "transfer scores".into(),
            });
        }
    }
    let neg_log = |v: f64| -(v.max(LOG_LOSS_FLOOR)).ln();
    let mut features = Matrix::zeros(k, 2 * NUM_TASKS);
    for t in 0..NUM_TASKS {
        let vals: Vec<f64> = raw_loss.iter().map(|r| neg_log(r[t])).collect();
        let mean = vals.iter().sum::<f64>() / k as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let sd = var.sqrt();
        if sd < 1e-8 {
            // The column is (numerically) constant: it carries no
            // discriminative signal, and dividing by a floored sd would
            // blow the shared reference up to ~1e7. Zero the whole task.
            continue;
        }
        for (j, &v) in vals.iter().enumerate() {
            features.set(j, t, (v - mean) / sd);
        }
        let reference = (neg_log(self_reference[t]) - mean) / sd;
        for j in 0..k {
            features.set(j, NUM_TASKS + t, reference);
        }
    }
    Ok(TransferScores {
        raw_loss,
        self_reference,
        normalized_features: features,
    })
}

/// Scores every source's modules against the target and assembles the
/// selector features.
pub fn score_all(
    artifacts: &SslArtifacts,
    target: &Graph,
    cfg: &SslConfig,
    base_seed: u64,
) -> Result<TransferScores> {
    let mut raw = Vec::with_capacity(artifacts.source_modules.len());
    for m in &artifacts.source_modules {
        raw.push(transfer_score(m, target, cfg, base_seed)?);
    }
    let self_reference = transfer_score(&artifacts.target_modules, target, cfg, base_seed)?;
    build_transfer_scores(raw, self_reference)
}

// ---------------------------------------------------------------------------
// Selectors
// ---------------------------------------------------------------------------

/// Parameters of the graph-level and node-level selector MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub g_w1: Matrix,
    pub g_b1: Matrix,
    pub g_w2: Matrix,
    pub g_b2: Matrix,
    pub l_w1: Matrix,
    pub l_b1: Matrix,
    pub l_w2: Matrix,
    pub l_b2: Matrix,
}

impl SelectorParams {
    pub fn init(hidden_dim: usize, rng: &mut ChaCha8Rng) -> SelectorParams {
        // The local head consumes raw encoder embeddings, whose scale is much
        // larger than unit variance; plain Glorot would start the sigmoid
        // deep in saturation with no usable gradient. Damping both local
        // layers keeps the initial node weights in the responsive range.
        let damp = |mut m: Matrix| {
            m.data_mut().iter_mut().for_each(|v| *v *= LOCAL_INIT_DAMPING);
            m
        };
        SelectorParams {
            g_w1: glorot(2 * NUM_TASKS, SELECTOR_HIDDEN, rng),
            g_b1: Matrix::zeros(1, SELECTOR_HIDDEN),
            g_w2: glorot(SELECTOR_HIDDEN, 1, rng),
            g_b2: Matrix::zeros(1, 1),
            l_w1: damp(glorot(3 * hidden_dim, SELECTOR_HIDDEN, rng)),
            l_b1: Matrix::zeros(1, SELECTOR_HIDDEN),
            l_w2: damp(glorot(SELECTOR_HIDDEN, 1, rng)),
            l_b2: Matrix::zeros(1, 1),
        }
    }

    /// All-zero parameters (useful as a degenerate fixture: the global
    /// selector returns uniform weights and the local selector 0.5).
    pub fn zeros(hidden_dim: usize) -> SelectorParams {
        SelectorParams {
            g_w1: Matrix::zeros(2 * NUM_TASKS, SELECTOR_HIDDEN),
            g_b1: Matrix::zeros(1, SELECTOR_HIDDEN),
            g_w2: Matrix::zeros(SELECTOR_HIDDEN, 1),
            g_b2: Matrix::zeros(1, 1),
            l_w1: Matrix::zeros(3 * hidden_dim, SELECTOR_HIDDEN),
            l_b1: Matrix::zeros(1, SELECTOR_HIDDEN),
            l_w2: Matrix::zeros(SELECTOR_HIDDEN, 1),
            l_b2: Matrix::zeros(1, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.l_w1.rows() / 3
    }

    pub fn params(&self) -> [&Matrix; 8] {
        [
            &self.g_w1, &self.g_b1, &self.g_w2, &self.g_b2,
            &self.l_w1, &self.l_b1, &self.l_w2, &self.l_b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.g_w1, &mut self.g_b1, &mut self.g_w2, &mut self.g_b2,
            &mut self.l_w1, &mut self.l_b1, &mut self.l_w2, &mut self.l_b2,
        ]
    }
}

/// Selector parameters registered on a tape.
#[derive(Clone, Copy)]
pub struct SelectorVars {
    pub g_w1: ValueId,
    pub g_b1: ValueId,
    pub g_w2: ValueId,
    pub g_b2: ValueId,
    pub l_w1: ValueId,
    pub l_b1: ValueId,
    pub l_w2: ValueId,
    pub l_b2: ValueId,
}

impl SelectorVars {
    pub fn list(&self) -> [ValueId; 8] {
        [
            self.g_w1, self.g_b1, self.g_w2, self.g_b2,
            self.l_w1, self.l_b1, self.l_w2, self.l_b2,
        ]
    }
}

pub fn selector_to_tape(tape: &Tape, p: &SelectorParams) -> SelectorVars {
    SelectorVars {
        g_w1: tape.input(p.g_w1.clone()),
        g_b1: tape.input(p.g_b1.clone()),
        g_w2: tape.input(p.g_w2.clone()),
        g_b2: tape.input(p.g_b2.clone()),
        l_w1: tape.input(p.l_w1.clone()),
        l_b1: tape.input(p.l_b1.clone()),
        l_w2: tape.input(p.l_w2.clone()),
        l_b2: tape.input(p.l_b2.clone()),
    }
}

/// Tracked graph-level selection: MLP over the feature rows, softplus to
/// force positivity, then normalization to a probability vector (`K x 1`).
pub fn global_select_on_tape(tape: &Tape, vars: &SelectorVars, features: ValueId) -> ValueId {
    let k = tape.shape(features).0;
    let h = tape.relu(tape.add(tape.matmul(features, vars.g_w1), vars.g_b1));
    let out = tape.add(tape.matmul(h, vars.g_w2), vars.g_b2);
    // A 1e-12 floor keeps the weights strictly positive even when softplus
    // underflows to exactly zero for very negative logits (otherwise the
    // normalization would divide zero by zero).
    let sp = tape.add(softplus(tape, out), tape.constant(Matrix::from_fn(k, 1, |_, _| 1e-12)));
    // Divide by the (strictly positive) sum: 1/s = exp(-log s).
    let total = tape.sum(sp);
    let inv = tape.exp(tape.neg(tape.log(total)));
    let inv_col = tape.matmul(tape.constant(Matrix::ones(k, 1)), inv);
    tape.mul_elem(sp, inv_col)
}

/// Graph-level selector weights as plain numbers.
pub fn global_select(params: &SelectorParams, scores: &TransferScores) -> Result<Vec<f64>> {
    let k = scores.raw_loss.len();
    if k == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "global_select",
            details: "no sources".into(),
        });
    }
    let tape = Tape::new();
    let vars = selector_to_tape(&tape, params);
    let features = tape.constant(scores.normalized_features.clone());
    let s = global_select_on_tape(&tape, &vars, features);
    Ok(tape.with_value(s, |m| m.data().to_vec()))
}

/// Concatenation of columnwise max and columnwise mean of the embedding
/// rows: a permutation-invariant `1 x 2h` summary of the target.
pub fn pool_target(embeddings: &Matrix) -> Result<Matrix> {
    if embeddings.rows() == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "pool_target",
            details: "empty embedding matrix".into(),
        });
    }
    let h = embeddings.cols();
    let mut out = Matrix::zeros(1, 2 * h);
    for c in 0..h {
        let mut mx = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for r in 0..embeddings.rows() {
            let v = embeddings.get(r, c);
            mx = mx.max(v);
            sum += v;
        }
        out.set(0, c, mx);
        out.set(0, h + c, sum / embeddings.rows() as f64);
    }
    Ok(out)
}

/// Tracked pooling (max `||` mean) of a tracked embedding matrix.
pub fn pool_target_on_tape(tape: &Tape, embeddings: ValueId) -> ValueId {
    tape.concat_cols(tape.max_pool_rows(embeddings), tape.mean_pool_rows(embeddings))
}

/// Tracked node-level selection for a batch of source embeddings: sigmoid
/// of the local MLP on `concat(x_v, pooled_target)`, returning `n x 1`.
pub fn local_select_on_tape(
    tape: &Tape,
    vars: &SelectorVars,
    source_embeddings: ValueId,
    pooled_target: ValueId,
) -> ValueId {
    let n = tape.shape(source_embeddings).0;
    let rep = tape.matmul(tape.constant(Matrix::ones(n, 1)), pooled_target);
    let input = tape.concat_cols(source_embeddings, rep);
    let h = tape.relu(tape.add(tape.matmul(input, vars.l_w1), vars.l_b1));
    let z = tape.add(tape.matmul(h, vars.l_w2), vars.l_b2);
    tape.sigmoid(z)
}

/// Node-level selector weight for a single embedding, as a plain number.
pub fn local_select(params: &SelectorParams, x_v: &Matrix, pooled_target: &Matrix) -> Result<f64> {
    let h = params.hidden_dim();
    if x_v.shape() != (1, h) || pooled_target.shape() != (1, 2 * h) {
        return Err(SelmagError::InvalidArgument {
            op: "local_select",
            details: format!(
                "expected 1x{h} embedding and 1x{} pooled target, got {:?} and {:?}",
                2 * h,
                x_v.shape(),
                pooled_target.shape()
            ),
        });
    }
    let tape = Tape::new();
    let vars = selector_to_tape(&tape, params);
    let x = tape.constant(x_v.clone());
    let pooled = tape.constant(pooled_target.clone());
    let s = local_select_on_tape(&tape, &vars, x, pooled);
    Ok(tape.item(s))
}

//! Graph domains and the on-disk dataset format.
//!
//! A *suite* is a directory holding one unlabeled target domain and K labeled
//! source domains, all sharing a feature dimensionality and class set:
//!
//! ```text
//! suite/
//!   suite.json                {"num_sources": K, "num_classes": C, "feature_dim": D}
//!   source_0/ .. source_{K-1}/
//!     meta.json               {"num_nodes": N, "feature_dim": D, "num_classes": C}
//!     edges.tsv               one "u<TAB>v" undirected edge per line
//!     features.tsv            N lines of D tab-separated floats
//!     labels.tsv              one "node_id<TAB>class_id" line per node
//!   target/
//!     meta.json, edges.tsv, features.tsv   (no labels.tsv: the target is unlabeled)
//!   target_labels_eval.tsv    held-out target labels, read only by evaluation
//! ```
//!
//! Loading validates shapes, index ranges, and finiteness, and fails loudly
//! on anything inconsistent rather than repairing it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmagError};
use crate::tensor::Matrix;

/// Suite-level header shared by every domain in a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SuiteMeta {
    pub num_sources: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// Per-domain header.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DomainMeta {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// One graph domain: node features, optional per-node labels, and the
/// symmetrically normalized adjacency used by the encoder.
#[derive(Debug, Clone)]
pub struct Graph {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    /// `num_nodes x feature_dim` node attributes.
    pub features: Matrix,
    /// Deduplicated undirected edges with `u < v`; self-loops are excluded
    /// here and reintroduced by the normalization.
    pub edges: Vec<(usize, usize)>,
    /// `D^{-1/2} (A + I) D^{-1/2}` where `D` row-sums `A + I`.
    pub adj_norm: Matrix,
    /// Ground-truth class per node; `None` for the unlabeled target.
    pub labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from raw parts, normalizing the edge list (dedup,
    /// drop self-loops, orient `u < v`) and precomputing the normalized
    /// adjacency.
    pub fn build(
        name: impl Into<String>,
        features: Matrix,
        edges: &[(usize, usize)],
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Graph> {
        let name = name.into();
        let num_nodes = features.rows();
        if num_classes == 0 {
            return Err(SelmagError::Validation(format!(
                "domain {name}: num_classes must be positive"
            )));
        }
        let mut cleaned: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(SelmagError::Validation(format!(
                    "domain {name}: edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                continue;
            }
            cleaned.push((u.min(v), u.max(v)));
        }
        cleaned.sort_unstable();
        cleaned.dedup();
        if let Some(ref l) = labels {
            if l.len() != num_nodes {
                return Err(SelmagError::Validation(format!(
                    "domain {name}: {} labels for {num_nodes} nodes",
                    l.len()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(SelmagError::Validation(format!(
                    "domain {name}: label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        let adj_norm = normalize_adjacency(num_nodes, &cleaned);
        Ok(Graph {
            name,
            num_nodes,
            num_classes,
            features,
            edges: cleaned,
            adj_norm,
            labels,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Z-scores every feature column in place (guarding tiny variances).
    pub fn standardize_features(&mut self) {
        let n = self.num_nodes as f64;
        if self.num_nodes == 0 {
            return;
        }
        for j in 0..self.features.cols() {
            let mut mean = 0.0;
            for i in 0..self.num_nodes {
                mean += self.features.get(i, j);
            }
            mean /= n;
            let mut var = 0.0;
            for i in 0..self.num_nodes {
                let d = self.features.get(i, j) - mean;
                var += d * d;
            }
            let std = (var / n).sqrt().max(1e-8);
            for i in 0..self.num_nodes {
                let v = (self.features.get(i, j) - mean) / std;
                self.features.set(i, j, v);
            }
        }
    }

    /// One-hot label matrix (`num_nodes x num_classes`); requires labels.
    pub fn one_hot_labels(&self) -> Matrix {
        let labels = self
            .labels
            .as_ref()
            .expect("one_hot_labels on an unlabeled graph");
        one_hot(labels, self.num_classes)
    }
}

/// A full dataset: K labeled sources plus the unlabeled target.
#[derive(Debug, Clone)]
pub struct DomainSet {
    pub sources: Vec<Graph>,
    pub target: Graph,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl DomainSet {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }
}

/// Symmetrically normalized adjacency with self-loops:
/// `D^{-1/2} (A + I) D^{-1/2}` where `D_ii = 1 + deg(i)`.
pub fn normalize_adjacency(num_nodes: usize, edges: &[(usize, usize)]) -> Matrix {
    let mut a = Matrix::identity(num_nodes);
    for &(u, v) in edges {
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    let mut inv_sqrt_deg = vec![0.0; num_nodes];
    for i in 0..num_nodes {
        let deg: f64 = a.row(i).iter().sum();
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    for i in 0..num_nodes {
        let di = inv_sqrt_deg[i];
        for j in 0..num_nodes {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, v * di * inv_sqrt_deg[j]);
            }
        }
    }
    a
}

/// One-hot encoding of a label vector.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &c) in labels.iter().enumerate() {
        assert!(c < num_classes, "label {c} out of range");
        m.set(i, c, 1.0);
    }
    m
}

/// Boolean mask marking `ceil(ratio * n)` nodes as labeled, sampled without
/// replacement from the given RNG.
pub fn split_label_mask(num_nodes: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    assert!((0.0..=1.0).contains(&ratio), "ratio must lie in [0, 1]");
    let k = ((ratio * num_nodes as f64).ceil() as usize).min(num_nodes);
    let mut idx: Vec<usize> = (0..num_nodes).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; num_nodes];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SelmagError::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| SelmagError::io(path, e))
}

fn parse_err(path: &Path, line: usize, details: impl Into<String>) -> SelmagError {
    SelmagError::Parse {
        path: path.to_path_buf(),
        line,
        details: details.into(),
    }
}

/// Reads `edges.tsv`: one `u<TAB>v` pair per line.
fn read_edges(path: &Path, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let u: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno + 1, "expected integer node id"))?;
        let v: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno + 1, "expected two tab-separated node ids"))?;
        if parts.next().is_some() {
            return Err(parse_err(path, lineno + 1, "expected exactly two columns"));
        }
        if u >= num_nodes || v >= num_nodes {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("edge ({u}, {v}) out of range for {num_nodes} nodes"),
            ));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Reads `features.tsv`: `num_nodes` lines of `feature_dim` finite floats.
fn read_features(path: &Path, num_nodes: usize, feature_dim: usize) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))?;
    let mut data = Vec::with_capacity(num_nodes * feature_dim);
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut cols = 0usize;
        for field in line.split('\t') {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("bad float {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno + 1, "non-finite feature value"));
            }
            data.push(v);
            cols += 1;
        }
        if cols != feature_dim {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected {feature_dim} feature columns, got {cols}"),
            ));
        }
        rows += 1;
    }
    if rows != num_nodes {
        return Err(SelmagError::Validation(format!(
            "{}: expected {num_nodes} feature rows, got {rows}",
            path.display()
        )));
    }
    Matrix::from_vec(num_nodes, feature_dim, data)
}

/// Reads a label file covering every node exactly once.
pub fn read_labels(path: &Path, num_nodes: usize, num_classes: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))?;
    let mut labels = vec![usize::MAX; num_nodes];
    let mut seen = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let node: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno + 1, "expected integer node id"))?;
        let class: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno + 1, "expected node_id<TAB>class_id"))?;
        if parts.next().is_some() {
            return Err(parse_err(path, lineno + 1, "expected exactly two columns"));
        }
        if node >= num_nodes {
            return Err(parse_err(path, lineno + 1, format!("node id {node} out of range")));
        }
        if class >= num_classes {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("class id {class} out of range for {num_classes} classes"),
            ));
        }
        if labels[node] != usize::MAX {
            return Err(parse_err(path, lineno + 1, format!("duplicate label for node {node}")));
        }
        labels[node] = class;
        seen += 1;
    }
    if seen != num_nodes {
        return Err(SelmagError::Validation(format!(
            "{}: labels cover {seen} of {num_nodes} nodes; partial label files are not supported",
            path.display()
        )));
    }
    Ok(labels)
}

fn load_domain(dir: &Path, name: &str, suite: &SuiteMeta, labeled: bool) -> Result<Graph> {
    let meta: DomainMeta = read_json(&dir.join("meta.json"))?;
    if meta.feature_dim != suite.feature_dim || meta.num_classes != suite.num_classes {
        return Err(SelmagError::Validation(format!(
            "domain {name}: meta.json disagrees with suite.json \
             (feature_dim {} vs {}, num_classes {} vs {})",
            meta.feature_dim, suite.feature_dim, meta.num_classes, suite.num_classes
        )));
    }
    let edges = read_edges(&dir.join("edges.tsv"), meta.num_nodes)?;
    let features = read_features(&dir.join("features.tsv"), meta.num_nodes, meta.feature_dim)?;
    let labels_path = dir.join("labels.tsv");
    let labels = if labeled {
        Some(read_labels(&labels_path, meta.num_nodes, meta.num_classes)?)
    } else {
        // A label file inside the target directory would let ground truth
        // leak into adaptation; refuse to load such a suite.
        if labels_path.exists() {
            return Err(SelmagError::Validation(format!(
                "target domain must be unlabeled, but {} exists",
                labels_path.display()
            )));
        }
        None
    };
    Graph::build(name, features, &edges, labels, meta.num_classes)
}

/// Loads a full suite from `dir`, validating cross-file consistency.
pub fn load_suite(dir: &Path) -> Result<DomainSet> {
    let suite_path = dir.join("suite.json");
    if !suite_path.exists() {
        return Err(SelmagError::MissingFile(suite_path));
    }
    let suite: SuiteMeta = read_json(&suite_path)?;
    if suite.num_sources == 0 {
        return Err(SelmagError::Validation(
            "suite.json: num_sources must be positive".to_string(),
        ));
    }
    let mut sources = Vec::with_capacity(suite.num_sources);
    for k in 0..suite.num_sources {
        let name = format!("source_{k}");
        let sub = dir.join(&name);
        if !sub.is_dir() {
            return Err(SelmagError::MissingFile(sub));
        }
        sources.push(load_domain(&sub, &name, &suite, true)?);
    }
    let target_dir = dir.join("target");
    if !target_dir.is_dir() {
        return Err(SelmagError::MissingFile(target_dir));
    }
    let target = load_domain(&target_dir, "target", &suite, false)?;
    Ok(DomainSet {
        sources,
        target,
        num_classes: suite.num_classes,
        feature_dim: suite.feature_dim,
    })
}

/// Loads the held-out target labels used only for computing metrics.
pub fn load_target_eval_labels(suite_dir: &Path, target: &Graph) -> Result<Vec<usize>> {
    let path = suite_dir.join("target_labels_eval.tsv");
    if !path.exists() {
        return Err(SelmagError::MissingFile(path));
    }
    read_labels(&path, target.num_nodes, target.num_classes)
}

/// Writes one domain directory in the suite format.
pub fn write_domain(dir: &Path, graph: &Graph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SelmagError::io(dir, e))?;
    let meta = DomainMeta {
        num_nodes: graph.num_nodes,
        feature_dim: graph.feature_dim(),
        num_classes: graph.num_classes,
    };
    write_json(&dir.join("meta.json"), &meta)?;

    let mut edges_text = String::new();
    for &(u, v) in &graph.edges {
        edges_text.push_str(&format!("{u}\t{v}\n"));
    }
    let edges_path = dir.join("edges.tsv");
    fs::write(&edges_path, edges_text).map_err(|e| SelmagError::io(&edges_path, e))?;

    let mut feat_text = String::new();
    for i in 0..graph.num_nodes {
        let row: Vec<String> = graph.features.row(i).iter().map(|v| v.to_string()).collect();
        feat_text.push_str(&row.join("\t"));
        feat_text.push('\n');
    }
    let feat_path = dir.join("features.tsv");
    fs::write(&feat_path, feat_text).map_err(|e| SelmagError::io(&feat_path, e))?;

    if let Some(ref labels) = graph.labels {
        let mut text = String::new();
        for (node, class) in labels.iter().enumerate() {
            text.push_str(&format!("{node}\t{class}\n"));
        }
        let path = dir.join("labels.tsv");
        fs::write(&path, text).map_err(|e| SelmagError::io(&path, e))?;
    }
    Ok(())
}

/// Writes the suite header; companion to [`write_domain`].
pub fn write_suite_meta(dir: &Path, meta: &SuiteMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SelmagError::io(dir, e))?;
    write_json(&dir.join("suite.json"), meta)
}

/// Writes a plain `node_id<TAB>class_id` label file.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::new();
    for (node, class) in labels.iter().enumerate() {
        text.push_str(&format!("{node}\t{class}\n"));
    }
    fs::write(path, text).map_err(|e| SelmagError::io(path, e))
}

/// Convenience for writers that need a path they may not have created yet.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SelmagError::io(dir, e))
}

pub use self::paths::suite_paths;

mod paths {
    use super::*;

    /// Canonical file locations inside a suite directory.
    pub fn suite_paths(dir: &Path) -> SuitePaths {
        SuitePaths {
            suite_json: dir.join("suite.json"),
            manifest_json: dir.join("manifest.json"),
            target_labels_eval: dir.join("target_labels_eval.tsv"),
        }
    }

    pub struct SuitePaths {
        pub suite_json: PathBuf,
        pub manifest_json: PathBuf,
        pub target_labels_eval: PathBuf,
    }
}

//! Synthetic multi-domain graph suites with controllable distribution shift.
//!
//! Each domain is a stochastic block model with one block per class, so graph
//! structure and labels stay correlated and structure-aware probe tasks carry
//! class-relevant signal. Node features are noisy class means, optionally
//! rotated in a fixed random 2-plane — a single interpretable shift knob —
//! and labels can be flipped at a configurable rate to simulate annotation
//! noise. A *shift schedule* assigns per-domain overrides; the default suite
//! keeps source 0 distributed identically to the target and makes sources
//! 1..4 progressively harder, giving selector tests a recoverable ground
//! truth ordering.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmagError};
use crate::graph::{
    write_domain, write_labels, write_suite_meta, DomainSet, Graph, SuiteMeta,
};
use crate::seeding::{derive_seed, seeded_rng};
use crate::tensor::Matrix;

/// An orthonormal pair spanning the plane in which features are rotated.
#[derive(Debug, Clone)]
pub struct RotationPlane {
    e_a: Vec<f64>,
    e_b: Vec<f64>,
}

impl RotationPlane {
    /// Draws a random 2-plane in `dim` dimensions (Gaussian directions,
    /// Gram-Schmidt orthonormalization).
    pub fn from_seed(dim: usize, seed: u64) -> RotationPlane {
        assert!(dim >= 2, "a rotation plane needs at least two dimensions");
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.sample(StandardNormal)).collect()
        };
        let u = sample(&mut rng);
        let mut e_a = u.clone();
        normalize(&mut e_a);
        // Re-draw the second direction until it is not parallel to the first;
        // with Gaussian draws a single attempt virtually always succeeds.
        loop {
            let v = sample(&mut rng);
            let proj: f64 = v.iter().zip(&e_a).map(|(a, b)| a * b).sum();
            let mut e_b: Vec<f64> = v.iter().zip(&e_a).map(|(vv, aa)| vv - proj * aa).collect();
            let norm: f64 = e_b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for x in &mut e_b {
                    *x /= norm;
                }
                return RotationPlane { e_a, e_b };
            }
        }
    }

    /// Rotates every row of `features` by `angle` radians within the plane.
    pub fn rotate_rows(&self, features: &mut Matrix, angle: f64) {
        if angle == 0.0 {
            return;
        }
        assert_eq!(features.cols(), self.e_a.len(), "rotation plane dimension mismatch");
        let (cos_m1, sin) = (angle.cos() - 1.0, angle.sin());
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            let a: f64 = row.iter().zip(&self.e_a).map(|(x, e)| x * e).sum();
            let b: f64 = row.iter().zip(&self.e_b).map(|(x, e)| x * e).sum();
            for ((x, ea), eb) in row.iter_mut().zip(&self.e_a).zip(&self.e_b) {
                *x += cos_m1 * (a * ea + b * eb) + sin * (a * eb - b * ea);
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 1e-12, "cannot normalize a zero vector");
    for x in v {
        *x /= norm;
    }
}

/// Full generative description of one domain.
#[derive(Debug, Clone)]
pub struct DomainGenParams {
    pub num_nodes: usize,
    /// Number of classes; the block model uses one block per class.
    pub num_classes: usize,
    pub num_blocks: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// `num_classes x feature_dim` class centroids.
    pub class_means: Matrix,
    pub noise_sigma: f64,
    pub feature_rotation_angle: f64,
    pub rotation_plane: RotationPlane,
    /// Class proportions; must sum to 1. Nodes are allocated to classes by
    /// largest-remainder rounding of these proportions, then shuffled, so
    /// requested proportions are met exactly up to integer rounding.
    pub class_proportions: Vec<f64>,
    pub label_flip_ratio: f64,
    pub seed: u64,
}

impl DomainGenParams {
    fn validate(&self) -> Result<()> {
        let fail = |details: String| {
            Err(SelmagError::InvalidArgument {
                op: "generate_domain",
                details,
            })
        };
        if self.num_classes == 0 || self.class_means.cols() == 0 {
            return fail("num_classes and feature_dim must be positive".into());
        }
        if self.num_blocks != self.num_classes {
            return fail(format!(
                "num_blocks ({}) must equal num_classes ({})",
                self.num_blocks, self.num_classes
            ));
        }
        if self.num_nodes == 0 {
            return fail("num_nodes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_inter)
            || !(0.0..=1.0).contains(&self.p_intra)
            || self.p_inter > self.p_intra
        {
            return fail(format!(
                "need 0 <= p_inter <= p_intra <= 1, got p_intra={} p_inter={}",
                self.p_intra, self.p_inter
            ));
        }
        if !(0.0..0.5).contains(&self.label_flip_ratio) {
            return fail(format!(
                "label_flip_ratio must lie in [0, 0.5), got {}",
                self.label_flip_ratio
            ));
        }
        if self.noise_sigma < 0.0 {
            return fail("noise_sigma must be nonnegative".into());
        }
        if self.class_means.rows() != self.num_classes {
            return fail(format!(
                "class_means has {} rows for {} classes",
                self.class_means.rows(),
                self.num_classes
            ));
        }
        if self.class_proportions.len() != self.num_classes {
            return fail("class_proportions length must equal num_classes".into());
        }
        let total: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return fail("class_proportions must be nonnegative and sum to 1".into());
        }
        Ok(())
    }
}

/// A generated domain: the observable graph (labels possibly flipped) plus
/// the clean generative labels used for held-out evaluation.
#[derive(Debug, Clone)]
pub struct GeneratedDomain {
    pub graph: Graph,
    pub clean_labels: Vec<usize>,
}

/// Allocates exact per-class counts by largest remainder, deterministically.
fn allocate_classes(n: usize, proportions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions.iter().map(|p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(c, p)| (c, p * n as f64 - counts[c] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    let mut labels = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(c).take(count));
    }
    labels
}

/// Samples one stochastic-block-model domain. Deterministic per seed: class
/// assignment, edges, feature noise, and label flips each draw from their own
/// purpose-tagged stream.
pub fn generate_domain(name: &str, params: &DomainGenParams) -> Result<GeneratedDomain> {
    params.validate()?;
    let n = params.num_nodes;
    let dim = params.class_means.cols();

    let mut labels = allocate_classes(n, &params.class_proportions);
    {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut seeded_rng(params.seed, "classes"));
    }

    let mut edges = Vec::new();
    {
        let mut rng = seeded_rng(params.seed, "edges");
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if labels[u] == labels[v] { params.p_intra } else { params.p_inter };
                if rng.gen::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
    }

    let mut features = Matrix::zeros(n, dim);
    {
        let mut rng = seeded_rng(params.seed, "features");
        for i in 0..n {
            let mean = params.class_means.row(labels[i]).to_vec();
            let row = features.row_mut(i);
            for (x, m) in row.iter_mut().zip(mean) {
                let noise: f64 = rng.sample(StandardNormal);
                *x = m + params.noise_sigma * noise;
            }
        }
        params
            .rotation_plane
            .rotate_rows(&mut features, params.feature_rotation_angle);
    }

    let mut observed = labels.clone();
    if params.label_flip_ratio > 0.0 {
        let mut rng = seeded_rng(params.seed, "flips");
        for label in observed.iter_mut() {
            if rng.gen::<f64>() < params.label_flip_ratio {
                // Flip to a uniformly chosen *different* class.
                let offset = rng.gen_range(1..params.num_classes);
                *label = (*label + offset) % params.num_classes;
            }
        }
    }

    let graph = Graph::build(name, features, &edges, Some(observed), params.num_classes)?;
    Ok(GeneratedDomain {
        graph,
        clean_labels: labels,
    })
}

/// Per-domain deviations from the suite's base generative parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub rotation_angle: f64,
    pub p_intra_delta: f64,
    pub p_inter_delta: f64,
    /// Standard deviation of an additive Gaussian offset applied to every
    /// class mean for this domain.
    pub mean_shift_sigma: f64,
    /// Overrides the uniform class proportions when set.
    pub class_proportions: Option<Vec<f64>>,
    pub label_flip_ratio: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            rotation_angle: 0.0,
            p_intra_delta: 0.0,
            p_inter_delta: 0.0,
            mean_shift_sigma: 0.0,
            class_proportions: None,
            label_flip_ratio: 0.0,
        }
    }
}

/// Shift assignments for every domain of a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSchedule {
    pub sources: Vec<DomainShift>,
    pub target: DomainShift,
}

/// Base generative parameters shared by all domains of a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteBaseParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub noise_sigma: f64,
    /// Scale of the Gaussian class centroids; smaller values make features
    /// less informative relative to the noise.
    pub mean_scale: f64,
    pub seed: u64,
}

/// Desk-scale defaults: 300-node domains, 16 features, 4 classes.
pub fn default_base_params(seed: u64) -> SuiteBaseParams {
    SuiteBaseParams {
        num_nodes: 300,
        num_classes: 4,
        feature_dim: 16,
        p_intra: 0.08,
        p_inter: 0.01,
        noise_sigma: 0.5,
        mean_scale: 0.6,
        seed,
    }
}

/// Default shift schedule: source 0 is distributed identically to the
/// target; sources 1..4 are progressively rotated (0.3 to 1.2 rad),
/// density-perturbed, and label-flipped.
pub fn default_schedule() -> ShiftSchedule {
    let mut sources = vec![DomainShift::default()];
    let intra_deltas = [0.02, -0.02, 0.03, -0.03];
    for j in 1..=4usize {
        sources.push(DomainShift {
            rotation_angle: 0.3 * j as f64,
            p_intra_delta: intra_deltas[j - 1],
            p_inter_delta: 0.002 * j as f64,
            mean_shift_sigma: 0.12 * j as f64,
            class_proportions: None,
            label_flip_ratio: 0.04 * j as f64,
        });
    }
    ShiftSchedule {
        sources,
        target: DomainShift::default(),
    }
}

/// Everything the generator knows about one emitted domain; stored in
/// `manifest.json` so a suite can be audited or re-derived.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainManifest {
    pub name: String,
    pub seed: u64,
    pub rotation_angle: f64,
    pub p_intra: f64,
    pub p_inter: f64,
    pub mean_shift_sigma: f64,
    pub label_flip_ratio: f64,
    pub class_proportions: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format_version: u32,
    pub seed: u64,
    pub base: SuiteBaseParams,
    pub domains: Vec<DomainManifest>,
}

/// A fully generated suite, before or after writing to disk.
#[derive(Debug, Clone)]
pub struct GeneratedSuite {
    pub domain_set: DomainSet,
    /// Clean generative target labels, for evaluation only.
    pub target_eval_labels: Vec<usize>,
    pub manifest: SuiteManifest,
}

/// Generates all domains of a suite in memory.
pub fn generate_suite(base: &SuiteBaseParams, schedule: &ShiftSchedule) -> Result<GeneratedSuite> {
    if schedule.sources.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "generate_suite",
            details: "schedule needs at least one source".into(),
        });
    }
    let class_means = {
        let mut rng = seeded_rng(base.seed, "class_means");
        Matrix::from_fn(base.num_classes, base.feature_dim, |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            base.mean_scale * g
        })
    };
    let plane = RotationPlane::from_seed(base.feature_dim, derive_seed(base.seed, "rotation_plane"));

    let uniform = vec![1.0 / base.num_classes as f64; base.num_classes];
    let mut manifest_domains = Vec::new();
    let mut build = |name: &str, shift: &DomainShift| -> Result<GeneratedDomain> {
        let mut means = class_means.clone();
        if shift.mean_shift_sigma > 0.0 {
            let mut rng = seeded_rng(base.seed, &format!("mean_shift/{name}"));
            for v in means.data_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v += shift.mean_shift_sigma * g;
            }
        }
        let params = DomainGenParams {
            num_nodes: base.num_nodes,
            num_classes: base.num_classes,
            num_blocks: base.num_classes,
            p_intra: base.p_intra + shift.p_intra_delta,
            p_inter: base.p_inter + shift.p_inter_delta,
            class_means: means,
            noise_sigma: base.noise_sigma,
            feature_rotation_angle: shift.rotation_angle,
            rotation_plane: plane.clone(),
            class_proportions: shift.class_proportions.clone().unwrap_or_else(|| uniform.clone()),
            label_flip_ratio: shift.label_flip_ratio,
            seed: derive_seed(base.seed, &format!("domain/{name}")),
        };
        manifest_domains.push(DomainManifest {
            name: name.to_string(),
            seed: params.seed,
            rotation_angle: params.feature_rotation_angle,
            p_intra: params.p_intra,
            p_inter: params.p_inter,
            mean_shift_sigma: shift.mean_shift_sigma,
            label_flip_ratio: params.label_flip_ratio,
            class_proportions: params.class_proportions.clone(),
        });
        generate_domain(name, &params)
    };

    let mut sources = Vec::with_capacity(schedule.sources.len());
    for (k, shift) in schedule.sources.iter().enumerate() {
        sources.push(build(&format!("source_{k}"), shift)?.graph);
    }
    let target_gen = build("target", &schedule.target)?;
    let mut target = target_gen.graph;
    // The in-memory target is unlabeled, exactly like the on-disk format.
    target.labels = None;

    Ok(GeneratedSuite {
        domain_set: DomainSet {
            sources,
            target,
            num_classes: base.num_classes,
            feature_dim: base.feature_dim,
        },
        target_eval_labels: target_gen.clean_labels,
        manifest: SuiteManifest {
            format_version: 1,
            seed: base.seed,
            base: base.clone(),
            domains: manifest_domains,
        },
    })
}

/// Writes a generated suite in the on-disk dataset format, including the
/// manifest and the held-out target labels. The `target/` directory never
/// receives a label file.
pub fn write_suite(dir: &Path, suite: &GeneratedSuite) -> Result<()> {
    let set = &suite.domain_set;
    write_suite_meta(
        dir,
        &SuiteMeta {
            num_sources: set.num_sources(),
            num_classes: set.num_classes,
            feature_dim: set.feature_dim,
        },
    )?;
    for (k, source) in set.sources.iter().enumerate() {
        write_domain(&dir.join(format!("source_{k}")), source)?;
    }
    write_domain(&dir.join("target"), &set.target)?;
    write_labels(&dir.join("target_labels_eval.tsv"), &suite.target_eval_labels)?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&suite.manifest).expect("serializable manifest");
    std::fs::write(&manifest_path, text + "\n").map_err(|e| SelmagError::io(&manifest_path, e))?;
    Ok(())
}

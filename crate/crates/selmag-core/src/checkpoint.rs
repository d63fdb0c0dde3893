//! Model checkpoints: a JSON map `param_name -> shape + row-major values`.
//!
//! The layout is a single JSON object:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "params": {
//!     "encoder.w1": { "shape": [16, 64], "data": [/* row-major f64 */] }
//!   }
//! }
//! ```
//!
//! Parameter names are sorted (BTreeMap), and floats serialize with
//! shortest-round-trip precision, so saving the same model twice produces
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmagError};
use crate::models::{Classifier, Encoder, Hypothesis};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// An in-memory checkpoint: named matrices, saved and loaded as JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Checkpoint {
    format_version: u32,
    params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint {
            format_version: 1,
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, m: &Matrix) {
        self.params.insert(
            name.to_string(),
            ParamEntry {
                shape: [m.rows(), m.cols()],
                data: m.data().to_vec(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<Matrix> {
        let entry = self.params.get(name).ok_or_else(|| {
            SelmagError::Validation(format!("checkpoint is missing parameter {name:?}"))
        })?;
        Matrix::from_vec(entry.shape[0], entry.shape[1], entry.data.clone())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("serializable checkpoint");
        std::fs::write(path, text).map_err(|e| SelmagError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(SelmagError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| SelmagError::json(path, e))?;
        if ckpt.format_version != 1 {
            return Err(SelmagError::Validation(format!(
                "{}: unsupported checkpoint format_version {}",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    // -- typed helpers ------------------------------------------------------

    pub fn insert_encoder(&mut self, prefix: &str, enc: &Encoder) {
        self.insert(&format!("{prefix}.w1"), &enc.w1);
        self.insert(&format!("{prefix}.b1"), &enc.b1);
        self.insert(&format!("{prefix}.w2"), &enc.w2);
        self.insert(&format!("{prefix}.b2"), &enc.b2);
    }

    pub fn read_encoder(&self, prefix: &str) -> Result<Encoder> {
        Ok(Encoder {
            w1: self.get(&format!("{prefix}.w1"))?,
            b1: self.get(&format!("{prefix}.b1"))?,
            w2: self.get(&format!("{prefix}.w2"))?,
            b2: self.get(&format!("{prefix}.b2"))?,
        })
    }

    pub fn insert_classifier(&mut self, prefix: &str, cls: &Classifier) {
        self.insert(&format!("{prefix}.w"), &cls.w);
        self.insert(&format!("{prefix}.b"), &cls.b);
    }

    pub fn read_classifier(&self, prefix: &str) -> Result<Classifier> {
        Ok(Classifier {
            w: self.get(&format!("{prefix}.w"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn insert_hypothesis(&mut self, prefix: &str, hyp: &Hypothesis) {
        self.insert_encoder(&format!("{prefix}.encoder"), &hyp.encoder);
        self.insert_classifier(&format!("{prefix}.classifier"), &hyp.classifier);
    }

    pub fn read_hypothesis(&self, prefix: &str) -> Result<Hypothesis> {
        Ok(Hypothesis {
            encoder: self.read_encoder(&format!("{prefix}.encoder"))?,
            classifier: self.read_classifier(&format!("{prefix}.classifier"))?,
        })
    }
}

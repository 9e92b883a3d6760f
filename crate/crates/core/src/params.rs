//! Named parameter tensors with a stable order.
//!
//! The store is the unit the optimizer, the checkpointer and the gradient
//! checker all iterate over, so insertion order is part of the contract:
//! two stores built by the same constructor enumerate identically.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Mat,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.tensors.len();
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            value,
        });
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.idx(name).map(|i| &self.tensors[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        let i = self.idx(name)?;
        Some(&mut self.tensors[i].value)
    }

    pub fn by_idx(&self, idx: usize) -> &NamedTensor {
        &self.tensors[idx]
    }

    pub fn by_idx_mut(&mut self, idx: usize) -> &mut NamedTensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if !t.value.is_finite() {
                return Err(Error::Numeric(format!(
                    "parameter {} contains non-finite values",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Gradient (or moment) buffers matching this store shape-for-shape.
    pub fn zeros_like(&self) -> GradStore {
        GradStore {
            grads: self
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.value.rows, t.value.cols))
                .collect(),
        }
    }
}

/// Per-parameter gradient buffers, index-aligned with a `ParamStore`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradStore {
    pub grads: Vec<Mat>,
}

impl GradStore {
    pub fn add_assign(&mut self, other: &GradStore) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for g in &mut self.grads {
            g.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

/// Truncated-normal initialization (BERT-style), clipped at two standard
/// deviations by resampling.
pub fn init_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = loop {
            // Box-Muller from two uniforms keeps us independent of rand_distr.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break z * std;
            }
        };
    }
    m
}

pub fn init_ones(rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, vec![1.0; rows * cols])
}

//! Module manifest: named slices over the flat parameter vector.
//!
//! A "module" is a fine-grained slice of the parameter vector that receives
//! its own scalar adaptation rate: an affine layer contributes a weight and
//! a bias module, a batch-norm layer contributes four (running mean, running
//! variance, weight, bias). The manifest is the implicit form of the 0-1
//! assignment matrix mapping each rate to its module's coordinates: applying
//! the matrix or its transpose is a scatter or a per-module reduction over
//! these ranges, never a dense matrix product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a module's coordinates are learned by gradient descent or are
/// batch-norm running statistics updated by running average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Trainable,
    RunningStat,
}

/// One named slice `[offset, offset + len)` of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: ModuleKind,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, gap-free partition of `[0, total_len)` into modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleManifest {
    entries: Vec<ManifestEntry>,
    total_len: usize,
}

impl ModuleManifest {
    /// Builds a manifest, checking that the entries partition the parameter
    /// vector exactly: in order, no overlap, no gap.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut cursor = 0usize;
        for e in &entries {
            if e.len == 0 {
                return Err(Error::config(format!("module {} has zero length", e.name)));
            }
            if e.offset != cursor {
                return Err(Error::config(format!(
                    "module {} starts at {}, expected {} (gap or overlap)",
                    e.name, e.offset, cursor
                )));
            }
            cursor += e.len;
        }
        Ok(ModuleManifest {
            entries,
            total_len: cursor,
        })
    }

    /// Number of modules (`d`).
    pub fn module_count(&self) -> usize {
        self.entries.len()
    }

    /// Total parameter count (`D`).
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ManifestEntry {
        &self.entries[index]
    }

    pub fn find(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let e = &self.entries[index];
        e.offset..e.offset + e.len
    }

    /// Number of trainable parameters (coordinates in `Trainable` modules).
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ModuleKind::Trainable)
            .map(|e| e.len)
            .sum()
    }

    /// Per-module reduction `Aᵀ v` realized over manifest ranges: the sum of
    /// `v` over each module's coordinates.
    pub fn reduce_per_module(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.total_len {
            return Err(Error::dimension(format!(
                "vector length {} does not match parameter count {}",
                v.len(),
                self.total_len
            )));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| v[e.offset..e.offset + e.len].iter().sum())
            .collect())
    }

    /// Scatter `A s` realized over manifest ranges: expands one scalar per
    /// module to the full parameter length.
    pub fn scatter(&self, per_module: &[f64]) -> Result<Vec<f64>> {
        if per_module.len() != self.entries.len() {
            return Err(Error::dimension(format!(
                "expected {} per-module values, got {}",
                self.entries.len(),
                per_module.len()
            )));
        }
        let mut out = vec![0.0; self.total_len];
        for (e, &s) in self.entries.iter().zip(per_module) {
            out[e.offset..e.offset + e.len].fill(s);
        }
        Ok(out)
    }
}

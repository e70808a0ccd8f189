//! Model architecture and parameter storage.
//!
//! A model is a stack of layers over a flat parameter vector. The layer set
//! is intentionally small — affine, batch normalization, relu, softmax —
//! which is enough to exercise per-module adaptation of both trainable
//! parameters and running statistics.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ManifestEntry, ModuleKind, ModuleManifest};
use crate::rng;

/// Default stabilizer added to variances before taking square roots.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Affine,
    BatchNorm,
    Relu,
    Softmax,
}

/// One layer of the stack. `input_dim == output_dim` for all kinds except
/// affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LayerSpec {
    pub fn affine(input_dim: usize, output_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Affine,
            input_dim,
            output_dim,
        }
    }

    pub fn batch_norm(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::BatchNorm,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn relu(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn softmax(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Softmax,
            input_dim: dim,
            output_dim: dim,
        }
    }
}

/// Validated architecture: layer stack, batch-norm epsilon and the module
/// manifest derived from the stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArch {
    layers: Vec<LayerSpec>,
    bn_epsilon: f64,
    manifest: ModuleManifest,
}

impl ModelArch {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        Self::with_epsilon(layers, BN_EPSILON)
    }

    pub fn with_epsilon(layers: Vec<LayerSpec>, bn_epsilon: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model must have at least one layer"));
        }
        if bn_epsilon <= 0.0 {
            return Err(Error::config("bn_epsilon must be positive"));
        }
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            if l.input_dim == 0 || l.output_dim == 0 {
                return Err(Error::config(format!("layer {i}: dimensions must be positive")));
            }
            if l.kind != LayerKind::Affine && l.input_dim != l.output_dim {
                return Err(Error::config(format!(
                    "layer {i}: {:?} requires input_dim == output_dim",
                    l.kind
                )));
            }
            if l.kind == LayerKind::Softmax && i != last {
                return Err(Error::config("softmax may appear only as the final layer"));
            }
            if i > 0 && layers[i - 1].output_dim != l.input_dim {
                return Err(Error::config(format!(
                    "layer {i}: input_dim {} does not match previous output_dim {}",
                    l.input_dim,
                    layers[i - 1].output_dim
                )));
            }
        }
        let manifest = build_manifest(&layers)?;
        Ok(ModelArch {
            layers,
            bn_epsilon,
            manifest,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn bn_epsilon(&self) -> f64 {
        self.bn_epsilon
    }

    pub fn manifest(&self) -> &ModuleManifest {
        &self.manifest
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn ends_with_softmax(&self) -> bool {
        self.layers.last().map(|l| l.kind) == Some(LayerKind::Softmax)
    }
}

fn build_manifest(layers: &[LayerSpec]) -> Result<ModuleManifest> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, kind: ModuleKind, len: usize, offset: &mut usize| {
        entries.push(ManifestEntry {
            name,
            kind,
            offset: *offset,
            len,
        });
        *offset += len;
    };
    for (i, l) in layers.iter().enumerate() {
        match l.kind {
            LayerKind::Affine => {
                push(
                    format!("layer{i}.affine.weight"),
                    ModuleKind::Trainable,
                    l.input_dim * l.output_dim,
                    &mut offset,
                );
                push(
                    format!("layer{i}.affine.bias"),
                    ModuleKind::Trainable,
                    l.output_dim,
                    &mut offset,
                );
            }
            LayerKind::BatchNorm => {
                push(
                    format!("layer{i}.bn.running_mean"),
                    ModuleKind::RunningStat,
                    l.output_dim,
                    &mut offset,
                );
                push(
                    format!("layer{i}.bn.running_var"),
                    ModuleKind::RunningStat,
                    l.output_dim,
                    &mut offset,
                );
                push(
                    format!("layer{i}.bn.weight"),
                    ModuleKind::Trainable,
                    l.output_dim,
                    &mut offset,
                );
                push(
                    format!("layer{i}.bn.bias"),
                    ModuleKind::Trainable,
                    l.output_dim,
                    &mut offset,
                );
            }
            LayerKind::Relu | LayerKind::Softmax => {}
        }
    }
    ModuleManifest::new(entries)
}

/// Flat parameter vector bound to an architecture.
///
/// Cloning copies the parameters but shares the architecture. A store is
/// never mutated by forward/backward; training code produces updated copies
/// or mutates explicitly through `params_mut`.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    arch: Arc<ModelArch>,
    params: Vec<f64>,
}

impl ParameterStore {
    /// Zero-initialized parameters with batch-norm identity (mean 0, var 1,
    /// weight 1, bias 0).
    pub fn zeros(arch: Arc<ModelArch>) -> Self {
        let mut params = vec![0.0; arch.manifest().total_len()];
        init_bn_identity(&arch, &mut params);
        ParameterStore { arch, params }
    }

    /// He-normal initialization for affine weights, zero biases, identity
    /// batch norm. Deterministic in `seed`.
    pub fn init(arch: Arc<ModelArch>, seed: u64) -> Self {
        let mut store = ParameterStore::zeros(arch.clone());
        let mut r = rng::stream(seed, &[rng::tag::MODEL_INIT]);
        for (i, l) in arch.layers().iter().enumerate() {
            if l.kind == LayerKind::Affine {
                let name = format!("layer{i}.affine.weight");
                let e = arch.manifest().find(&name).expect("affine weight module");
                let std = (2.0 / l.input_dim as f64).sqrt();
                let slice = &mut store.params[e.offset..e.offset + e.len];
                for w in slice {
                    let z: f64 = r.sample(StandardNormal);
                    *w = z * std;
                }
            }
        }
        store
    }

    pub fn from_params(arch: Arc<ModelArch>, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.manifest().total_len() {
            return Err(Error::dimension(format!(
                "expected {} parameters, got {}",
                arch.manifest().total_len(),
                params.len()
            )));
        }
        Ok(ParameterStore { arch, params })
    }

    pub fn arch(&self) -> &Arc<ModelArch> {
        &self.arch
    }

    pub fn manifest(&self) -> &ModuleManifest {
        self.arch.manifest()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn module(&self, name: &str) -> Result<&[f64]> {
        let e = self
            .manifest()
            .find(name)
            .ok_or_else(|| Error::usage(format!("no module named {name}")))?;
        Ok(&self.params[e.offset..e.offset + e.len])
    }

    pub fn module_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let e = self
            .manifest()
            .find(name)
            .cloned()
            .ok_or_else(|| Error::usage(format!("no module named {name}")))?;
        Ok(&mut self.params[e.offset..e.offset + e.len])
    }

    /// FNV-1a over the parameter bits; used to detect accidental mutation
    /// and stale forward caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.params {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

fn init_bn_identity(arch: &ModelArch, params: &mut [f64]) {
    for e in arch.manifest().entries() {
        if e.name.ends_with(".bn.running_var") || e.name.ends_with(".bn.weight") {
            params[e.offset..e.offset + e.len].fill(1.0);
        }
    }
}

/// Checkpoint: architecture (which includes the ordered module manifest)
/// plus the flat parameter array, in a single JSON document.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    arch: ModelArch,
    params: Vec<f64>,
}

impl ParameterStore {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = Checkpoint {
            arch: (*self.arch).clone(),
            params: self.params.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        let arch = ModelArch::with_epsilon(ckpt.arch.layers, ckpt.arch.bn_epsilon)?;
        ParameterStore::from_params(Arc::new(arch), ckpt.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> ModelArch {
        ModelArch::new(vec![
            LayerSpec::affine(3, 4),
            LayerSpec::batch_norm(4),
            LayerSpec::relu(4),
            LayerSpec::affine(4, 2),
            LayerSpec::softmax(2),
        ])
        .unwrap()
    }

    #[test]
    fn manifest_partitions_parameters() {
        let arch = mlp();
        let m = arch.manifest();
        // affine(3,4): 12 + 4, bn(4): 4*4, affine(4,2): 8 + 2
        assert_eq!(m.total_len(), 12 + 4 + 16 + 8 + 2);
        assert_eq!(m.module_count(), 8);
        let kinds: Vec<_> = m.entries().iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ModuleKind::Trainable,
                ModuleKind::Trainable,
                ModuleKind::RunningStat,
                ModuleKind::RunningStat,
                ModuleKind::Trainable,
                ModuleKind::Trainable,
                ModuleKind::Trainable,
                ModuleKind::Trainable,
            ]
        );
    }

    #[test]
    fn softmax_must_be_final() {
        let bad = ModelArch::new(vec![LayerSpec::softmax(3), LayerSpec::relu(3)]);
        assert!(bad.is_err());
    }

    #[test]
    fn init_is_deterministic_and_bn_identity() {
        let arch = Arc::new(mlp());
        let a = ParameterStore::init(arch.clone(), 9);
        let b = ParameterStore::init(arch.clone(), 9);
        assert_eq!(a.params(), b.params());
        assert!(a.module("layer1.bn.running_var").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.module("layer1.bn.running_mean").unwrap().iter().all(|&v| v == 0.0));
        let c = ParameterStore::init(arch, 10);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("ttpfl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let store = ParameterStore::init(Arc::new(mlp()), 3);
        store.save(&path).unwrap();
        let loaded = ParameterStore::load(&path).unwrap();
        assert_eq!(store.params(), loaded.params());
        assert_eq!(store.manifest(), loaded.manifest());
        std::fs::remove_file(&path).ok();
    }
}

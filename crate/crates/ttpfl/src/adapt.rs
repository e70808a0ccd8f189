//! Per-module adaptation: update directions, rate application and the
//! rate gradient.
//!
//! Each module `l` of the parameter vector gets a scalar adaptation rate
//! `alpha[l]`. For a batch of unlabeled inputs the update direction is
//!
//! * trainable modules: the negative entropy gradient at the global model,
//! * running-statistic modules: batch statistic minus stored statistic,
//!
//! and the adapted model is `w = w_G + scatter(alpha) ⊙ h`. Refining the
//! rates against labeled data needs only first-order information: the
//! gradient of the supervised loss in `alpha` is the module-wise inner
//! product of `h` with the parameter gradient at the adapted model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ModuleKind, ModuleManifest};
use crate::model::ParameterStore;
use crate::nn::{self, LossKind, StatsMode};
use crate::tensor::Tensor;

/// Which module kinds may receive nonzero adaptation rates. Used for the
/// params-only / stats-only ablations; masked-off rates stay exactly zero
/// through any sequence of updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModuleMask {
    #[default]
    All,
    /// Adapt trainable parameters only.
    ParamsOnly,
    /// Adapt running statistics only.
    StatsOnly,
}

impl ModuleMask {
    pub fn admits(&self, kind: ModuleKind) -> bool {
        match self {
            ModuleMask::All => true,
            ModuleMask::ParamsOnly => kind == ModuleKind::Trainable,
            ModuleMask::StatsOnly => kind == ModuleKind::RunningStat,
        }
    }
}

/// Learned vector of per-module adaptation rates with an ablation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRates {
    alpha: Vec<f64>,
    active: Vec<bool>,
}

impl AdaptationRates {
    /// All-zero rates (the training initialization) with the given mask.
    pub fn zeros(manifest: &ModuleManifest, mask: ModuleMask) -> Self {
        AdaptationRates {
            alpha: vec![0.0; manifest.module_count()],
            active: manifest.entries().iter().map(|e| mask.admits(e.kind)).collect(),
        }
    }

    /// Rates from explicit values; masked-off coordinates must be zero.
    pub fn from_values(
        manifest: &ModuleManifest,
        mask: ModuleMask,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != manifest.module_count() {
            return Err(Error::dimension(format!(
                "expected {} rates, got {}",
                manifest.module_count(),
                values.len()
            )));
        }
        let active: Vec<bool> = manifest.entries().iter().map(|e| mask.admits(e.kind)).collect();
        if values.iter().zip(&active).any(|(&v, &a)| !a && v != 0.0) {
            return Err(Error::usage("masked-off rate must be zero"));
        }
        Ok(AdaptationRates { alpha: values, active })
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.alpha.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// One plain gradient-descent step `alpha -= eta * grad`, skipping
    /// masked-off coordinates so they remain exactly zero.
    pub fn refine(&self, grad: &[f64], eta: f64) -> Result<AdaptationRates> {
        if grad.len() != self.alpha.len() {
            return Err(Error::dimension(format!(
                "gradient length {} vs {} rates",
                grad.len(),
                self.alpha.len()
            )));
        }
        if eta <= 0.0 {
            return Err(Error::usage("learning rate must be positive"));
        }
        let alpha = self
            .alpha
            .iter()
            .zip(grad)
            .zip(&self.active)
            .map(|((&a, &g), &act)| if act { a - eta * g } else { 0.0 })
            .collect();
        Ok(AdaptationRates {
            alpha,
            active: self.active.clone(),
        })
    }

    /// Coordinate-wise mean of several rate vectors, summed in the given
    /// order for bit-reproducibility. All inputs must share the mask.
    pub fn aggregate(rates: &[AdaptationRates]) -> Result<AdaptationRates> {
        let first = rates
            .first()
            .ok_or_else(|| Error::usage("cannot aggregate zero rate vectors"))?;
        let d = first.alpha.len();
        let mut sum = vec![0.0; d];
        for r in rates {
            if r.alpha.len() != d {
                return Err(Error::dimension("rate vectors of unequal length".to_string()));
            }
            if r.active != first.active {
                return Err(Error::usage("rate vectors with different masks"));
            }
            for (s, &a) in sum.iter_mut().zip(&r.alpha) {
                *s += a;
            }
        }
        let n = rates.len() as f64;
        for s in sum.iter_mut() {
            *s /= n;
        }
        Ok(AdaptationRates {
            alpha: sum,
            active: first.active.clone(),
        })
    }
}

/// Per-batch unsupervised update direction over the full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    h: Vec<f64>,
}

impl UpdateDirection {
    pub fn from_vec(h: Vec<f64>) -> Self {
        UpdateDirection { h }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn module(&self, manifest: &ModuleManifest, index: usize) -> &[f64] {
        &self.h[manifest.range(index)]
    }

    /// `max_l ‖h^[l]‖₂`, the module-wise direction norm bound.
    pub fn module_norm_bound(&self, manifest: &ModuleManifest) -> f64 {
        (0..manifest.module_count())
            .map(|l| {
                self.module(manifest, l)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Computes the update direction for one unlabeled batch at the global
/// model: negative entropy gradient for trainable modules (through a
/// batch-statistics forward pass), batch-minus-stored statistic for
/// running-statistic modules. Labels are never read.
pub fn compute_update_direction(
    model: &ParameterStore,
    batch: &Tensor,
) -> Result<UpdateDirection> {
    if batch.rows() < 2 {
        return Err(Error::DegenerateBatch {
            needed: 2,
            got: batch.rows(),
        });
    }
    let (_, cache) = nn::forward(model, batch, StatsMode::TrainStats)?;
    let grad = nn::backward(model, &cache, LossKind::Entropy, None)?;

    let manifest = model.manifest();
    let mut h = grad.into_full();
    for v in h.iter_mut() {
        *v = -*v;
    }
    // overwrite running-statistic slices with batch statistic − stored
    for stat in cache.batch_stats() {
        let layer = stat.layer;
        for (field, batch_value) in [("running_mean", &stat.mean), ("running_var", &stat.var)] {
            let name = format!("layer{layer}.bn.{field}");
            let e = manifest
                .find(&name)
                .ok_or_else(|| Error::usage(format!("missing module {name}")))?;
            let stored = &model.params()[e.offset..e.offset + e.len];
            for (i, hv) in h[e.offset..e.offset + e.len].iter_mut().enumerate() {
                *hv = batch_value[i] - stored[i];
            }
        }
    }
    Ok(UpdateDirection { h })
}

/// Applies `w = w_G + scatter(alpha) ⊙ h` without mutating the input model.
pub fn apply_adaptation(
    global: &ParameterStore,
    rates: &AdaptationRates,
    direction: &UpdateDirection,
) -> Result<ParameterStore> {
    let manifest = global.manifest();
    if rates.len() != manifest.module_count() {
        return Err(Error::dimension(format!(
            "{} rates for {} modules",
            rates.len(),
            manifest.module_count()
        )));
    }
    if direction.len() != manifest.total_len() {
        return Err(Error::dimension(format!(
            "direction length {} vs parameter count {}",
            direction.len(),
            manifest.total_len()
        )));
    }
    let mut adapted = global.clone();
    for (l, e) in manifest.entries().iter().enumerate() {
        let a = rates.values()[l];
        if a == 0.0 {
            continue;
        }
        let h = &direction.as_slice()[e.offset..e.offset + e.len];
        let w = &mut adapted.params_mut()[e.offset..e.offset + e.len];
        for (wv, &hv) in w.iter_mut().zip(h) {
            *wv += a * hv;
        }
    }
    Ok(adapted)
}

/// Module-wise inner products `⟨h^[l], g^[l]⟩`, optionally divided by the
/// square root of the module size to put gradients of differently sized
/// modules on a comparable scale.
pub fn module_inner_products(
    manifest: &ModuleManifest,
    h: &[f64],
    g: &[f64],
    normalize: bool,
) -> Result<Vec<f64>> {
    if h.len() != manifest.total_len() || g.len() != manifest.total_len() {
        return Err(Error::dimension(format!(
            "expected vectors of length {}, got {} and {}",
            manifest.total_len(),
            h.len(),
            g.len()
        )));
    }
    Ok(manifest
        .entries()
        .iter()
        .map(|e| {
            let dot: f64 = h[e.offset..e.offset + e.len]
                .iter()
                .zip(&g[e.offset..e.offset + e.len])
                .map(|(&a, &b)| a * b)
                .sum();
            if normalize {
                dot / (e.len as f64).sqrt()
            } else {
                dot
            }
        })
        .collect())
}

/// Gradient of the cross-entropy loss with respect to the adaptation rates
/// at the adapted model `w_k = w_G + scatter(alpha) ⊙ h`.
///
/// Computed without second-order derivatives: one frozen-statistics forward
/// and backward at `w_k` gives the parameter gradient `g`, and the chain
/// rule collapses to per-module inner products with `h`. With `normalize`
/// each product is divided by the square root of the module size.
pub fn alpha_gradient(
    adapted: &ParameterStore,
    direction: &UpdateDirection,
    batch: &Tensor,
    labels: &Tensor,
    normalize: bool,
) -> Result<Vec<f64>> {
    let manifest = adapted.manifest();
    if direction.len() != manifest.total_len() {
        return Err(Error::usage(format!(
            "direction length {} does not match model ({} parameters)",
            direction.len(),
            manifest.total_len()
        )));
    }
    let (_, cache) = nn::forward(adapted, batch, StatsMode::FrozenStats)?;
    let grad = nn::backward(adapted, &cache, LossKind::CrossEntropy, Some(labels))?;
    module_inner_products(manifest, direction.as_slice(), grad.full(), normalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestEntry;
    use crate::model::{LayerSpec, ModelArch};
    use std::sync::Arc;

    fn two_module_manifest() -> ModuleManifest {
        ModuleManifest::new(vec![
            ManifestEntry {
                name: "a".into(),
                kind: ModuleKind::Trainable,
                offset: 0,
                len: 2,
            },
            ManifestEntry {
                name: "b".into(),
                kind: ModuleKind::Trainable,
                offset: 2,
                len: 1,
            },
        ])
        .unwrap()
    }

    #[test]
    fn apply_adaptation_known_case() {
        // two modules: first two coordinates and the last one
        let arch = Arc::new(ModelArch::new(vec![LayerSpec::affine(1, 2), LayerSpec::softmax(2)]).unwrap());
        // modules: weight (len 2), bias (len 2) — adjust to the documented case
        // by using a hand-built store over weight=[1,1], bias=[2, 0]
        let mut store = ParameterStore::zeros(arch);
        store.params_mut().copy_from_slice(&[1.0, 1.0, 2.0, 0.0]);
        let rates = AdaptationRates::from_values(
            store.manifest(),
            ModuleMask::All,
            vec![2.0, 0.1],
        )
        .unwrap();
        let h = UpdateDirection::from_vec(vec![0.5, 0.5, -1.0, 0.0]);
        let adapted = apply_adaptation(&store, &rates, &h).unwrap();
        assert_eq!(adapted.params(), &[2.0, 2.0, 1.9, 0.0]);
        // input untouched
        assert_eq!(store.params(), &[1.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn zero_rates_are_identity_bitwise() {
        let arch = Arc::new(
            ModelArch::new(vec![
                LayerSpec::affine(3, 4),
                LayerSpec::batch_norm(4),
                LayerSpec::relu(4),
                LayerSpec::affine(4, 2),
                LayerSpec::softmax(2),
            ])
            .unwrap(),
        );
        let store = ParameterStore::init(arch, 21);
        let rates = AdaptationRates::zeros(store.manifest(), ModuleMask::All);
        let h = UpdateDirection::from_vec(vec![3.5; store.params().len()]);
        let adapted = apply_adaptation(&store, &rates, &h).unwrap();
        assert_eq!(adapted.params(), store.params());
    }

    #[test]
    fn one_hot_rate_changes_exactly_one_module() {
        let arch = Arc::new(
            ModelArch::new(vec![
                LayerSpec::affine(2, 3),
                LayerSpec::batch_norm(3),
                LayerSpec::affine(3, 2),
                LayerSpec::softmax(2),
            ])
            .unwrap(),
        );
        let store = ParameterStore::init(arch, 22);
        let manifest = store.manifest().clone();
        let h = UpdateDirection::from_vec((0..store.params().len()).map(|i| i as f64).collect());
        for l in 0..manifest.module_count() {
            let mut values = vec![0.0; manifest.module_count()];
            values[l] = 1.0;
            let rates =
                AdaptationRates::from_values(&manifest, ModuleMask::All, values).unwrap();
            let adapted = apply_adaptation(&store, &rates, &h).unwrap();
            for (m, e) in manifest.entries().iter().enumerate() {
                for i in e.offset..e.offset + e.len {
                    let expect = if m == l {
                        store.params()[i] + h.as_slice()[i]
                    } else {
                        store.params()[i]
                    };
                    assert_eq!(adapted.params()[i], expect);
                }
            }
        }
    }

    #[test]
    fn inner_products_with_sqrt_normalization() {
        // modules of lengths 1 and 4; products per coordinate [2] and [1,1,1,1]
        let manifest = ModuleManifest::new(vec![
            ManifestEntry {
                name: "m1".into(),
                kind: ModuleKind::Trainable,
                offset: 0,
                len: 1,
            },
            ManifestEntry {
                name: "m2".into(),
                kind: ModuleKind::Trainable,
                offset: 1,
                len: 4,
            },
        ])
        .unwrap();
        let h = vec![2.0, 1.0, 1.0, 1.0, 1.0];
        let g = vec![1.0, 1.0, 1.0, 1.0, 1.0];
        let normalized = module_inner_products(&manifest, &h, &g, true).unwrap();
        assert_eq!(normalized, vec![2.0, 2.0]);
        let raw = module_inner_products(&manifest, &h, &g, false).unwrap();
        assert_eq!(raw, vec![2.0, 4.0]);
    }

    #[test]
    fn orthogonal_directions_give_zero_gradient() {
        let manifest = two_module_manifest();
        let h = vec![1.0, -1.0, 0.0];
        let g = vec![1.0, 1.0, 5.0];
        // module a: <[1,-1],[1,1]> = 0; module b: <[0],[5]> = 0
        assert_eq!(
            module_inner_products(&manifest, &h, &g, true).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn refine_applies_step_and_respects_mask() {
        let manifest = two_module_manifest();
        let rates = AdaptationRates::zeros(&manifest, ModuleMask::All);
        let refined = rates.refine(&[1.0, -2.0], 0.1).unwrap();
        assert_eq!(refined.values(), &[-0.1, 0.2]);
        // zero gradient leaves rates unchanged
        let same = refined.refine(&[0.0, 0.0], 0.1).unwrap();
        assert_eq!(same.values(), refined.values());
    }

    #[test]
    fn stats_only_mask_pins_trainable_rates_to_zero() {
        let arch = Arc::new(
            ModelArch::new(vec![
                LayerSpec::affine(2, 3),
                LayerSpec::batch_norm(3),
                LayerSpec::affine(3, 2),
                LayerSpec::softmax(2),
            ])
            .unwrap(),
        );
        let manifest = arch.manifest();
        let mut rates = AdaptationRates::zeros(manifest, ModuleMask::StatsOnly);
        for step in 0..5 {
            let grad: Vec<f64> = (0..rates.len()).map(|i| (i + step) as f64).collect();
            rates = rates.refine(&grad, 0.3).unwrap();
        }
        for (e, &a) in manifest.entries().iter().zip(rates.values()) {
            if e.kind == ModuleKind::Trainable {
                assert_eq!(a, 0.0, "trainable module {} must stay masked", e.name);
            }
        }
        assert!(rates.values().iter().any(|&a| a != 0.0));
    }

    #[test]
    fn aggregate_is_coordinate_mean() {
        let manifest = two_module_manifest();
        let mk = |v: Vec<f64>| AdaptationRates::from_values(&manifest, ModuleMask::All, v).unwrap();
        let mean = AdaptationRates::aggregate(&[mk(vec![1.0, 0.0]), mk(vec![0.0, 1.0])]).unwrap();
        assert_eq!(mean.values(), &[0.5, 0.5]);
        let single = AdaptationRates::aggregate(&[mk(vec![2.0, -1.0])]).unwrap();
        assert_eq!(single.values(), &[2.0, -1.0]);
    }

    #[test]
    fn stat_direction_is_zero_when_batch_matches_running_stats() {
        let arch = Arc::new(
            ModelArch::new(vec![
                LayerSpec::batch_norm(2),
                LayerSpec::affine(2, 2),
                LayerSpec::softmax(2),
            ])
            .unwrap(),
        );
        let mut model = ParameterStore::init(arch, 33);
        let x = Tensor::from_rows(&[
            vec![1.0, -2.0],
            vec![3.0, 2.0],
            vec![-1.0, 0.0],
            vec![5.0, 4.0],
        ])
        .unwrap();
        let (mean, var) = nn::batch_mean_var(&x);
        model
            .module_mut("layer0.bn.running_mean")
            .unwrap()
            .copy_from_slice(&mean);
        model
            .module_mut("layer0.bn.running_var")
            .unwrap()
            .copy_from_slice(&var);
        let h = compute_update_direction(&model, &x).unwrap();
        let manifest = model.manifest();
        let mean_idx = manifest
            .entries()
            .iter()
            .position(|e| e.name == "layer0.bn.running_mean")
            .unwrap();
        let var_idx = manifest
            .entries()
            .iter()
            .position(|e| e.name == "layer0.bn.running_var")
            .unwrap();
        assert!(h.module(manifest, mean_idx).iter().all(|&v| v == 0.0));
        assert!(h.module(manifest, var_idx).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direction_requires_two_samples() {
        let arch = Arc::new(
            ModelArch::new(vec![
                LayerSpec::affine(2, 2),
                LayerSpec::softmax(2),
            ])
            .unwrap(),
        );
        let model = ParameterStore::init(arch, 34);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            compute_update_direction(&model, &x),
            Err(Error::DegenerateBatch { .. })
        ));
    }
}

//! Forward and backward passes for the affine / batch-norm / relu / softmax
//! layer stack, plus the cross-entropy and entropy losses.
//!
//! Two statistics modes govern batch normalization:
//!
//! * `TrainStats` — normalize with the current batch's mean and biased
//!   variance, and report those statistics per layer. This is the standard
//!   training-mode behaviour and is also what produces the batch statistics
//!   for running-average updates. Requires at least 2 samples.
//! * `FrozenStats` — normalize with the running statistics stored in the
//!   parameter vector. Each row is processed independently, so predictions do
//!   not depend on batch composition. In this mode the running statistics
//!   are genuine inputs of the computation and therefore receive gradients.

use crate::error::{Error, Result};
use crate::manifest::{ModuleKind, ModuleManifest};
use crate::model::{LayerKind, ParameterStore};
use crate::tensor::Tensor;

/// Batch-norm statistics source for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    TrainStats,
    FrozenStats,
}

/// Batch statistics (mean, biased variance) reported by one batch-norm
/// layer during a `TrainStats` forward pass.
#[derive(Debug, Clone)]
pub struct BatchStat {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BnCache {
    /// Mean and variance actually used for normalization.
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Normalized activations (before the affine transform).
    x_hat: Tensor,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug)]
pub struct ForwardCache {
    mode: StatsMode,
    /// Input activation of each layer; `activations[i]` feeds layer `i`,
    /// the last entry is the network output.
    activations: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
    batch_stats: Vec<BatchStat>,
    params_fingerprint: u64,
}

impl ForwardCache {
    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    /// Batch statistics per batch-norm layer (TrainStats mode only).
    pub fn batch_stats(&self) -> &[BatchStat] {
        &self.batch_stats
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache holds output")
    }
}

/// Runs the model on a batch. Returns per-row predictions and the cache
/// needed for a subsequent backward pass.
pub fn forward(
    model: &ParameterStore,
    batch: &Tensor,
    mode: StatsMode,
) -> Result<(Tensor, ForwardCache)> {
    let arch = model.arch();
    let (rows, cols) = batch.ensure_matrix("forward input")?;
    batch.ensure_finite("forward input")?;
    if rows == 0 {
        return Err(Error::dimension("forward: empty batch"));
    }
    if cols != arch.input_dim() {
        return Err(Error::dimension(format!(
            "forward: batch has {cols} features, model expects {}",
            arch.input_dim()
        )));
    }
    if mode == StatsMode::TrainStats
        && rows < 2
        && arch.layers().iter().any(|l| l.kind == LayerKind::BatchNorm)
    {
        return Err(Error::DegenerateBatch { needed: 2, got: rows });
    }

    let mut activations = Vec::with_capacity(arch.layers().len() + 1);
    activations.push(batch.clone());
    let mut bn_caches: Vec<Option<BnCache>> = Vec::with_capacity(arch.layers().len());
    let mut batch_stats = Vec::new();

    for (i, layer) in arch.layers().iter().enumerate() {
        let x = activations.last().expect("input activation");
        let y = match layer.kind {
            LayerKind::Affine => {
                bn_caches.push(None);
                affine_forward(model, i, x)?
            }
            LayerKind::BatchNorm => {
                let (y, cache) = bn_forward(model, i, x, mode)?;
                if mode == StatsMode::TrainStats {
                    batch_stats.push(BatchStat {
                        layer: i,
                        mean: cache.mean.clone(),
                        var: cache.var.clone(),
                    });
                }
                bn_caches.push(Some(cache));
                y
            }
            LayerKind::Relu => {
                bn_caches.push(None);
                relu_forward(x)
            }
            LayerKind::Softmax => {
                bn_caches.push(None);
                softmax_forward(x)
            }
        };
        y.ensure_finite("forward activation")?;
        activations.push(y);
    }

    let output = activations.last().expect("output").clone();
    if arch.ends_with_softmax() {
        debug_assert!(output
            .data()
            .chunks(output.cols())
            .all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-6));
    }
    let cache = ForwardCache {
        mode,
        activations,
        bn: bn_caches,
        batch_stats,
        params_fingerprint: model.fingerprint(),
    };
    Ok((output, cache))
}

fn affine_forward(model: &ParameterStore, layer: usize, x: &Tensor) -> Result<Tensor> {
    let w = model.module(&format!("layer{layer}.affine.weight"))?;
    let b = model.module(&format!("layer{layer}.affine.bias"))?;
    let (rows, in_dim) = (x.rows(), x.cols());
    let out_dim = b.len();
    let mut data = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = x.row(r);
        let yr = &mut data[r * out_dim..(r + 1) * out_dim];
        for (o, y) in yr.iter_mut().enumerate() {
            // weight stored row-major as (out_dim, in_dim)
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            *y = b[o] + dot(wrow, xr);
        }
    }
    Tensor::new(vec![rows, out_dim], data)
}

fn bn_forward(
    model: &ParameterStore,
    layer: usize,
    x: &Tensor,
    mode: StatsMode,
) -> Result<(Tensor, BnCache)> {
    let eps = model.arch().bn_epsilon();
    let gamma = model.module(&format!("layer{layer}.bn.weight"))?.to_vec();
    let beta = model.module(&format!("layer{layer}.bn.bias"))?.to_vec();
    let (rows, dim) = (x.rows(), x.cols());

    let (mean, var) = match mode {
        StatsMode::TrainStats => batch_mean_var(x),
        StatsMode::FrozenStats => (
            model.module(&format!("layer{layer}.bn.running_mean"))?.to_vec(),
            model.module(&format!("layer{layer}.bn.running_var"))?.to_vec(),
        ),
    };
    if var.iter().any(|&v| v < 0.0) {
        return Err(Error::numeric(format!("layer {layer}: negative variance")));
    }

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; rows * dim];
    let mut y = vec![0.0; rows * dim];
    for r in 0..rows {
        let xr = x.row(r);
        for f in 0..dim {
            let xh = (xr[f] - mean[f]) * inv_std[f];
            x_hat[r * dim + f] = xh;
            y[r * dim + f] = gamma[f] * xh + beta[f];
        }
    }
    let cache = BnCache {
        mean,
        var,
        x_hat: Tensor::new(vec![rows, dim], x_hat)?,
    };
    Ok((Tensor::new(vec![rows, dim], y)?, cache))
}

/// Sample mean and biased (1/B) variance per feature.
pub fn batch_mean_var(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, dim) = (x.rows(), x.cols());
    let n = rows as f64;
    let mut mean = vec![0.0; dim];
    for r in 0..rows {
        for (f, m) in mean.iter_mut().enumerate() {
            *m += x.row(r)[f];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for r in 0..rows {
        for (f, v) in var.iter_mut().enumerate() {
            let d = x.row(r)[f] - mean[f];
            *v += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let (rows, dim) = (x.rows(), x.cols());
    let mut y = vec![0.0; rows * dim];
    for r in 0..rows {
        let xr = x.row(r);
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for f in 0..dim {
            let e = (xr[f] - max).exp();
            y[r * dim + f] = e;
            sum += e;
        }
        for f in 0..dim {
            y[r * dim + f] /= sum;
        }
    }
    Tensor::new(vec![rows, dim], y).expect("softmax shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which loss to differentiate in [`backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Entropy,
}

/// Mean cross-entropy of predicted probabilities against one-hot labels.
///
/// Zero predicted probability at a true label is clamped to the 1e-12
/// floor; `clamped_rows` counts how often that happened so callers can
/// surface it in metrics.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropyLoss {
    pub value: f64,
    pub clamped_rows: usize,
}

const PROB_FLOOR: f64 = 1e-12;

pub fn cross_entropy(predictions: &Tensor, labels: &Tensor) -> Result<CrossEntropyLoss> {
    let (rows, classes) = predictions.ensure_matrix("cross_entropy predictions")?;
    check_probability_rows(predictions)?;
    let (lrows, lclasses) = labels.ensure_matrix("cross_entropy labels")?;
    if (lrows, lclasses) != (rows, classes) {
        return Err(Error::dimension(format!(
            "cross_entropy: predictions ({rows},{classes}) vs labels ({lrows},{lclasses})"
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for r in 0..rows {
        let p = predictions.row(r);
        let y = labels.row(r);
        let mut row_loss = 0.0;
        for c in 0..classes {
            if y[c] != 0.0 {
                let mut pc = p[c];
                if pc < PROB_FLOOR {
                    pc = PROB_FLOOR;
                    clamped += 1;
                }
                row_loss -= y[c] * pc.ln();
            }
        }
        total += row_loss;
    }
    Ok(CrossEntropyLoss {
        value: total / rows as f64,
        clamped_rows: clamped,
    })
}

/// Mean Shannon entropy of prediction rows, with 0·log 0 := 0.
/// Always in `[0, ln C]`.
pub fn entropy_loss(predictions: &Tensor) -> Result<f64> {
    let (rows, _classes) = predictions.ensure_matrix("entropy predictions")?;
    check_probability_rows(predictions)?;
    let mut total = 0.0;
    for r in 0..rows {
        for &p in predictions.row(r) {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    Ok(total / rows as f64)
}

fn check_probability_rows(t: &Tensor) -> Result<()> {
    t.ensure_finite("probabilities")?;
    let (rows, _) = t.ensure_matrix("probabilities")?;
    for r in 0..rows {
        let row = t.row(r);
        if row.iter().any(|&p| p < -1e-12) {
            return Err(Error::numeric("negative probability".to_string()));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::numeric(format!("probability row sums to {s}")));
        }
    }
    Ok(())
}

/// Gradient of a loss with respect to the full parameter vector.
///
/// Coordinates of running-statistic modules are zero when the cache came
/// from a `TrainStats` pass (batch statistics are used there, not the
/// stored ones); in `FrozenStats` mode the stored statistics are inputs of
/// the normalization and carry their true gradients.
#[derive(Debug, Clone)]
pub struct Gradient {
    full: Vec<f64>,
}

impl Gradient {
    pub fn full(&self) -> &[f64] {
        &self.full
    }

    pub fn into_full(self) -> Vec<f64> {
        self.full
    }

    /// Packs the coordinates of trainable modules, in manifest order. This
    /// is the gradient over all trainable parameters; running statistics
    /// receive no entry.
    pub fn trainable(&self, manifest: &ModuleManifest) -> Vec<f64> {
        let mut out = Vec::with_capacity(manifest.trainable_len());
        for e in manifest.entries() {
            if e.kind == ModuleKind::Trainable {
                out.extend_from_slice(&self.full[e.offset..e.offset + e.len]);
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.full.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Backpropagates `loss_kind` through a cached forward pass.
///
/// The model must end in a softmax layer; both losses are differentiated
/// through the logits, which keeps the entropy gradient finite even for
/// saturated predictions. Labels are required for cross-entropy and
/// rejected for entropy. A cache from different parameters is rejected.
pub fn backward(
    model: &ParameterStore,
    cache: &ForwardCache,
    loss_kind: LossKind,
    labels: Option<&Tensor>,
) -> Result<Gradient> {
    if cache.params_fingerprint != model.fingerprint() {
        return Err(Error::usage(
            "stale cache: parameters changed since the forward pass",
        ));
    }
    let arch = model.arch();
    if !arch.ends_with_softmax() {
        return Err(Error::usage("backward requires a softmax output layer"));
    }
    let probs = cache.output();
    let (rows, classes) = (probs.rows(), probs.cols());

    // d(loss)/d(logits), already averaged over the batch.
    let mut delta = match loss_kind {
        LossKind::CrossEntropy => {
            let labels = labels.ok_or_else(|| Error::usage("cross-entropy backward needs labels"))?;
            let (lr, lc) = labels.ensure_matrix("labels")?;
            if (lr, lc) != (rows, classes) {
                return Err(Error::dimension(format!(
                    "labels ({lr},{lc}) vs predictions ({rows},{classes})"
                )));
            }
            let mut d = vec![0.0; rows * classes];
            for r in 0..rows {
                for c in 0..classes {
                    d[r * classes + c] = (probs.row(r)[c] - labels.row(r)[c]) / rows as f64;
                }
            }
            d
        }
        LossKind::Entropy => {
            if labels.is_some() {
                return Err(Error::usage("entropy backward takes no labels"));
            }
            // logits are the input of the softmax layer
            let logits = &cache.activations[arch.layers().len() - 1];
            let mut d = vec![0.0; rows * classes];
            for r in 0..rows {
                let z = logits.row(r);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                let p = probs.row(r);
                // row entropy via log-probabilities, 0·log 0 -> 0
                let h: f64 = p
                    .iter()
                    .zip(z)
                    .map(|(&pc, &zc)| if pc > 0.0 { -pc * (zc - lse) } else { 0.0 })
                    .sum();
                for c in 0..classes {
                    let logp = z[c] - lse;
                    d[r * classes + c] = -p[c] * (logp + h) / rows as f64;
                }
            }
            d
        }
    };

    let mut grad = vec![0.0; model.manifest().total_len()];
    // softmax layer itself is folded into delta; walk the rest in reverse
    for (i, layer) in arch.layers().iter().enumerate().rev() {
        let x = &cache.activations[i];
        match layer.kind {
            LayerKind::Softmax => {}
            LayerKind::Relu => {
                let dim = layer.output_dim;
                for r in 0..x.rows() {
                    for f in 0..dim {
                        if x.row(r)[f] <= 0.0 {
                            delta[r * dim + f] = 0.0;
                        }
                    }
                }
            }
            LayerKind::Affine => {
                delta = affine_backward(model, i, x, &delta, &mut grad)?;
            }
            LayerKind::BatchNorm => {
                let bn = cache.bn[i].as_ref().expect("bn cache");
                delta = bn_backward(model, i, x, bn, cache.mode, &delta, &mut grad)?;
            }
        }
    }
    Ok(Gradient { full: grad })
}

fn affine_backward(
    model: &ParameterStore,
    layer: usize,
    x: &Tensor,
    delta: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let manifest = model.manifest();
    let we = manifest
        .find(&format!("layer{layer}.affine.weight"))
        .expect("affine weight");
    let be = manifest
        .find(&format!("layer{layer}.affine.bias"))
        .expect("affine bias");
    let w = model.params()[we.offset..we.offset + we.len].to_vec();
    let (rows, in_dim) = (x.rows(), x.cols());
    let out_dim = be.len;

    for r in 0..rows {
        let xr = x.row(r);
        let dr = &delta[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            grad[be.offset + o] += dr[o];
            let wg = &mut grad[we.offset + o * in_dim..we.offset + (o + 1) * in_dim];
            for (i, g) in wg.iter_mut().enumerate() {
                *g += dr[o] * xr[i];
            }
        }
    }
    let mut dx = vec![0.0; rows * in_dim];
    for r in 0..rows {
        let dr = &delta[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += dr[o] * wrow[i];
            }
        }
    }
    Ok(dx)
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    model: &ParameterStore,
    layer: usize,
    x: &Tensor,
    bn: &BnCache,
    mode: StatsMode,
    delta: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let eps = model.arch().bn_epsilon();
    let manifest = model.manifest();
    let me = manifest
        .find(&format!("layer{layer}.bn.running_mean"))
        .expect("bn mean");
    let ve = manifest
        .find(&format!("layer{layer}.bn.running_var"))
        .expect("bn var");
    let ge = manifest.find(&format!("layer{layer}.bn.weight")).expect("bn weight");
    let be = manifest.find(&format!("layer{layer}.bn.bias")).expect("bn bias");
    let gamma = model.params()[ge.offset..ge.offset + ge.len].to_vec();
    let (rows, dim) = (x.rows(), x.cols());
    let n = rows as f64;

    // gamma/beta gradients are the same in both modes
    for r in 0..rows {
        for f in 0..dim {
            let d = delta[r * dim + f];
            grad[ge.offset + f] += d * bn.x_hat.row(r)[f];
            grad[be.offset + f] += d;
        }
    }

    let inv_std: Vec<f64> = bn.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut dx = vec![0.0; rows * dim];
    match mode {
        StatsMode::FrozenStats => {
            // stats are parameters here: y = γ·(x−μ)·inv_std + β
            for f in 0..dim {
                let mut dsum = 0.0;
                let mut dvar_sum = 0.0;
                for r in 0..rows {
                    let d = delta[r * dim + f];
                    dsum += d;
                    dvar_sum += d * (x.row(r)[f] - bn.mean[f]);
                    dx[r * dim + f] = d * gamma[f] * inv_std[f];
                }
                grad[me.offset + f] += -gamma[f] * inv_std[f] * dsum;
                grad[ve.offset + f] +=
                    -0.5 * gamma[f] * inv_std[f].powi(3) * dvar_sum;
            }
        }
        StatsMode::TrainStats => {
            // batch statistics are functions of x; standard train-mode backward
            for f in 0..dim {
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for r in 0..rows {
                    let dxhat = delta[r * dim + f] * gamma[f];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * bn.x_hat.row(r)[f];
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                for r in 0..rows {
                    let dxhat = delta[r * dim + f] * gamma[f];
                    dx[r * dim + f] = inv_std[f]
                        * (dxhat - mean_dxhat - bn.x_hat.row(r)[f] * mean_dxhat_xhat);
                }
            }
        }
    }
    Ok(dx)
}

/// Row-wise argmax with lowest-index tie break.
pub fn predict_argmax(predictions: &Tensor) -> Vec<usize> {
    (0..predictions.rows())
        .map(|r| {
            let row = predictions.row(r);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

//! Client populations under configurable distribution shifts.
//!
//! A shared Gaussian-mixture generative model (class means on a scaled
//! simplex, shared isotropic covariance) produces the base data. Each
//! client then gets its own distribution:
//!
//! * label shift — a step partition: a few over-represented major classes,
//!   the rest minor, drawn per client;
//! * feature shift — a per-client affine corruption `x → r·x + Δ + ε`
//!   applied to every sample, with target clients drawing their corruption
//!   parameters from a wider range than source clients;
//! * hybrid — both.
//!
//! Populations are fully reproducible from (config, seed).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Base generative model configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Class mean of class `c` is `class_mean_scale · e_c`.
    pub class_mean_scale: f64,
    /// Standard deviation of the shared isotropic class covariance.
    pub class_std: f64,
}

/// Gaussian class-conditional mixture with known Bayes rule.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    std: f64,
}

impl GaussianMixture {
    pub fn new(cfg: &MixtureConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if cfg.feature_dim < cfg.num_classes {
            return Err(Error::config(format!(
                "feature_dim {} must be >= num_classes {} for simplex means",
                cfg.feature_dim, cfg.num_classes
            )));
        }
        if cfg.class_std <= 0.0 || cfg.class_mean_scale <= 0.0 {
            return Err(Error::config("class_std and class_mean_scale must be positive"));
        }
        let means = (0..cfg.num_classes)
            .map(|c| {
                let mut m = vec![0.0; cfg.feature_dim];
                m[c] = cfg.class_mean_scale;
                m
            })
            .collect();
        Ok(GaussianMixture {
            means,
            std: cfg.class_std,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn class_std(&self) -> f64 {
        self.std
    }

    pub fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|&m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Exact posterior `p(y | x)` under a given label prior.
    pub fn bayes_posterior(&self, x: &[f64], prior: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(prior)
            .map(|(m, &p)| {
                let sq: f64 = x.iter().zip(m).map(|(&xi, &mi)| (xi - mi) * (xi - mi)).sum();
                p.ln() - sq / (2.0 * self.std * self.std)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / sum).collect()
    }

    /// Affine classifier `(weight, bias)` whose softmax equals the Bayes
    /// posterior under `prior`: weight row `c` is `μ_c/σ²`, bias is
    /// `−‖μ_c‖²/(2σ²) + ln π_c`.
    pub fn bayes_affine_classifier(&self, prior: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.feature_dim();
        let s2 = self.std * self.std;
        let mut weight = vec![0.0; self.num_classes() * p];
        let mut bias = vec![0.0; self.num_classes()];
        for (c, m) in self.means.iter().enumerate() {
            for (i, &mi) in m.iter().enumerate() {
                weight[c * p + i] = mi / s2;
            }
            let norm_sq: f64 = m.iter().map(|&v| v * v).sum();
            bias[c] = -norm_sq / (2.0 * s2) + prior[c].ln();
        }
        (weight, bias)
    }
}

/// Kind of distribution shift across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Label,
    Feature,
    Hybrid,
}

/// Per-client corruption parameter ranges. The scale is drawn log-uniformly,
/// offset and noise level uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionRange {
    pub scale: (f64, f64),
    pub offset: (f64, f64),
    pub noise: (f64, f64),
}

impl CorruptionRange {
    pub fn identity() -> Self {
        CorruptionRange {
            scale: (1.0, 1.0),
            offset: (0.0, 0.0),
            noise: (0.0, 0.0),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Corruption {
        let scale = if self.scale.0 == self.scale.1 {
            self.scale.0
        } else {
            (rng.gen_range(self.scale.0.ln()..self.scale.1.ln())).exp()
        };
        let offset = if self.offset.0 == self.offset.1 {
            self.offset.0
        } else {
            rng.gen_range(self.offset.0..self.offset.1)
        };
        let noise = if self.noise.0 == self.noise.1 {
            self.noise.0
        } else {
            rng.gen_range(self.noise.0..self.noise.1)
        };
        Corruption {
            scale,
            offset,
            noise_std: noise,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scale.0 <= 0.0 || self.scale.1 < self.scale.0 {
            return Err(Error::config("corruption scale range must be positive and ordered"));
        }
        if self.offset.1 < self.offset.0 || self.noise.1 < self.noise.0 || self.noise.0 < 0.0 {
            return Err(Error::config("corruption offset/noise ranges out of order"));
        }
        Ok(())
    }
}

/// A materialized per-client affine feature corruption `x → r·x + Δ + ε`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Corruption {
    pub scale: f64,
    pub offset: f64,
    pub noise_std: f64,
}

impl Corruption {
    pub fn identity() -> Self {
        Corruption {
            scale: 1.0,
            offset: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.offset == 0.0 && self.noise_std == 0.0
    }

    fn apply(&self, x: &mut [f64], rng: &mut ChaCha8Rng) {
        for v in x.iter_mut() {
            let eps: f64 = if self.noise_std > 0.0 {
                self.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *v = self.scale * *v + self.offset + eps;
        }
    }
}

/// Shift configuration: step partition parameters plus corruption ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    /// Number of over-represented classes per client.
    pub major_classes: usize,
    pub major_per_class: usize,
    pub minor_per_class: usize,
    pub source_corruption: CorruptionRange,
    pub target_corruption: CorruptionRange,
}

impl ShiftConfig {
    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.major_classes == 0 || self.major_classes >= num_classes {
            return Err(Error::config(format!(
                "major_classes must be in 1..{num_classes}"
            )));
        }
        if self.major_per_class == 0 || self.minor_per_class == 0 {
            return Err(Error::config("per-class counts must be positive"));
        }
        self.source_corruption.validate()?;
        self.target_corruption.validate()?;
        let total = self.samples_per_client(num_classes);
        if matches!(self.kind, ShiftKind::None | ShiftKind::Feature) && total % num_classes != 0 {
            return Err(Error::config(format!(
                "uniform allocation needs samples per client ({total}) divisible by {num_classes}"
            )));
        }
        Ok(())
    }

    pub fn samples_per_client(&self, num_classes: usize) -> usize {
        let minor = num_classes - self.major_classes;
        self.major_classes * self.major_per_class + minor * self.minor_per_class
    }

    fn uses_label_shift(&self) -> bool {
        matches!(self.kind, ShiftKind::Label | ShiftKind::Hybrid)
    }

    fn uses_feature_shift(&self) -> bool {
        matches!(self.kind, ShiftKind::Feature | ShiftKind::Hybrid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    Source,
    Target,
}

/// Which samples of a source client to iterate over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Pretraining split.
    Train,
    /// Rate-learning split.
    Validation,
    /// Everything (target clients).
    All,
}

/// One batch of labeled data. Adaptation code receives only `features`;
/// labels are consumed by supervised refinement and evaluation.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// A client with a materialized dataset.
#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub id: usize,
    pub role: ClientRole,
    pub label_prior: Vec<f64>,
    pub corruption: Corruption,
    features: Tensor,
    labels: Vec<usize>,
    train_count: usize,
}

impl ClientSpec {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Ground-truth labels. Test-time adaptation never sees these; they are
    /// read by supervised refinement on source clients and by evaluators.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match (self.role, split) {
            (ClientRole::Source, Split::Train) => 0..self.train_count,
            (ClientRole::Source, Split::Validation) => self.train_count..self.labels.len(),
            _ => 0..self.labels.len(),
        }
    }

    /// Splits the selected samples into batches of exactly `batch_size`
    /// (final short batch dropped), optionally shuffling sample order first.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        shuffle: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let range = self.split_range(split);
        let mut order: Vec<usize> = range.collect();
        if let Some(rng) = shuffle {
            order.shuffle(rng);
        }
        let p = self.features.cols();
        let mut batches = Vec::new();
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size {
                break; // drop-last
            }
            let mut data = Vec::with_capacity(batch_size * p);
            let mut labels = Vec::with_capacity(batch_size);
            for &i in chunk {
                data.extend_from_slice(self.features.row(i));
                labels.push(self.labels[i]);
            }
            batches.push(Batch {
                features: Tensor::new(vec![batch_size, p], data)?,
                labels,
            });
        }
        Ok(batches)
    }
}

/// Sampled federation: sources first, then targets, plus the shared
/// generative model they were drawn from.
#[derive(Debug, Clone)]
pub struct ClientPopulation {
    pub clients: Vec<ClientSpec>,
    pub mixture: GaussianMixture,
    pub num_sources: usize,
}

impl ClientPopulation {
    pub fn sources(&self) -> &[ClientSpec] {
        &self.clients[..self.num_sources]
    }

    pub fn targets(&self) -> &[ClientSpec] {
        &self.clients[self.num_sources..]
    }
}

/// Population-level configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub mixture: MixtureConfig,
    pub shift: ShiftConfig,
    pub num_sources: usize,
    pub num_targets: usize,
    /// Fraction of each source client's samples used for pretraining; the
    /// rest is the validation split on which adaptation rates are learned.
    pub train_fraction: f64,
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sources == 0 || self.num_targets == 0 {
            return Err(Error::config("need at least one source and one target client"));
        }
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            return Err(Error::config("train_fraction must be in (0, 1)"));
        }
        self.shift.validate(self.mixture.num_classes)?;
        GaussianMixture::new(&self.mixture).map(|_| ())
    }
}

/// Draws `num_sources + num_targets` clients i.i.d. from the meta
/// distribution induced by the shift config. Deterministic in `seed`.
pub fn sample_population(cfg: &PopulationConfig, seed: u64) -> Result<ClientPopulation> {
    cfg.validate()?;
    let mixture = GaussianMixture::new(&cfg.mixture)?;
    let total = cfg.num_sources + cfg.num_targets;
    let mut clients = Vec::with_capacity(total);
    for idx in 0..total {
        let role = if idx < cfg.num_sources {
            ClientRole::Source
        } else {
            ClientRole::Target
        };
        let mut r = rng::stream(seed, &[rng::tag::POPULATION, idx as u64]);
        clients.push(sample_client(cfg, &mixture, idx, role, &mut r)?);
    }
    Ok(ClientPopulation {
        clients,
        mixture,
        num_sources: cfg.num_sources,
    })
}

fn sample_client(
    cfg: &PopulationConfig,
    mixture: &GaussianMixture,
    id: usize,
    role: ClientRole,
    r: &mut ChaCha8Rng,
) -> Result<ClientSpec> {
    let c = mixture.num_classes();
    let shift = &cfg.shift;

    // per-class sample counts
    let counts: Vec<usize> = if shift.uses_label_shift() {
        let mut classes: Vec<usize> = (0..c).collect();
        classes.shuffle(r);
        let majors = &classes[..shift.major_classes];
        (0..c)
            .map(|cl| {
                if majors.contains(&cl) {
                    shift.major_per_class
                } else {
                    shift.minor_per_class
                }
            })
            .collect()
    } else {
        let per = shift.samples_per_client(c) / c;
        vec![per; c]
    };
    let total: usize = counts.iter().sum();
    let label_prior: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();

    let corruption = if shift.uses_feature_shift() {
        match role {
            ClientRole::Source => shift.source_corruption.draw(r),
            ClientRole::Target => shift.target_corruption.draw(r),
        }
    } else {
        Corruption::identity()
    };

    // materialize and shuffle sample order
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(total);
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut x = mixture.sample(class, r);
            corruption.apply(&mut x, r);
            samples.push((x, class));
        }
    }
    samples.shuffle(r);

    let features = Tensor::from_rows(&samples.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = samples.iter().map(|&(_, y)| y).collect();
    let train_count = match role {
        ClientRole::Source => ((total as f64) * cfg.train_fraction).round() as usize,
        ClientRole::Target => total,
    };
    Ok(ClientSpec {
        id,
        role,
        label_prior,
        corruption,
        features,
        labels,
        train_count,
    })
}

/// Loads an external dataset from CSV: feature columns followed by one
/// integer label column. No header handling beyond skipping a first line
/// that fails to parse as numbers.
pub fn load_csv_dataset(path: &std::path::Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        let Some(values) = parsed else {
            if lineno == 0 {
                continue; // header
            }
            return Err(Error::config(format!("line {}: non-numeric field", lineno + 1)));
        };
        if values.len() < 2 {
            return Err(Error::config(format!("line {}: need features + label", lineno + 1)));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::config(format!("line {}: ragged row", lineno + 1)))
            }
            _ => {}
        }
        let label = values[values.len() - 1];
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::config(format!(
                "line {}: label must be a nonnegative integer",
                lineno + 1
            )));
        }
        labels.push(label as usize);
        features.push(values[..values.len() - 1].to_vec());
    }
    if features.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    Ok((features, labels))
}

/// Partitions an external labeled pool into clients using the same shift
/// generators as the synthetic path. Samples are drawn without replacement
/// from per-class pools; demand above the pool size is a configuration
/// error.
pub fn partition_pool(
    features: &[Vec<f64>],
    labels: &[usize],
    shift: &ShiftConfig,
    num_classes: usize,
    num_sources: usize,
    num_targets: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<ClientPopulation> {
    shift.validate(num_classes)?;
    if features.len() != labels.len() {
        return Err(Error::dimension("features/labels length mismatch".to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::config(format!("label {bad} out of range")));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    let mut order_rng = rng::stream(seed, &[rng::tag::POPULATION, u64::MAX]);
    for pool in pools.iter_mut() {
        pool.shuffle(&mut order_rng);
    }
    let mut cursor = vec![0usize; num_classes];

    let total_clients = num_sources + num_targets;
    let mut clients = Vec::with_capacity(total_clients);
    for idx in 0..total_clients {
        let role = if idx < num_sources {
            ClientRole::Source
        } else {
            ClientRole::Target
        };
        let mut r = rng::stream(seed, &[rng::tag::POPULATION, idx as u64]);
        let counts: Vec<usize> = if shift.uses_label_shift() {
            let mut classes: Vec<usize> = (0..num_classes).collect();
            classes.shuffle(&mut r);
            let majors = &classes[..shift.major_classes];
            (0..num_classes)
                .map(|cl| {
                    if majors.contains(&cl) {
                        shift.major_per_class
                    } else {
                        shift.minor_per_class
                    }
                })
                .collect()
        } else {
            vec![shift.samples_per_client(num_classes) / num_classes; num_classes]
        };
        let corruption = if shift.uses_feature_shift() {
            match role {
                ClientRole::Source => shift.source_corruption.draw(&mut r),
                ClientRole::Target => shift.target_corruption.draw(&mut r),
            }
        } else {
            Corruption::identity()
        };

        let total: usize = counts.iter().sum();
        let label_prior: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(total);
        for (class, &n) in counts.iter().enumerate() {
            if cursor[class] + n > pools[class].len() {
                return Err(Error::config(format!(
                    "class {class}: demand exceeds pool ({} available, {} more requested)",
                    pools[class].len() - cursor[class],
                    n
                )));
            }
            for k in 0..n {
                let sample_idx = pools[class][cursor[class] + k];
                let mut x = features[sample_idx].clone();
                corruption.apply(&mut x, &mut r);
                samples.push((x, class));
            }
            cursor[class] += n;
        }
        samples.shuffle(&mut r);
        let feat = Tensor::from_rows(&samples.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
        let labs: Vec<usize> = samples.iter().map(|&(_, y)| y).collect();
        let train_count = match role {
            ClientRole::Source => ((total as f64) * train_fraction).round() as usize,
            ClientRole::Target => total,
        };
        clients.push(ClientSpec {
            id: idx,
            role,
            label_prior,
            corruption,
            features: feat,
            labels: labs,
            train_count,
        });
    }
    // external pools have no generative model; keep a mixture only for its
    // dimensions so downstream code can size models
    let mixture = GaussianMixture::new(&MixtureConfig {
        feature_dim: features[0].len().max(num_classes),
        num_classes,
        class_mean_scale: 1.0,
        class_std: 1.0,
    })?;
    Ok(ClientPopulation {
        clients,
        mixture,
        num_sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_shift_config() -> PopulationConfig {
        PopulationConfig {
            mixture: MixtureConfig {
                feature_dim: 10,
                num_classes: 10,
                class_mean_scale: 2.0,
                class_std: 1.0,
            },
            shift: ShiftConfig {
                kind: ShiftKind::Label,
                major_classes: 2,
                major_per_class: 80,
                minor_per_class: 5,
                source_corruption: CorruptionRange::identity(),
                target_corruption: CorruptionRange::identity(),
            },
            num_sources: 4,
            num_targets: 2,
            train_fraction: 0.8,
        }
    }

    #[test]
    fn step_partition_counts_match_contract() {
        let pop = sample_population(&label_shift_config(), 11).unwrap();
        for client in &pop.clients {
            assert_eq!(client.num_samples(), 2 * 80 + 8 * 5);
            let counts: Vec<usize> = (0..10)
                .map(|c| client.labels().iter().filter(|&&l| l == c).count())
                .collect();
            let majors = counts.iter().filter(|&&n| n == 80).count();
            let minors = counts.iter().filter(|&&n| n == 5).count();
            assert_eq!((majors, minors), (2, 8));
            assert!(client.corruption.is_identity());
            let prior_sum: f64 = client.label_prior.iter().sum();
            assert!((prior_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_shift_population_is_uniform_and_identity() {
        let mut cfg = label_shift_config();
        cfg.shift.kind = ShiftKind::None;
        let pop = sample_population(&cfg, 3).unwrap();
        for client in &pop.clients {
            assert!(client.corruption.is_identity());
            for &p in &client.label_prior {
                assert!((p - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn populations_are_deterministic_in_seed() {
        let cfg = label_shift_config();
        let a = sample_population(&cfg, 42).unwrap();
        let b = sample_population(&cfg, 42).unwrap();
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            assert_eq!(ca.features().data(), cb.features().data());
            assert_eq!(ca.labels(), cb.labels());
        }
        let c = sample_population(&cfg, 43).unwrap();
        assert_ne!(
            a.clients[0].features().data(),
            c.clients[0].features().data()
        );
    }

    #[test]
    fn feature_shift_draws_from_role_ranges() {
        let mut cfg = label_shift_config();
        cfg.shift.kind = ShiftKind::Feature;
        cfg.shift.source_corruption = CorruptionRange {
            scale: (0.9, 1.1),
            offset: (-0.1, 0.1),
            noise: (0.0, 0.05),
        };
        cfg.shift.target_corruption = CorruptionRange {
            scale: (2.0, 3.0),
            offset: (5.0, 6.0),
            noise: (0.0, 0.05),
        };
        let pop = sample_population(&cfg, 8).unwrap();
        for s in pop.sources() {
            assert!(s.corruption.scale >= 0.9 && s.corruption.scale <= 1.1);
            assert!(s.corruption.offset.abs() <= 0.1);
            // uniform label allocation
            assert!(s.label_prior.iter().all(|&p| (p - 0.1).abs() < 1e-12));
        }
        for t in pop.targets() {
            assert!(t.corruption.scale >= 2.0 && t.corruption.scale <= 3.0);
            assert!(t.corruption.offset >= 5.0 && t.corruption.offset <= 6.0);
        }
    }

    #[test]
    fn batching_drops_last_and_is_seeded() {
        let pop = sample_population(&label_shift_config(), 5).unwrap();
        let client = &pop.clients[0];
        // source: 200 samples, train split 160, validation 40
        let b = client.batches(Split::Validation, 15, None).unwrap();
        assert_eq!(b.len(), 2); // 40 / 15 -> 2 full batches, remainder dropped
        assert!(b.iter().all(|batch| batch.features.rows() == 15));

        let mut r1 = rng::stream(9, &[rng::tag::SHUFFLE, 0]);
        let mut r2 = rng::stream(9, &[rng::tag::SHUFFLE, 0]);
        let s1 = client.batches(Split::Train, 16, Some(&mut r1)).unwrap();
        let s2 = client.batches(Split::Train, 16, Some(&mut r2)).unwrap();
        for (x, y) in s1.iter().zip(&s2) {
            assert_eq!(x.features.data(), y.features.data());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn bayes_posterior_matches_affine_classifier() {
        let mixture = GaussianMixture::new(&MixtureConfig {
            feature_dim: 4,
            num_classes: 3,
            class_mean_scale: 1.5,
            class_std: 0.9,
        })
        .unwrap();
        let prior = vec![0.5, 0.3, 0.2];
        let (w, b) = mixture.bayes_affine_classifier(&prior);
        let mut r = rng::stream(1, &[2]);
        for _ in 0..20 {
            let class = r.gen_range(0..3);
            let x = mixture.sample(class, &mut r);
            let direct = mixture.bayes_posterior(&x, &prior);
            // softmax of the affine classifier
            let logits: Vec<f64> = (0..3)
                .map(|c| b[c] + (0..4).map(|i| w[c * 4 + i] * x[i]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..3 {
                assert!((direct[c] - exps[c] / sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_partition_errors_when_demand_exceeds_pool() {
        let features: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, 0.0]).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let shift = ShiftConfig {
            kind: ShiftKind::Label,
            major_classes: 1,
            major_per_class: 12,
            minor_per_class: 2,
            source_corruption: CorruptionRange::identity(),
            target_corruption: CorruptionRange::identity(),
        };
        // each client wants 12+2 samples; 3 clients can exceed the 15 per class
        let err = partition_pool(&features, &labels, &shift, 2, 2, 1, 0.8, 7);
        assert!(matches!(err, Err(Error::Config(_))), "{err:?}");
        let ok = partition_pool(&features, &labels, &shift, 2, 1, 1, 0.8, 7);
        assert!(ok.is_ok());
    }

    #[test]
    fn csv_ingestion_parses_and_validates() {
        let dir = std::env::temp_dir().join("ttpfl_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,1.5,0\n-1.0,2.0,1\n0.0,0.0,1\n").unwrap();
        let (features, labels) = load_csv_dataset(&path).unwrap();
        assert_eq!(features.len(), 3);
        assert_eq!(labels, vec![0, 1, 1]);
        assert_eq!(features[1], vec![-1.0, 2.0]);

        std::fs::write(&path, "0.5,notanumber,0\n").unwrap();
        assert!(load_csv_dataset(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}

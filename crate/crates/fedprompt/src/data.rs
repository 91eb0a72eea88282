//! Synthetic multi-domain data and non-IID partitioning.
//!
//! The generator decouples "what" from "where": class prototypes are shared
//! across domains, each domain applies its own random affine map plus noise.
//! Label skew across sub-clients comes from per-class Dirichlet draws.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingDataset, EmbeddingRecord};
use crate::numerics::{NumericsError, Tensor};
use crate::seeding::{derive_rng, tag};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("Dirichlet draw left a client empty after {attempts} attempts")]
    DegenerateDraw { attempts: usize },
    #[error("class {class} in domain {domain} has fewer than 2 samples")]
    EmptyClass { domain: usize, class: usize },
    #[error("split fraction {fraction} leaves an empty train or test stratum")]
    EmptySplit { fraction: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    File(#[from] crate::encoders::DatasetFileError),
}

/// Parameters of the synthetic multi-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub raw_dim: usize,
    /// Samples per (domain, class) pair.
    pub samples_per_class: usize,
    pub prototype_scale: f64,
    /// Strength of the per-domain affine distortion.
    pub domain_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes == 0 || self.num_domains == 0 {
            return Err(DataError::InvalidSpec(
                "need at least one class and one domain".to_string(),
            ));
        }
        if self.raw_dim == 0 || self.samples_per_class == 0 {
            return Err(DataError::InvalidSpec(
                "raw_dim and samples_per_class must be positive".to_string(),
            ));
        }
        if self.prototype_scale < 0.0 || self.domain_shift < 0.0 || self.noise_sigma < 0.0 {
            return Err(DataError::InvalidSpec("scales must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// Values pass through `f32` so that in-memory data equals container data
/// bit for bit.
fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

/// One raw-feature dataset per domain. Sample = the domain's affine map
/// applied to the shared class prototype, plus Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<EmbeddingDataset>, DataError> {
    spec.validate()?;
    let dim = spec.raw_dim;

    let mut proto_rng = derive_rng(spec.seed, &[tag::SYNTH_DATA, 0]);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| spec.prototype_scale * proto_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut datasets = Vec::with_capacity(spec.num_domains);
    for domain in 0..spec.num_domains {
        let mut rng = derive_rng(spec.seed, &[tag::SYNTH_DATA, 1 + domain as u64]);
        // affine map: identity plus scaled Gaussian mixing, plus a bias
        let mixing: Vec<f64> = (0..dim * dim)
            .map(|_| {
                spec.domain_shift * rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt()
            })
            .collect();
        let bias: Vec<f64> = (0..dim)
            .map(|_| spec.domain_shift * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut records = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
        for (class, proto) in prototypes.iter().enumerate() {
            for _ in 0..spec.samples_per_class {
                let mut x = vec![0.0; dim];
                for (r, slot) in x.iter_mut().enumerate() {
                    let mut acc = proto[r] + bias[r];
                    for c in 0..dim {
                        acc += mixing[r * dim + c] * proto[c];
                    }
                    acc += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    *slot = quantize(acc);
                }
                records.push(EmbeddingRecord {
                    domain: domain as u16,
                    label: class as u16,
                    embedding: Tensor::vector(x)?,
                });
            }
        }
        datasets.push(EmbeddingDataset::new(
            dim,
            spec.num_classes,
            spec.num_domains,
            true,
            records,
        )?);
    }
    Ok(datasets)
}

/// Assignment of every sample of one dataset to a sub-client.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    assignment: Vec<usize>,
    num_clients: usize,
    pub alpha: f64,
}

impl PartitionMap {
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    /// Splits the dataset into per-client shards following the assignment.
    pub fn apply(&self, dataset: &EmbeddingDataset) -> Vec<EmbeddingDataset> {
        (0..self.num_clients)
            .map(|c| {
                let indices: Vec<usize> = self
                    .assignment
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a == c)
                    .map(|(i, _)| i)
                    .collect();
                dataset.subset(&indices)
            })
            .collect()
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Per-class Dirichlet(alpha) split of a dataset across `num_clients`
/// sub-clients. Draws that leave any client empty are resampled.
pub fn dirichlet_partition(
    dataset: &EmbeddingDataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionMap, DataError> {
    if alpha <= 0.0 {
        return Err(DataError::InvalidSpec(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if num_clients == 0 {
        return Err(DataError::InvalidSpec("need at least one client".to_string()));
    }
    let mut rng = derive_rng(seed, &[tag::PARTITION, num_clients as u64]);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| DataError::InvalidSpec(format!("Dirichlet setup: {e}")))?;

    let mut per_class_indices: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, rec) in dataset.records().iter().enumerate() {
        per_class_indices[usize::from(rec.label)].push(i);
    }

    for _attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignment = vec![usize::MAX; dataset.len()];
        let mut client_sizes = vec![0usize; num_clients];
        for indices in &per_class_indices {
            if indices.is_empty() {
                continue;
            }
            let weights = dirichlet_weights(&gamma, num_clients, &mut rng);
            let counts = largest_remainder_counts(&weights, indices.len());
            let mut shuffled = indices.clone();
            shuffled.shuffle(&mut rng);
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                for &sample in &shuffled[cursor..cursor + count] {
                    assignment[sample] = client;
                }
                client_sizes[client] += count;
                cursor += count;
            }
        }
        if client_sizes.iter().all(|&s| s > 0) {
            return Ok(PartitionMap {
                assignment,
                num_clients,
                alpha,
            });
        }
    }
    Err(DataError::DegenerateDraw {
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

fn dirichlet_weights<R: Rng>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 1e-300 && sum.is_finite() {
            return draws.iter().map(|d| d / sum).collect();
        }
    }
}

/// Integer allocation of `total` samples proportional to `weights`.
fn largest_remainder_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * total as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(total - assigned) {
        counts[remainders[k % weights.len()].0] += 1;
    }
    counts
}

/// Stratified train/test split: within every (domain, class) stratum the
/// train share is `round(fraction * n)`, clamped so neither side is empty.
pub fn split_train_test(
    dataset: &EmbeddingDataset,
    fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::EmptySplit { fraction });
    }
    let mut strata: Vec<Vec<usize>> =
        vec![Vec::new(); dataset.num_domains() * dataset.num_classes()];
    for (i, rec) in dataset.records().iter().enumerate() {
        strata[usize::from(rec.domain) * dataset.num_classes() + usize::from(rec.label)].push(i);
    }
    let mut rng = derive_rng(seed, &[tag::SPLIT]);
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for (s, indices) in strata.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let domain = s / dataset.num_classes();
        let class = s % dataset.num_classes();
        if indices.len() < 2 {
            return Err(DataError::EmptyClass { domain, class });
        }
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_indices.extend_from_slice(&shuffled[..n_train]);
        test_indices.extend_from_slice(&shuffled[n_train..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok((dataset.subset(&train_indices), dataset.subset(&test_indices)))
}

/// Accuracy of a nearest-class-mean classifier trained on `train` and
/// evaluated on `test`, in raw feature space. Serves as an independent
/// separability oracle for the synthetic task.
pub fn nearest_class_mean_accuracy(
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
) -> Result<f64, DataError> {
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Numerics(NumericsError::EmptyInput));
    }
    let k = train.num_classes();
    let dim = train.dim();
    let mut means = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for rec in train.records() {
        let class = usize::from(rec.label);
        counts[class] += 1;
        for (m, v) in means[class].iter_mut().zip(rec.embedding.data()) {
            *m += v;
        }
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        if count > 0 {
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for rec in test.records() {
        let mut best = (f64::INFINITY, 0usize);
        for (class, mean) in means.iter().enumerate() {
            if counts[class] == 0 {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(rec.embedding.data())
                .map(|(m, v)| (m - v) * (m - v))
                .sum();
            if dist < best.0 {
                best = (dist, class);
            }
        }
        if best.1 == usize::from(rec.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean pairwise L1 distance between client class histograms; the standard
/// heterogeneity statistic for Dirichlet partitions.
pub fn histogram_divergence(shards: &[EmbeddingDataset]) -> f64 {
    let histograms: Vec<Vec<f64>> = shards
        .iter()
        .map(|s| {
            let counts = s.class_counts();
            let total: usize = counts.iter().sum();
            counts
                .iter()
                .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..histograms.len() {
        for j in (i + 1)..histograms.len() {
            sum += histograms[i]
                .iter()
                .zip(&histograms[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            pairs += 1;
        }
    }
    if pairs > 0 {
        sum / pairs as f64
    } else {
        0.0
    }
}

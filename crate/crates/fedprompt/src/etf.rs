//! Equiangular tight frames and the geometry/entropy bounds they induce.
//!
//! A frame holds K unit prototypes in M >= K dimensions whose pairwise cosine
//! similarity is exactly -1/(K-1). The same construction serves the semantic
//! prototypes (one per class) and the domain prototypes (one per client
//! domain). Frames are immutable once built and shared read-only.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::numerics::Tensor;
use crate::seeding::{derive_rng, tag};

#[derive(Debug, Clone, thiserror::Error)]
pub enum EtfError {
    #[error("feature dimension {dim} is smaller than prototype count {count}")]
    DimensionTooSmall { dim: usize, count: usize },
    #[error("prototype count must be at least 2, got {count}")]
    TooFewPrototypes { count: usize },
}

/// K equiangular unit prototypes in an M-dimensional feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfFrame {
    /// Row-major `[dim, count]` matrix; column k is prototype k.
    prototypes: Tensor,
    dim: usize,
    count: usize,
}

impl EtfFrame {
    /// Builds a frame from a seeded column-orthonormal basis:
    /// `sqrt(K/(K-1)) * U * (I_K - (1/K) 1 1^T)` with `U^T U = I_K`.
    pub fn generate(count: usize, dim: usize, seed: u64) -> Result<Self, EtfError> {
        if count < 2 {
            return Err(EtfError::TooFewPrototypes { count });
        }
        if dim < count {
            return Err(EtfError::DimensionTooSmall { dim, count });
        }
        let mut rng = derive_rng(seed, &[tag::ETF_SEMANTIC, count as u64, dim as u64]);
        let basis = orthonormal_columns(dim, count, &mut rng);

        // v_k = sqrt(K/(K-1)) * (u_k - mean(u_1..u_K))
        let k = count as f64;
        let factor = (k / (k - 1.0)).sqrt();
        let mut mean = vec![0.0; dim];
        for col in &basis {
            for (m, v) in mean.iter_mut().zip(col) {
                *m += v / k;
            }
        }
        let mut data = vec![0.0; dim * count];
        for (c, col) in basis.iter().enumerate() {
            for r in 0..dim {
                data[r * count + c] = factor * (col[r] - mean[r]);
            }
        }
        Ok(Self {
            prototypes: Tensor::new(vec![dim, count], data).expect("finite construction"),
            dim,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Prototype `k` as a dense vector.
    pub fn prototype(&self, k: usize) -> Tensor {
        let data = (0..self.dim)
            .map(|r| self.prototypes.data()[r * self.count + k])
            .collect();
        Tensor::vector(data).expect("finite prototype")
    }

    /// All prototypes, column order.
    pub fn prototype_vectors(&self) -> Vec<Tensor> {
        (0..self.count).map(|k| self.prototype(k)).collect()
    }

    /// The raw `[dim, count]` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn fingerprint(&self) -> u64 {
        self.prototypes.fingerprint()
    }
}

fn orthonormal_columns<R: Rng>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    // Modified Gram-Schmidt over seeded Gaussian columns; a rank-deficient
    // draw is resampled (probability zero for continuous Gaussians, but the
    // loop keeps the constructor total).
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(count);
    while columns.len() < count {
        let mut col: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in &columns {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
        columns.push(col);
    }
    columns
}

/// Closed-form intra-class distance bound `sqrt(2 - sqrt((2K-4)/(K-1)))`.
pub fn delta_bound(k: usize) -> f64 {
    assert!(k >= 2, "bound defined for K >= 2");
    let kf = k as f64;
    (2.0 - ((2.0 * kf - 4.0) / (kf - 1.0)).sqrt()).sqrt()
}

/// Minimum prediction entropy under ideal prototype alignment, in nats:
/// `log[e + (K-1)e^{-1/(K-1)}] - (e - e^{-1/(K-1)}) / (e + (K-1)e^{-1/(K-1)})`.
pub fn entropy_floor(k: usize) -> f64 {
    assert!(k >= 2, "entropy floor defined for K >= 2");
    let kf = k as f64;
    let e = std::f64::consts::E;
    let off = (-1.0 / (kf - 1.0)).exp();
    let z = e + (kf - 1.0) * off;
    z.ln() - (e - off) / z
}

/// Mutual-information lower bound, up to an unspecified additive constant:
/// `entropy_floor(K) - (K-1)/2 * log(2 - sqrt((2K-4)/(K-1)))`.
///
/// The omitted constant is inherent to the derivation; callers comparing
/// across K see the variable part only.
pub fn mi_lower_bound_up_to_const(k: usize) -> f64 {
    assert!(k >= 2, "bound defined for K >= 2");
    let kf = k as f64;
    let log_arg = 2.0 - ((2.0 * kf - 4.0) / (kf - 1.0)).sqrt();
    entropy_floor(k) - (kf - 1.0) / 2.0 * log_arg.ln()
}

/// Result of sampling unit-vector pairs within half the frame angle.
#[derive(Debug, Clone, Serialize)]
pub struct PairDistanceCheck {
    pub samples: usize,
    pub max_distance: f64,
    pub bound: f64,
    /// Fraction of sampled pairs with distance within the bound.
    pub fraction_within_bound: f64,
}

/// Samples pairs of unit vectors in the frame's space whose mutual angle is
/// at most theta/2, where `cos(theta) = -1/(K-1)`, and reports the largest
/// observed Euclidean distance against [`delta_bound`].
///
/// The first draw sits exactly at angle theta/2, so with at least one sample
/// the maximum attains the bound up to rounding.
pub fn check_pairwise_distance_bound(
    frame: &EtfFrame,
    samples: usize,
    seed: u64,
) -> PairDistanceCheck {
    assert!(samples >= 1, "need at least one sample");
    let mut rng = derive_rng(seed, &[tag::BOUND_SAMPLING, frame.count() as u64]);
    let theta = (-1.0 / (frame.count() as f64 - 1.0)).acos();
    let half = theta / 2.0;
    let bound = delta_bound(frame.count());

    let mut max_distance: f64 = 0.0;
    let mut within = 0usize;
    for i in 0..samples {
        let angle = if i == 0 { half } else { rng.random::<f64>() * half };
        let a = random_unit(frame.dim(), &mut rng);
        let w = orthogonal_unit(&a, &mut rng);
        let b: Vec<f64> = a
            .iter()
            .zip(&w)
            .map(|(av, wv)| angle.cos() * av + angle.sin() * wv)
            .collect();
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(av, bv)| (av - bv) * (av - bv))
            .sum::<f64>()
            .sqrt();
        if dist <= bound + 1e-9 {
            within += 1;
        }
        max_distance = max_distance.max(dist);
    }
    PairDistanceCheck {
        samples,
        max_distance,
        bound,
        fraction_within_bound: within as f64 / samples as f64,
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn orthogonal_unit<R: Rng>(a: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut w = random_unit(a.len(), rng);
        let dot: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
        for (wv, av) in w.iter_mut().zip(a) {
            *wv -= dot * av;
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return w.iter().map(|x| x / norm).collect();
        }
    }
}

/// Summary of the theoretical quantities for one class count.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub k_classes: usize,
    pub delta: f64,
    pub gamma_note: String,
    pub entropy_floor: f64,
    pub mi_lower_bound_up_to_const: f64,
}

impl BoundReport {
    /// Evaluates the bounds for `k` classes, including an empirical gamma
    /// estimate from `samples` pair draws in a minimal frame.
    pub fn for_classes(k: usize, samples: usize, seed: u64) -> Result<Self, EtfError> {
        let frame = EtfFrame::generate(k, k, seed)?;
        let check = check_pairwise_distance_bound(&frame, samples, seed);
        Ok(Self {
            k_classes: k,
            delta: delta_bound(k),
            gamma_note: format!(
                "empirical fraction of {} sampled pairs within delta: {:.4} (no closed-form rate)",
                check.samples, check.fraction_within_bound
            ),
            entropy_floor: entropy_floor(k),
            mi_lower_bound_up_to_const: mi_lower_bound_up_to_const(k),
        })
    }
}

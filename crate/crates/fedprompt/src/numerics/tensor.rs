//! Dense row-major `f64` tensors.
//!
//! Every value that flows through the simulator (prompts, transform weights,
//! embeddings, prototypes) is one of these. Construction validates the shape
//! product and rejects non-finite entries so that NaN/Inf can never enter a
//! parameter store.

use rand::Rng;
use rand_distr::StandardNormal;

use super::NumericsError;

/// Dense tensor with a row-major `f64` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Creates a tensor, checking that `product(shape) == data.len()` and that
    /// every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: shape.clone(),
                actual: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { position: pos });
        }
        Ok(Self { shape, data })
    }

    /// Scalar tensor (rank 0, one entry).
    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Self::new(vec![], vec![value])
    }

    /// Rank-1 tensor from a value slice.
    pub fn vector(data: Vec<f64>) -> Result<Self, NumericsError> {
        let shape = vec![data.len()];
        Self::new(shape, data)
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Tensor with i.i.d. Gaussian entries, `sigma` standard deviation.
    pub fn gaussian<R: Rng>(shape: Vec<usize>, sigma: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sigma
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-entry tensor.
    pub fn item(&self) -> Result<f64, NumericsError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Same buffer under a new shape; the element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: shape,
                actual: self.shape.clone(),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Copy of a contiguous range of the flattened buffer under a new shape.
    pub fn slice(&self, offset: usize, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let len: usize = shape.iter().product();
        if offset + len > self.data.len() {
            return Err(NumericsError::IndexOutOfRange {
                index: offset + len,
                len: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data[offset..offset + len].to_vec(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise sum with shape check.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise product with shape check.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// In-place gradient-descent step: `self -= lr * grad`. Rejects shape
    /// mismatches and refuses to store a non-finite result.
    pub fn sgd_step(&mut self, grad: &Tensor, lr: f64) -> Result<(), NumericsError> {
        if self.shape != grad.shape {
            return Err(NumericsError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: grad.shape.clone(),
            });
        }
        for (v, g) in self.data.iter_mut().zip(&grad.data) {
            let next = *v - lr * g;
            if !next.is_finite() {
                return Err(NumericsError::NonFinite { position: 0 });
            }
            *v = next;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a fingerprint over the LE byte representation.
    /// Used to assert that frozen parameters stay bit-identical.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for dim in &self.shape {
            h = fnv1a_bytes(h, &(*dim as u64).to_le_bytes());
        }
        for v in &self.data {
            h = fnv1a_bytes(h, &v.to_le_bytes());
        }
        h
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Combined fingerprint of several tensors, order-sensitive.
pub fn fingerprint_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = FNV_OFFSET;
    for t in tensors {
        h = fnv1a_bytes(h, &t.fingerprint().to_le_bytes());
    }
    h
}

/// Cosine similarity of two equal-length vectors.
///
/// Rejects vectors whose norm is at or below `1e-12`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let norm_a = a.l2_norm();
    let norm_b = b.l2_norm();
    if norm_a <= ZERO_NORM_THRESHOLD || norm_b <= ZERO_NORM_THRESHOLD {
        return Err(NumericsError::ZeroNorm);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (norm_a * norm_b))
}

pub(crate) const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Numerically stable log-softmax of a logit slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - max - log_sum).collect()
}

/// Softmax probabilities of a logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|v| v.exp()).collect()
}

/// Negative log-likelihood of `target` under `softmax(logits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    Ok(-log_softmax(logits)[target])
}

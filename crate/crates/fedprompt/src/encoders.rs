//! Frozen encoder stand-ins and the embedding dataset container.
//!
//! The image encoder is a fixed affine map, the text encoder a fixed
//! two-layer tanh MLP over the flattened token sequence. Neither ever
//! receives gradients; the text encoder is differentiable with respect to its
//! INPUT tokens so prompt gradients can flow through it. Datasets of
//! precomputed embeddings (or raw synthetic features) live in a small binary
//! container that round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::{fingerprint_all, NumericsError, Tape, Tensor};
use crate::numerics::NodeId;
use crate::seeding::{derive_rng, tag};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Errors when reading or writing the embedding container.
#[derive(Debug, thiserror::Error)]
pub enum DatasetFileError {
    #[error("bad magic bytes, expected \"FDEP\"")]
    BadMagic,
    #[error("file truncated while reading {context}")]
    TruncatedFile { context: &'static str },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("header/record mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("record {index} invalid: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 4] = b"FDEP";
const VERSION: u32 = 1;

/// One sample: an embedding (or raw feature) with class and domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub domain: u16,
    pub label: u16,
    pub embedding: Tensor,
}

/// In-memory dataset of labelled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    num_classes: usize,
    num_domains: usize,
    /// True when the records hold raw generator features rather than encoder
    /// outputs.
    raw: bool,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        num_domains: usize,
        raw: bool,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self, DatasetFileError> {
        for (i, rec) in records.iter().enumerate() {
            if rec.embedding.len() != dim {
                return Err(DatasetFileError::InvalidRecord {
                    index: i,
                    reason: format!("embedding dim {} != header dim {}", rec.embedding.len(), dim),
                });
            }
            if usize::from(rec.label) >= num_classes {
                return Err(DatasetFileError::InvalidRecord {
                    index: i,
                    reason: format!("label {} >= num_classes {}", rec.label, num_classes),
                });
            }
            if usize::from(rec.domain) >= num_domains {
                return Err(DatasetFileError::InvalidRecord {
                    index: i,
                    reason: format!("domain {} >= num_domains {}", rec.domain, num_domains),
                });
            }
        }
        Ok(Self {
            dim,
            num_classes,
            num_domains,
            raw,
            records,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn is_raw(&self) -> bool {
        self.raw
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per class index.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for rec in &self.records {
            counts[usize::from(rec.label)] += 1;
        }
        counts
    }

    /// Record count per domain index.
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains];
        for rec in &self.records {
            counts[usize::from(rec.domain)] += 1;
        }
        counts
    }

    /// New dataset holding the records at `indices`, header unchanged.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            raw: self.raw,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Records belonging to one domain, header unchanged.
    pub fn filter_domain(&self, domain: u16) -> Self {
        let indices: Vec<usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.domain == domain)
            .map(|(i, _)| i)
            .collect();
        self.subset(&indices)
    }

    /// Mean embedding over all records.
    pub fn mean_embedding(&self) -> Result<Tensor, NumericsError> {
        if self.records.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        let mut acc = vec![0.0; self.dim];
        for rec in &self.records {
            for (a, v) in acc.iter_mut().zip(rec.embedding.data()) {
                *a += v;
            }
        }
        let n = self.records.len() as f64;
        Tensor::vector(acc.into_iter().map(|v| v / n).collect())
    }

    /// Serializes to the container layout. Embedding values are stored as
    /// `f32`, so saving is lossy for values that were never `f32`; datasets
    /// produced by this crate are generated at `f32` granularity and
    /// round-trip bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.records.len() * (4 + self.dim * 4));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_domains as u32).to_le_bytes());
        buf.extend_from_slice(&u32::from(self.raw).to_le_bytes());
        for rec in &self.records {
            buf.extend_from_slice(&rec.domain.to_le_bytes());
            buf.extend_from_slice(&rec.label.to_le_bytes());
            for v in rec.embedding.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetFileError> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4, "magic")?;
        if magic != MAGIC {
            return Err(DatasetFileError::BadMagic);
        }
        let version = cursor.u32("version")?;
        if version != VERSION {
            return Err(DatasetFileError::UnsupportedVersion(version));
        }
        let record_count = cursor.u64("record count")? as usize;
        let dim = cursor.u32("dim")? as usize;
        let num_classes = cursor.u32("num_classes")? as usize;
        let num_domains = cursor.u32("num_domains")? as usize;
        let raw = cursor.u32("raw flag")? != 0;

        let mut records = Vec::with_capacity(record_count);
        for i in 0..record_count {
            let domain = cursor.u16("record domain")?;
            let label = cursor.u16("record label")?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from(cursor.f32("record value")?));
            }
            let embedding = Tensor::vector(values).map_err(|e| DatasetFileError::InvalidRecord {
                index: i,
                reason: e.to_string(),
            })?;
            records.push(EmbeddingRecord {
                domain,
                label,
                embedding,
            });
        }
        if cursor.pos != bytes.len() {
            return Err(DatasetFileError::DimensionMismatch {
                context: format!(
                    "{} trailing bytes after {} declared records",
                    bytes.len() - cursor.pos,
                    record_count
                ),
            });
        }
        Self::new(dim, num_classes, num_domains, raw, records)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetFileError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetFileError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DatasetFileError> {
        if self.pos + n > self.bytes.len() {
            return Err(DatasetFileError::TruncatedFile { context });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DatasetFileError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DatasetFileError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, DatasetFileError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f32(&mut self, context: &'static str) -> Result<f32, DatasetFileError> {
        Ok(f32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

/// Fixed affine map from raw feature space into the shared embedding space.
#[derive(Debug, Clone)]
pub struct FrozenImageEncoder {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl FrozenImageEncoder {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[tag::IMAGE_ENCODER]);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::gaussian(vec![out_dim, in_dim], scale, &mut rng);
        let bias = Tensor::gaussian(vec![out_dim], 0.1, &mut rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `W x + b`; no gradient is tracked (inputs are data, weights frozen).
    pub fn encode(&self, raw: &Tensor) -> Result<Tensor, EncoderError> {
        if raw.len() != self.in_dim {
            return Err(EncoderError::DimensionMismatch {
                what: "image encoder input",
                expected: self.in_dim,
                actual: raw.len(),
            });
        }
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for i in 0..self.out_dim {
            let mut acc = 0.0;
            for (j, x) in raw.data().iter().enumerate() {
                acc += w[i * self.in_dim + j] * x;
            }
            out[i] += acc;
        }
        Ok(Tensor::vector(out).expect("finite encode"))
    }

    /// Encodes every record of a raw dataset into embedding space.
    pub fn encode_dataset(
        &self,
        dataset: &EmbeddingDataset,
    ) -> Result<EmbeddingDataset, EncoderError> {
        let records = dataset
            .records()
            .iter()
            .map(|rec| {
                Ok(EmbeddingRecord {
                    domain: rec.domain,
                    label: rec.label,
                    embedding: self.encode(&rec.embedding)?,
                })
            })
            .collect::<Result<Vec<_>, EncoderError>>()?;
        Ok(EmbeddingDataset::new(
            self.out_dim,
            dataset.num_classes(),
            dataset.num_domains(),
            false,
            records,
        )
        .expect("encoded records keep valid labels and a uniform dimension"))
    }

    pub fn weight_tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_all([&self.weight, &self.bias])
    }
}

/// Fixed two-layer tanh MLP over the flattened token sequence.
///
/// Weights are frozen; gradients flow only to the input tokens.
#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    token_count: usize,
    token_dim: usize,
    out_dim: usize,
}

impl FrozenTextEncoder {
    pub fn new(token_count: usize, token_dim: usize, out_dim: usize, seed: u64) -> Self {
        let in_dim = token_count * token_dim;
        let hidden = 2 * out_dim;
        let mut rng = derive_rng(seed, &[tag::TEXT_ENCODER]);
        let w1 = Tensor::gaussian(vec![hidden, in_dim], 1.0 / (in_dim as f64).sqrt(), &mut rng);
        let b1 = Tensor::gaussian(vec![hidden], 0.1, &mut rng);
        let w2 = Tensor::gaussian(vec![out_dim, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng);
        let b2 = Tensor::gaussian(vec![out_dim], 0.1, &mut rng);
        Self {
            w1,
            b1,
            w2,
            b2,
            token_count,
            token_dim,
            out_dim,
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn check_tokens(&self, shape: &[usize]) -> Result<(), EncoderError> {
        if shape != [self.token_count, self.token_dim] {
            return Err(EncoderError::DimensionMismatch {
                what: "text encoder token sequence",
                expected: self.token_count * self.token_dim,
                actual: shape.iter().product(),
            });
        }
        Ok(())
    }

    /// Pure forward pass for evaluation paths.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor, EncoderError> {
        self.check_tokens(tokens.shape())?;
        let flat = tokens.data();
        let in_dim = flat.len();
        let hidden = self.b1.len();
        let mut h = self.b1.data().to_vec();
        for (i, slot) in h.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, x) in flat.iter().enumerate() {
                acc += self.w1.data()[i * in_dim + j] * x;
            }
            *slot = (*slot + acc).tanh();
        }
        let mut out = self.b2.data().to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, hv) in h.iter().enumerate() {
                acc += self.w2.data()[i * hidden + j] * hv;
            }
            *slot += acc;
        }
        Ok(Tensor::vector(out).expect("finite encode"))
    }

    /// Tape forward pass: weights enter as constants, so gradients reach the
    /// token node but never the encoder.
    pub fn encode_on_tape(&self, tape: &mut Tape, tokens: NodeId) -> Result<NodeId, EncoderError> {
        self.check_tokens(tape.value(tokens).shape())?;
        let flat = tape.slice(tokens, 0, vec![self.token_count * self.token_dim])?;
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let lin1 = tape.matvec(w1, flat)?;
        let pre1 = tape.add(lin1, b1)?;
        let h = tape.tanh(pre1);
        let lin2 = tape.matvec(w2, h)?;
        Ok(tape.add(lin2, b2)?)
    }

    pub fn weight_tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_all([&self.w1, &self.b1, &self.w2, &self.b2])
    }
}

/// Fixed per-class text token embeddings, seeded from the class index.
#[derive(Debug, Clone)]
pub struct TextEmbeddingTable {
    tokens: Tensor,
    num_classes: usize,
    text_tokens: usize,
    token_dim: usize,
}

impl TextEmbeddingTable {
    pub fn new(num_classes: usize, text_tokens: usize, token_dim: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(num_classes * text_tokens * token_dim);
        for class in 0..num_classes {
            let mut rng = derive_rng(seed, &[tag::TEXT_TABLE, class as u64]);
            let block = Tensor::gaussian(vec![text_tokens, token_dim], 0.5, &mut rng);
            data.extend_from_slice(block.data());
        }
        Self {
            tokens: Tensor::new(vec![num_classes, text_tokens, token_dim], data)
                .expect("finite table"),
            num_classes,
            text_tokens,
            token_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn text_tokens(&self) -> usize {
        self.text_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// The `[text_tokens, token_dim]` block for one class.
    pub fn class_embedding(&self, class: usize) -> Result<Tensor, NumericsError> {
        let block = self.text_tokens * self.token_dim;
        self.tokens
            .slice(class * block, vec![self.text_tokens, self.token_dim])
    }

    pub fn fingerprint(&self) -> u64 {
        self.tokens.fingerprint()
    }
}

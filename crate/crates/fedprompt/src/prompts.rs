//! Dual prompt model: a globally shared semantic prompt and a per-client
//! domain prompt.
//!
//! Both prompts are `[K, L, D]` token tensors. The domain prompt is modulated
//! by the Hadamard product with a (constant) mean image embedding before
//! entering the text encoder; the encoder input per class is always
//! `semantic tokens ++ modulated domain tokens ++ class text tokens`. The two
//! training objectives route gradients strictly: the global objective reaches
//! only the semantic prompt, the local objective only the domain prompt.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoders::{EncoderError, FrozenTextEncoder, TextEmbeddingTable};
use crate::etf::EtfFrame;
use crate::numerics::{GradientMap, NodeId, NumericsError, Tape, Tensor};
use crate::seeding::{derive_rng, tag};
use crate::transforms::{TransformError, TransformNet};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("domain alignment requested but no domain frame is configured")]
    MissingDomainFrame,
    #[error("prompt token dimension {token_dim} must equal embedding dimension {embed_dim} for modulation")]
    ModulationDim { token_dim: usize, embed_dim: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptScope {
    GlobalSemantic,
    LocalDomain,
}

/// Learnable `[K, L, D]` prompt token tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub scope: PromptScope,
    tokens: Tensor,
    num_classes: usize,
    prompt_len: usize,
    token_dim: usize,
}

impl PromptSet {
    /// Zero-mean Gaussian initialization (sigma 0.02 by convention).
    pub fn init(
        scope: PromptScope,
        num_classes: usize,
        prompt_len: usize,
        token_dim: usize,
        sigma: f64,
        seed: u64,
    ) -> Self {
        let scope_tag = match scope {
            PromptScope::GlobalSemantic => 1,
            PromptScope::LocalDomain => 2,
        };
        let mut rng = derive_rng(seed, &[tag::PROMPT_INIT, scope_tag]);
        let tokens = Tensor::gaussian(vec![num_classes, prompt_len, token_dim], sigma, &mut rng);
        Self {
            scope,
            tokens,
            num_classes,
            prompt_len,
            token_dim,
        }
    }

    /// All-zero prompt (the global-prompt-only baseline keeps a zero block in
    /// the domain slot so the encoder input width never changes).
    pub fn zeros(scope: PromptScope, num_classes: usize, prompt_len: usize, token_dim: usize) -> Self {
        Self {
            scope,
            tokens: Tensor::zeros(vec![num_classes, prompt_len, token_dim]),
            num_classes,
            prompt_len,
            token_dim,
        }
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    /// Replaces the token tensor (server broadcast); shape must match.
    pub fn set_tokens(&mut self, tokens: Tensor) -> Result<(), NumericsError> {
        if tokens.shape() != self.tokens.shape() {
            return Err(NumericsError::ShapeMismatch {
                expected: self.tokens.shape().to_vec(),
                actual: tokens.shape().to_vec(),
            });
        }
        self.tokens = tokens;
        Ok(())
    }

    pub fn sgd_step(&mut self, grad: &Tensor, lr: f64) -> Result<(), NumericsError> {
        self.tokens.sgd_step(grad, lr)
    }

    pub fn fingerprint(&self) -> u64 {
        self.tokens.fingerprint()
    }
}

/// Mean of a batch of equal-length embeddings.
pub fn batch_mean(embeddings: &[&Tensor]) -> Result<Tensor, PromptError> {
    let first = embeddings.first().ok_or(PromptError::EmptyBatch)?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(PromptError::Numerics(NumericsError::ShapeMismatch {
                expected: vec![dim],
                actual: vec![e.len()],
            }));
        }
        for (a, v) in acc.iter_mut().zip(e.data()) {
            *a += v;
        }
    }
    let n = embeddings.len() as f64;
    Ok(Tensor::vector(acc.into_iter().map(|v| v / n).collect())?)
}

/// `Batch_Mean ⊙ p_d`: the mean embedding is broadcast across classes and
/// token positions and multiplied elementwise into the domain prompt. The
/// mean is a constant; the stored prompt parameter is never overwritten.
pub fn modulate_domain_prompt(
    domain_prompt: &PromptSet,
    batch_embeddings: &[&Tensor],
) -> Result<Tensor, PromptError> {
    let mean = batch_mean(batch_embeddings)?;
    modulate_with_mean(domain_prompt, &mean)
}

/// Modulation with a precomputed mean (evaluation uses the frozen
/// training-shard mean).
pub fn modulate_with_mean(
    domain_prompt: &PromptSet,
    mean: &Tensor,
) -> Result<Tensor, PromptError> {
    let tile = tile_mean(domain_prompt, mean)?;
    Ok(domain_prompt.tokens().mul(&tile)?)
}

fn tile_mean(prompt: &PromptSet, mean: &Tensor) -> Result<Tensor, PromptError> {
    if mean.len() != prompt.token_dim {
        return Err(PromptError::ModulationDim {
            token_dim: prompt.token_dim,
            embed_dim: mean.len(),
        });
    }
    let reps = prompt.num_classes * prompt.prompt_len;
    let mut data = Vec::with_capacity(reps * mean.len());
    for _ in 0..reps {
        data.extend_from_slice(mean.data());
    }
    Ok(Tensor::new(
        vec![prompt.num_classes, prompt.prompt_len, prompt.token_dim],
        data,
    )?)
}

/// Token sequence fed to the text encoder for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput {
    /// `[(2L + T_text), D]`, rows ordered semantic ++ domain ++ text.
    pub sequence: Tensor,
}

/// Concatenates `p_s[class] ++ p_d_mod[class] ++ text_table[class]`.
pub fn build_prompt_input(
    semantic_prompt: &PromptSet,
    modulated_domain: &Tensor,
    table: &TextEmbeddingTable,
    class: usize,
) -> Result<PromptInput, PromptError> {
    if modulated_domain.shape() != semantic_prompt.tokens().shape() {
        return Err(PromptError::Numerics(NumericsError::ShapeMismatch {
            expected: semantic_prompt.tokens().shape().to_vec(),
            actual: modulated_domain.shape().to_vec(),
        }));
    }
    if class >= semantic_prompt.num_classes {
        return Err(PromptError::Numerics(NumericsError::IndexOutOfRange {
            index: class,
            len: semantic_prompt.num_classes,
        }));
    }
    let l = semantic_prompt.prompt_len;
    let d = semantic_prompt.token_dim;
    let block = l * d;
    let s = semantic_prompt.tokens().slice(class * block, vec![l, d])?;
    let m = modulated_domain.slice(class * block, vec![l, d])?;
    let text = table.class_embedding(class)?;
    let rows = 2 * l + table.text_tokens();
    let mut data = Vec::with_capacity(rows * d);
    data.extend_from_slice(s.data());
    data.extend_from_slice(m.data());
    data.extend_from_slice(text.data());
    Ok(PromptInput {
        sequence: Tensor::new(vec![rows, d], data)?,
    })
}

/// Per-class text features `T(E_k)` through the pure encoder path.
pub fn class_text_features(
    encoder: &FrozenTextEncoder,
    table: &TextEmbeddingTable,
    semantic_prompt: &PromptSet,
    modulated_domain: &Tensor,
) -> Result<Vec<Tensor>, PromptError> {
    (0..semantic_prompt.num_classes)
        .map(|k| {
            let input = build_prompt_input(semantic_prompt, modulated_domain, table, k)?;
            Ok(encoder.encode(&input.sequence)?)
        })
        .collect()
}

fn check_temperature(tau: f64) -> Result<(), PromptError> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(PromptError::Temperature(tau))
    }
}

/// Mean over the batch of `sce(cos(T(E_k), I(x)) / tau, y)` given already
/// computed text features.
pub fn contrastive_loss_with_features(
    text_features: &[Tensor],
    embeddings: &[&Tensor],
    labels: &[usize],
    tau: f64,
) -> Result<f64, PromptError> {
    check_temperature(tau)?;
    if embeddings.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (embedding, &label) in embeddings.iter().zip(labels) {
        let mut logits = Vec::with_capacity(text_features.len());
        for feature in text_features {
            logits.push(crate::numerics::cosine_similarity(feature, embedding)? / tau);
        }
        sum += crate::numerics::softmax_cross_entropy(&logits, label)?;
    }
    Ok(sum / embeddings.len() as f64)
}

/// Full-path contrastive loss: builds the class text features from the
/// prompts, then averages the per-sample cross-entropies.
pub fn contrastive_loss(
    encoder: &FrozenTextEncoder,
    table: &TextEmbeddingTable,
    semantic_prompt: &PromptSet,
    modulated_domain: &Tensor,
    embeddings: &[&Tensor],
    labels: &[usize],
    tau: f64,
) -> Result<f64, PromptError> {
    let features = class_text_features(encoder, table, semantic_prompt, modulated_domain)?;
    contrastive_loss_with_features(&features, embeddings, labels, tau)
}

/// Mean over classes of the semantic alignment term
/// `sce(cos(Phi_s(T(E_y)), v_s^k) / tau, y)`.
pub fn semantic_prompt_loss(
    class_features: &[Tensor],
    semantic_transform: &TransformNet,
    semantic_frame: &EtfFrame,
    tau: f64,
) -> Result<f64, PromptError> {
    let losses = semantic_prompt_class_losses(class_features, semantic_transform, semantic_frame, tau)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// The per-class terms behind [`semantic_prompt_loss`].
pub fn semantic_prompt_class_losses(
    class_features: &[Tensor],
    semantic_transform: &TransformNet,
    semantic_frame: &EtfFrame,
    tau: f64,
) -> Result<Vec<f64>, PromptError> {
    check_temperature(tau)?;
    if class_features.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    class_features
        .iter()
        .enumerate()
        .map(|(y, feature)| {
            Ok(crate::transforms::semantic_alignment_loss(
                semantic_transform,
                semantic_frame,
                feature,
                y,
                tau,
            )?)
        })
        .collect()
}

/// Mean over classes of the domain alignment term with the client's own
/// domain as the fixed target.
pub fn domain_prompt_loss(
    class_features: &[Tensor],
    domain_transform: &TransformNet,
    domain_frame: &EtfFrame,
    client_domain: usize,
    tau: f64,
) -> Result<f64, PromptError> {
    let losses = domain_prompt_class_losses(
        class_features,
        domain_transform,
        domain_frame,
        client_domain,
        tau,
    )?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// The per-class terms behind [`domain_prompt_loss`].
pub fn domain_prompt_class_losses(
    class_features: &[Tensor],
    domain_transform: &TransformNet,
    domain_frame: &EtfFrame,
    client_domain: usize,
    tau: f64,
) -> Result<Vec<f64>, PromptError> {
    check_temperature(tau)?;
    if class_features.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    class_features
        .iter()
        .map(|feature| {
            Ok(crate::transforms::domain_alignment_loss(
                domain_transform,
                domain_frame,
                feature,
                client_domain,
                tau,
            )?)
        })
        .collect()
}

/// Frozen pieces shared by both prompt objectives.
#[derive(Clone, Copy)]
pub struct PromptContext<'a> {
    pub text_encoder: &'a FrozenTextEncoder,
    pub text_table: &'a TextEmbeddingTable,
    pub semantic_transform: &'a TransformNet,
    pub domain_transform: &'a TransformNet,
    pub semantic_frame: &'a EtfFrame,
    /// Absent in single-domain configurations.
    pub domain_frame: Option<&'a EtfFrame>,
    pub tau: f64,
}

/// Value and gradients of one objective evaluation.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub total: f64,
    pub contrastive: f64,
    pub alignment: Option<f64>,
    pub grads: GradientMap,
}

pub const SEMANTIC_PROMPT_PARAM: &str = "semantic_prompt";
pub const DOMAIN_PROMPT_PARAM: &str = "domain_prompt";

enum PromptRole {
    TrainSemantic,
    TrainDomain,
}

/// `L_c + lambda * L_sp`; gradients reach only the semantic prompt (the
/// domain prompt enters detached, the transform stays frozen).
#[allow(clippy::too_many_arguments)]
pub fn global_prompt_objective(
    ctx: &PromptContext<'_>,
    semantic_prompt: &PromptSet,
    domain_prompt: Option<&PromptSet>,
    modulation_mean: &Tensor,
    embeddings: &[&Tensor],
    labels: &[usize],
    lambda: f64,
    semantic_align: bool,
) -> Result<ObjectiveEval, PromptError> {
    objective(
        ctx,
        semantic_prompt,
        domain_prompt,
        modulation_mean,
        embeddings,
        labels,
        lambda,
        semantic_align,
        0,
        PromptRole::TrainSemantic,
    )
}

/// `L_c + eta * L_dp`; gradients reach only the domain prompt.
#[allow(clippy::too_many_arguments)]
pub fn local_prompt_objective(
    ctx: &PromptContext<'_>,
    semantic_prompt: &PromptSet,
    domain_prompt: &PromptSet,
    modulation_mean: &Tensor,
    embeddings: &[&Tensor],
    labels: &[usize],
    client_domain: usize,
    eta: f64,
    domain_align: bool,
) -> Result<ObjectiveEval, PromptError> {
    objective(
        ctx,
        semantic_prompt,
        Some(domain_prompt),
        modulation_mean,
        embeddings,
        labels,
        eta,
        domain_align,
        client_domain,
        PromptRole::TrainDomain,
    )
}

#[allow(clippy::too_many_arguments)]
fn objective(
    ctx: &PromptContext<'_>,
    semantic_prompt: &PromptSet,
    domain_prompt: Option<&PromptSet>,
    modulation_mean: &Tensor,
    embeddings: &[&Tensor],
    labels: &[usize],
    weight: f64,
    include_alignment: bool,
    client_domain: usize,
    role: PromptRole,
) -> Result<ObjectiveEval, PromptError> {
    check_temperature(ctx.tau)?;
    if embeddings.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    let mut tape = Tape::new();

    let ps_node = match role {
        PromptRole::TrainSemantic => {
            tape.param(SEMANTIC_PROMPT_PARAM, semantic_prompt.tokens().clone())?
        }
        PromptRole::TrainDomain => tape.constant(semantic_prompt.tokens().clone()),
    };

    let pd_mod_node = match domain_prompt {
        None => tape.constant(Tensor::zeros(semantic_prompt.tokens().shape().to_vec())),
        Some(pd) => {
            let tile = tile_mean(pd, modulation_mean)?;
            let tile_node = tape.constant(tile);
            let pd_node = match role {
                PromptRole::TrainDomain => tape.param(DOMAIN_PROMPT_PARAM, pd.tokens().clone())?,
                PromptRole::TrainSemantic => tape.constant(pd.tokens().clone()),
            };
            tape.mul(pd_node, tile_node)?
        }
    };

    let feature_nodes = text_feature_nodes(
        &mut tape,
        ctx.text_encoder,
        ctx.text_table,
        semantic_prompt,
        ps_node,
        pd_mod_node,
    )?;

    // L_c over the batch
    let embedding_nodes: Vec<NodeId> = embeddings
        .iter()
        .map(|e| tape.constant((*e).clone()))
        .collect();
    let mut sample_losses = Vec::with_capacity(embeddings.len());
    for (emb_node, &label) in embedding_nodes.iter().zip(labels) {
        let mut cosines = Vec::with_capacity(feature_nodes.len());
        for feature in &feature_nodes {
            cosines.push(tape.cosine(*feature, *emb_node)?);
        }
        let stacked = tape.stack_scalars(&cosines)?;
        let logits = tape.scale(stacked, 1.0 / ctx.tau);
        sample_losses.push(tape.softmax_cross_entropy(logits, label)?);
    }
    let stacked = tape.stack_scalars(&sample_losses)?;
    let contrastive_node = tape.mean(stacked)?;
    let contrastive = tape.scalar_value(contrastive_node)?;

    let (loss_node, alignment) = if include_alignment {
        let (transform, frame) = match role {
            PromptRole::TrainSemantic => (ctx.semantic_transform, ctx.semantic_frame),
            PromptRole::TrainDomain => (
                ctx.domain_transform,
                ctx.domain_frame.ok_or(PromptError::MissingDomainFrame)?,
            ),
        };
        let nodes = transform.nodes_as_constants(&mut tape);
        let targets: Vec<usize> = match role {
            PromptRole::TrainSemantic => (0..feature_nodes.len()).collect(),
            PromptRole::TrainDomain => vec![client_domain; feature_nodes.len()],
        };
        let align_node = crate::transforms::alignment_loss_node(
            &mut tape,
            transform,
            nodes,
            frame,
            &feature_nodes,
            &targets,
            ctx.tau,
        )?;
        let align_value = tape.scalar_value(align_node)?;
        let weighted = tape.scale(align_node, weight);
        (tape.add(contrastive_node, weighted)?, Some(align_value))
    } else {
        (contrastive_node, None)
    };

    let total = tape.scalar_value(loss_node)?;
    let grads = tape.backward(loss_node)?;
    Ok(ObjectiveEval {
        total,
        contrastive,
        alignment,
        grads,
    })
}

fn text_feature_nodes(
    tape: &mut Tape,
    encoder: &FrozenTextEncoder,
    table: &TextEmbeddingTable,
    layout: &PromptSet,
    ps_node: NodeId,
    pd_mod_node: NodeId,
) -> Result<Vec<NodeId>, PromptError> {
    let l = layout.prompt_len;
    let d = layout.token_dim;
    let block = l * d;
    let rows = 2 * l + table.text_tokens();
    let mut features = Vec::with_capacity(layout.num_classes);
    for k in 0..layout.num_classes {
        let s = tape.slice(ps_node, k * block, vec![l, d])?;
        let m = tape.slice(pd_mod_node, k * block, vec![l, d])?;
        let text = tape.constant(table.class_embedding(k)?);
        let input = tape.concat(&[s, m, text], vec![rows, d])?;
        features.push(encoder.encode_on_tape(tape, input)?);
    }
    Ok(features)
}

/// Classifier built from frozen text features; prediction is
/// `argmax_k softmax(cos(T(E_k), I(x)) / tau)`.
#[derive(Debug, Clone)]
pub struct ClassScorer {
    text_features: Vec<Tensor>,
    tau: f64,
}

/// One prediction: the argmax class and the full probability vector.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl ClassScorer {
    pub fn new(
        encoder: &FrozenTextEncoder,
        table: &TextEmbeddingTable,
        semantic_prompt: &PromptSet,
        modulated_domain: &Tensor,
        tau: f64,
    ) -> Result<Self, PromptError> {
        check_temperature(tau)?;
        let text_features =
            class_text_features(encoder, table, semantic_prompt, modulated_domain)?;
        Ok(Self { text_features, tau })
    }

    pub fn num_classes(&self) -> usize {
        self.text_features.len()
    }

    pub fn text_features(&self) -> &[Tensor] {
        &self.text_features
    }

    pub fn predict(&self, embedding: &Tensor) -> Result<Prediction, PromptError> {
        let mut logits = Vec::with_capacity(self.text_features.len());
        for feature in &self.text_features {
            logits.push(crate::numerics::cosine_similarity(feature, embedding)? / self.tau);
        }
        let probabilities = crate::numerics::softmax(&logits);
        let class = probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("at least one class");
        Ok(Prediction {
            class,
            probabilities,
        })
    }
}

/// Convenience single-sample prediction through the full path.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    encoder: &FrozenTextEncoder,
    table: &TextEmbeddingTable,
    semantic_prompt: &PromptSet,
    modulated_domain: &Tensor,
    embedding: &Tensor,
    tau: f64,
) -> Result<Prediction, PromptError> {
    ClassScorer::new(encoder, table, semantic_prompt, modulated_domain, tau)?.predict(embedding)
}

/// Gaussian init helper shared by tests and the federation setup.
pub fn random_embedding<R: Rng>(dim: usize, rng: &mut R) -> Tensor {
    Tensor::vector((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .expect("finite embedding")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::numerics::fdcheck;
    use crate::transforms::TransformKind;

    const K: usize = 3;
    const L: usize = 2;
    const D: usize = 4;
    const T_TEXT: usize = 2;
    const EMBED: usize = 4;

    struct Fixture {
        encoder: FrozenTextEncoder,
        table: TextEmbeddingTable,
        semantic_transform: TransformNet,
        domain_transform: TransformNet,
        semantic_frame: EtfFrame,
        domain_frame: EtfFrame,
        p_s: PromptSet,
        p_d: PromptSet,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            Self {
                encoder: FrozenTextEncoder::new(2 * L + T_TEXT, D, EMBED, seed),
                table: TextEmbeddingTable::new(K, T_TEXT, D, seed),
                semantic_transform: TransformNet::new(TransformKind::Semantic, EMBED, K, seed),
                domain_transform: TransformNet::new(TransformKind::Domain, EMBED, 2, seed),
                semantic_frame: EtfFrame::generate(K, K, seed).unwrap(),
                domain_frame: EtfFrame::generate(2, 2, seed).unwrap(),
                p_s: PromptSet::init(PromptScope::GlobalSemantic, K, L, D, 0.02, seed),
                p_d: PromptSet::init(PromptScope::LocalDomain, K, L, D, 0.02, seed + 1),
            }
        }

        fn ctx(&self) -> PromptContext<'_> {
            PromptContext {
                text_encoder: &self.encoder,
                text_table: &self.table,
                semantic_transform: &self.semantic_transform,
                domain_transform: &self.domain_transform,
                semantic_frame: &self.semantic_frame,
                domain_frame: Some(&self.domain_frame),
                tau: 1.0,
            }
        }
    }

    #[test]
    fn modulation_with_ones_is_identity() {
        let f = Fixture::new(1);
        let ones = Tensor::vector(vec![1.0; D]).unwrap();
        let m = modulate_with_mean(&f.p_d, &ones).unwrap();
        assert_eq!(&m, f.p_d.tokens());
    }

    #[test]
    fn modulation_with_zero_mean_is_zero() {
        let f = Fixture::new(2);
        let zero = Tensor::zeros(vec![D]);
        let m = modulate_with_mean(&f.p_d, &zero).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_embedding_batch_modulates_elementwise() {
        let f = Fixture::new(3);
        let e = Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let m = modulate_domain_prompt(&f.p_d, &[&e]).unwrap();
        for (i, v) in m.data().iter().enumerate() {
            let expected = f.p_d.tokens().data()[i] * e.data()[i % D];
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let f = Fixture::new(4);
        assert!(matches!(
            modulate_domain_prompt(&f.p_d, &[]),
            Err(PromptError::EmptyBatch)
        ));
    }

    #[test]
    fn prompt_input_order_is_semantic_domain_text() {
        // L=1, T_text=1: three rows in stated order
        let table = TextEmbeddingTable::new(2, 1, 3, 9);
        let p_s = PromptSet::init(PromptScope::GlobalSemantic, 2, 1, 3, 0.5, 10);
        let p_d = PromptSet::init(PromptScope::LocalDomain, 2, 1, 3, 0.5, 11);
        let modulated = modulate_with_mean(&p_d, &Tensor::vector(vec![1.0; 3]).unwrap()).unwrap();
        let input = build_prompt_input(&p_s, &modulated, &table, 1).unwrap();
        assert_eq!(input.sequence.shape(), &[3, 3]);
        assert_eq!(&input.sequence.data()[0..3], &p_s.tokens().data()[3..6]);
        assert_eq!(&input.sequence.data()[3..6], &modulated.data()[3..6]);
        assert_eq!(
            &input.sequence.data()[6..9],
            table.class_embedding(1).unwrap().data()
        );
    }

    #[test]
    fn swapping_prompt_blocks_changes_encoding() {
        let f = Fixture::new(5);
        let mean = Tensor::vector(vec![1.0; D]).unwrap();
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let normal = build_prompt_input(&f.p_s, &modulated, &f.table, 0).unwrap();
        // swap: treat p_d as the semantic block and vice versa
        let p_d_as_set = PromptSet {
            scope: PromptScope::GlobalSemantic,
            tokens: modulated.clone(),
            num_classes: K,
            prompt_len: L,
            token_dim: D,
        };
        let swapped =
            build_prompt_input(&p_d_as_set, f.p_s.tokens(), &f.table, 0).unwrap();
        let a = f.encoder.encode(&normal.sequence).unwrap();
        let b = f.encoder.encode(&swapped.sequence).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn contrastive_orthogonal_features_give_ln_k() {
        let f = Fixture::new(6);
        let mean = Tensor::vector(vec![1.0; D]).unwrap();
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let features = class_text_features(&f.encoder, &f.table, &f.p_s, &modulated).unwrap();
        // EMBED = 4 > K = 3: build an embedding orthogonal to all features
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for feat in &features {
            let mut q = feat.data().to_vec();
            for b in &basis {
                let dot: f64 = q.iter().zip(b).map(|(x, y)| x * y).sum();
                for (qv, bv) in q.iter_mut().zip(b) {
                    *qv -= dot * bv;
                }
            }
            let norm: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                basis.push(q.iter().map(|x| x / norm).collect());
            }
        }
        let mut v = vec![0.0, 0.0, 0.0, 1.0];
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vv, bv) in v.iter_mut().zip(b) {
                *vv -= dot * bv;
            }
        }
        let e = Tensor::vector(v).unwrap();
        assert!(e.l2_norm() > 1e-6, "degenerate orthogonal construction");
        let loss = contrastive_loss(
            &f.encoder,
            &f.table,
            &f.p_s,
            &modulated,
            &[&e],
            &[1],
            0.07,
        )
        .unwrap();
        assert!((loss - (K as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_etf_aligned_features_frozen_value() {
        // text features = ETF prototypes, image embedding = prototype of the
        // true class: logits (1, -1/2, -1/2) at tau = 1
        let frame = EtfFrame::generate(3, EMBED, 12).unwrap();
        let features = frame.prototype_vectors();
        let e = frame.prototype(0);
        let loss = contrastive_loss_with_features(&features, &[&e], &[0], 1.0).unwrap();
        assert!((loss - 0.368981135401315).abs() < 1e-12);
    }

    #[test]
    fn contrastive_invariant_to_batch_duplication() {
        let f = Fixture::new(7);
        let mean = Tensor::vector(vec![1.0; D]).unwrap();
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let mut rng = derive_rng(50, &[1]);
        let e1 = random_embedding(EMBED, &mut rng);
        let e2 = random_embedding(EMBED, &mut rng);
        let single = contrastive_loss(
            &f.encoder, &f.table, &f.p_s, &modulated, &[&e1, &e2], &[0, 2], 0.07,
        )
        .unwrap();
        let doubled = contrastive_loss(
            &f.encoder,
            &f.table,
            &f.p_s,
            &modulated,
            &[&e1, &e2, &e1, &e2],
            &[0, 2, 0, 2],
            0.07,
        )
        .unwrap();
        assert!((single - doubled).abs() < 1e-12);
    }

    /// Near-identity transform: w1 = eps*I (top block), w2 = I/eps readout;
    /// tanh error is O(eps^2) and vanishes at the tolerances used here.
    fn near_identity_net(dim: usize) -> TransformNet {
        let eps = 1e-6;
        let mut net = TransformNet::new(TransformKind::Semantic, dim, dim, 0);
        let mut w1 = vec![0.0; 2 * dim * dim];
        for i in 0..dim {
            w1[i * dim + i] = eps;
        }
        let mut w2 = vec![0.0; dim * 2 * dim];
        for i in 0..dim {
            w2[i * 2 * dim + i] = 1.0 / eps;
        }
        let [nw1, nb1, nw2, nb2] = net.weight_tensors_mut();
        *nw1 = Tensor::new(vec![2 * dim, dim], w1).unwrap();
        *nb1 = Tensor::zeros(vec![2 * dim]);
        *nw2 = Tensor::new(vec![dim, 2 * dim], w2).unwrap();
        *nb2 = Tensor::zeros(vec![dim]);
        net
    }

    #[test]
    fn semantic_prompt_loss_at_prototypes() {
        let frame = EtfFrame::generate(3, 4, 13).unwrap();
        let net = near_identity_net(4);
        let features = frame.prototype_vectors();
        let loss = semantic_prompt_loss(&features, &net, &frame, 1.0).unwrap();
        assert!((loss - 0.368981135401315).abs() < 1e-6);
    }

    #[test]
    fn semantic_prompt_loss_wrong_prototype_k2() {
        let frame = EtfFrame::generate(2, 3, 14).unwrap();
        let net = near_identity_net(3);
        // features swapped: class 0 gets v^1, class 1 gets v^0
        let features = vec![frame.prototype(1), frame.prototype(0)];
        let per_class =
            semantic_prompt_class_losses(&features, &net, &frame, 1.0).unwrap();
        for loss in per_class {
            assert!((loss - 2.126928011042972).abs() < 1e-6);
        }
    }

    #[test]
    fn semantic_prompt_loss_random_features_near_ln_k() {
        let dim = 64;
        let k = 5;
        let frame = EtfFrame::generate(k, dim, 15).unwrap();
        let net = near_identity_net(dim);
        let mut rng = derive_rng(16, &[7]);
        let features: Vec<Tensor> = (0..k)
            .map(|_| {
                let v = random_embedding(dim, &mut rng);
                v.scale(1.0 / v.l2_norm())
            })
            .collect();
        let loss = semantic_prompt_loss(&features, &net, &frame, 1.0).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn domain_prompt_loss_frozen_values() {
        // aligned with own domain prototype, N = 4
        let frame = EtfFrame::generate(4, 5, 17).unwrap();
        let net = near_identity_net(5);
        let features = vec![frame.prototype(0); 3];
        let loss = domain_prompt_loss(&features, &net, &frame, 0, 1.0).unwrap();
        assert!((loss - 0.582657653061800).abs() < 1e-6);

        // N = 2 antipodal, feature at the other prototype
        let frame2 = EtfFrame::generate(2, 5, 18).unwrap();
        let features2 = vec![frame2.prototype(1); 3];
        let loss2 = domain_prompt_loss(&features2, &net, &frame2, 0, 1.0).unwrap();
        assert!((loss2 - 2.126928011042972).abs() < 1e-6);
    }

    #[test]
    fn domain_prompt_loss_identical_features_identical_terms() {
        let f = Fixture::new(19);
        let feature = Tensor::vector(vec![0.3, -0.4, 0.8, 0.1]).unwrap();
        let features = vec![feature; K];
        let per_class = domain_prompt_class_losses(
            &features,
            &f.domain_transform,
            &f.domain_frame,
            0,
            0.07,
        )
        .unwrap();
        for w in per_class.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    fn toy_batch(seed: u64, n: usize) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = derive_rng(seed, &[2]);
        let embeddings = (0..n).map(|_| random_embedding(EMBED, &mut rng)).collect();
        let labels = (0..n).map(|i| i % K).collect();
        (embeddings, labels)
    }

    #[test]
    fn global_objective_lambda_zero_equals_contrastive() {
        let f = Fixture::new(20);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(21, 4);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        let eval = global_prompt_objective(
            &ctx, &f.p_s, Some(&f.p_d), &mean, &refs, &labels, 0.0, false,
        )
        .unwrap();
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let direct = contrastive_loss(
            &f.encoder, &f.table, &f.p_s, &modulated, &refs, &labels, ctx.tau,
        )
        .unwrap();
        assert!((eval.total - direct).abs() < 1e-12);
        assert!((eval.contrastive - direct).abs() < 1e-12);
        assert!(eval.alignment.is_none());
    }

    #[test]
    fn global_objective_is_exact_affine_combination() {
        let f = Fixture::new(22);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(23, 4);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        for lambda in [0.25, 1.0, 2.0] {
            let eval = global_prompt_objective(
                &ctx, &f.p_s, Some(&f.p_d), &mean, &refs, &labels, lambda, true,
            )
            .unwrap();
            let align = eval.alignment.unwrap();
            assert!((eval.total - (eval.contrastive + lambda * align)).abs() < 1e-12);
        }
    }

    #[test]
    fn global_objective_gradients_exclude_domain_prompt() {
        let f = Fixture::new(24);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(25, 3);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        let eval = global_prompt_objective(
            &ctx, &f.p_s, Some(&f.p_d), &mean, &refs, &labels, 1.0, true,
        )
        .unwrap();
        assert!(eval.grads.contains(SEMANTIC_PROMPT_PARAM));
        assert!(!eval.grads.contains(DOMAIN_PROMPT_PARAM));
    }

    #[test]
    fn local_objective_gradients_exclude_semantic_prompt() {
        let f = Fixture::new(26);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(27, 3);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        let eval = local_prompt_objective(
            &ctx, &f.p_s, &f.p_d, &mean, &refs, &labels, 1, 1.0, true,
        )
        .unwrap();
        assert!(eval.grads.contains(DOMAIN_PROMPT_PARAM));
        assert!(!eval.grads.contains(SEMANTIC_PROMPT_PARAM));
    }

    #[test]
    fn objectives_coincide_at_zero_weights() {
        let f = Fixture::new(28);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(29, 5);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        let g = global_prompt_objective(
            &ctx, &f.p_s, Some(&f.p_d), &mean, &refs, &labels, 0.0, false,
        )
        .unwrap();
        let l = local_prompt_objective(
            &ctx, &f.p_s, &f.p_d, &mean, &refs, &labels, 0, 0.0, false,
        )
        .unwrap();
        assert!((g.total - l.total).abs() < 1e-12);
    }

    #[test]
    fn global_objective_gradient_matches_finite_differences() {
        let f = Fixture::new(30);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(31, 3);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        let lambda = 0.7;

        let eval = global_prompt_objective(
            &ctx, &f.p_s, Some(&f.p_d), &mean, &refs, &labels, lambda, true,
        )
        .unwrap();
        let mut analytic = BTreeMap::new();
        analytic.insert(
            "p_s".to_string(),
            eval.grads.require(SEMANTIC_PROMPT_PARAM).unwrap().clone(),
        );

        let mut params = BTreeMap::new();
        params.insert("p_s".to_string(), f.p_s.tokens().clone());
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let numeric = fdcheck::central_difference_gradients(&params, fdcheck::DEFAULT_STEP, |p| {
            let mut candidate = f.p_s.clone();
            candidate.set_tokens(p["p_s"].clone())?;
            let features =
                class_text_features(&f.encoder, &f.table, &candidate, &modulated)
                    .map_err(|_| NumericsError::EmptyInput)?;
            let c = contrastive_loss_with_features(&features, &refs, &labels, ctx.tau)
                .map_err(|_| NumericsError::EmptyInput)?;
            let s = semantic_prompt_loss(&features, ctx.semantic_transform, ctx.semantic_frame, ctx.tau)
                .map_err(|_| NumericsError::EmptyInput)?;
            Ok(c + lambda * s)
        })
        .unwrap();

        let mut numeric_named = BTreeMap::new();
        numeric_named.insert("p_s".to_string(), numeric["p_s"].clone());
        assert!(fdcheck::max_relative_error(&analytic, &numeric_named) < 1e-4);
    }

    #[test]
    fn local_objective_gradient_matches_finite_differences() {
        let f = Fixture::new(32);
        let ctx = f.ctx();
        let (embeddings, labels) = toy_batch(33, 3);
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let mean = batch_mean(&refs).unwrap();
        let eta = 1.3;

        let eval = local_prompt_objective(
            &ctx, &f.p_s, &f.p_d, &mean, &refs, &labels, 1, eta, true,
        )
        .unwrap();
        let mut analytic = BTreeMap::new();
        analytic.insert(
            "p_d".to_string(),
            eval.grads.require(DOMAIN_PROMPT_PARAM).unwrap().clone(),
        );

        let mut params = BTreeMap::new();
        params.insert("p_d".to_string(), f.p_d.tokens().clone());
        let numeric = fdcheck::central_difference_gradients(&params, fdcheck::DEFAULT_STEP, |p| {
            let mut candidate = f.p_d.clone();
            candidate.set_tokens(p["p_d"].clone())?;
            let modulated = modulate_with_mean(&candidate, &mean)
                .map_err(|_| NumericsError::EmptyInput)?;
            let features = class_text_features(&f.encoder, &f.table, &f.p_s, &modulated)
                .map_err(|_| NumericsError::EmptyInput)?;
            let c = contrastive_loss_with_features(&features, &refs, &labels, ctx.tau)
                .map_err(|_| NumericsError::EmptyInput)?;
            let dl = domain_prompt_loss(&features, ctx.domain_transform, ctx.domain_frame.unwrap(), 1, ctx.tau)
                .map_err(|_| NumericsError::EmptyInput)?;
            Ok(c + eta * dl)
        })
        .unwrap();

        let mut numeric_named = BTreeMap::new();
        numeric_named.insert("p_d".to_string(), numeric["p_d"].clone());
        assert!(fdcheck::max_relative_error(&analytic, &numeric_named) < 1e-4);
    }

    #[test]
    fn predict_probabilities_form_distribution() {
        let f = Fixture::new(34);
        let mean = Tensor::vector(vec![1.0; D]).unwrap();
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let mut rng = derive_rng(35, &[3]);
        let e = random_embedding(EMBED, &mut rng);
        let pred = predict(&f.encoder, &f.table, &f.p_s, &modulated, &e, 0.07).unwrap();
        assert!(pred.probabilities.iter().all(|p| *p >= 0.0));
        let sum: f64 = pred.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(pred.class, argmax(&pred.probabilities));
    }

    #[test]
    fn predict_argmax_invariant_to_temperature_and_embedding_scale() {
        let f = Fixture::new(36);
        let mean = Tensor::vector(vec![1.0; D]).unwrap();
        let modulated = modulate_with_mean(&f.p_d, &mean).unwrap();
        let mut rng = derive_rng(37, &[4]);
        for _ in 0..10 {
            let e = random_embedding(EMBED, &mut rng);
            let base = predict(&f.encoder, &f.table, &f.p_s, &modulated, &e, 1.0).unwrap();
            for tau in [0.07, 0.5, 10.0] {
                let p = predict(&f.encoder, &f.table, &f.p_s, &modulated, &e, tau).unwrap();
                assert_eq!(p.class, base.class);
            }
            let scaled = e.scale(7.25);
            let p = predict(&f.encoder, &f.table, &f.p_s, &modulated, &scaled, 1.0).unwrap();
            assert_eq!(p.class, base.class);
        }
    }

    #[test]
    fn predict_single_class_degenerate() {
        let table = TextEmbeddingTable::new(1, T_TEXT, D, 40);
        let encoder = FrozenTextEncoder::new(2 * L + T_TEXT, D, EMBED, 40);
        let p_s = PromptSet::init(PromptScope::GlobalSemantic, 1, L, D, 0.02, 41);
        let p_d = PromptSet::init(PromptScope::LocalDomain, 1, L, D, 0.02, 42);
        let modulated =
            modulate_with_mean(&p_d, &Tensor::vector(vec![1.0; D]).unwrap()).unwrap();
        let mut rng = derive_rng(43, &[5]);
        let e = random_embedding(EMBED, &mut rng);
        let pred = predict(&encoder, &table, &p_s, &modulated, &e, 0.07).unwrap();
        assert_eq!(pred.class, 0);
        assert!((pred.probabilities[0] - 1.0).abs() < 1e-15);
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

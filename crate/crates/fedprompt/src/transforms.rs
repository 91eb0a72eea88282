//! Semantic and domain transformation networks.
//!
//! Each net is a two-layer tanh MLP from embedding space into the matching
//! ETF space. During its own training phase the net's weights are the only
//! trainable parameters (encoders and frames stay frozen); during prompt
//! training the nets are frozen and act as fixed projections.

use rand::seq::SliceRandom;

use crate::encoders::EmbeddingDataset;
use crate::etf::EtfFrame;
use crate::numerics::{fingerprint_all, GradientMap, NodeId, NumericsError, Tape, Tensor};
use crate::seeding::{derive_rng, tag};

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("dimension mismatch: net expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Semantic,
    Domain,
}

/// Two-layer tanh MLP mapping `in_dim` features to `out_dim` ETF coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformNet {
    pub kind: TransformKind,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    in_dim: usize,
    out_dim: usize,
}

/// Tape handles for one net's weights, either parameters or constants.
#[derive(Debug, Clone, Copy)]
pub struct TransformNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

const PARAM_FIELDS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl TransformNet {
    pub fn new(kind: TransformKind, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let hidden = 2 * in_dim;
        let kind_tag = match kind {
            TransformKind::Semantic => 1,
            TransformKind::Domain => 2,
        };
        let mut rng = derive_rng(seed, &[tag::TRANSFORM_INIT, kind_tag]);
        Self {
            kind,
            w1: Tensor::gaussian(vec![hidden, in_dim], 1.0 / (in_dim as f64).sqrt(), &mut rng),
            b1: Tensor::gaussian(vec![hidden], 0.1, &mut rng),
            w2: Tensor::gaussian(vec![out_dim, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng),
            b2: Tensor::gaussian(vec![out_dim], 0.1, &mut rng),
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

    /// Pure forward pass.
    pub fn apply(&self, feature: &Tensor) -> Result<Tensor, TransformError> {
        if feature.len() != self.in_dim {
            return Err(TransformError::DimensionMismatch {
                expected: self.in_dim,
                actual: feature.len(),
            });
        }
        let hidden = self.b1.len();
        let mut h = self.b1.data().to_vec();
        for (i, slot) in h.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, x) in feature.data().iter().enumerate() {
                acc += self.w1.data()[i * self.in_dim + j] * x;
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
        Ok(Tensor::vector(out).expect("finite forward"))
    }

    /// Registers the weights as trainable tape parameters named
    /// `<prefix>.w1` and so on.
    pub fn nodes_as_params(
        &self,
        tape: &mut Tape,
        prefix: &str,
    ) -> Result<TransformNodes, NumericsError> {
        Ok(TransformNodes {
            w1: tape.param(&format!("{prefix}.w1"), self.w1.clone())?,
            b1: tape.param(&format!("{prefix}.b1"), self.b1.clone())?,
            w2: tape.param(&format!("{prefix}.w2"), self.w2.clone())?,
            b2: tape.param(&format!("{prefix}.b2"), self.b2.clone())?,
        })
    }

    /// Places the weights on the tape as constants (frozen phase).
    pub fn nodes_as_constants(&self, tape: &mut Tape) -> TransformNodes {
        TransformNodes {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }

    /// Tape forward pass through previously placed weight nodes.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        nodes: TransformNodes,
        input: NodeId,
    ) -> Result<NodeId, TransformError> {
        if tape.value(input).len() != self.in_dim {
            return Err(TransformError::DimensionMismatch {
                expected: self.in_dim,
                actual: tape.value(input).len(),
            });
        }
        let flat = tape.slice(input, 0, vec![self.in_dim])?;
        let lin1 = tape.matvec(nodes.w1, flat)?;
        let pre1 = tape.add(lin1, nodes.b1)?;
        let h = tape.tanh(pre1);
        let lin2 = tape.matvec(nodes.w2, h)?;
        Ok(tape.add(lin2, nodes.b2)?)
    }

    /// One SGD step from a gradient map produced with the given prefix.
    pub fn apply_gradients(
        &mut self,
        prefix: &str,
        grads: &GradientMap,
        lr: f64,
    ) -> Result<(), NumericsError> {
        for (field, tensor) in PARAM_FIELDS
            .iter()
            .zip([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2])
        {
            let g = grads.get_or_zero(&format!("{prefix}.{field}"))?;
            tensor.sgd_step(&g, lr)?;
        }
        Ok(())
    }

    pub fn weight_tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn weight_tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_all([&self.w1, &self.b1, &self.w2, &self.b2])
    }
}

fn check_temperature(tau: f64) -> Result<(), TransformError> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(TransformError::Temperature(tau))
    }
}

/// Builds the softmax-over-cosines loss node for a batch of transformed
/// features: mean over samples of `sce(cos(phi(x_i), v_k) / tau, target_i)`.
pub fn alignment_loss_node(
    tape: &mut Tape,
    net: &TransformNet,
    nodes: TransformNodes,
    frame: &EtfFrame,
    features: &[NodeId],
    targets: &[usize],
    tau: f64,
) -> Result<NodeId, TransformError> {
    check_temperature(tau)?;
    let prototypes: Vec<NodeId> = frame
        .prototype_vectors()
        .into_iter()
        .map(|p| tape.constant(p))
        .collect();
    let mut sample_losses = Vec::with_capacity(features.len());
    for (feature, &target) in features.iter().zip(targets) {
        let projected = net.forward_with(tape, nodes, *feature)?;
        let mut cosines = Vec::with_capacity(prototypes.len());
        for proto in &prototypes {
            cosines.push(tape.cosine(projected, *proto)?);
        }
        let stacked = tape.stack_scalars(&cosines)?;
        let logits = tape.scale(stacked, 1.0 / tau);
        sample_losses.push(tape.softmax_cross_entropy(logits, target)?);
    }
    let stacked = tape.stack_scalars(&sample_losses)?;
    Ok(tape.mean(stacked)?)
}

/// Cross-entropy of the transformed feature's cosines against the semantic
/// prototypes, target = the sample's class.
pub fn semantic_alignment_loss(
    net: &TransformNet,
    frame: &EtfFrame,
    feature: &Tensor,
    label: usize,
    tau: f64,
) -> Result<f64, TransformError> {
    alignment_loss_value(net, frame, feature, label, tau)
}

/// Same functional form over the domain prototypes, target = the client's
/// own domain index.
pub fn domain_alignment_loss(
    net: &TransformNet,
    frame: &EtfFrame,
    feature: &Tensor,
    domain: usize,
    tau: f64,
) -> Result<f64, TransformError> {
    alignment_loss_value(net, frame, feature, domain, tau)
}

fn alignment_loss_value(
    net: &TransformNet,
    frame: &EtfFrame,
    feature: &Tensor,
    target: usize,
    tau: f64,
) -> Result<f64, TransformError> {
    check_temperature(tau)?;
    if target >= frame.count() {
        return Err(TransformError::Numerics(NumericsError::IndexOutOfRange {
            index: target,
            len: frame.count(),
        }));
    }
    let projected = net.apply(feature)?;
    let mut logits = Vec::with_capacity(frame.count());
    for k in 0..frame.count() {
        logits.push(crate::numerics::cosine_similarity(&projected, &frame.prototype(k))? / tau);
    }
    Ok(crate::numerics::softmax_cross_entropy(&logits, target)?)
}

/// Which nets a training pass updates.
#[derive(Debug, Clone, Copy)]
pub struct TransformTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub train_semantic: bool,
    pub train_domain: bool,
}

/// Per-pass loss averages (None when the corresponding net was not trained).
#[derive(Debug, Clone, Default)]
pub struct TransformTrainStats {
    pub semantic_loss_mean: Option<f64>,
    pub domain_loss_mean: Option<f64>,
}

/// Trains the two nets on a client's shard with plain SGD. Frames and the
/// shard are read-only; with `epochs == 0` the nets are returned untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_transforms(
    semantic_net: &mut TransformNet,
    domain_net: &mut TransformNet,
    shard: &EmbeddingDataset,
    semantic_frame: &EtfFrame,
    domain_frame: &EtfFrame,
    client_domain: usize,
    cfg: &TransformTrainConfig,
    stream_seed: u64,
) -> Result<TransformTrainStats, TransformError> {
    check_temperature(cfg.tau)?;
    let mut stats = TransformTrainStats::default();
    if shard.is_empty() {
        return Ok(stats);
    }
    let mut semantic_sum = 0.0;
    let mut domain_sum = 0.0;
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = derive_rng(stream_seed, &[tag::TRANSFORM_SHUFFLE, epoch as u64]);
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let embeddings: Vec<&Tensor> =
                batch.iter().map(|&i| &shard.records()[i].embedding).collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| usize::from(shard.records()[i].label))
                .collect();
            if cfg.train_semantic {
                semantic_sum += sgd_alignment_step(
                    semantic_net,
                    semantic_frame,
                    &embeddings,
                    &labels,
                    cfg.tau,
                    cfg.lr,
                    "phi_semantic",
                )?;
            }
            if cfg.train_domain {
                let domains = vec![client_domain; batch.len()];
                domain_sum += sgd_alignment_step(
                    domain_net,
                    domain_frame,
                    &embeddings,
                    &domains,
                    cfg.tau,
                    cfg.lr,
                    "phi_domain",
                )?;
            }
            steps += 1;
        }
    }
    if steps > 0 {
        if cfg.train_semantic {
            stats.semantic_loss_mean = Some(semantic_sum / steps as f64);
        }
        if cfg.train_domain {
            stats.domain_loss_mean = Some(domain_sum / steps as f64);
        }
    }
    Ok(stats)
}

fn sgd_alignment_step(
    net: &mut TransformNet,
    frame: &EtfFrame,
    embeddings: &[&Tensor],
    targets: &[usize],
    tau: f64,
    lr: f64,
    prefix: &str,
) -> Result<f64, TransformError> {
    let mut tape = Tape::new();
    let nodes = net.nodes_as_params(&mut tape, prefix)?;
    let features: Vec<NodeId> = embeddings
        .iter()
        .map(|e| tape.constant((*e).clone()))
        .collect();
    let loss = alignment_loss_node(&mut tape, net, nodes, frame, &features, targets, tau)?;
    let value = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    net.apply_gradients(prefix, &grads, lr)?;
    Ok(value)
}

/// Mean alignment loss of a net over a full shard, no parameter updates.
pub fn mean_alignment_loss(
    net: &TransformNet,
    frame: &EtfFrame,
    shard: &EmbeddingDataset,
    targets: AlignmentTarget,
    tau: f64,
) -> Result<f64, TransformError> {
    if shard.is_empty() {
        return Err(TransformError::Numerics(NumericsError::EmptyInput));
    }
    let mut sum = 0.0;
    for rec in shard.records() {
        let target = match targets {
            AlignmentTarget::SampleLabel => usize::from(rec.label),
            AlignmentTarget::FixedDomain(d) => d,
        };
        sum += alignment_loss_value(net, frame, &rec.embedding, target, tau)?;
    }
    Ok(sum / shard.len() as f64)
}

/// Target selection for [`mean_alignment_loss`].
#[derive(Debug, Clone, Copy)]
pub enum AlignmentTarget {
    SampleLabel,
    FixedDomain(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::numerics::fdcheck;

    fn toy_net(seed: u64) -> TransformNet {
        TransformNet::new(TransformKind::Semantic, 4, 3, seed)
    }

    /// Net that outputs `value` for every input (w1 = b1 = w2 = 0, b2 = value).
    fn constant_net(in_dim: usize, value: &Tensor) -> TransformNet {
        let out_dim = value.len();
        let mut net = TransformNet::new(TransformKind::Semantic, in_dim, out_dim, 0);
        net.w1 = Tensor::zeros(vec![2 * in_dim, in_dim]);
        net.b1 = Tensor::zeros(vec![2 * in_dim]);
        net.w2 = Tensor::zeros(vec![out_dim, 2 * in_dim]);
        net.b2 = value.clone();
        net
    }

    #[test]
    fn apply_is_deterministic() {
        let net = toy_net(3);
        let x = Tensor::vector(vec![0.4, -0.1, 0.2, 0.9]).unwrap();
        assert_eq!(net.apply(&x).unwrap(), net.apply(&x).unwrap());
    }

    #[test]
    fn apply_rejects_wrong_dim() {
        let net = toy_net(3);
        assert!(matches!(
            net.apply(&Tensor::zeros(vec![5])),
            Err(TransformError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pure_and_tape_forward_agree() {
        let net = toy_net(11);
        let x = Tensor::vector(vec![0.4, -0.1, 0.2, 0.9]).unwrap();
        let pure = net.apply(&x).unwrap();
        let mut tape = Tape::new();
        let nodes = net.nodes_as_constants(&mut tape);
        let input = tape.constant(x);
        let out = net.forward_with(&mut tape, nodes, input).unwrap();
        for (a, b) in pure.data().iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = toy_net(7);
        let frame = EtfFrame::generate(3, 3, 2).unwrap();
        let x = Tensor::vector(vec![0.7, -0.3, 0.2, 0.5]).unwrap();
        let tau = 0.5;

        let mut params = BTreeMap::new();
        for (name, t) in PARAM_FIELDS.iter().zip(net.weight_tensors()) {
            params.insert(format!("phi.{name}"), t.clone());
        }
        let numeric = fdcheck::central_difference_gradients(&params, fdcheck::DEFAULT_STEP, |p| {
            let mut candidate = net.clone();
            for (name, t) in PARAM_FIELDS.iter().zip(candidate.weight_tensors_mut()) {
                *t = p[&format!("phi.{name}")].clone();
            }
            semantic_alignment_loss(&candidate, &frame, &x, 1, tau)
                .map_err(|_| NumericsError::EmptyInput)
        })
        .unwrap();

        let mut tape = Tape::new();
        let nodes = net.nodes_as_params(&mut tape, "phi").unwrap();
        let feature = tape.constant(x);
        let loss =
            alignment_loss_node(&mut tape, &net, nodes, &frame, &[feature], &[1], tau).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = BTreeMap::new();
        for name in PARAM_FIELDS {
            analytic.insert(
                format!("phi.{name}"),
                grads.require(&format!("phi.{name}")).unwrap().clone(),
            );
        }
        assert!(fdcheck::max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = toy_net(19);
        let frame = EtfFrame::generate(3, 3, 4).unwrap();
        let x = Tensor::vector(vec![0.2, 0.8, -0.4, 0.1]).unwrap();
        let tau = 1.0;

        let mut params = BTreeMap::new();
        params.insert("x".to_string(), x.clone());
        let numeric = fdcheck::central_difference_gradients(&params, fdcheck::DEFAULT_STEP, |p| {
            semantic_alignment_loss(&net, &frame, &p["x"], 0, tau)
                .map_err(|_| NumericsError::EmptyInput)
        })
        .unwrap();

        let mut tape = Tape::new();
        let nodes = net.nodes_as_constants(&mut tape);
        let feature = tape.param("x", x).unwrap();
        let loss =
            alignment_loss_node(&mut tape, &net, nodes, &frame, &[feature], &[0], tau).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = BTreeMap::new();
        analytic.insert("x".to_string(), grads.require("x").unwrap().clone());
        assert!(fdcheck::max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn loss_at_prototype_matches_frozen_value() {
        // transformed feature equal to v^0 at K=3: logits (1, -1/2, -1/2)
        let frame = EtfFrame::generate(3, 5, 6).unwrap();
        let net = constant_net(5, &frame.prototype(0));
        let input = Tensor::zeros(vec![5]);
        let loss = semantic_alignment_loss(&net, &frame, &input, 0, 1.0).unwrap();
        assert!((loss - 0.368981135401315).abs() < 1e-9);
    }

    /// Unit vector orthogonal to the span of every prototype of `frame`.
    fn orthogonal_to_frame(frame: &EtfFrame, dim: usize) -> Tensor {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for k in 0..frame.count() {
            let mut q = frame.prototype(k).data().to_vec();
            for b in &basis {
                let dot: f64 = q.iter().zip(b).map(|(a, c)| a * c).sum();
                for (qv, bv) in q.iter_mut().zip(b) {
                    *qv -= dot * bv;
                }
            }
            let norm: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                basis.push(q.iter().map(|x| x / norm).collect());
            }
        }
        let mut v = vec![0.0; dim];
        v[dim - 1] = 1.0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vv, bv) in v.iter_mut().zip(b) {
                *vv -= dot * bv;
            }
        }
        Tensor::vector(v).unwrap()
    }

    #[test]
    fn orthogonal_feature_gives_log_k() {
        // M > K leaves room for a direction orthogonal to every prototype
        let frame = EtfFrame::generate(3, 6, 8).unwrap();
        let v = orthogonal_to_frame(&frame, 6);
        let net = constant_net(6, &v);
        let loss = semantic_alignment_loss(&net, &frame, &Tensor::zeros(vec![6]), 1, 1.0).unwrap();
        assert!((loss - 3.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn small_temperature_saturates_aligned_loss() {
        let frame = EtfFrame::generate(4, 4, 10).unwrap();
        let net = constant_net(4, &frame.prototype(2));
        let loss = semantic_alignment_loss(&net, &frame, &Tensor::zeros(vec![4]), 2, 0.01).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn domain_loss_antipodal_frozen_values() {
        // N=2 frame: prototypes antipodal, logits (1, -1) and (-1, 1)
        let frame = EtfFrame::generate(2, 4, 3).unwrap();
        let aligned = constant_net(4, &frame.prototype(0));
        let loss =
            domain_alignment_loss(&aligned, &frame, &Tensor::zeros(vec![4]), 0, 1.0).unwrap();
        assert!((loss - 0.126928011042972).abs() < 1e-9);
        let wrong = constant_net(4, &frame.prototype(1));
        let loss_wrong =
            domain_alignment_loss(&wrong, &frame, &Tensor::zeros(vec![4]), 0, 1.0).unwrap();
        assert!((loss_wrong - 2.126928011042972).abs() < 1e-9);
    }

    #[test]
    fn four_domains_aligned_frozen_value() {
        // logits (1, -1/3, -1/3, -1/3): ln(e + 3 e^{-1/3}) - 1
        let frame = EtfFrame::generate(4, 6, 12).unwrap();
        let net = constant_net(6, &frame.prototype(0));
        let loss = domain_alignment_loss(&net, &frame, &Tensor::zeros(vec![6]), 0, 1.0).unwrap();
        assert!((loss - 0.582657653061800).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_to_four_domains_gives_ln4() {
        let frame = EtfFrame::generate(4, 8, 2).unwrap();
        let v = orthogonal_to_frame(&frame, 8);
        let net = constant_net(8, &v);
        let loss = domain_alignment_loss(&net, &frame, &Tensor::zeros(vec![8]), 1, 1.0).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn descent_decreases_domain_loss_on_fixed_sample() {
        let frame = EtfFrame::generate(2, 4, 3).unwrap();
        let mut net = TransformNet::new(TransformKind::Domain, 4, 4, 21);
        let x = Tensor::vector(vec![0.5, -0.2, 0.3, 0.8]).unwrap();
        let mut last = domain_alignment_loss(&net, &frame, &x, 0, 1.0).unwrap();
        for _ in 0..10 {
            sgd_alignment_step(&mut net, &frame, &[&x], &[0], 1.0, 0.01, "phi").unwrap();
            let now = domain_alignment_loss(&net, &frame, &x, 0, 1.0).unwrap();
            assert!(now <= last + 1e-12, "{now} vs {last}");
            last = now;
        }
    }

    #[test]
    fn losses_invariant_to_positive_feature_rescaling() {
        // scaling the net output (w2, b2 scaled) must not move the loss
        let frame = EtfFrame::generate(3, 4, 9).unwrap();
        let net = TransformNet::new(TransformKind::Semantic, 4, 4, 23);
        let x = Tensor::vector(vec![0.3, 0.1, -0.2, 0.6]).unwrap();
        let base = semantic_alignment_loss(&net, &frame, &x, 1, 0.07).unwrap();
        let mut scaled = net.clone();
        scaled.w2 = scaled.w2.scale(3.7);
        scaled.b2 = scaled.b2.scale(3.7);
        let rescaled = semantic_alignment_loss(&scaled, &frame, &x, 1, 0.07).unwrap();
        assert!((base - rescaled).abs() < 1e-10);
    }

    #[test]
    fn zero_epochs_leaves_nets_unchanged() {
        let mut s = toy_net(1);
        let mut d = TransformNet::new(TransformKind::Domain, 4, 2, 1);
        let before = (s.fingerprint(), d.fingerprint());
        let shard = tiny_shard();
        let sf = EtfFrame::generate(3, 3, 0).unwrap();
        let df = EtfFrame::generate(2, 2, 0).unwrap();
        let cfg = TransformTrainConfig {
            epochs: 0,
            lr: 0.1,
            batch_size: 4,
            tau: 0.5,
            train_semantic: true,
            train_domain: true,
        };
        train_transforms(&mut s, &mut d, &shard, &sf, &df, 0, &cfg, 77).unwrap();
        assert_eq!(before, (s.fingerprint(), d.fingerprint()));
    }

    #[test]
    fn training_leaves_frames_untouched_and_reduces_loss() {
        let mut s = TransformNet::new(TransformKind::Semantic, 4, 3, 5);
        let mut d = TransformNet::new(TransformKind::Domain, 4, 2, 5);
        let shard = tiny_shard();
        let sf = EtfFrame::generate(3, 3, 0).unwrap();
        let df = EtfFrame::generate(2, 2, 0).unwrap();
        let frame_prints = (sf.fingerprint(), df.fingerprint());
        let before_s =
            mean_alignment_loss(&s, &sf, &shard, AlignmentTarget::SampleLabel, 0.5).unwrap();
        let before_d =
            mean_alignment_loss(&d, &df, &shard, AlignmentTarget::FixedDomain(0), 0.5).unwrap();
        let cfg = TransformTrainConfig {
            epochs: 5,
            lr: 0.1,
            batch_size: 8,
            tau: 0.5,
            train_semantic: true,
            train_domain: true,
        };
        train_transforms(&mut s, &mut d, &shard, &sf, &df, 0, &cfg, 77).unwrap();
        let after_s =
            mean_alignment_loss(&s, &sf, &shard, AlignmentTarget::SampleLabel, 0.5).unwrap();
        let after_d =
            mean_alignment_loss(&d, &df, &shard, AlignmentTarget::FixedDomain(0), 0.5).unwrap();
        assert!(after_s < before_s, "{after_s} vs {before_s}");
        assert!(after_d < before_d, "{after_d} vs {before_d}");
        assert_eq!(frame_prints, (sf.fingerprint(), df.fingerprint()));
    }

    #[test]
    fn trained_domain_net_prefers_own_prototype() {
        let mut s = TransformNet::new(TransformKind::Semantic, 4, 3, 5);
        let mut d = TransformNet::new(TransformKind::Domain, 4, 4, 5);
        let shard = tiny_shard();
        let sf = EtfFrame::generate(3, 3, 0).unwrap();
        let df = EtfFrame::generate(4, 4, 0).unwrap();
        let own_domain = 2;
        let cfg = TransformTrainConfig {
            epochs: 20,
            lr: 0.2,
            batch_size: 8,
            tau: 0.5,
            train_semantic: false,
            train_domain: true,
        };
        train_transforms(&mut s, &mut d, &shard, &sf, &df, own_domain, &cfg, 4).unwrap();
        let mean_cos_to = |proto: usize| -> f64 {
            shard
                .records()
                .iter()
                .map(|rec| {
                    let projected = d.apply(&rec.embedding).unwrap();
                    crate::numerics::cosine_similarity(&projected, &df.prototype(proto)).unwrap()
                })
                .sum::<f64>()
                / shard.len() as f64
        };
        let own = mean_cos_to(own_domain);
        for other in 0..4 {
            if other != own_domain {
                assert!(
                    own > mean_cos_to(other),
                    "own-domain cosine {own} not above prototype {other}"
                );
            }
        }
    }

    #[test]
    fn epoch_mean_semantic_loss_drops_below_log_k_on_separable_data() {
        let mut s = TransformNet::new(TransformKind::Semantic, 4, 3, 5);
        let mut d = TransformNet::new(TransformKind::Domain, 4, 2, 5);
        let shard = tiny_shard();
        let sf = EtfFrame::generate(3, 3, 0).unwrap();
        let df = EtfFrame::generate(2, 2, 0).unwrap();
        let cfg = TransformTrainConfig {
            epochs: 30,
            lr: 0.2,
            batch_size: 8,
            tau: 0.5,
            train_semantic: true,
            train_domain: true,
        };
        train_transforms(&mut s, &mut d, &shard, &sf, &df, 0, &cfg, 3).unwrap();
        let mean_s =
            mean_alignment_loss(&s, &sf, &shard, AlignmentTarget::SampleLabel, 0.5).unwrap();
        assert!(mean_s < 3.0_f64.ln(), "mean semantic loss {mean_s} not below ln 3");
    }

    fn tiny_shard() -> EmbeddingDataset {
        use crate::encoders::EmbeddingRecord;
        let mut rng = derive_rng(42, &[100]);
        let mut records = Vec::new();
        for label in 0..3u16 {
            for _ in 0..6 {
                let center = [label as f64, -(label as f64), 0.5, 1.0 - label as f64];
                let noise = Tensor::gaussian(vec![4], 0.1, &mut rng);
                let embedding = Tensor::vector(
                    center.iter().zip(noise.data()).map(|(c, n)| c + n).collect(),
                )
                .unwrap();
                records.push(EmbeddingRecord {
                    domain: 0,
                    label,
                    embedding,
                });
            }
        }
        EmbeddingDataset::new(4, 3, 1, false, records).unwrap()
    }
}

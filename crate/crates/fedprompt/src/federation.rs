//! Client/server round protocol over an in-process message layer.
//!
//! A round is: broadcast the global semantic prompt and both transformation
//! nets, let every client train locally (transforms first, then prompts),
//! collect one serialized update per client at a synchronous barrier, and
//! aggregate with a plain per-entry mean in ascending client order. The
//! domain prompt never enters an update. Clients may train on worker threads;
//! determinism comes from per-(client, round) derived RNG streams and the
//! fixed aggregation order, never from scheduling.

use rand::seq::SliceRandom;

use crate::config::ExperimentConfig;
use crate::data::{dirichlet_partition, generate_synthetic, split_train_test, DataError};
use crate::encoders::{
    EmbeddingDataset, FrozenImageEncoder, FrozenTextEncoder, TextEmbeddingTable,
};
use crate::etf::EtfFrame;
use crate::numerics::{NumericsError, Tensor};
use crate::prompts::{
    self, PromptContext, PromptError, PromptScope, PromptSet, DOMAIN_PROMPT_PARAM,
    SEMANTIC_PROMPT_PARAM,
};
use crate::seeding::{derive_rng, mix, tag};
use crate::transforms::{
    train_transforms, TransformError, TransformKind, TransformNet, TransformTrainConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("update from client {client} has mismatched shapes: {context}")]
    ShapeMismatch { client: u32, context: String },
    #[error("client {id} did not report an update this round")]
    MissingClient { id: u32 },
    #[error("client {id} reported more than one update")]
    DuplicateClient { id: u32 },
    #[error("cannot aggregate an empty update set")]
    EmptyUpdateSet,
    #[error("update from client {client} is stamped round {got}, server is at round {expected}")]
    RoundStampMismatch { client: u32, expected: u32, got: u32 },
    #[error("client worker {id} panicked")]
    ClientPanic { id: u32 },
    #[error("update payload malformed: {0}")]
    Payload(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Everything that is frozen for the entire run and shared read-only.
#[derive(Debug, Clone)]
pub struct FrozenStack {
    pub semantic_frame: EtfFrame,
    /// Absent when the run has a single domain.
    pub domain_frame: Option<EtfFrame>,
    pub image_encoder: FrozenImageEncoder,
    pub text_encoder: FrozenTextEncoder,
    pub text_table: TextEmbeddingTable,
}

impl FrozenStack {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, crate::Error> {
        let semantic_frame = EtfFrame::generate(
            cfg.classes,
            cfg.etf_dim,
            mix(cfg.seed, &[tag::ETF_SEMANTIC]),
        )?;
        let domain_frame = if cfg.domains >= 2 {
            Some(EtfFrame::generate(
                cfg.domains,
                cfg.etf_dim,
                mix(cfg.seed, &[tag::ETF_DOMAIN]),
            )?)
        } else {
            None
        };
        Ok(Self {
            semantic_frame,
            domain_frame,
            image_encoder: FrozenImageEncoder::new(cfg.raw_dim, cfg.embed_dim, cfg.seed),
            text_encoder: FrozenTextEncoder::new(
                2 * cfg.prompt_tokens + cfg.text_tokens,
                cfg.token_dim,
                cfg.embed_dim,
                cfg.seed,
            ),
            text_table: TextEmbeddingTable::new(
                cfg.classes,
                cfg.text_tokens,
                cfg.token_dim,
                cfg.seed,
            ),
        })
    }

    /// Combined fingerprint of every frozen artifact; must be identical from
    /// round 0 to round R.
    pub fn fingerprint(&self) -> u64 {
        let mut h = self.semantic_frame.fingerprint();
        if let Some(frame) = &self.domain_frame {
            h ^= frame.fingerprint().rotate_left(1);
        }
        h ^= self.image_encoder.fingerprint().rotate_left(2);
        h ^= self.text_encoder.fingerprint().rotate_left(3);
        h ^= self.text_table.fingerprint().rotate_left(4);
        h
    }
}

/// One client's private state. The domain prompt lives and dies here.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub domain: usize,
    pub train_shard: EmbeddingDataset,
    /// Mean train-shard embedding, the frozen modulation input at eval time.
    pub shard_mean: Tensor,
    pub semantic_prompt: PromptSet,
    pub domain_prompt: PromptSet,
    pub semantic_transform: TransformNet,
    pub domain_transform: TransformNet,
}

/// Global state held by the server between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: u32,
    pub semantic_prompt: PromptSet,
    pub semantic_transform: TransformNet,
    pub domain_transform: TransformNet,
}

/// What one client uploads at the end of a round. Never contains the domain
/// prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdate {
    pub client_id: u32,
    pub round: u32,
    pub sample_count: u64,
    pub semantic_prompt: Tensor,
    /// w1, b1, w2, b2 of the semantic transformation net.
    pub semantic_transform: Vec<Tensor>,
    /// w1, b1, w2, b2 of the domain transformation net.
    pub domain_transform: Vec<Tensor>,
}

/// Expected tensor shapes of one update, derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShapes {
    pub prompt: Vec<usize>,
    pub transform: [Vec<usize>; 4],
}

impl ModelShapes {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let hidden = 2 * cfg.embed_dim;
        Self {
            prompt: vec![cfg.classes, cfg.prompt_tokens, cfg.token_dim],
            transform: [
                vec![hidden, cfg.embed_dim],
                vec![hidden],
                vec![cfg.etf_dim, hidden],
                vec![cfg.etf_dim],
            ],
        }
    }
}

pub(crate) fn write_block(buf: &mut Vec<u8>, data: &[f64]) {
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_block(
    bytes: &[u8],
    pos: &mut usize,
    shape: &[usize],
) -> Result<Tensor, String> {
    let expected: usize = shape.iter().product();
    if *pos + 8 > bytes.len() {
        return Err("truncated block header".to_string());
    }
    let len = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
    *pos += 8;
    if len != expected {
        return Err(format!("block length {len}, shape wants {expected}"));
    }
    if *pos + 8 * len > bytes.len() {
        return Err("truncated block payload".to_string());
    }
    let mut data = Vec::with_capacity(len);
    for k in 0..len {
        data.push(f64::from_le_bytes(
            bytes[*pos + 8 * k..*pos + 8 * (k + 1)].try_into().unwrap(),
        ));
    }
    *pos += 8 * len;
    Tensor::new(shape.to_vec(), data).map_err(|e| e.to_string())
}

impl RoundUpdate {
    /// Wire bytes: ids and sample count, then length-prefixed `f64` little-
    /// endian blocks in fixed order (semantic prompt, semantic net w1 b1 w2
    /// b2, domain net w1 b1 w2 b2). Identical encoding to checkpoint blocks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.client_id.to_le_bytes());
        buf.extend_from_slice(&self.round.to_le_bytes());
        buf.extend_from_slice(&self.sample_count.to_le_bytes());
        write_block(&mut buf, self.semantic_prompt.data());
        for t in self.semantic_transform.iter().chain(&self.domain_transform) {
            write_block(&mut buf, t.data());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], shapes: &ModelShapes) -> Result<Self, FederationError> {
        if bytes.len() < 16 {
            return Err(FederationError::Payload("truncated header".to_string()));
        }
        let client_id = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let round = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let sample_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut pos = 16;
        let semantic_prompt = read_block(bytes, &mut pos, &shapes.prompt)
            .map_err(FederationError::Payload)?;
        let mut nets = Vec::with_capacity(8);
        for shape in shapes.transform.iter().chain(shapes.transform.iter()) {
            nets.push(read_block(bytes, &mut pos, shape).map_err(FederationError::Payload)?);
        }
        if pos != bytes.len() {
            return Err(FederationError::Payload(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        let domain_transform = nets.split_off(4);
        Ok(Self {
            client_id,
            round,
            sample_count,
            semantic_prompt,
            semantic_transform: nets,
            domain_transform,
        })
    }
}

/// The aggregated global parameters produced by one barrier.
#[derive(Debug, Clone)]
pub struct AggregatePayload {
    pub semantic_prompt: Tensor,
    pub semantic_transform: Vec<Tensor>,
    pub domain_transform: Vec<Tensor>,
}

/// Per-entry mean of the updates, summed in ascending client-id order.
///
/// All `expected_clients` must report exactly once with the right round
/// stamp; there is no partial aggregation. With `weighted` the mean is
/// weighted by sample counts instead of uniform.
pub fn aggregate(
    updates: &[RoundUpdate],
    expected_clients: usize,
    round: u32,
    weighted: bool,
) -> Result<AggregatePayload, FederationError> {
    if updates.is_empty() {
        return Err(FederationError::EmptyUpdateSet);
    }
    let mut by_id: Vec<Option<&RoundUpdate>> = vec![None; expected_clients];
    for update in updates {
        if update.round != round {
            return Err(FederationError::RoundStampMismatch {
                client: update.client_id,
                expected: round,
                got: update.round,
            });
        }
        let slot = by_id
            .get_mut(update.client_id as usize)
            .ok_or(FederationError::MissingClient {
                id: update.client_id,
            })?;
        if slot.is_some() {
            return Err(FederationError::DuplicateClient {
                id: update.client_id,
            });
        }
        *slot = Some(update);
    }
    let ordered: Vec<&RoundUpdate> = by_id
        .iter()
        .enumerate()
        .map(|(id, slot)| {
            slot.ok_or(FederationError::MissingClient { id: id as u32 })
        })
        .collect::<Result<_, _>>()?;

    let reference = ordered[0];
    for update in &ordered {
        let same_shapes = update.semantic_prompt.shape() == reference.semantic_prompt.shape()
            && update.semantic_transform.len() == reference.semantic_transform.len()
            && update.domain_transform.len() == reference.domain_transform.len()
            && update
                .semantic_transform
                .iter()
                .zip(&reference.semantic_transform)
                .all(|(a, b)| a.shape() == b.shape())
            && update
                .domain_transform
                .iter()
                .zip(&reference.domain_transform)
                .all(|(a, b)| a.shape() == b.shape());
        if !same_shapes {
            return Err(FederationError::ShapeMismatch {
                client: update.client_id,
                context: "update tensors disagree with client 0".to_string(),
            });
        }
    }

    let total_samples: u64 = ordered.iter().map(|u| u.sample_count).sum();
    let weight_of = |u: &RoundUpdate| -> f64 {
        if weighted && total_samples > 0 {
            u.sample_count as f64 / total_samples as f64
        } else {
            1.0 / ordered.len() as f64
        }
    };

    let mean_of = |select: &dyn Fn(&RoundUpdate) -> &Tensor| -> Tensor {
        let shape = select(reference).shape().to_vec();
        let mut acc = vec![0.0; select(reference).len()];
        for update in &ordered {
            let w = weight_of(update);
            for (a, v) in acc.iter_mut().zip(select(update).data()) {
                *a += w * v;
            }
        }
        Tensor::new(shape, acc).expect("finite aggregate")
    };

    Ok(AggregatePayload {
        semantic_prompt: mean_of(&|u| &u.semantic_prompt),
        semantic_transform: (0..4)
            .map(|i| mean_of(&move |u: &RoundUpdate| &u.semantic_transform[i]))
            .collect(),
        domain_transform: (0..4)
            .map(|i| mean_of(&move |u: &RoundUpdate| &u.domain_transform[i]))
            .collect(),
    })
}

/// Loss running means of one client's local pass.
#[derive(Debug, Clone, Default)]
pub struct ClientRoundStats {
    pub client_id: u32,
    pub semantic_align_loss: Option<f64>,
    pub domain_align_loss: Option<f64>,
    pub contrastive_loss: Option<f64>,
    pub semantic_prompt_loss: Option<f64>,
    pub domain_prompt_loss: Option<f64>,
}

/// Output of one federated round.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: u32,
    pub client_stats: Vec<ClientRoundStats>,
    /// Wire bytes of every update that crossed the barrier this round.
    pub traffic_bytes: usize,
}

/// One client's local pass for `round`: transforms first, then prompts.
/// Returns the serializable update and the loss running means.
pub fn run_client_round(
    client: &mut ClientState,
    frozen: &FrozenStack,
    cfg: &ExperimentConfig,
    round: u32,
) -> Result<(RoundUpdate, ClientRoundStats), FederationError> {
    let mut stats = ClientRoundStats {
        client_id: client.id,
        ..Default::default()
    };

    // Phase 1: transformation networks (prompts untouched).
    if cfg.semantic_align || cfg.domain_align {
        let t_cfg = TransformTrainConfig {
            epochs: cfg.transform_epochs,
            lr: cfg.transform_lr,
            batch_size: cfg.batch_size,
            tau: cfg.tau,
            train_semantic: cfg.semantic_align,
            train_domain: cfg.domain_align && frozen.domain_frame.is_some(),
        };
        let domain_frame_ref = frozen.domain_frame.as_ref().unwrap_or(&frozen.semantic_frame);
        let t_stats = train_transforms(
            &mut client.semantic_transform,
            &mut client.domain_transform,
            &client.train_shard,
            &frozen.semantic_frame,
            domain_frame_ref,
            client.domain,
            &t_cfg,
            mix(cfg.seed, &[tag::TRANSFORM_SHUFFLE, client.id as u64, round as u64]),
        )?;
        stats.semantic_align_loss = t_stats.semantic_loss_mean;
        stats.domain_align_loss = t_stats.domain_loss_mean;
    }

    // Phase 2: prompts (nets frozen).
    let ctx = PromptContext {
        text_encoder: &frozen.text_encoder,
        text_table: &frozen.text_table,
        semantic_transform: &client.semantic_transform,
        domain_transform: &client.domain_transform,
        semantic_frame: &frozen.semantic_frame,
        domain_frame: frozen.domain_frame.as_ref(),
        tau: cfg.tau,
    };
    let mut contrastive_sum = 0.0;
    let mut semantic_sum = 0.0;
    let mut domain_sum = 0.0;
    let mut steps = 0usize;
    for epoch in 0..cfg.prompt_epochs {
        let mut rng = derive_rng(
            cfg.seed,
            &[tag::PROMPT_SHUFFLE, client.id as u64, round as u64, epoch as u64],
        );
        let mut order: Vec<usize> = (0..client.train_shard.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let embeddings: Vec<&Tensor> = batch
                .iter()
                .map(|&i| &client.train_shard.records()[i].embedding)
                .collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| usize::from(client.train_shard.records()[i].label))
                .collect();
            let mean = prompts::batch_mean(&embeddings)?;

            let domain_prompt = cfg.personalized_prompt.then_some(&client.domain_prompt);
            let global_eval = prompts::global_prompt_objective(
                &ctx,
                &client.semantic_prompt,
                domain_prompt,
                &mean,
                &embeddings,
                &labels,
                cfg.lambda,
                cfg.semantic_align,
            )?;
            let grad = global_eval.grads.require(SEMANTIC_PROMPT_PARAM)?;
            client.semantic_prompt.sgd_step(grad, cfg.prompt_lr)?;
            contrastive_sum += global_eval.contrastive;
            if let Some(a) = global_eval.alignment {
                semantic_sum += a;
            }

            if cfg.personalized_prompt {
                let local_eval = prompts::local_prompt_objective(
                    &ctx,
                    &client.semantic_prompt,
                    &client.domain_prompt,
                    &mean,
                    &embeddings,
                    &labels,
                    client.domain,
                    cfg.eta,
                    cfg.domain_align && frozen.domain_frame.is_some(),
                )?;
                let grad = local_eval.grads.require(DOMAIN_PROMPT_PARAM)?;
                client.domain_prompt.sgd_step(grad, cfg.prompt_lr)?;
                if let Some(a) = local_eval.alignment {
                    domain_sum += a;
                }
            }
            steps += 1;
        }
    }
    if steps > 0 {
        stats.contrastive_loss = Some(contrastive_sum / steps as f64);
        if cfg.semantic_align {
            stats.semantic_prompt_loss = Some(semantic_sum / steps as f64);
        }
        if cfg.personalized_prompt && cfg.domain_align && frozen.domain_frame.is_some() {
            stats.domain_prompt_loss = Some(domain_sum / steps as f64);
        }
    }

    let update = RoundUpdate {
        client_id: client.id,
        round,
        sample_count: client.train_shard.len() as u64,
        semantic_prompt: client.semantic_prompt.tokens().clone(),
        semantic_transform: client
            .semantic_transform
            .weight_tensors()
            .iter()
            .map(|t| (*t).clone())
            .collect(),
        domain_transform: client
            .domain_transform
            .weight_tensors()
            .iter()
            .map(|t| (*t).clone())
            .collect(),
    };
    Ok((update, stats))
}

/// Executes one synchronous round: broadcast, local training on worker
/// threads, barrier, aggregation. Client order never affects the result.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    frozen: &FrozenStack,
    cfg: &ExperimentConfig,
) -> Result<RoundMetrics, FederationError> {
    let round = server.round;

    for client in clients.iter_mut() {
        client
            .semantic_prompt
            .set_tokens(server.semantic_prompt.tokens().clone())?;
        client.semantic_transform = server.semantic_transform.clone();
        client.domain_transform = server.domain_transform.clone();
    }

    let results: Vec<Result<(RoundUpdate, ClientRoundStats), FederationError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|client| {
                    scope.spawn(move || run_client_round(client, frozen, cfg, round))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or(Err(FederationError::ClientPanic { id: u32::MAX }))
                })
                .collect()
        });

    let mut updates = Vec::with_capacity(results.len());
    let mut client_stats = Vec::with_capacity(results.len());
    let mut traffic_bytes = 0usize;
    let shapes = ModelShapes::from_config(cfg);
    for result in results {
        let (update, stats) = result?;
        // The wire is the contract: serialize, count, and parse back before
        // the update may enter aggregation.
        let bytes = update.to_bytes();
        traffic_bytes += bytes.len();
        let parsed = RoundUpdate::from_bytes(&bytes, &shapes)?;
        updates.push(parsed);
        client_stats.push(stats);
    }

    let payload = aggregate(&updates, clients.len(), round, cfg.weighted_aggregation)?;
    server.semantic_prompt.set_tokens(payload.semantic_prompt)?;
    for (slot, value) in server
        .semantic_transform
        .weight_tensors_mut()
        .into_iter()
        .zip(payload.semantic_transform)
    {
        *slot = value;
    }
    for (slot, value) in server
        .domain_transform
        .weight_tensors_mut()
        .into_iter()
        .zip(payload.domain_transform)
    {
        *slot = value;
    }
    server.round += 1;

    Ok(RoundMetrics {
        round,
        client_stats,
        traffic_bytes,
    })
}

/// A complete, self-contained simulation: config, frozen stack, server,
/// clients, and per-domain test shards.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub frozen: FrozenStack,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub test_shards: Vec<EmbeddingDataset>,
}

impl Simulation {
    /// Builds data, frozen artifacts, and initial parameters from a config.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, crate::Error> {
        cfg.validate()?;
        let frozen = FrozenStack::from_config(cfg)?;

        // Per-domain datasets, encoded into the shared embedding space.
        let per_domain_raw: Vec<EmbeddingDataset> = match &cfg.data_path {
            Some(path) => {
                let ds = EmbeddingDataset::load(std::path::Path::new(path))?;
                if ds.num_classes() != cfg.classes || ds.num_domains() != cfg.domains {
                    return Err(crate::Error::Data(DataError::InvalidSpec(format!(
                        "container declares {} classes / {} domains, config wants {} / {}",
                        ds.num_classes(),
                        ds.num_domains(),
                        cfg.classes,
                        cfg.domains
                    ))));
                }
                (0..cfg.domains).map(|d| ds.filter_domain(d as u16)).collect()
            }
            None => generate_synthetic(&cfg.synthetic_spec()).map_err(crate::Error::Data)?,
        };

        let mut per_domain = Vec::with_capacity(per_domain_raw.len());
        for ds in per_domain_raw {
            if ds.is_raw() {
                if ds.dim() != cfg.raw_dim {
                    return Err(crate::Error::Data(DataError::InvalidSpec(format!(
                        "raw container dim {} != config raw_dim {}",
                        ds.dim(),
                        cfg.raw_dim
                    ))));
                }
                per_domain.push(frozen.image_encoder.encode_dataset(&ds)?);
            } else {
                if ds.dim() != cfg.embed_dim {
                    return Err(crate::Error::Data(DataError::InvalidSpec(format!(
                        "embedding container dim {} != config embed_dim {}",
                        ds.dim(),
                        cfg.embed_dim
                    ))));
                }
                per_domain.push(ds);
            }
        }

        let mut clients = Vec::with_capacity(cfg.num_clients());
        let mut test_shards = Vec::with_capacity(cfg.domains);
        for (domain, dataset) in per_domain.iter().enumerate() {
            let (train, test) =
                split_train_test(dataset, cfg.train_fraction, mix(cfg.seed, &[tag::SPLIT, domain as u64]))
                    .map_err(crate::Error::Data)?;
            test_shards.push(test);

            let train_shards: Vec<EmbeddingDataset> = if cfg.clients_per_domain > 1 {
                let alpha = cfg.dirichlet_alpha.expect("validated");
                let map = dirichlet_partition(
                    &train,
                    cfg.clients_per_domain,
                    alpha,
                    mix(cfg.seed, &[tag::PARTITION, domain as u64]),
                )
                .map_err(crate::Error::Data)?;
                map.apply(&train)
            } else {
                vec![train]
            };

            for (sub, shard) in train_shards.into_iter().enumerate() {
                let id = (domain * cfg.clients_per_domain + sub) as u32;
                let shard_mean = shard.mean_embedding().map_err(crate::Error::Numerics)?;
                let domain_prompt = if cfg.personalized_prompt {
                    PromptSet::init(
                        PromptScope::LocalDomain,
                        cfg.classes,
                        cfg.prompt_tokens,
                        cfg.token_dim,
                        0.02,
                        mix(cfg.seed, &[tag::PROMPT_INIT, 1000 + id as u64]),
                    )
                } else {
                    PromptSet::zeros(
                        PromptScope::LocalDomain,
                        cfg.classes,
                        cfg.prompt_tokens,
                        cfg.token_dim,
                    )
                };
                clients.push(ClientState {
                    id,
                    domain,
                    train_shard: shard,
                    shard_mean,
                    semantic_prompt: PromptSet::zeros(
                        PromptScope::GlobalSemantic,
                        cfg.classes,
                        cfg.prompt_tokens,
                        cfg.token_dim,
                    ),
                    domain_prompt,
                    semantic_transform: TransformNet::new(
                        TransformKind::Semantic,
                        cfg.embed_dim,
                        cfg.etf_dim,
                        cfg.seed,
                    ),
                    domain_transform: TransformNet::new(
                        TransformKind::Domain,
                        cfg.embed_dim,
                        cfg.etf_dim,
                        cfg.seed,
                    ),
                });
            }
        }

        let server = ServerState {
            round: 0,
            semantic_prompt: PromptSet::init(
                PromptScope::GlobalSemantic,
                cfg.classes,
                cfg.prompt_tokens,
                cfg.token_dim,
                0.02,
                cfg.seed,
            ),
            semantic_transform: TransformNet::new(
                TransformKind::Semantic,
                cfg.embed_dim,
                cfg.etf_dim,
                cfg.seed,
            ),
            domain_transform: TransformNet::new(
                TransformKind::Domain,
                cfg.embed_dim,
                cfg.etf_dim,
                cfg.seed,
            ),
        };

        Ok(Self {
            config: cfg.clone(),
            frozen,
            server,
            clients,
            test_shards,
        })
    }

    /// One round; see [`run_round`].
    pub fn run_round(&mut self) -> Result<RoundMetrics, FederationError> {
        run_round(
            &mut self.server,
            &mut self.clients,
            &self.frozen,
            &self.config,
        )
    }

    pub fn round(&self) -> u32 {
        self.server.round
    }

    /// The scorer a client uses at evaluation time: global semantic prompt,
    /// its own domain prompt modulated by its frozen shard mean.
    pub fn scorer_for_client(
        &self,
        client: &ClientState,
    ) -> Result<prompts::ClassScorer, PromptError> {
        let modulated = if self.config.personalized_prompt {
            prompts::modulate_with_mean(&client.domain_prompt, &client.shard_mean)?
        } else {
            Tensor::zeros(client.domain_prompt.tokens().shape().to_vec())
        };
        prompts::ClassScorer::new(
            &self.frozen.text_encoder,
            &self.frozen.text_table,
            &self.server.semantic_prompt,
            &modulated,
            self.config.tau,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            classes: 3,
            domains: 2,
            prompt_tokens: 2,
            token_dim: 8,
            embed_dim: 8,
            etf_dim: 8,
            text_tokens: 2,
            rounds: 2,
            batch_size: 16,
            samples_per_class: 8,
            raw_dim: 12,
            ..ExperimentConfig::default()
        }
    }

    fn make_update(id: u32, round: u32, fill: f64, cfg: &ExperimentConfig) -> RoundUpdate {
        let shapes = ModelShapes::from_config(cfg);
        let tensor = |shape: &[usize], v: f64| {
            Tensor::new(shape.to_vec(), vec![v; shape.iter().product()]).unwrap()
        };
        RoundUpdate {
            client_id: id,
            round,
            sample_count: 10 + u64::from(id),
            semantic_prompt: tensor(&shapes.prompt, fill),
            semantic_transform: shapes.transform.iter().map(|s| tensor(s, fill)).collect(),
            domain_transform: shapes.transform.iter().map(|s| tensor(s, -fill)).collect(),
        }
    }

    #[test]
    fn aggregate_single_update_is_identity() {
        let cfg = tiny_config();
        let update = make_update(0, 0, 0.5, &cfg);
        let out = aggregate(std::slice::from_ref(&update), 1, 0, false).unwrap();
        assert_eq!(out.semantic_prompt, update.semantic_prompt);
        assert_eq!(out.semantic_transform, update.semantic_transform);
    }

    #[test]
    fn aggregate_mean_of_opposites_is_zero() {
        let cfg = tiny_config();
        let a = make_update(0, 0, 1.25, &cfg);
        let b = make_update(1, 0, -1.25, &cfg);
        let out = aggregate(&[a, b], 2, 0, false).unwrap();
        assert!(out.semantic_prompt.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aggregate_matches_bruteforce_mean_and_order_invariance() {
        let cfg = tiny_config();
        let mut rng = derive_rng(5, &[9]);
        let mut updates: Vec<RoundUpdate> = (0..3)
            .map(|id| {
                let shapes = ModelShapes::from_config(&cfg);
                RoundUpdate {
                    client_id: id,
                    round: 4,
                    sample_count: 7,
                    semantic_prompt: Tensor::gaussian(shapes.prompt.clone(), 1.0, &mut rng),
                    semantic_transform: shapes
                        .transform
                        .iter()
                        .map(|s| Tensor::gaussian(s.clone(), 1.0, &mut rng))
                        .collect(),
                    domain_transform: shapes
                        .transform
                        .iter()
                        .map(|s| Tensor::gaussian(s.clone(), 1.0, &mut rng))
                        .collect(),
                }
            })
            .collect();

        let out = aggregate(&updates, 3, 4, false).unwrap();
        // brute-force elementwise oracle
        for (i, v) in out.semantic_prompt.data().iter().enumerate() {
            let expected: f64 = updates
                .iter()
                .map(|u| u.semantic_prompt.data()[i])
                .sum::<f64>()
                / 3.0;
            assert!((v - expected).abs() < 1e-15);
        }
        // shuffled input order changes nothing
        updates.swap(0, 2);
        let out2 = aggregate(&updates, 3, 4, false).unwrap();
        for (a, b) in out.semantic_prompt.data().iter().zip(out2.semantic_prompt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_missing_and_duplicate_clients() {
        let cfg = tiny_config();
        let a = make_update(0, 0, 1.0, &cfg);
        assert!(matches!(
            aggregate(std::slice::from_ref(&a), 2, 0, false),
            Err(FederationError::MissingClient { id: 1 })
        ));
        assert!(matches!(
            aggregate(&[a.clone(), a], 2, 0, false),
            Err(FederationError::DuplicateClient { id: 0 })
        ));
        assert!(matches!(
            aggregate(&[], 1, 0, false),
            Err(FederationError::EmptyUpdateSet)
        ));
    }

    #[test]
    fn aggregate_rejects_stale_round_stamp() {
        let cfg = tiny_config();
        let a = make_update(0, 3, 1.0, &cfg);
        assert!(matches!(
            aggregate(&[a], 1, 4, false),
            Err(FederationError::RoundStampMismatch { .. })
        ));
    }

    #[test]
    fn weighted_aggregation_uses_sample_counts() {
        let cfg = tiny_config();
        let mut a = make_update(0, 0, 1.0, &cfg);
        let mut b = make_update(1, 0, 4.0, &cfg);
        a.sample_count = 30;
        b.sample_count = 10;
        let out = aggregate(&[a, b], 2, 0, true).unwrap();
        // (30*1 + 10*4) / 40 = 1.75
        assert!((out.semantic_prompt.data()[0] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn update_wire_roundtrip_and_no_domain_prompt_bytes() {
        let cfg = tiny_config();
        let sim = Simulation::from_config(&cfg).unwrap();
        let client = &sim.clients[0];
        let update = RoundUpdate {
            client_id: client.id,
            round: 0,
            sample_count: client.train_shard.len() as u64,
            semantic_prompt: client.semantic_prompt.tokens().clone(),
            semantic_transform: client
                .semantic_transform
                .weight_tensors()
                .iter()
                .map(|t| (*t).clone())
                .collect(),
            domain_transform: client
                .domain_transform
                .weight_tensors()
                .iter()
                .map(|t| (*t).clone())
                .collect(),
        };
        let bytes = update.to_bytes();
        let back = RoundUpdate::from_bytes(&bytes, &ModelShapes::from_config(&cfg)).unwrap();
        assert_eq!(update, back);

        // no 8-byte window of the wire equals any domain-prompt entry
        for v in client.domain_prompt.tokens().data() {
            let pattern = v.to_le_bytes();
            let found = bytes.windows(8).any(|w| w == pattern);
            assert!(!found, "domain prompt entry leaked into wire bytes");
        }
    }

    #[test]
    fn zero_epochs_round_fixes_server_prompt() {
        let cfg = ExperimentConfig {
            transform_epochs: 0,
            prompt_epochs: 0,
            ..tiny_config()
        };
        let mut sim = Simulation::from_config(&cfg).unwrap();
        let before_prompt = sim.server.semantic_prompt.fingerprint();
        let before_nets = (
            sim.server.semantic_transform.fingerprint(),
            sim.server.domain_transform.fingerprint(),
        );
        sim.run_round().unwrap();
        assert_eq!(sim.server.semantic_prompt.fingerprint(), before_prompt);
        assert_eq!(
            (
                sim.server.semantic_transform.fingerprint(),
                sim.server.domain_transform.fingerprint()
            ),
            before_nets
        );
        assert_eq!(sim.round(), 1);
    }

    #[test]
    fn single_client_round_aggregation_is_identity() {
        let cfg = ExperimentConfig {
            domains: 2,
            clients_per_domain: 1,
            ..tiny_config()
        };
        // two domains but we inspect: after one round the server prompt must
        // equal the mean of the two client uploads; with equal uploads it is
        // that upload
        let mut sim = Simulation::from_config(&cfg).unwrap();
        sim.run_round().unwrap();
        // A+B)/2 check happens in aggregate tests; here assert round advanced
        assert_eq!(sim.round(), 1);
    }

    #[test]
    fn two_client_prompt_mean_matches_exact_average() {
        let cfg = tiny_config();
        let mut sim = Simulation::from_config(&cfg).unwrap();
        // run one round but capture uploads through a manual barrier
        let round = sim.server.round;
        for client in sim.clients.iter_mut() {
            client
                .semantic_prompt
                .set_tokens(sim.server.semantic_prompt.tokens().clone())
                .unwrap();
            client.semantic_transform = sim.server.semantic_transform.clone();
            client.domain_transform = sim.server.domain_transform.clone();
        }
        let mut updates = Vec::new();
        for client in sim.clients.iter_mut() {
            let (update, _) = run_client_round(client, &sim.frozen, &sim.config, round).unwrap();
            updates.push(update);
        }
        let payload = aggregate(&updates, updates.len(), round, false).unwrap();
        for (i, v) in payload.semantic_prompt.data().iter().enumerate() {
            let expected = (updates[0].semantic_prompt.data()[i]
                + updates[1].semantic_prompt.data()[i])
                / 2.0;
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_stack_constant_across_rounds() {
        let cfg = tiny_config();
        let mut sim = Simulation::from_config(&cfg).unwrap();
        let before = sim.frozen.fingerprint();
        for _ in 0..2 {
            sim.run_round().unwrap();
        }
        assert_eq!(sim.frozen.fingerprint(), before);
    }

    #[test]
    fn domain_prompt_changes_only_during_own_training() {
        let cfg = tiny_config();
        let mut sim = Simulation::from_config(&cfg).unwrap();
        let before: Vec<u64> = sim.clients.iter().map(|c| c.domain_prompt.fingerprint()).collect();
        sim.run_round().unwrap();
        let after: Vec<u64> = sim.clients.iter().map(|c| c.domain_prompt.fingerprint()).collect();
        // prompts did train, so fingerprints move, but only through the
        // client's own pass; the server never holds a domain prompt
        assert_ne!(before, after);
    }

    #[test]
    fn same_seed_same_round_metrics() {
        let cfg = tiny_config();
        let mut a = Simulation::from_config(&cfg).unwrap();
        let mut b = Simulation::from_config(&cfg).unwrap();
        a.run_round().unwrap();
        b.run_round().unwrap();
        assert_eq!(
            a.server.semantic_prompt.fingerprint(),
            b.server.semantic_prompt.fingerprint()
        );
        assert_eq!(
            a.clients[0].domain_prompt.fingerprint(),
            b.clients[0].domain_prompt.fingerprint()
        );
    }
}

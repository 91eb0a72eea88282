//! Reverse-mode gradients against central finite differences.
//!
//! Builds the full loss stack (alignment losses, contrastive loss, both
//! prompt objectives) on random seeded configurations and reports the worst
//! relative error of the tape gradients against the finite-difference
//! oracle.
//!
//! Run with: cargo run --release --example gradient_check

use std::collections::BTreeMap;

use fedprompt::encoders::{FrozenTextEncoder, TextEmbeddingTable};
use fedprompt::etf::EtfFrame;
use fedprompt::numerics::{fdcheck, Tensor};
use fedprompt::prompts::{
    self, PromptContext, PromptScope, PromptSet, DOMAIN_PROMPT_PARAM, SEMANTIC_PROMPT_PARAM,
};
use fedprompt::seeding::derive_rng;
use fedprompt::transforms::{TransformKind, TransformNet};

const K: usize = 3;
const L: usize = 2;
const D: usize = 6;
const T_TEXT: usize = 2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut worst_global: f64 = 0.0;
    let mut worst_local: f64 = 0.0;
    let cases = 20;

    for seed in 0..cases {
        let encoder = FrozenTextEncoder::new(2 * L + T_TEXT, D, D, seed);
        let table = TextEmbeddingTable::new(K, T_TEXT, D, seed);
        let semantic_transform = TransformNet::new(TransformKind::Semantic, D, K, seed);
        let domain_transform = TransformNet::new(TransformKind::Domain, D, 2, seed);
        let semantic_frame = EtfFrame::generate(K, K, seed)?;
        let domain_frame = EtfFrame::generate(2, 2, seed)?;
        let p_s = PromptSet::init(PromptScope::GlobalSemantic, K, L, D, 0.02, seed);
        let p_d = PromptSet::init(PromptScope::LocalDomain, K, L, D, 0.02, seed + 999);
        let ctx = PromptContext {
            text_encoder: &encoder,
            text_table: &table,
            semantic_transform: &semantic_transform,
            domain_transform: &domain_transform,
            semantic_frame: &semantic_frame,
            domain_frame: Some(&domain_frame),
            tau: 0.3,
        };

        let mut rng = derive_rng(seed, &[77]);
        let embeddings: Vec<Tensor> =
            (0..4).map(|_| prompts::random_embedding(D, &mut rng)).collect();
        let refs: Vec<&Tensor> = embeddings.iter().collect();
        let labels: Vec<usize> = (0..4).map(|i| i % K).collect();
        let mean = prompts::batch_mean(&refs)?;

        // global objective: gradient w.r.t. the semantic prompt
        let eval =
            prompts::global_prompt_objective(&ctx, &p_s, Some(&p_d), &mean, &refs, &labels, 1.0, true)?;
        let mut analytic = BTreeMap::new();
        analytic.insert(
            "p".to_string(),
            eval.grads.require(SEMANTIC_PROMPT_PARAM)?.clone(),
        );
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), p_s.tokens().clone());
        let modulated = prompts::modulate_with_mean(&p_d, &mean)?;
        let numeric = fdcheck::central_difference_gradients(&params, fdcheck::DEFAULT_STEP, |p| {
            let mut candidate = p_s.clone();
            candidate.set_tokens(p["p"].clone())?;
            let features =
                prompts::class_text_features(&encoder, &table, &candidate, &modulated)
                    .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            let c = prompts::contrastive_loss_with_features(&features, &refs, &labels, ctx.tau)
                .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            let s = prompts::semantic_prompt_loss(&features, &semantic_transform, &semantic_frame, ctx.tau)
                .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            Ok(c + s)
        })?;
        worst_global = worst_global.max(fdcheck::max_relative_error(&analytic, &numeric));

        // local objective: gradient w.r.t. the domain prompt (through the
        // Hadamard modulation)
        let eval =
            prompts::local_prompt_objective(&ctx, &p_s, &p_d, &mean, &refs, &labels, 1, 1.0, true)?;
        let mut analytic = BTreeMap::new();
        analytic.insert(
            "p".to_string(),
            eval.grads.require(DOMAIN_PROMPT_PARAM)?.clone(),
        );
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), p_d.tokens().clone());
        let numeric = fdcheck::central_difference_gradients(&params, fdcheck::DEFAULT_STEP, |p| {
            let mut candidate = p_d.clone();
            candidate.set_tokens(p["p"].clone())?;
            let modulated = prompts::modulate_with_mean(&candidate, &mean)
                .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            let features = prompts::class_text_features(&encoder, &table, &p_s, &modulated)
                .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            let c = prompts::contrastive_loss_with_features(&features, &refs, &labels, ctx.tau)
                .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            let d = prompts::domain_prompt_loss(&features, &domain_transform, &domain_frame, 1, ctx.tau)
                .map_err(|_| fedprompt::numerics::NumericsError::EmptyInput)?;
            Ok(c + d)
        })?;
        worst_local = worst_local.max(fdcheck::max_relative_error(&analytic, &numeric));
    }

    println!("{cases} seeded configurations, central differences step {}", fdcheck::DEFAULT_STEP);
    println!("worst relative error, global objective wrt semantic prompt: {worst_global:.3e}");
    println!("worst relative error, local objective wrt domain prompt:    {worst_local:.3e}");
    assert!(worst_global < 1e-4 && worst_local < 1e-4);
    println!("all gradients within 1e-4 of the finite-difference oracle");
    Ok(())
}

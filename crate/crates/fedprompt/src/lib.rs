//! Desk-scale simulator for multi-domain federated dual-prompt tuning.
//!
//! A frozen vision-language pair (toy stand-ins for a real image/text
//! encoder) is adapted per client through two learnable prompt blocks: a
//! globally aggregated semantic prompt and a per-client domain prompt that
//! never leaves the client. Small transformation networks project features
//! onto fixed equiangular-tight-frame prototypes, giving both prompt kinds an
//! unbiased alignment target. Everything is `f64`, seeded, and
//! bit-reproducible.
//!
//! The crate is organized around runnable examples, one per capability:
//!
//! ```text
//! examples/
//! ├── etf_bounds.rs          # ETF construction + geometry/entropy bounds
//! ├── gradient_check.rs      # tape gradients vs central finite differences
//! ├── synthetic_data.rs      # multi-domain generator + train/test split
//! ├── dirichlet_partition.rs # label-skew partitioning across sub-clients
//! ├── train_federated.rs     # full round loop with selective aggregation
//! ├── cross_domain_heatmap.rs# prompt-vs-image-domain accuracy matrix
//! ├── ablation_table.rs      # component toggles, 5-row summary
//! ├── checkpoint_resume.rs   # bit-exact resume from a mid-run checkpoint
//! └── export_features.rs     # text/image feature dump for offline plots
//! ```
//!
//! Run one with `cargo run --release --example <name>`. The thin `fedprompt`
//! binary exposes the same capabilities as subcommands for scripting.

pub mod numerics;
pub mod seeding;

pub mod etf;

pub mod encoders;

pub mod transforms;

pub mod prompts;

pub mod data;

pub mod config;

pub mod federation;

pub mod checkpoint;

pub mod eval;

mod error;

pub use error::Error;

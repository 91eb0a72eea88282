//! Synthetic multi-domain data: generation, persistence, separability.
//!
//! Generates the default desk-scale task (shared class prototypes, one
//! random affine distortion per domain), prints per-domain statistics, shows
//! the container round-trip, and reports nearest-class-mean separability as
//! an independent check that the classification task is solvable.
//!
//! Run with: cargo run --release --example synthetic_data

use fedprompt::config::ExperimentConfig;
use fedprompt::data::{
    generate_synthetic, nearest_class_mean_accuracy, split_train_test,
};
use fedprompt::encoders::EmbeddingDataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::desk_scale();
    let spec = cfg.synthetic_spec();
    println!(
        "spec: {} classes x {} domains, {} samples per (domain, class), raw dim {}",
        spec.num_classes, spec.num_domains, spec.samples_per_class, spec.raw_dim
    );
    println!(
        "prototype scale {}, domain shift {}, noise sigma {}\n",
        spec.prototype_scale, spec.domain_shift, spec.noise_sigma
    );

    let datasets = generate_synthetic(&spec)?;
    for (domain, ds) in datasets.iter().enumerate() {
        let (train, test) = split_train_test(ds, cfg.train_fraction, 1)?;
        let acc = nearest_class_mean_accuracy(&train, &test)?;
        println!(
            "domain {domain}: {} records, within-domain nearest-class-mean accuracy {:.1}%",
            ds.len(),
            100.0 * acc
        );
    }

    // cross-domain: the same classifier applied to a shifted domain
    let (train0, _) = split_train_test(&datasets[0], cfg.train_fraction, 1)?;
    let (_, test1) = split_train_test(&datasets[1], cfg.train_fraction, 1)?;
    let cross = nearest_class_mean_accuracy(&train0, &test1)?;
    println!("\ndomain-0 classifier on domain-1 data: {:.1}% (domain shift at work)", 100.0 * cross);

    let path = std::env::temp_dir().join("fedprompt_synthetic_demo.fdep");
    datasets[0].save(&path)?;
    let reloaded = EmbeddingDataset::load(&path)?;
    println!(
        "\ncontainer round-trip: {} records reloaded bit-exactly: {}",
        reloaded.len(),
        reloaded == datasets[0]
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}

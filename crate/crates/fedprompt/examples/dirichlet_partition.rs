//! Label-skew partitioning with a per-class Dirichlet draw.
//!
//! Splits one domain's data across three sub-clients for several
//! concentration values and prints the class histograms: small alpha gives
//! each client a few dominant classes, large alpha reproduces the global
//! histogram.
//!
//! Run with: cargo run --release --example dirichlet_partition

use fedprompt::config::ExperimentConfig;
use fedprompt::data::{dirichlet_partition, generate_synthetic, histogram_divergence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ExperimentConfig::desk_scale().synthetic_spec();
    spec.samples_per_class = 60;
    let domain0 = &generate_synthetic(&spec)?[0];
    println!(
        "partitioning domain 0 ({} samples, {} classes) across 3 sub-clients\n",
        domain0.len(),
        domain0.num_classes()
    );

    for alpha in [0.01, 0.1, 1.0, 10.0, 1e6] {
        let map = dirichlet_partition(domain0, 3, alpha, 7)?;
        let shards = map.apply(domain0);
        println!("alpha = {alpha}");
        for (c, shard) in shards.iter().enumerate() {
            println!("  client {c}: {:3} samples, class counts {:?}", shard.len(), shard.class_counts());
        }
        println!("  mean pairwise histogram L1 divergence: {:.3}\n", histogram_divergence(&shards));
    }
    Ok(())
}

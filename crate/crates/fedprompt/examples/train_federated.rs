//! Full federated training run on the default synthetic task.
//!
//! Four domain clients train dual prompts locally each round; the server
//! aggregates the semantic prompt and both transformation nets with a plain
//! mean. The domain prompt never leaves its client. Prints the per-round
//! accuracy table and the final loss means.
//!
//! Run with: cargo run --release --example train_federated

use fedprompt::config::ExperimentConfig;
use fedprompt::eval::{format_accuracy_table, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        rounds: 15,
        ..ExperimentConfig::desk_scale()
    };
    println!(
        "{} clients, {} rounds, batch {}, prompt lr {}, tau {}\n",
        cfg.num_clients(),
        cfg.rounds,
        cfg.batch_size,
        cfg.prompt_lr,
        cfg.tau
    );

    let outcome = run_experiment(&cfg, None, &mut |_| {})?;
    print!("{}", format_accuracy_table(&outcome.history));

    let last = outcome.history.last().expect("at least the initial record");
    println!("\nfinal round loss means:");
    if let Some(v) = last.losses.contrastive {
        println!("  contrastive:            {v:.4}");
    }
    if let Some(v) = last.losses.semantic_align {
        println!("  semantic net alignment: {v:.4}");
    }
    if let Some(v) = last.losses.domain_align {
        println!("  domain net alignment:   {v:.4}");
    }
    if let Some(v) = last.losses.semantic_prompt {
        println!("  semantic prompt term:   {v:.4}");
    }
    if let Some(v) = last.losses.domain_prompt {
        println!("  domain prompt term:     {v:.4}");
    }

    let sim = &outcome.simulation;
    println!(
        "\nfrozen-stack fingerprint unchanged across the run: {:#018x}",
        sim.frozen.fingerprint()
    );
    Ok(())
}

//! Bit-exact checkpoint/resume.
//!
//! Runs the same experiment twice: once straight through, once interrupted
//! halfway, persisted to disk, reloaded, and resumed. Because every RNG
//! stream is derived from (seed, round, client), the resumed run finishes
//! with bit-identical parameters.
//!
//! Run with: cargo run --release --example checkpoint_resume

use fedprompt::checkpoint;
use fedprompt::config::ExperimentConfig;
use fedprompt::federation::Simulation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        rounds: 10,
        ..ExperimentConfig::desk_scale()
    };

    let mut straight = Simulation::from_config(&cfg)?;
    for _ in 0..cfg.rounds {
        straight.run_round()?;
    }

    let mut interrupted = Simulation::from_config(&cfg)?;
    for _ in 0..cfg.rounds / 2 {
        interrupted.run_round()?;
    }
    let path = std::env::temp_dir().join("fedprompt_resume_demo.fdck");
    checkpoint::save(&interrupted, &path)?;
    println!(
        "checkpoint at round {} written ({} bytes)",
        interrupted.round(),
        std::fs::metadata(&path)?.len()
    );

    let mut resumed = checkpoint::load(&path)?;
    for _ in resumed.round() as usize..cfg.rounds {
        resumed.run_round()?;
    }
    std::fs::remove_file(&path).ok();

    let server_match =
        resumed.server.semantic_prompt.tokens() == straight.server.semantic_prompt.tokens();
    let clients_match = resumed
        .clients
        .iter()
        .zip(&straight.clients)
        .all(|(a, b)| {
            a.domain_prompt.tokens() == b.domain_prompt.tokens()
                && a.semantic_transform.fingerprint() == b.semantic_transform.fingerprint()
                && a.domain_transform.fingerprint() == b.domain_transform.fingerprint()
        });

    println!("server prompt bit-identical to uninterrupted run: {server_match}");
    println!("all client states bit-identical:                  {clients_match}");
    assert!(server_match && clients_match);
    Ok(())
}

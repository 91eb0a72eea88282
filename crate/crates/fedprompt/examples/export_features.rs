//! Feature dump for offline projection and plotting.
//!
//! Trains briefly, then writes every client's per-class text feature and
//! every test image embedding as tab-separated rows (kind, client, domain,
//! label, values). Feed the file to any external projection tool.
//!
//! Run with: cargo run --release --example export_features

use fedprompt::config::ExperimentConfig;
use fedprompt::eval::{export_features, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        rounds: 5,
        ..ExperimentConfig::desk_scale()
    };
    let outcome = run_experiment(&cfg, None, &mut |_| {})?;
    let dump = export_features(&outcome.simulation)?;

    let path = std::env::temp_dir().join("fedprompt_features.tsv");
    std::fs::write(&path, &dump)?;

    let text_rows = dump.lines().filter(|l| l.starts_with("text\t")).count();
    let image_rows = dump.lines().filter(|l| l.starts_with("image\t")).count();
    println!("wrote {} ({} text rows, {} image rows)", path.display(), text_rows, image_rows);
    println!("\nfirst rows:");
    for line in dump.lines().take(3) {
        let short: Vec<&str> = line.split('\t').take(6).collect();
        println!("  {} ...", short.join("\t"));
    }
    Ok(())
}

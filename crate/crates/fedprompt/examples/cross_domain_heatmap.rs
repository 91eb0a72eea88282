//! Domain adaptivity of the learned prompts.
//!
//! After training, every domain's prompt is applied to every domain's test
//! images. Matched prompt/image domains sit on the diagonal; a positive
//! diagonal advantage means the personalized prompts really are
//! domain-specific.
//!
//! Run with: cargo run --release --example cross_domain_heatmap

use fedprompt::config::ExperimentConfig;
use fedprompt::eval::{cross_domain_heatmap, run_experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::desk_scale();
    let outcome = run_experiment(&cfg, None, &mut |_| {})?;
    let report = cross_domain_heatmap(&outcome.simulation)?;

    println!("prompt domain (rows) x image domain (columns), accuracy %:\n");
    print!("      ");
    for j in 0..report.matrix.len() {
        print!("  img{j}");
    }
    println!();
    for (i, row) in report.matrix.iter().enumerate() {
        print!("prm{i}  ");
        for v in row {
            print!(" {:5.1}", 100.0 * v);
        }
        println!();
    }
    println!(
        "\nmean diagonal {:.4}, mean off-diagonal {:.4}, advantage {:.4}",
        report.mean_diagonal, report.mean_off_diagonal, report.diagonal_advantage
    );
    Ok(())
}

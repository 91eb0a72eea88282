//! Component ablation on shared data and seed.
//!
//! Five configurations: the global-prompt-only baseline, the dual-prompt
//! variant without any alignment, both single-alignment variants, and the
//! full method. All rows reuse the same seed, so they see identical data,
//! splits, and initializations.
//!
//! Run with: cargo run --release --example ablation_table

use fedprompt::config::ExperimentConfig;
use fedprompt::eval::run_ablation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::desk_scale();
    let report = run_ablation(&cfg)?;

    println!(
        "{:<28} {:>6} {:>6} {:>6} {:>10}",
        "configuration", "p_pers", "s_algn", "d_algn", "avg acc %"
    );
    for row in &report.rows {
        println!(
            "{:<28} {:>6} {:>6} {:>6} {:>10.2}",
            row.name,
            row.personalized_prompt,
            row.semantic_align,
            row.domain_align,
            100.0 * row.average_accuracy
        );
    }

    let baseline = report.rows.first().expect("five rows").average_accuracy;
    let full = report.rows.last().expect("five rows").average_accuracy;
    println!(
        "\nfull vs baseline: +{:.2} percentage points",
        100.0 * (full - baseline)
    );
    Ok(())
}

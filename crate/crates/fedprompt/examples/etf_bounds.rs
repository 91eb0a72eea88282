//! Equiangular tight frames and their geometry/entropy bounds.
//!
//! Builds frames for several class counts, verifies the defining invariants
//! numerically, and prints the distance bound, the ideal-alignment entropy
//! floor, and the mutual-information lower bound (up to its additive
//! constant).
//!
//! Run with: cargo run --release --example etf_bounds

use fedprompt::etf::{
    check_pairwise_distance_bound, delta_bound, entropy_floor, mi_lower_bound_up_to_const,
    EtfFrame,
};
use fedprompt::numerics::cosine_similarity;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>5} {:>12} {:>16} {:>18}", "K", "delta", "entropy floor", "MI bound (+const)");
    for k in [2, 3, 5, 7, 10, 126] {
        println!(
            "{k:>5} {:>12.6} {:>16.6} {:>18.6}",
            delta_bound(k),
            entropy_floor(k),
            mi_lower_bound_up_to_const(k)
        );
    }

    println!("\nframe invariants (K=7, M=16, seed 42):");
    let frame = EtfFrame::generate(7, 16, 42)?;
    let mut worst_norm: f64 = 0.0;
    let mut worst_cos: f64 = 0.0;
    for i in 0..frame.count() {
        worst_norm = worst_norm.max((frame.prototype(i).l2_norm() - 1.0).abs());
        for j in (i + 1)..frame.count() {
            let cos = cosine_similarity(&frame.prototype(i), &frame.prototype(j))?;
            worst_cos = worst_cos.max((cos + 1.0 / 6.0).abs());
        }
    }
    println!("  max |norm - 1|:            {worst_norm:.2e}");
    println!("  max |cos + 1/(K-1)|:       {worst_cos:.2e}");

    println!("\nsampled pairs within half the frame angle (K=7):");
    let check = check_pairwise_distance_bound(&frame, 10_000, 7);
    println!("  bound delta(7):            {:.6}", check.bound);
    println!("  max sampled distance:      {:.6}", check.max_distance);
    println!("  fraction within bound:     {:.4}", check.fraction_within_bound);
    Ok(())
}

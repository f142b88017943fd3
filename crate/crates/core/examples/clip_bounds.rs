// Entropy bounds implied by ratio clipping, and the sequence-level crossover lengths.

use entropy_lab::dynamics::{check_entropy_bounds, gspo_length_threshold, ClipSide};
use entropy_lab::policy::ActionDistribution;
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let old = ActionDistribution::new(vec![0.5, 0.3, 0.15, 0.05])?;
    // Every ratio stays inside [0.8, 1.28].
    let new = ActionDistribution::new(vec![0.44, 0.33, 0.168, 0.062])?;
    let check = check_entropy_bounds(&old, &new, 0.2, 0.28)?;
    println!(
        "H_old = {:.5}  H_new = {:.5}  bounds = [{:.5}, {:.5}]  ratio ok = {}  holds = {}",
        check.h_old, check.h_new, check.bounds.lower, check.bounds.upper, check.ratio_ok, check.holds()
    );

    let high = gspo_length_threshold(0.28, 4e-4, ClipSide::High)?;
    let low = gspo_length_threshold(0.2, 3e-4, ClipSide::Low)?;
    println!("sequence clipping is tighter than token clipping below {high:.2} tokens (upper)");
    println!("and below {low:.2} tokens (lower)");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

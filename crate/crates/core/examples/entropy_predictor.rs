// First-order entropy change of one policy-gradient step against the realized change.

use entropy_lab::dynamics::{predict, predict_repo_delta, realized_delta_h};
use entropy_lab::policy::TabularPolicy;
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let policy = TabularPolicy::from_logits(1, 5, vec![1.0, 0.5, 0.0, -0.5, -1.0])?;
    // The likely arms are rewarded, so the step sharpens the policy.
    let rewards = [1.0, 0.8, 0.1, 0.0, 0.3];

    println!("{:>8} {:>14} {:>14} {:>14} {:>10}", "alpha", "predicted", "diag form", "realized", "err/α²");
    for alpha in [1e-1, 1e-2, 1e-3, 1e-4] {
        let p = predict(&policy, 0, &rewards, alpha)?;
        let r = realized_delta_h(&policy, 0, &rewards, alpha)?;
        println!(
            "{alpha:>8.0e} {:>14.6e} {:>14.6e} {r:>14.6e} {:>10.4}",
            p.delta_h_exact,
            p.delta_h_diag,
            (r - p.delta_h_exact).abs() / (alpha * alpha)
        );
    }

    let alpha = 1e-2;
    for beta in [0.0, 0.5, 2.0] {
        let d = predict_repo_delta(&policy, 0, &rewards, beta, alpha)?;
        println!("entropy-regularized step, β = {beta}: predicted ΔH = {d:.6e}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

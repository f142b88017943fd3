// Score-function identities of a tabular softmax policy.

use entropy_lab::policy::TabularPolicy;
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let policy = TabularPolicy::from_logits(1, 4, vec![1.2, -0.3, 0.4, -2.0])?;
    let probs = policy.action_probs(0)?.probs;

    // E_π[∇log π] vanishes.
    let mut expected = [0.0; 4];
    for (a, p) in probs.iter().enumerate() {
        for (e, s) in expected.iter_mut().zip(&policy.score(0, a)?.grad) {
            *e += p * s;
        }
    }
    let max_score = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("|E[score]|_max          = {max_score:.3e}");

    // A constant baseline does not move the exact gradient.
    let returns = [1.0, 0.0, 0.5, 0.2];
    let g0 = policy.policy_gradient(0, &returns, 0.0)?;
    let g1 = policy.policy_gradient(0, &returns, 0.37)?;
    let shift = g0
        .grad
        .iter()
        .zip(&g1.grad)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("baseline shift          = {shift:.3e}");

    let h = policy.entropy_gradient(0)?;
    println!("H(π)                    = {:.6}", policy.state_entropy(0)?);
    println!("∇H                      = {:?}", h.grad);
    println!("Σ ∇H (shift invariance) = {:.3e}", h.grad.iter().sum::<f64>());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

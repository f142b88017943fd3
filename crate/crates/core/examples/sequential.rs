// Train on one bandit, carry the best checkpoint to a bandit with different good arms.

use entropy_lab::harness::{run_sequential_seed, ExperimentConfig};
use entropy_lab::Result;

const CONFIG_A: &str = include_str!("../configs/sequential_a.toml");
const CONFIG_B: &str = include_str!("../configs/sequential_b.toml");

pub fn run_example() -> Result<()> {
    let a = ExperimentConfig::from_toml_str(CONFIG_A)?;
    let b = ExperimentConfig::from_toml_str(CONFIG_B)?;
    let threshold = b.reward_threshold.unwrap_or(0.8);
    for phase_a in ["GRPO", "REPO-R"] {
        let a = a.with_param("train.algorithm", phase_a)?;
        let run = run_sequential_seed(&a, &b, 0)?;
        let reached = run
            .iterations_to_threshold(threshold)
            .map_or_else(|| "not reached".to_string(), |i| format!("iteration {i}"));
        println!(
            "{phase_a:>6}: checkpoint {:>3}, handoff entropy {:.4}, phase B reward {:.4}, threshold {reached}",
            run.selected_iteration,
            run.handoff_entropy,
            run.phase_b.last().map_or(0.0, |r| r.eval_reward)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

// Entropy trajectories of several algorithms on the default 20-arm bandit.

use entropy_lab::harness::{run_seed, ExperimentConfig};
use entropy_lab::Result;

const CONFIG: &str = include_str!("../configs/bandit.toml");

pub fn run_example() -> Result<()> {
    let base = ExperimentConfig::from_toml_str(CONFIG)?;
    println!("{:>20} {:>10} {:>10} {:>12}", "algorithm", "H_0", "H_final", "eval reward");
    for name in ["RLOO", "GRPO", "DAPO", "REPO-R", "REPO-D", "ADAPO", "GSPO"] {
        let cfg = base.with_param("train.algorithm", name)?;
        let rows = run_seed(&cfg, 0)?;
        let (first, last) = (&rows[0], &rows[rows.len() - 1]);
        println!(
            "{name:>20} {:>10.4} {:>10.4} {:>12.4}",
            first.mean_per_token_entropy, last.mean_per_token_entropy, last.eval_reward
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

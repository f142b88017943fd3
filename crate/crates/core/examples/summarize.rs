// Write metrics files for several runs, then summarize them.

use entropy_lab::harness::{run_experiment, summarize, ExperimentConfig};
use entropy_lab::Result;

const CONFIG: &str = include_str!("../configs/bandit.toml");

pub fn run_example() -> Result<()> {
    let out = std::env::temp_dir().join(format!("entlab-summarize-{}", std::process::id()));
    let mut files = Vec::new();
    for name in ["GRPO", "REPO-R", "RLOO"] {
        let cfg = ExperimentConfig::from_toml_str(CONFIG)?
            .with_param("train.algorithm", name)?
            .with_param("train.iterations", "40")?
            .with_param("seeds", "2")?
            .with_param("name", name)?;
        files.extend(run_experiment(&cfg, &out)?);
    }
    let summary = summarize(&files)?;
    print!("{}", summary.to_csv_string()?);
    std::fs::remove_dir_all(&out).map_err(|e| entropy_lab::Error::Io { path: out, source: e })?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

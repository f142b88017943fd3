use std::fs;

use entropy_lab::harness::{
    read_metrics, run_experiment, run_quant_audit, run_seed, run_sequential, run_sequential_seed, summarize,
    summarize_rows, sweep, AuditConfig, ExperimentConfig, MetricsRow, ABSENT,
};
use entropy_lab::quantize::{bias_mc_oracle, QuantMode};

const SMALL: &str = r#"
schema_version = 1
name = "small"
seeds = 3

[init]
kind = "gaussian"
scale = 1.0
seed = 2

[environment]
kind = "correct-set-bandits"
num_arms = 6
num_correct = 2
seed = 4

[train]
algorithm = "DAPO"
learning_rate = 0.2
k = 4
groups_per_task = 2
minibatch_size = 4
iterations = 10
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).unwrap()
}

fn row(iteration: usize, entropy: f64, cumulative: f64, reward: f64) -> MetricsRow {
    MetricsRow {
        iteration,
        mean_per_token_entropy: entropy,
        sampled_entropy: entropy,
        cumulative_entropy: cumulative,
        mean_reward: reward,
        eval_reward: reward,
        clip_upper_frac: 0.0,
        clip_lower_frac: 0.0,
        zeta: None,
        eps_high: None,
        seed: 0,
    }
}

#[test]
fn one_row_per_iteration_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let files = run_experiment(&small(), dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let rows: usize = files.iter().map(|f| read_metrics(f).unwrap().len()).sum();
    assert_eq!(rows, 30);
    for f in &files {
        assert!(f.with_extension("jsonl").exists());
    }
}

#[test]
fn cumulative_entropy_accumulates_per_iteration_entropy() {
    let rows = run_seed(&small(), 0).unwrap();
    let mut total = 0.0;
    for r in &rows {
        total += r.mean_per_token_entropy;
        assert!((r.cumulative_entropy - total).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_keeps_entropy_constant() {
    let cfg = small().with_param("train.learning_rate", "0.0").unwrap();
    let rows = run_seed(&cfg, 1).unwrap();
    assert!(rows.iter().all(|r| r.mean_per_token_entropy == rows[0].mean_per_token_entropy));
    assert!(rows.iter().all(|r| r.eval_reward == rows[0].eval_reward));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small().with_param("train.algorithm", "ADAPO").unwrap();
    let fa = run_experiment(&cfg, a.path()).unwrap();
    let fb = run_experiment(&cfg, b.path()).unwrap();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        assert_eq!(fs::read(x.with_extension("jsonl")).unwrap(), fs::read(y.with_extension("jsonl")).unwrap());
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small();
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(cfg, again);
    assert!(ExperimentConfig::from_toml_str(&SMALL.replace("schema_version = 1", "schema_version = 9")).is_err());
    assert!(ExperimentConfig::from_toml_str(&SMALL.replace("k = 4", "k = 4\nbogus = 1")).is_err());
}

fn sequential_pair(lr_b: &str) -> (ExperimentConfig, ExperimentConfig) {
    let a = ExperimentConfig::from_toml_str(include_str!("../configs/sequential_a.toml"))
        .unwrap()
        .with_param("train.iterations", "15")
        .unwrap()
        .with_param("seeds", "2")
        .unwrap();
    let b = ExperimentConfig::from_toml_str(include_str!("../configs/sequential_b.toml"))
        .unwrap()
        .with_param("train.iterations", "10")
        .unwrap()
        .with_param("train.learning_rate", lr_b)
        .unwrap();
    (a, b)
}

#[test]
fn sequential_hands_over_the_selected_checkpoint() {
    let (a, b) = sequential_pair("0.1");
    let run = run_sequential_seed(&a, &b, 3).unwrap();
    assert_eq!(run.phase_a.len(), 15);
    assert_eq!(run.phase_b.len(), 10);
    let best = run.phase_a.iter().map(|r| r.mean_reward).fold(f64::MIN, f64::max);
    assert_eq!(run.phase_a[run.selected_iteration - 1].mean_reward, best);
    assert_eq!(run.phase_b[0].mean_per_token_entropy, run.handoff_entropy);
}

#[test]
fn frozen_phase_b_has_flat_reward() {
    let (a, b) = sequential_pair("0.0");
    let run = run_sequential_seed(&a, &b, 0).unwrap();
    assert!(run.phase_b.iter().all(|r| r.eval_reward == run.phase_b[0].eval_reward));
}

#[test]
fn sequential_writes_tagged_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = sequential_pair("0.1");
    let runs = run_sequential(&a, &b, dir.path()).unwrap();
    assert_eq!(runs.len(), 2);
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.ends_with("_phase-a.csv")));
    assert!(names.iter().any(|n| n.ends_with("_phase-b.csv")));
    assert!(names.iter().any(|n| n.ends_with("_checkpoints.csv")));
}

#[test]
fn audit_without_rounding_is_unbiased() {
    let rep = bias_mc_oracle(1.0, 0.0, 0.0, 10_000, 0).unwrap();
    assert_eq!(rep.mean_r_observed, 1.0);
    assert!(bias_mc_oracle(1.0, 0.0, 0.0, 9_999, 0).is_err());
}

#[test]
fn audit_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AuditConfig::default_for(QuantMode::Bf16, 10_000);
    cfg.stream.train.iterations = 2;
    let report = run_quant_audit(&cfg, dir.path()).unwrap();
    assert_eq!(report.bias.len(), cfg.r_true.len());
    assert_eq!(report.clip.len(), cfg.clip_settings.len());
    assert!(dir.path().join("ratio_bias.csv").exists());
    assert!(dir.path().join("clip_fractions.csv").exists());
}

#[test]
fn summary_edge_cases() {
    assert!(summarize_rows(&[]).is_err());
    assert!(summarize(&[]).is_err());

    let single = summarize_rows(&[("one".into(), vec![row(1, 1.0, 1.0, 0.2), row(2, 0.5, 1.5, 0.6)])]).unwrap();
    assert_eq!(single.rank_correlation, None);
    assert_eq!(single.correlation_text(), ABSENT);
    assert!(single.to_csv_string().unwrap().ends_with("# rank_correlation,NA\n"));
    assert_eq!(single.runs[0].best_iteration, 2);
    assert_eq!(single.runs[0].final_initial_entropy_ratio, 0.5);

    let runs: Vec<(String, Vec<MetricsRow>)> = (1..=4)
        .map(|i| (format!("r{i}"), vec![row(1, 1.0, i as f64, 0.1 * i as f64)]))
        .collect();
    assert_eq!(summarize_rows(&runs).unwrap().rank_correlation, Some(1.0));
}

#[test]
fn summarize_reads_written_runs() {
    let dir = tempfile::tempdir().unwrap();
    let files = run_experiment(&small(), dir.path()).unwrap();
    let summary = summarize(&files).unwrap();
    assert_eq!(summary.runs.len(), 3);
    assert!(summary.runs.iter().all(|r| r.run.starts_with("small_seed")));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small().with_param("seeds", "1").unwrap();
    let values = vec!["0.1".to_string(), "0.3".to_string()];
    let files = sweep(&cfg, "train.learning_rate", &values, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    assert!(dir.path().join("train.learning_rate=0.1").is_dir());
    assert!(dir.path().join("train.learning_rate=0.3").is_dir());
}

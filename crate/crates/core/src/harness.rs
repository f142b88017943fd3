//! Experiment configs, metrics files, sequential runs, audits, and summaries.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{make_sequential_pair_with, BanditTask, Task, TokenMdp};
use crate::error::{Error, Result};
use crate::objectives::{clipped_term, ClipConfig, ClipFlag, TokenRecord, TrainConfig, Trainer};
use crate::policy::TabularPolicy;
use crate::quantize::{bias_mc_oracle, ulp, QuantMode, RatioBiasReport};
use crate::rng::{derive_seed, rng_from_seed};

pub const SCHEMA_VERSION: u32 = 1;

/// Default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "ENTLAB_OUT_DIR";

/// One iteration of one seed. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_per_token_entropy: f64,
    /// `-mean(log π_old)` over sampled tokens.
    pub sampled_entropy: f64,
    pub cumulative_entropy: f64,
    pub mean_reward: f64,
    pub eval_reward: f64,
    pub clip_upper_frac: f64,
    pub clip_lower_frac: f64,
    pub zeta: Option<f64>,
    pub eps_high: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    /// Explicit task list.
    Tasks { tasks: Vec<Task> },
    /// `num_tasks` bandits on separate states; arm rewards drawn uniformly in `[0, 1)`.
    RandomBandits {
        num_arms: usize,
        #[serde(default = "one")]
        num_tasks: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `num_tasks` bandits whose arms pay 1 on a random subset of `num_correct` arms and 0 elsewhere.
    CorrectSetBandits {
        num_arms: usize,
        num_correct: usize,
        #[serde(default = "one")]
        num_tasks: usize,
        #[serde(default)]
        seed: u64,
    },
    /// One side of a disjoint good-arm pair.
    SequentialPair {
        num_arms: usize,
        num_good: usize,
        #[serde(default)]
        seed: u64,
        phase: Phase,
    },
    /// Position-indexed token task with a random target.
    RandomToken {
        vocab_size: usize,
        horizon: usize,
        #[serde(default)]
        partial_credit: bool,
        #[serde(default = "one")]
        num_tasks: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::A => "phase-a",
            Phase::B => "phase-b",
        }
    }
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<Vec<Task>> {
        let tasks = match self {
            EnvironmentSpec::Tasks { tasks } => tasks.clone(),
            EnvironmentSpec::RandomBandits {
                num_arms,
                num_tasks,
                noise_std,
                seed,
            } => (0..*num_tasks)
                .map(|t| {
                    let mut rng = rng_from_seed(derive_seed(*seed, &[t as u64]));
                    let arm_rewards = (0..*num_arms).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
                    Task::Bandit(BanditTask {
                        task_id: t as u64,
                        arm_rewards,
                        noise_std: *noise_std,
                        state_offset: t,
                    })
                })
                .collect(),
            EnvironmentSpec::CorrectSetBandits {
                num_arms,
                num_correct,
                num_tasks,
                seed,
            } => {
                if *num_correct == 0 || num_correct >= num_arms {
                    return Err(Error::Config("need 0 < num_correct < num_arms".into()));
                }
                (0..*num_tasks)
                    .map(|t| {
                        let mut rng = rng_from_seed(derive_seed(*seed, &[t as u64]));
                        let mut arms: Vec<usize> = (0..*num_arms).collect();
                        arms.shuffle(&mut rng);
                        let mut arm_rewards = vec![0.0; *num_arms];
                        for a in &arms[..*num_correct] {
                            arm_rewards[*a] = 1.0;
                        }
                        Task::Bandit(BanditTask {
                            task_id: t as u64,
                            arm_rewards,
                            noise_std: 0.0,
                            state_offset: t,
                        })
                    })
                    .collect()
            }
            EnvironmentSpec::SequentialPair {
                num_arms,
                num_good,
                seed,
                phase,
            } => {
                let (a, b) = make_sequential_pair_with(*seed, *num_arms, *num_good)?;
                vec![match phase {
                    Phase::A => a,
                    Phase::B => b,
                }]
            }
            EnvironmentSpec::RandomToken {
                vocab_size,
                horizon,
                partial_credit,
                num_tasks,
                seed,
            } => (0..*num_tasks)
                .map(|t| {
                    let mut rng = rng_from_seed(derive_seed(*seed, &[t as u64]));
                    let target = (0..*horizon)
                        .map(|_| rand::Rng::gen_range(&mut rng, 0..*vocab_size))
                        .collect();
                    Task::Token(TokenMdp {
                        task_id: t as u64,
                        vocab_size: *vocab_size,
                        horizon: *horizon,
                        target,
                        partial_credit: *partial_credit,
                        prefix_buckets: 1,
                        state_offset: t * horizon,
                    })
                })
                .collect(),
        };
        if tasks.is_empty() {
            return Err(Error::Config("environment has no tasks".into()));
        }
        for t in &tasks {
            t.validate()?;
        }
        Ok(tasks)
    }
}

/// Starting logits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyInit {
    #[default]
    Uniform,
    /// Independent `N(0, scale²)` logits.
    Gaussian { scale: f64, seed: u64 },
}

impl PolicyInit {
    pub fn build(&self, tasks: &[Task]) -> Result<TabularPolicy> {
        let num_actions = tasks[0].num_actions();
        if tasks.iter().any(|t| t.num_actions() != num_actions) {
            return Err(Error::Config("tasks disagree on the action count".into()));
        }
        let num_states = tasks
            .iter()
            .map(|t| t.state_offset() + t.num_states())
            .max()
            .unwrap_or(1);
        match self {
            PolicyInit::Uniform => TabularPolicy::uniform(num_states, num_actions),
            PolicyInit::Gaussian { scale, seed } => {
                let normal = Normal::new(0.0, *scale)
                    .map_err(|e| Error::Config(format!("gaussian init: {e}")))?;
                let mut rng = rng_from_seed(*seed);
                let logits = (0..num_states * num_actions)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                TabularPolicy::from_logits(num_states, num_actions, logits)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "one")]
    pub seeds: usize,
    /// Seeds are `first_seed .. first_seed + seeds`.
    #[serde(default)]
    pub first_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Write every n-th iteration.
    #[serde(default = "one")]
    pub metrics_every: usize,
    /// Eval reward counted as solving the task in sequential runs.
    #[serde(default)]
    pub reward_threshold: Option<f64>,
    #[serde(default)]
    pub init: PolicyInit,
    pub environment: EnvironmentSpec,
    pub train: TrainConfig,
}

fn default_name() -> String {
    "run".into()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds < 1 || self.metrics_every < 1 {
            return Err(Error::Config("seeds and metrics_every must be >= 1".into()));
        }
        self.train.validate()?;
        let tasks = self.environment.build()?;
        let policy = self.init.build(&tasks)?;
        for t in &tasks {
            t.check_fits(&policy)?;
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }

    /// Output directory: explicit override, then the config, then the env var, then `out`.
    pub fn output_dir(&self, overridden: Option<&Path>) -> PathBuf {
        overridden
            .map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .unwrap_or_else(default_output_dir)
    }

    /// Sets a dotted key such as `train.learning_rate` from its TOML text form.
    pub fn with_param(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_scalar(value);
        let mut cursor = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a table path")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), parsed.clone());
                break;
            }
            cursor = table
                .entry((*part).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn parse_scalar(value: &str) -> toml::Value {
    if let Ok(i) = value.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = value.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = value.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(value.to_string())
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes rows as `<stem>.csv` and `<stem>.jsonl` under `dir`.
pub fn write_metrics(dir: &Path, stem: &str, rows: &[MetricsRow]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    write_csv(&csv_path, rows)?;
    let file = File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| Error::io(&jsonl_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&jsonl_path, e))?;
    Ok((csv_path, jsonl_path))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let rows = reader.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

/// Trains one seed to completion.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let tasks = config.environment.build()?;
    let policy = config.init.build(&tasks)?;
    let mut train = config.train.clone();
    train.seed = seed;
    let mut trainer = Trainer::new(train, tasks, policy)?;
    trainer.run()
}

fn keep_cadence(rows: Vec<MetricsRow>, every: usize) -> Vec<MetricsRow> {
    rows.into_iter()
        .filter(|r| every == 1 || r.iteration % every == 0 || r.iteration == 1)
        .collect()
}

/// Runs every seed on its own thread and writes one file pair per seed.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let seeds = config.seed_list();
    let results: Vec<Result<Vec<MetricsRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|seed| scope.spawn(move || run_seed(config, *seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("worker panicked"))))
            .collect()
    });
    let mut paths = Vec::with_capacity(seeds.len());
    for (seed, rows) in seeds.iter().zip(results) {
        let rows = keep_cadence(rows?, config.metrics_every);
        let (csv, _) = write_metrics(out_dir, &format!("{}_seed{seed}", config.name), &rows)?;
        paths.push(csv);
    }
    Ok(paths)
}

/// Both phases of one sequential run.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialRun {
    pub seed: u64,
    pub phase_a: Vec<MetricsRow>,
    pub phase_b: Vec<MetricsRow>,
    /// Iteration of phase A whose starting policy was carried over.
    pub selected_iteration: usize,
    pub handoff_entropy: f64,
}

impl SequentialRun {
    /// First phase-B iteration whose eval reward reaches `threshold`.
    pub fn iterations_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.phase_b
            .iter()
            .find(|r| r.eval_reward >= threshold)
            .map(|r| r.iteration)
    }
}

/// Trains on A, keeps the iterate with the best mean training reward, then trains on B.
pub fn run_sequential_seed(
    config_a: &ExperimentConfig,
    config_b: &ExperimentConfig,
    seed: u64,
) -> Result<SequentialRun> {
    let tasks_a = config_a.environment.build()?;
    let tasks_b = config_b.environment.build()?;
    let policy = config_a.init.build(&tasks_a)?;
    for t in &tasks_b {
        t.check_fits(&policy)
            .map_err(|e| Error::Config(format!("phase B does not fit phase A's policy: {e}")))?;
    }
    let mut train_a = config_a.train.clone();
    train_a.seed = seed;
    let mut trainer = Trainer::new(train_a, tasks_a, policy.clone())?;
    let mut phase_a = Vec::new();
    let mut best: Option<(f64, usize, TabularPolicy)> = None;
    for _ in 0..trainer.config.iterations {
        let start = trainer.policy.clone();
        let out = trainer.step()?;
        let row = out.metrics;
        if best.as_ref().is_none_or(|(r, _, _)| row.mean_reward > *r) {
            best = Some((row.mean_reward, row.iteration, start));
        }
        phase_a.push(row);
    }
    let (_, selected_iteration, checkpoint) = best.expect("at least one iteration");
    let handoff_entropy = phase_a[selected_iteration - 1].mean_per_token_entropy;

    let mut train_b = config_b.train.clone();
    train_b.seed = derive_seed(seed, &[0xB]);
    let mut trainer = Trainer::new(train_b, tasks_b, checkpoint)?;
    let phase_b = trainer.run()?;
    Ok(SequentialRun {
        seed,
        phase_a,
        phase_b,
        selected_iteration,
        handoff_entropy,
    })
}

/// Runs every seed of `config_a` sequentially into `config_b`, writing phase-tagged files.
pub fn run_sequential(
    config_a: &ExperimentConfig,
    config_b: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<SequentialRun>> {
    config_a.validate()?;
    config_b.validate()?;
    let seeds = config_a.seed_list();
    let results: Vec<Result<SequentialRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|seed| scope.spawn(move || run_sequential_seed(config_a, config_b, *seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("worker panicked"))))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let stem = format!("{}_then_{}", config_a.name, config_b.name);
    for run in &runs {
        write_metrics(out_dir, &format!("{stem}_seed{}_{}", run.seed, Phase::A.tag()), &run.phase_a)?;
        write_metrics(out_dir, &format!("{stem}_seed{}_{}", run.seed, Phase::B.tag()), &run.phase_b)?;
    }
    let selections: Vec<CheckpointRow> = runs
        .iter()
        .map(|r| CheckpointRow {
            seed: r.seed,
            selected_iteration: r.selected_iteration,
            handoff_entropy: r.handoff_entropy,
        })
        .collect();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_csv(&out_dir.join(format!("{stem}_checkpoints.csv")), &selections)?;
    Ok(runs)
}

#[derive(Debug, Clone, Serialize)]
struct CheckpointRow {
    seed: u64,
    selected_iteration: usize,
    handoff_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub format: QuantMode,
    pub samples: u64,
    #[serde(default)]
    pub seed: u64,
    /// Ratios audited by the bias oracle.
    #[serde(default = "default_ratios")]
    pub r_true: Vec<f64>,
    /// Magnitude of the log-probabilities whose ulp is audited.
    #[serde(default = "default_logprob_scale")]
    pub logprob_scale: f64,
    /// Source of the scored experience stream.
    pub stream: ExperimentConfig,
    /// Clip widths the stream is scored under; the first is the stream's own.
    #[serde(default = "default_clip_settings")]
    pub clip_settings: Vec<ClipConfig>,
}

fn default_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

fn default_logprob_scale() -> f64 {
    1.0
}

fn default_clip_settings() -> Vec<ClipConfig> {
    vec![ClipConfig::dapo(), ClipConfig::ppo()]
}

impl AuditConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.stream.validate()?;
        Ok(config)
    }

    /// Audit over an aggressively off-policy DAPO run on eight 16-token, 8-step token tasks.
    pub fn default_for(format: QuantMode, samples: u64) -> Self {
        let mut train = TrainConfig::new(crate::objectives::Algorithm::Dapo, 8.0, 8, 40);
        train.groups_per_task = 4;
        train.epochs = Some(4);
        train.minibatch_size = Some(4);
        Self {
            format,
            samples,
            seed: 0,
            r_true: default_ratios(),
            logprob_scale: 1.0,
            stream: ExperimentConfig {
                schema_version: SCHEMA_VERSION,
                name: "audit-stream".into(),
                seeds: 1,
                first_seed: 0,
                output: None,
                metrics_every: 1,
                reward_threshold: None,
                init: PolicyInit::Gaussian { scale: 1.0, seed: 7 },
                environment: EnvironmentSpec::RandomToken {
                    vocab_size: 16,
                    horizon: 8,
                    partial_credit: true,
                    num_tasks: 8,
                    seed: 3,
                },
                train,
            },
            clip_settings: default_clip_settings(),
        }
    }
}

/// Clip outcomes of one token stream scored with and without casting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipComparison {
    pub eps_low: f64,
    pub eps_high: f64,
    pub format: QuantMode,
    pub tokens: u64,
    pub upper_off: u64,
    pub lower_off: u64,
    pub upper_cast: u64,
    pub lower_cast: u64,
}

impl ClipComparison {
    pub fn upper_frac_off(&self) -> f64 {
        self.upper_off as f64 / self.tokens as f64
    }

    pub fn upper_frac_cast(&self) -> f64 {
        self.upper_cast as f64 / self.tokens as f64
    }

    pub fn lower_frac_off(&self) -> f64 {
        self.lower_off as f64 / self.tokens as f64
    }

    pub fn lower_frac_cast(&self) -> f64 {
        self.lower_cast as f64 / self.tokens as f64
    }

    /// Paired z-score of `cast - off` for a bound, from tokens whose outcome differs.
    pub fn paired_z(gained: u64, lost: u64) -> f64 {
        let discordant = (gained + lost) as f64;
        if discordant == 0.0 {
            return 0.0;
        }
        (gained as f64 - lost as f64) / discordant.sqrt()
    }
}

/// Per-bound discordant counts for a paired comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Discordance {
    pub upper_gained: u64,
    pub upper_lost: u64,
    pub lower_gained: u64,
    pub lower_lost: u64,
}

/// Scores `tokens` under `clip` with the given cast and with full precision.
pub fn compare_clipping(tokens: &[TokenRecord], clip: &ClipConfig, format: QuantMode) -> (ClipComparison, Discordance) {
    let mut cmp = ClipComparison {
        eps_low: clip.eps_low,
        eps_high: clip.eps_high,
        format,
        tokens: tokens.len() as u64,
        upper_off: 0,
        lower_off: 0,
        upper_cast: 0,
        lower_cast: 0,
    };
    let mut disc = Discordance::default();
    for t in tokens {
        let off = (t.new_logprob - t.old_logprob).exp();
        let cast = (format.apply(t.new_logprob) - format.apply(t.old_logprob)).exp();
        let (_, f_off) = clipped_term(t.advantage, off, clip);
        let (_, f_cast) = clipped_term(t.advantage, cast, clip);
        let up = (f_off == ClipFlag::Upper, f_cast == ClipFlag::Upper);
        let lo = (f_off == ClipFlag::Lower, f_cast == ClipFlag::Lower);
        cmp.upper_off += up.0 as u64;
        cmp.upper_cast += up.1 as u64;
        cmp.lower_off += lo.0 as u64;
        cmp.lower_cast += lo.1 as u64;
        match up {
            (false, true) => disc.upper_gained += 1,
            (true, false) => disc.upper_lost += 1,
            _ => {}
        }
        match lo {
            (false, true) => disc.lower_gained += 1,
            (true, false) => disc.lower_lost += 1,
            _ => {}
        }
    }
    (cmp, disc)
}

/// Collects every token scored during the stream experiment's epochs.
pub fn record_token_stream(stream: &ExperimentConfig, seed: u64) -> Result<Vec<TokenRecord>> {
    let tasks = stream.environment.build()?;
    let policy = stream.init.build(&tasks)?;
    let mut train = stream.train.clone();
    train.seed = seed;
    train.record_tokens = true;
    let mut trainer = Trainer::new(train, tasks, policy)?;
    let mut tokens = Vec::new();
    for _ in 0..trainer.config.iterations {
        tokens.extend(trainer.step()?.tokens);
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub bias: Vec<RatioBiasReport>,
    pub clip: Vec<(ClipComparison, Discordance)>,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct ClipTableRow {
    eps_low: f64,
    eps_high: f64,
    format: String,
    tokens: u64,
    upper_frac_off: f64,
    upper_frac_cast: f64,
    lower_frac_off: f64,
    lower_frac_cast: f64,
    upper_gained: u64,
    upper_lost: u64,
    lower_gained: u64,
    lower_lost: u64,
}

/// Emits `ratio_bias.csv` and `clip_fractions.csv` under `out_dir`.
pub fn run_quant_audit(config: &AuditConfig, out_dir: &Path) -> Result<AuditReport> {
    let fmt = config
        .format
        .format()
        .ok_or_else(|| Error::Config("audit needs a 16-bit format".into()))?;
    config.stream.validate()?;
    let u = ulp(-config.logprob_scale, fmt);
    let bias = config
        .r_true
        .iter()
        .enumerate()
        .map(|(i, r)| bias_mc_oracle(*r, u, u, config.samples, derive_seed(config.seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;

    let tokens = record_token_stream(&config.stream, config.seed)?;
    let clip: Vec<_> = config
        .clip_settings
        .iter()
        .map(|c| compare_clipping(&tokens, c, config.format))
        .collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let bias_path = out_dir.join("ratio_bias.csv");
    write_csv(&bias_path, &bias)?;
    let clip_path = out_dir.join("clip_fractions.csv");
    let rows: Vec<ClipTableRow> = clip
        .iter()
        .map(|(c, d)| ClipTableRow {
            eps_low: c.eps_low,
            eps_high: c.eps_high,
            format: c.format.to_string(),
            tokens: c.tokens,
            upper_frac_off: c.upper_frac_off(),
            upper_frac_cast: c.upper_frac_cast(),
            lower_frac_off: c.lower_frac_off(),
            lower_frac_cast: c.lower_frac_cast(),
            upper_gained: d.upper_gained,
            upper_lost: d.upper_lost,
            lower_gained: d.lower_gained,
            lower_lost: d.lower_lost,
        })
        .collect();
    write_csv(&clip_path, &rows)?;
    Ok(AuditReport {
        bias,
        clip,
        files: vec![bias_path, clip_path],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub best_eval_reward: f64,
    pub best_iteration: usize,
    pub final_initial_entropy_ratio: f64,
    pub cumulative_entropy_at_best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    /// Spearman correlation of cumulative entropy at best vs. best eval reward.
    pub rank_correlation: Option<f64>,
}

/// Written in place of an undefined correlation.
pub const ABSENT: &str = "NA";

impl Summary {
    pub fn correlation_text(&self) -> String {
        self.rank_correlation
            .map_or_else(|| ABSENT.to_string(), |c| format!("{c}"))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for r in &self.runs {
            writer.serialize(r)?;
        }
        let mut text = String::from_utf8(
            writer
                .into_inner()
                .map_err(|e| Error::invalid(e.to_string()))?,
        )
        .map_err(|e| Error::invalid(e.to_string()))?;
        text.push_str(&format!("# rank_correlation,{}\n", self.correlation_text()));
        Ok(text)
    }
}

pub fn summarize_rows(runs: &[(String, Vec<MetricsRow>)]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::invalid("no metrics files to summarize"));
    }
    let mut out = Vec::with_capacity(runs.len());
    for (name, rows) in runs {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid(format!("{name} has no rows")))?;
        let last = rows.last().expect("non-empty");
        let best = rows
            .iter()
            .fold(first, |b, r| if r.eval_reward > b.eval_reward { r } else { b });
        out.push(RunSummary {
            run: name.clone(),
            best_eval_reward: best.eval_reward,
            best_iteration: best.iteration,
            final_initial_entropy_ratio: last.mean_per_token_entropy / first.mean_per_token_entropy,
            cumulative_entropy_at_best: best.cumulative_entropy,
        });
    }
    let xs: Vec<f64> = out.iter().map(|r| r.cumulative_entropy_at_best).collect();
    let ys: Vec<f64> = out.iter().map(|r| r.best_eval_reward).collect();
    Ok(Summary {
        rank_correlation: spearman(&xs, &ys),
        runs: out,
    })
}

/// Reads completed metrics CSVs and summarizes them.
pub fn summarize(files: &[PathBuf]) -> Result<Summary> {
    let runs = files
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            read_metrics(p).map(|rows| (name, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_rows(&runs)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            out[*k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` when undefined.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One experiment per value of `key`, each written under `out_dir/<key>=<value>`.
pub fn sweep(config: &ExperimentConfig, key: &str, values: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut paths = Vec::new();
    for v in values {
        let variant = config.with_param(key, v)?;
        paths.extend(run_experiment(&variant, &out_dir.join(format!("{key}={v}")))?);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0], &[2.0]), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 10.0], &[0.1, 0.5, 0.6, 0.9]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn scalar_parsing() {
        assert_eq!(parse_scalar("3"), toml::Value::Integer(3));
        assert_eq!(parse_scalar("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_scalar("true"), toml::Value::Boolean(true));
        assert_eq!(parse_scalar("GRPO"), toml::Value::String("GRPO".into()));
    }
}

//! Terminal-reward environments and on-policy group sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{logsumexp, TabularPolicy};
use crate::rng::{rng_from_seed, LabRng};

/// Single-step task: one state, one pull, reward `arm_rewards[a]` plus optional noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTask {
    pub task_id: u64,
    pub arm_rewards: Vec<f64>,
    #[serde(default)]
    pub noise_std: f64,
    /// Policy state index used for this task.
    #[serde(default)]
    pub state_offset: usize,
}

/// Fixed-horizon token task: the agent emits `horizon` tokens and is scored
/// against `target` at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMdp {
    pub task_id: u64,
    pub vocab_size: usize,
    pub horizon: usize,
    pub target: Vec<usize>,
    #[serde(default)]
    pub partial_credit: bool,
    /// Number of prefix-hash buckets per position; 1 gives position-only states.
    #[serde(default = "one")]
    pub prefix_buckets: usize,
    #[serde(default)]
    pub state_offset: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Bandit(BanditTask),
    Token(TokenMdp),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    /// `log π_old(a|s)` recorded when the action was drawn.
    pub sampling_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u64,
    pub steps: Vec<Step>,
    pub terminal_reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.action)
    }
}

/// `K` independent on-policy samples for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceGroup {
    pub task_id: u64,
    pub trajectories: Vec<Trajectory>,
}

impl ExperienceGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.terminal_reward).collect()
    }
}

impl BanditTask {
    pub fn validate(&self) -> Result<()> {
        if self.arm_rewards.len() < 2 {
            return Err(Error::invalid("bandit needs at least 2 arms"));
        }
        if self.arm_rewards.iter().any(|r| !r.is_finite()) || !self.noise_std.is_finite() {
            return Err(Error::NonFinite("bandit rewards".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be nonnegative"));
        }
        Ok(())
    }

    pub fn best_arm(&self) -> usize {
        argmax(&self.arm_rewards)
    }
}

impl TokenMdp {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 || self.vocab_size < 2 || self.prefix_buckets < 1 {
            return Err(Error::invalid(
                "token task needs horizon >= 1, vocab_size >= 2, prefix_buckets >= 1",
            ));
        }
        if self.target.len() != self.horizon {
            return Err(Error::invalid("target length must equal horizon"));
        }
        if self.target.iter().any(|t| *t >= self.vocab_size) {
            return Err(Error::invalid("target token outside vocabulary"));
        }
        Ok(())
    }

    /// Local state index for the given position and prefix.
    pub fn state_index(&self, position: usize, prefix: &[usize]) -> usize {
        if self.prefix_buckets == 1 {
            return position;
        }
        // FNV-1a over the prefix tokens.
        let hash = prefix.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, t| {
            (h ^ *t as u64).wrapping_mul(0x0000_0100_0000_01b3)
        });
        position * self.prefix_buckets + (hash % self.prefix_buckets as u64) as usize
    }
}

impl Task {
    pub fn task_id(&self) -> u64 {
        match self {
            Task::Bandit(b) => b.task_id,
            Task::Token(t) => t.task_id,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Task::Bandit(b) => b.arm_rewards.len(),
            Task::Token(t) => t.vocab_size,
        }
    }

    /// Number of policy states this task occupies.
    pub fn num_states(&self) -> usize {
        match self {
            Task::Bandit(_) => 1,
            Task::Token(t) => t.horizon * t.prefix_buckets,
        }
    }

    pub fn state_offset(&self) -> usize {
        match self {
            Task::Bandit(b) => b.state_offset,
            Task::Token(t) => t.state_offset,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Task::Bandit(_) => 1,
            Task::Token(t) => t.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Task::Bandit(b) => b.validate(),
            Task::Token(t) => t.validate(),
        }
    }

    /// Checks that the task's states and actions fit inside `policy`.
    pub fn check_fits(&self, policy: &TabularPolicy) -> Result<()> {
        self.validate()?;
        if self.num_actions() != policy.num_actions() {
            return Err(Error::DimensionMismatch {
                expected: policy.num_actions(),
                actual: self.num_actions(),
            });
        }
        let last = self.state_offset() + self.num_states();
        if last > policy.num_states() {
            return Err(Error::StateOutOfRange {
                state: last - 1,
                num_states: policy.num_states(),
            });
        }
        Ok(())
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn sample_action(rng: &mut LabRng, row: &[f64]) -> (usize, f64) {
    let lse = logsumexp(row);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = row.len() - 1;
    for (a, l) in row.iter().enumerate() {
        acc += (l - lse).exp();
        if u < acc {
            chosen = a;
            break;
        }
    }
    (chosen, (row[chosen] - lse).min(0.0))
}

fn rollout(policy: &TabularPolicy, task: &Task, rng: &mut LabRng) -> Result<Trajectory> {
    let offset = task.state_offset();
    let mut steps = Vec::with_capacity(task.horizon());
    match task {
        Task::Bandit(_) => {
            let (action, logp) = sample_action(rng, policy.row(offset)?);
            steps.push(Step {
                state: offset,
                action,
                sampling_logprob: logp,
            });
        }
        Task::Token(t) => {
            let mut prefix = Vec::with_capacity(t.horizon);
            for pos in 0..t.horizon {
                let state = offset + t.state_index(pos, &prefix);
                let (action, logp) = sample_action(rng, policy.row(state)?);
                steps.push(Step {
                    state,
                    action,
                    sampling_logprob: logp,
                });
                prefix.push(action);
            }
        }
    }
    let mut traj = Trajectory {
        task_id: task.task_id(),
        steps,
        terminal_reward: 0.0,
    };
    let mut reward = terminal_reward(task, &traj)?;
    if let Task::Bandit(b) = task {
        if b.noise_std > 0.0 {
            let noise = Normal::new(0.0, b.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
            reward += noise.sample(rng);
        }
    }
    traj.terminal_reward = reward;
    Ok(traj)
}

/// Draws `k` independent trajectories from `policy` using one seeded stream.
pub fn sample_group(policy: &TabularPolicy, task: &Task, k: usize, seed: u64) -> Result<ExperienceGroup> {
    if k < 2 {
        return Err(Error::invalid(format!("group size must be at least 2, got {k}")));
    }
    task.check_fits(policy)?;
    let mut rng = rng_from_seed(seed);
    let trajectories = (0..k)
        .map(|_| rollout(policy, task, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperienceGroup {
        task_id: task.task_id(),
        trajectories,
    })
}

/// Noiseless terminal reward of a trajectory.
pub fn terminal_reward(task: &Task, traj: &Trajectory) -> Result<f64> {
    if traj.task_id != task.task_id() {
        return Err(Error::invalid("trajectory belongs to a different task"));
    }
    if traj.steps.len() != task.horizon() {
        return Err(Error::invalid(format!(
            "trajectory has {} steps, task horizon is {}",
            traj.steps.len(),
            task.horizon()
        )));
    }
    if traj.actions().any(|a| a >= task.num_actions()) {
        return Err(Error::invalid("trajectory action outside task action set"));
    }
    Ok(match task {
        Task::Bandit(b) => b.arm_rewards[traj.steps[0].action],
        Task::Token(t) => {
            let matches = traj.actions().zip(&t.target).filter(|(a, g)| a == *g).count();
            if t.partial_credit {
                matches as f64 / t.horizon as f64
            } else if matches == t.horizon {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Expected noiseless reward of `policy` on `task`.
///
/// Exact for bandits and position-only token tasks; prefix-bucketed token
/// tasks fall back to a fixed-seed Monte-Carlo estimate.
pub fn expected_reward(policy: &TabularPolicy, task: &Task) -> Result<f64> {
    task.check_fits(policy)?;
    let offset = task.state_offset();
    match task {
        Task::Bandit(b) => {
            let probs = policy.action_probs(offset)?.probs;
            Ok(probs.iter().zip(&b.arm_rewards).map(|(p, r)| p * r).sum())
        }
        Task::Token(t) if t.prefix_buckets == 1 => {
            let hits = t
                .target
                .iter()
                .enumerate()
                .map(|(pos, g)| policy.log_prob(offset + pos, *g).map(f64::exp))
                .collect::<Result<Vec<_>>>()?;
            Ok(if t.partial_credit {
                hits.iter().sum::<f64>() / t.horizon as f64
            } else {
                hits.iter().product()
            })
        }
        Task::Token(_) => {
            const EVAL_SAMPLES: usize = 4096;
            let mut rng = rng_from_seed(0x5eed_e7a1);
            let mut total = 0.0;
            for _ in 0..EVAL_SAMPLES {
                let traj = rollout(policy, task, &mut rng)?;
                total += traj.terminal_reward;
            }
            Ok(total / EVAL_SAMPLES as f64)
        }
    }
}

/// Two bandit tasks of `num_arms` arms with disjoint sets of good arms.
///
/// Each task has `num_good` good arms with rewards in `[0.7, 1)` plus one
/// peak arm with reward exactly 1; the remaining arms pay in `[0, 0.2)`.
pub fn make_sequential_pair_with(seed: u64, num_arms: usize, num_good: usize) -> Result<(Task, Task)> {
    if num_arms < 2 * (num_good + 1) {
        return Err(Error::invalid("not enough arms for two disjoint good sets"));
    }
    let mut rng = rng_from_seed(seed);
    let mut arms: Vec<usize> = (0..num_arms).collect();
    arms.shuffle(&mut rng);
    let (good_a, rest) = arms.split_at(num_good + 1);
    let good_b = &rest[..num_good + 1];
    let mut build = |task_id: u64, good: &[usize]| {
        let mut rewards: Vec<f64> = (0..num_arms).map(|_| 0.2 * rng.gen::<f64>()).collect();
        for (i, arm) in good.iter().enumerate() {
            rewards[*arm] = if i == 0 { 1.0 } else { 0.7 + 0.3 * rng.gen::<f64>() };
        }
        Task::Bandit(BanditTask {
            task_id,
            arm_rewards: rewards,
            noise_std: 0.0,
            state_offset: 0,
        })
    };
    let a = build(0, good_a);
    let b = build(1, good_b);
    Ok((a, b))
}

/// Default 20-arm pair with three good arms each.
pub fn make_sequential_pair(seed: u64) -> (Task, Task) {
    make_sequential_pair_with(seed, 20, 3).expect("default arm counts are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token_task(partial: bool) -> Task {
        Task::Token(TokenMdp {
            task_id: 4,
            vocab_size: 5,
            horizon: 4,
            target: vec![1, 2, 3, 4],
            partial_credit: partial,
            prefix_buckets: 1,
            state_offset: 0,
        })
    }

    fn traj_with(actions: &[usize], task_id: u64) -> Trajectory {
        Trajectory {
            task_id,
            steps: actions
                .iter()
                .enumerate()
                .map(|(i, a)| Step {
                    state: i,
                    action: *a,
                    sampling_logprob: -1.0,
                })
                .collect(),
            terminal_reward: 0.0,
        }
    }

    #[test]
    fn reward_examples() {
        let exact = token_task(false);
        assert_eq!(terminal_reward(&exact, &traj_with(&[1, 2, 3, 4], 4)).unwrap(), 1.0);
        assert_eq!(terminal_reward(&exact, &traj_with(&[1, 2, 3, 0], 4)).unwrap(), 0.0);
        let partial = token_task(true);
        assert_eq!(terminal_reward(&partial, &traj_with(&[1, 2, 0, 4], 4)).unwrap(), 0.75);
        let bandit = Task::Bandit(BanditTask {
            task_id: 0,
            arm_rewards: vec![0.2, 0.9],
            noise_std: 0.0,
            state_offset: 0,
        });
        assert_eq!(terminal_reward(&bandit, &traj_with(&[1], 0)).unwrap(), 0.9);
        assert!(terminal_reward(&bandit, &traj_with(&[1], 3)).is_err());
        assert!(terminal_reward(&exact, &traj_with(&[1, 2], 4)).is_err());
    }

    #[test]
    fn deterministic_policy_gives_identical_trajectories() {
        let task = token_task(false);
        let mut policy = TabularPolicy::uniform(4, 5).unwrap();
        for (s, t) in [1usize, 2, 3, 4].iter().enumerate() {
            policy.row_mut(s).unwrap()[*t] = 50.0;
        }
        let group = sample_group(&policy, &task, 6, 9).unwrap();
        assert!(group.trajectories.windows(2).all(|w| w[0].steps == w[1].steps));
        assert!(group.rewards().iter().all(|r| *r == 1.0));
    }

    #[test]
    fn sampling_is_reproducible_and_records_logprobs() {
        let task = token_task(true);
        let policy = TabularPolicy::from_logits(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = sample_group(&policy, &task, 8, 42).unwrap();
        assert_eq!(a, sample_group(&policy, &task, 8, 42).unwrap());
        assert_ne!(a, sample_group(&policy, &task, 8, 43).unwrap());
        for step in a.trajectories.iter().flat_map(|t| &t.steps) {
            let lp = policy.log_prob(step.state, step.action).unwrap();
            assert!((lp - step.sampling_logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn group_errors() {
        let task = token_task(false);
        let policy = TabularPolicy::uniform(4, 5).unwrap();
        assert!(sample_group(&policy, &task, 1, 0).is_err());
        let small = TabularPolicy::uniform(3, 5).unwrap();
        assert!(matches!(sample_group(&small, &task, 4, 0), Err(Error::StateOutOfRange { .. })));
        let wrong_vocab = TabularPolicy::uniform(4, 6).unwrap();
        assert!(sample_group(&wrong_vocab, &task, 4, 0).is_err());
    }

    #[test]
    fn prefix_buckets_split_states() {
        let t = TokenMdp {
            task_id: 0,
            vocab_size: 3,
            horizon: 3,
            target: vec![0, 1, 2],
            partial_credit: false,
            prefix_buckets: 4,
            state_offset: 0,
        };
        assert_eq!(t.state_index(0, &[]), t.state_index(0, &[]));
        assert!(t.state_index(2, &[1, 2]) >= 8 && t.state_index(2, &[1, 2]) < 12);
        assert_eq!(Task::Token(t).num_states(), 12);
    }

    #[test]
    fn expected_reward_exact_forms() {
        let task = token_task(false);
        let policy = TabularPolicy::uniform(4, 5).unwrap();
        assert!((expected_reward(&policy, &task).unwrap() - 0.2f64.powi(4)).abs() < 1e-15);
        assert!((expected_reward(&policy, &token_task(true)).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sequential_pairs_have_distinct_peaks() {
        let (a, b) = make_sequential_pair(0);
        assert_eq!((a.clone(), b.clone()), make_sequential_pair(0));
        for seed in 0..100 {
            let (Task::Bandit(a), Task::Bandit(b)) = make_sequential_pair(seed) else {
                unreachable!()
            };
            assert_ne!(a.best_arm(), b.best_arm());
            assert_eq!(a.arm_rewards[a.best_arm()], 1.0);
        }
    }
}

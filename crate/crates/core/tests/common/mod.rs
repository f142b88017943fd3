#![allow(dead_code)]

use entropy_lab::envs::{Step, Trajectory};
use entropy_lab::policy::TabularPolicy;
use entropy_lab::rng::{rng_from_seed, LabRng};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> LabRng {
    rng_from_seed(seed)
}

pub fn random_policy(rng: &mut LabRng, states: usize, actions: usize, scale: f64) -> TabularPolicy {
    let normal = Normal::new(0.0, scale).unwrap();
    let logits = (0..states * actions).map(|_| normal.sample(rng)).collect();
    TabularPolicy::from_logits(states, actions, logits).unwrap()
}

pub fn uniform_vec(rng: &mut LabRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Trajectories over random states and actions whose recorded log-probabilities
/// sit at `policy` plus Gaussian noise of width `drift`.
pub fn random_batch(
    rng: &mut LabRng,
    policy: &TabularPolicy,
    count: usize,
    max_len: usize,
    drift: f64,
) -> Vec<Trajectory> {
    let noise = Normal::new(0.0, drift.max(f64::MIN_POSITIVE)).unwrap();
    (0..count)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            let steps = (0..len)
                .map(|_| {
                    let state = rng.gen_range(0..policy.num_states());
                    let action = rng.gen_range(0..policy.num_actions());
                    let lp = policy.log_prob(state, action).unwrap();
                    let off = if drift > 0.0 { noise.sample(rng) } else { 0.0 };
                    Step {
                        state,
                        action,
                        sampling_logprob: lp + off,
                    }
                })
                .collect();
            Trajectory {
                task_id: i as u64,
                steps,
                terminal_reward: 0.0,
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

//! Group advantage estimators, REPO advantage transforms, and the two
//! entropy controllers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

fn check_group(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group reward".into()));
    }
    Ok(())
}

/// Leave-one-out advantages: each reward minus the mean of the other `K-1`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let k = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|r| r - (total - r) / (k - 1.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divide by `K`.
    #[default]
    Population,
    /// Divide by `K - 1`.
    Sample,
}

/// Result of group normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupAdvantages {
    Normalized(Vec<f64>),
    /// Every reward in the group was identical; the group carries no signal
    /// and is dropped from training.
    Degenerate,
}

impl GroupAdvantages {
    pub fn into_option(self) -> Option<Vec<f64>> {
        match self {
            GroupAdvantages::Normalized(v) => Some(v),
            GroupAdvantages::Degenerate => None,
        }
    }
}

/// True when all rewards in the group are equal.
pub fn is_degenerate(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// `(r - mean) / std`, or [`GroupAdvantages::Degenerate`] when all rewards tie.
pub fn grpo_advantages(rewards: &[f64], std_kind: StdKind) -> Result<GroupAdvantages> {
    check_group(rewards)?;
    if is_degenerate(rewards) {
        return Ok(GroupAdvantages::Degenerate);
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match std_kind {
        StdKind::Population => k,
        StdKind::Sample => k - 1.0,
    };
    let std = (ss / denom).sqrt();
    Ok(GroupAdvantages::Normalized(
        rewards.iter().map(|r| (r - mean) / std).collect(),
    ))
}

/// `A - β ψ`.
pub fn repo_advantage_general(base_adv: f64, psi: f64, beta: f64) -> f64 {
    base_adv - beta * psi
}

/// Per-state statistics feeding the REPO-D coefficient.
///
/// Holds `(advantage, ψ, π)` triples for actions at one state, either the
/// whole action set weighted by `π` or on-policy samples weighted uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct StateStats {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl StateStats {
    /// Exact statistics over the full action set. Advantages are centered
    /// under `π` first, so a constant advantage carries no correlation.
    pub fn exact(policy: &TabularPolicy, state: usize, per_action_adv: &[f64]) -> Result<Self> {
        let probs = policy.action_probs(state)?.probs;
        if per_action_adv.len() != probs.len() {
            return Err(Error::DimensionMismatch {
                expected: probs.len(),
                actual: per_action_adv.len(),
            });
        }
        let psi = policy.centered_logprobs(state)?;
        let mean_adv: f64 = probs.iter().zip(per_action_adv).map(|(p, a)| p * a).sum();
        let terms = probs
            .iter()
            .zip(per_action_adv)
            .zip(&psi)
            .map(|((p, a), c)| (*p, a - mean_adv, *c, *p))
            .collect();
        Ok(Self { terms })
    }

    /// Sample estimate from on-policy tokens at one state: each entry is
    /// `(advantage, ψ, π)` for a sampled action. Group advantages are already
    /// baselined, so they are used as given.
    pub fn from_samples(samples: &[(f64, f64, f64)]) -> Self {
        let w = if samples.is_empty() {
            0.0
        } else {
            1.0 / samples.len() as f64
        };
        Self {
            terms: samples.iter().map(|(a, c, p)| (w, *a, *c, *p)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// `E_{a~π}[A ψ π]`.
    pub fn covariance(&self) -> f64 {
        self.terms.iter().map(|(w, a, c, p)| w * a * c * p).sum()
    }
}

/// REPO-D coefficient `β_s = ζ · E_{a~π}[A ψ π]`.
///
/// A positive advantage/log-probability correlation predicts entropy loss, and
/// yields `β_s > 0`, which pushes entropy back up.
pub fn repo_d_beta(stats: &StateStats, zeta: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::invalid("no statistics for state"));
    }
    Ok(zeta * stats.covariance())
}

/// Bidirectional REPO-R rescaling with the raw (uncentered) log-probability
/// of the current policy. The result never changes sign relative to `base_adv`.
pub fn repo_r_advantage(base_adv: f64, logp: f64, zeta: f64) -> f64 {
    if base_adv > 0.0 {
        (base_adv * (1.0 - zeta * logp)).max(0.0)
    } else if base_adv < 0.0 {
        (base_adv * (1.0 + zeta * logp)).min(0.0)
    } else {
        0.0
    }
}

/// Signed-magnitude controller for the REPO coefficient ζ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaControllerState {
    pub zeta: f64,
    pub zeta_min: f64,
    pub zeta_max: f64,
    pub target_entropy: Option<f64>,
}

impl ZetaControllerState {
    pub fn new(zeta: f64, zeta_min: f64, zeta_max: f64) -> Result<Self> {
        if !(zeta_min > 0.0 && zeta_min <= zeta_max && zeta_max.is_finite()) {
            return Err(Error::invalid("need 0 < zeta_min <= zeta_max < inf"));
        }
        if !(zeta.abs() >= zeta_min && zeta.abs() <= zeta_max) {
            return Err(Error::invalid("initial |zeta| must lie in [zeta_min, zeta_max]"));
        }
        Ok(Self {
            zeta,
            zeta_min,
            zeta_max,
            target_entropy: None,
        })
    }

    /// REPO-R defaults: ζ = 1e-3 within [1e-4, 0.05].
    pub fn repo_r() -> Self {
        Self::new(1e-3, 1e-4, 0.05).expect("valid defaults")
    }

    /// REPO-D defaults: ζ = 1e-3 within [1e-3, 10].
    pub fn repo_d() -> Self {
        Self::new(1e-3, 1e-3, 10.0).expect("valid defaults")
    }

    pub fn with_target(mut self, target_entropy: f64) -> Self {
        self.target_entropy = Some(target_entropy);
        self
    }
}

/// One controller update. Without a target the state is returned unchanged.
pub fn zeta_controller_step(state: ZetaControllerState, current_entropy: f64) -> ZetaControllerState {
    let Some(target) = state.target_entropy else {
        return state;
    };
    let (min, max) = (state.zeta_min, state.zeta_max);
    let mut zeta = state.zeta;
    if current_entropy > target {
        if zeta >= 0.0 {
            zeta /= 2.0;
            if zeta < min {
                zeta = -min;
            }
        } else {
            zeta = (zeta * 2.0).max(-max);
        }
    } else if current_entropy < target {
        if zeta >= 0.0 {
            zeta = (zeta * 2.0).min(max);
        } else {
            zeta /= 2.0;
            if zeta > -min {
                zeta = min;
            }
        }
    }
    ZetaControllerState { zeta, ..state }
}

/// Adaptive upper clip threshold for ADAPO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapoControllerState {
    pub eps_low: f64,
    pub eps_high: f64,
    pub eps_high_min: f64,
    pub eps_high_max: f64,
    pub growth: f64,
    pub decay: f64,
    pub target_entropy: Option<f64>,
}

impl Default for AdapoControllerState {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            eps_high_min: 0.2,
            eps_high_max: 0.32,
            growth: 1.05,
            decay: 0.95,
            target_entropy: None,
        }
    }
}

impl AdapoControllerState {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_low >= 0.0
            && self.eps_low < 1.0
            && self.eps_high_min <= self.eps_high_max
            && (self.eps_high_min..=self.eps_high_max).contains(&self.eps_high)
            && self.growth >= 1.0
            && self.decay > 0.0
            && self.decay <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("inconsistent ADAPO controller parameters"))
        }
    }

    pub fn with_target(mut self, target_entropy: f64) -> Self {
        self.target_entropy = Some(target_entropy);
        self
    }
}

pub fn adapo_controller_step(
    state: AdapoControllerState,
    current_entropy: f64,
) -> AdapoControllerState {
    let Some(target) = state.target_entropy else {
        return state;
    };
    let eps_high = if current_entropy < target {
        (state.eps_high * state.growth).min(state.eps_high_max)
    } else if current_entropy > target {
        (state.eps_high * state.decay).max(state.eps_high_min)
    } else {
        state.eps_high
    };
    AdapoControllerState { eps_high, ..state }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rloo_examples() {
        let adv = rloo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.0, -1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(rloo_advantages(&[0.4; 5]).unwrap().iter().all(|a| a.abs() < 1e-15));
        assert!(rloo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn grpo_examples() {
        let GroupAdvantages::Normalized(adv) =
            grpo_advantages(&[1.0, 1.0, 0.0, 0.0], StdKind::Population).unwrap()
        else {
            panic!("expected normalized group");
        };
        assert_eq!(adv, vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(
            grpo_advantages(&[0.3; 4], StdKind::Population).unwrap(),
            GroupAdvantages::Degenerate
        );
        let GroupAdvantages::Normalized(sample) =
            grpo_advantages(&[1.0, 0.0], StdKind::Sample).unwrap()
        else {
            panic!("expected normalized group");
        };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((sample[0] - s).abs() < 1e-15 && (sample[1] + s).abs() < 1e-15);
        assert!(grpo_advantages(&[2.0], StdKind::Population).is_err());
    }

    #[test]
    fn repo_general_examples() {
        assert_eq!(repo_advantage_general(0.7, -0.3, 0.0), 0.7);
        assert!((repo_advantage_general(1.0, -0.5, 0.2) - 1.1).abs() < 1e-15);
        assert_eq!(repo_advantage_general(-0.4, 0.0, 3.0), -0.4);
    }

    #[test]
    fn repo_d_beta_examples() {
        let ln3 = 3f64.ln();
        let policy = TabularPolicy::from_rows(&[vec![0.0, ln3]]).unwrap();
        let stats = StateStats::exact(&policy, 0, &[-1.0, 1.0]).unwrap();
        // Summation oracle: Σ π² (A - E_π A) ψ with π = [1/4, 3/4].
        assert!((repo_d_beta(&stats, 1.0).unwrap() - 0.154_492_353_093_952_93).abs() < 1e-12);

        let constant = StateStats::exact(&policy, 0, &[0.6, 0.6]).unwrap();
        assert!(repo_d_beta(&constant, 2.0).unwrap().abs() < 1e-15);

        let uniform = TabularPolicy::uniform(1, 3).unwrap();
        let flat = StateStats::exact(&uniform, 0, &[1.0, -2.0, 0.5]).unwrap();
        assert!(repo_d_beta(&flat, 5.0).unwrap().abs() < 1e-15);

        assert!(repo_d_beta(&StateStats::from_samples(&[]), 1.0).is_err());
        let sampled = StateStats::from_samples(&[(1.0, 0.5, 0.2), (-1.0, -0.5, 0.1)]);
        assert!((sampled.covariance() - 0.5 * (0.1 + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn repo_r_examples() {
        assert!((repo_r_advantage(1.0, -2.0, 0.05) - 1.1).abs() < 1e-15);
        assert!((repo_r_advantage(-1.0, -2.0, 0.05) + 0.9).abs() < 1e-15);
        assert_eq!(repo_r_advantage(1.0, -2.0, -0.6), 0.0);
        assert_eq!(repo_r_advantage(-1.0, -2.0, 0.6), 0.0);
        assert_eq!(repo_r_advantage(0.0, -2.0, 0.05), 0.0);
    }

    #[test]
    fn zeta_controller_examples() {
        let base = ZetaControllerState::new(1e-3, 1e-4, 0.05).unwrap().with_target(1.0);
        assert_eq!(zeta_controller_step(base, 0.5).zeta, 2e-3);
        let small = ZetaControllerState { zeta: 1.5e-4, ..base };
        assert_eq!(zeta_controller_step(small, 1.5).zeta, -1e-4);
        let big = ZetaControllerState { zeta: 0.04, ..base };
        assert_eq!(zeta_controller_step(big, 0.5).zeta, 0.05);
        assert_eq!(zeta_controller_step(base, 1.0), base);
        let untargeted = ZetaControllerState::repo_r();
        assert_eq!(zeta_controller_step(untargeted, 0.0), untargeted);
    }

    #[test]
    fn adapo_controller_examples() {
        let s = AdapoControllerState::default().with_target(1.0);
        assert!((adapo_controller_step(s, 0.5).eps_high - 0.294).abs() < 1e-15);
        assert!((adapo_controller_step(s, 1.5).eps_high - 0.266).abs() < 1e-15);
        let near = AdapoControllerState { eps_high: 0.315, ..s };
        assert_eq!(adapo_controller_step(near, 0.5).eps_high, 0.32);
        assert_eq!(adapo_controller_step(s, 0.5).eps_low, 0.2);
        s.validate().unwrap();
    }
}

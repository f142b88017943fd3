//! First-order entropy predictors and clipping bounds.
//!
//! For a tabular softmax each state owns a disjoint logit row, so every
//! quantity here is per-state; multi-state predictions are sums of rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{expected_score, softmax, ActionDistribution, ScoreVector, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPrediction {
    /// `α gᵀh` from the exact score inner products.
    pub delta_h_exact: f64,
    /// `-α Σ π² ψ (R - E_π R)`, the probability-weighted covariance form.
    pub delta_h_diag: f64,
    pub learning_rate: f64,
}

fn check_len(policy: &TabularPolicy, values: &[f64]) -> Result<()> {
    if values.len() != policy.num_actions() {
        return Err(Error::DimensionMismatch {
            expected: policy.num_actions(),
            actual: values.len(),
        });
    }
    Ok(())
}

/// Exact on-policy gradient `g = Σ π A ∇log π` for one state.
pub fn reward_gradient(policy: &TabularPolicy, state: usize, per_action_advantage: &[f64]) -> Result<ScoreVector> {
    check_len(policy, per_action_advantage)?;
    policy.policy_gradient(state, per_action_advantage, 0.0)
}

/// `α gᵀh` with `g` the reward gradient and `h` the entropy gradient.
pub fn predict_delta_h_exact(
    policy: &TabularPolicy,
    state: usize,
    per_action_advantage: &[f64],
    alpha: f64,
) -> Result<f64> {
    let g = reward_gradient(policy, state, per_action_advantage)?;
    let h = policy.entropy_gradient(state)?;
    Ok(alpha * g.dot(&h))
}

/// `-α Σ_a π(a)² ψ(a) (R(a) - E_π R)`.
pub fn predict_delta_h_diag(
    policy: &TabularPolicy,
    state: usize,
    per_action_return: &[f64],
    alpha: f64,
) -> Result<f64> {
    check_len(policy, per_action_return)?;
    let probs = policy.action_probs(state)?.probs;
    let psi = policy.centered_logprobs(state)?;
    let mean: f64 = probs.iter().zip(per_action_return).map(|(p, r)| p * r).sum();
    let cov: f64 = probs
        .iter()
        .zip(per_action_return)
        .zip(&psi)
        .map(|((p, r), c)| p * p * c * (r - mean))
        .sum();
    Ok(-alpha * cov)
}

pub fn predict(policy: &TabularPolicy, state: usize, per_action_advantage: &[f64], alpha: f64) -> Result<EntropyPrediction> {
    Ok(EntropyPrediction {
        delta_h_exact: predict_delta_h_exact(policy, state, per_action_advantage, alpha)?,
        delta_h_diag: predict_delta_h_diag(policy, state, per_action_advantage, alpha)?,
        learning_rate: alpha,
    })
}

/// `ΔH + β α ‖h‖²` for the REPO advantage `A - βψ`.
pub fn predict_repo_delta(
    policy: &TabularPolicy,
    state: usize,
    per_action_advantage: &[f64],
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    let base = predict_delta_h_exact(policy, state, per_action_advantage, alpha)?;
    let h = policy.entropy_gradient(state)?;
    Ok(base + beta * alpha * h.norm_sq())
}

/// Takes the exact gradient step `θ_s += α g` on one row and returns the
/// realized entropy change of that row.
pub fn realized_delta_h(
    policy: &TabularPolicy,
    state: usize,
    per_action_advantage: &[f64],
    alpha: f64,
) -> Result<f64> {
    let g = reward_gradient(policy, state, per_action_advantage)?;
    let before = policy.state_entropy(state)?;
    let mut stepped = policy.clone();
    for (l, d) in stepped.row_mut(state)?.iter_mut().zip(&g.grad) {
        *l += alpha * d;
    }
    Ok(stepped.state_entropy(state)? - before)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBounds {
    pub lower: f64,
    pub upper: f64,
}

impl EntropyBounds {
    pub fn contains(&self, h: f64) -> bool {
        h >= self.lower && h <= self.upper
    }
}

/// `[(1-ε_low) H_old, (1+ε_high) H_old]`.
pub fn entropy_clip_bounds(h_old: f64, eps_low: f64, eps_high: f64) -> Result<EntropyBounds> {
    if h_old < 0.0 || !h_old.is_finite() {
        return Err(Error::invalid("entropy must be finite and nonnegative"));
    }
    if !(0.0..1.0).contains(&eps_low) || eps_high < 0.0 {
        return Err(Error::invalid("need 0 <= eps_low < 1 and eps_high >= 0"));
    }
    Ok(EntropyBounds {
        lower: (1.0 - eps_low) * h_old,
        upper: (1.0 + eps_high) * h_old,
    })
}

/// Every action ratio `π_new / π_old` lies within `[1-ε_low, 1+ε_high]`.
pub fn satisfies_ratio_constraint(
    old: &ActionDistribution,
    new: &ActionDistribution,
    eps_low: f64,
    eps_high: f64,
) -> bool {
    old.probs.len() == new.probs.len()
        && old.probs.iter().zip(&new.probs).all(|(o, n)| {
            let r = n / o;
            r >= 1.0 - eps_low && r <= 1.0 + eps_high
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub ratio_ok: bool,
    pub h_old: f64,
    pub h_new: f64,
    pub bounds: EntropyBounds,
}

impl BoundCheck {
    /// The ratio premise holds and the new entropy lies in the bounds.
    pub fn holds(&self) -> bool {
        self.ratio_ok && self.bounds.contains(self.h_new)
    }

    /// The premise holds but the conclusion fails.
    pub fn is_violation(&self) -> bool {
        self.ratio_ok && !self.bounds.contains(self.h_new)
    }
}

pub fn check_entropy_bounds(
    old: &ActionDistribution,
    new: &ActionDistribution,
    eps_low: f64,
    eps_high: f64,
) -> Result<BoundCheck> {
    let h_old = old.entropy();
    Ok(BoundCheck {
        ratio_ok: satisfies_ratio_constraint(old, new, eps_low, eps_high),
        h_old,
        h_new: new.entropy(),
        bounds: entropy_clip_bounds(h_old, eps_low, eps_high)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipSide {
    High,
    Low,
}

/// Trajectory length below which sequence-level clipping at `eps_gspo` bounds
/// entropy more tightly than token-level clipping at `eps_token`.
pub fn gspo_length_threshold(eps_token: f64, eps_gspo: f64, side: ClipSide) -> Result<f64> {
    if eps_token <= 0.0 || eps_gspo <= 0.0 {
        return Err(Error::invalid("clip widths must be positive"));
    }
    match side {
        ClipSide::High => Ok(eps_token.ln_1p() / eps_gspo.ln_1p()),
        ClipSide::Low => {
            if eps_token >= 1.0 || eps_gspo >= 1.0 {
                return Err(Error::invalid("lower clip width must be below 1"));
            }
            Ok((-eps_token).ln_1p() / (-eps_gspo).ln_1p())
        }
    }
}

/// Max-abs difference between the REPO gradient with `A - βψ` and the plain
/// gradient plus `β` times the entropy gradient.
pub fn repo_bonus_equivalence_check(
    policy: &TabularPolicy,
    state: usize,
    per_action_advantage: &[f64],
    beta: f64,
) -> Result<f64> {
    check_len(policy, per_action_advantage)?;
    let probs = softmax(policy.row(state)?);
    let psi = policy.centered_logprobs(state)?;
    let repo_weights: Vec<f64> = probs
        .iter()
        .zip(per_action_advantage)
        .zip(&psi)
        .map(|((p, a), c)| p * (a - beta * c))
        .collect();
    let repo = expected_score(&probs, &repo_weights);

    let mut bonus = policy.policy_gradient(state, per_action_advantage, 0.0)?;
    let h = policy.entropy_gradient(state)?;
    for (b, e) in bonus.grad.iter_mut().zip(&h.grad) {
        *b += beta * e;
    }
    Ok(repo
        .grad
        .iter()
        .zip(&bonus.grad)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

//! Exact tabular-softmax policies.
//!
//! Every expectation in this module is a full sum over the action set, so the
//! identities the theory relies on hold to machine precision. Log-probabilities
//! are always `logit - logsumexp(row)`; they are never formed as `ln(prob)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax policy over a finite action set with one logit row per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

/// Probabilities of each action in one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

/// Gradient of some per-state quantity with respect to that state's logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub grad: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("distribution needs at least two outcomes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats. Zero-probability outcomes contribute nothing.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

impl ScoreVector {
    pub fn zeros(n: usize) -> Self {
        Self { grad: vec![0.0; n] }
    }

    pub fn dot(&self, other: &ScoreVector) -> f64 {
        self.grad.iter().zip(&other.grad).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub(crate) fn axpy(&mut self, scale: f64, other: &ScoreVector) {
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += scale * o;
        }
    }
}

/// `ln Σ exp(row)` with max subtraction.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of a logit row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `Σ p ln(p/q)`.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    if q.probs.iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("reference distribution must be strictly positive"));
    }
    let kl = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>();
    // Rounding can leave a tiny negative residue when p == q.
    Ok(kl.max(0.0))
}

impl TabularPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        Self::from_logits(num_states, num_actions, vec![0.0; num_states * num_actions])
    }

    /// Builds a policy from row-major logits.
    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states < 1 {
            return Err(Error::invalid("policy needs at least one state"));
        }
        if num_actions < 2 {
            return Err(Error::invalid("policy needs at least two actions"));
        }
        if logits.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                expected: num_states * num_actions,
                actual: logits.len(),
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::invalid("logit rows have different lengths"));
        }
        Self::from_logits(rows.len(), num_actions, rows.concat())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, state: usize) -> Result<&[f64]> {
        self.check_state(state)?;
        let start = state * self.num_actions;
        Ok(&self.logits[start..start + self.num_actions])
    }

    /// Mutable access to a logit row. Callers must keep the logits finite.
    pub fn row_mut(&mut self, state: usize) -> Result<&mut [f64]> {
        self.check_state(state)?;
        let start = state * self.num_actions;
        Ok(&mut self.logits[start..start + self.num_actions])
    }

    /// Adds `scale * delta` to every logit; `delta` is row-major like the logits.
    pub fn apply_update(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.logits.len() {
            return Err(Error::DimensionMismatch {
                expected: self.logits.len(),
                actual: delta.len(),
            });
        }
        for (l, d) in self.logits.iter_mut().zip(delta) {
            *l += scale * d;
        }
        if self.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("logits after update".into()));
        }
        Ok(())
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states {
            return Err(Error::StateOutOfRange {
                state,
                num_states: self.num_states,
            });
        }
        Ok(())
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.num_actions {
            return Err(Error::ActionOutOfRange {
                action,
                num_actions: self.num_actions,
            });
        }
        Ok(())
    }

    pub fn action_probs(&self, state: usize) -> Result<ActionDistribution> {
        Ok(ActionDistribution {
            probs: softmax(self.row(state)?),
        })
    }

    /// All log-probabilities of a state, as `logit - logsumexp`.
    pub fn log_probs(&self, state: usize) -> Result<Vec<f64>> {
        let row = self.row(state)?;
        let lse = logsumexp(row);
        Ok(row.iter().map(|l| l - lse).collect())
    }

    pub fn log_prob(&self, state: usize, action: usize) -> Result<f64> {
        self.check_action(action)?;
        let row = self.row(state)?;
        Ok((row[action] - logsumexp(row)).min(0.0))
    }

    pub fn state_entropy(&self, state: usize) -> Result<f64> {
        let logp = self.log_probs(state)?;
        let h = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        Ok(h.max(0.0))
    }

    /// `ψ(s,·) = log π(·|s) + H(s)`, the mean-centered log-probabilities.
    pub fn centered_logprobs(&self, state: usize) -> Result<Vec<f64>> {
        let logp = self.log_probs(state)?;
        let mean: f64 = logp.iter().map(|lp| lp.exp() * lp).sum();
        Ok(logp.into_iter().map(|lp| lp - mean).collect())
    }

    pub fn centered_logprob(&self, state: usize, action: usize) -> Result<f64> {
        self.check_action(action)?;
        Ok(self.centered_logprobs(state)?[action])
    }

    /// `∇ log π(a|s)` with respect to row `s`: `1[a=z] - π(z|s)`.
    pub fn score(&self, state: usize, action: usize) -> Result<ScoreVector> {
        self.check_action(action)?;
        let probs = softmax(self.row(state)?);
        Ok(score_from_probs(&probs, action))
    }

    /// Exact on-policy gradient `Σ_a π(a)(R(a) - b) ∇log π(a)` for one state.
    pub fn policy_gradient(
        &self,
        state: usize,
        per_action_return: &[f64],
        baseline: f64,
    ) -> Result<ScoreVector> {
        if per_action_return.len() != self.num_actions {
            return Err(Error::DimensionMismatch {
                expected: self.num_actions,
                actual: per_action_return.len(),
            });
        }
        let probs = softmax(self.row(state)?);
        let weights: Vec<f64> = probs
            .iter()
            .zip(per_action_return)
            .map(|(p, r)| p * (r - baseline))
            .collect();
        Ok(expected_score(&probs, &weights))
    }

    /// Exact entropy gradient `-Σ_a π(a) ψ(a) ∇log π(a)`.
    pub fn entropy_gradient(&self, state: usize) -> Result<ScoreVector> {
        let probs = softmax(self.row(state)?);
        let psi = self.centered_logprobs(state)?;
        let weights: Vec<f64> = probs.iter().zip(&psi).map(|(p, c)| -p * c).collect();
        Ok(expected_score(&probs, &weights))
    }
}

pub(crate) fn score_from_probs(probs: &[f64], action: usize) -> ScoreVector {
    let mut grad: Vec<f64> = probs.iter().map(|p| -p).collect();
    grad[action] += 1.0;
    ScoreVector { grad }
}

/// `Σ_a w_a ∇log π(a)` summed over all actions, accumulated score by score.
pub(crate) fn expected_score(probs: &[f64], weights: &[f64]) -> ScoreVector {
    let mut out = ScoreVector::zeros(probs.len());
    for (a, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            out.axpy(*w, &score_from_probs(probs, a));
        }
    }
    out
}

//! Importance weights, clipped surrogates, and the training loop.
//!
//! Every algorithm shares one surrogate: per-token (or per-sequence) clipped
//! importance-weighted advantages, averaged per trajectory and then over the
//! minibatch. RLOO is the same surrogate with clipping off, run for a single
//! full-batch epoch so every weight is exactly 1.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envs::{sample_group, Task, Trajectory};
use crate::error::{Error, Result};
use crate::estimators::{
    adapo_controller_step, grpo_advantages, is_degenerate, repo_d_beta, repo_r_advantage,
    rloo_advantages, zeta_controller_step, AdapoControllerState, StateStats, StdKind,
    ZetaControllerState,
};
use crate::harness::MetricsRow;
use crate::policy::{score_from_probs, softmax, ScoreVector, TabularPolicy};
use crate::quantize::QuantMode;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "RLOO")]
    Rloo,
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "LOOP")]
    Loop,
    #[serde(rename = "DAPO")]
    Dapo,
    #[serde(rename = "GSPO")]
    Gspo,
    #[serde(rename = "REPO-R")]
    RepoR,
    #[serde(rename = "REPO-D")]
    RepoD,
    #[serde(rename = "ADAPO")]
    Adapo,
    #[serde(rename = "GRPO+entropy-bonus")]
    GrpoEntropyBonus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    LeaveOneOut,
    GroupNormalized,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Rloo,
        Algorithm::Grpo,
        Algorithm::Loop,
        Algorithm::Dapo,
        Algorithm::Gspo,
        Algorithm::RepoR,
        Algorithm::RepoD,
        Algorithm::Adapo,
        Algorithm::GrpoEntropyBonus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rloo => "RLOO",
            Algorithm::Grpo => "GRPO",
            Algorithm::Loop => "LOOP",
            Algorithm::Dapo => "DAPO",
            Algorithm::Gspo => "GSPO",
            Algorithm::RepoR => "REPO-R",
            Algorithm::RepoD => "REPO-D",
            Algorithm::Adapo => "ADAPO",
            Algorithm::GrpoEntropyBonus => "GRPO+entropy-bonus",
        }
    }

    pub fn estimator(self) -> Estimator {
        match self {
            Algorithm::Grpo | Algorithm::RepoR | Algorithm::RepoD | Algorithm::GrpoEntropyBonus => {
                Estimator::GroupNormalized
            }
            Algorithm::Rloo | Algorithm::Loop | Algorithm::Dapo | Algorithm::Gspo | Algorithm::Adapo => {
                Estimator::LeaveOneOut
            }
        }
    }

    pub fn default_clip(self) -> Option<ClipConfig> {
        match self {
            Algorithm::Rloo => None,
            Algorithm::Grpo
            | Algorithm::Loop
            | Algorithm::RepoR
            | Algorithm::RepoD
            | Algorithm::GrpoEntropyBonus => Some(ClipConfig::ppo()),
            Algorithm::Dapo | Algorithm::Adapo => Some(ClipConfig::dapo()),
            Algorithm::Gspo => Some(ClipConfig::gspo()),
        }
    }

    /// Strictly on-policy: one full-batch epoch.
    pub fn is_strictly_on_policy(self) -> bool {
        self == Algorithm::Rloo
    }

    pub fn default_epochs(self) -> usize {
        if self.is_strictly_on_policy() {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipLevel {
    #[default]
    Token,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    #[serde(default)]
    pub level: ClipLevel,
}

impl ClipConfig {
    pub fn ppo() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            level: ClipLevel::Token,
        }
    }

    pub fn dapo() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            level: ClipLevel::Token,
        }
    }

    pub fn gspo() -> Self {
        Self {
            eps_low: 3e-4,
            eps_high: 4e-4,
            level: ClipLevel::Sequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps_low) || !(self.eps_high >= 0.0) {
            return Err(Error::Config("clip widths need 0 <= eps_low < 1, eps_high >= 0".into()));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }
}

/// Which branch of the pessimistic minimum was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipFlag {
    Unclipped,
    Upper,
    Lower,
}

/// `exp(new - old)`.
pub fn token_weight(new_logprob: f64, old_logprob: f64) -> Result<f64> {
    let w = (new_logprob - old_logprob).exp();
    if !w.is_finite() {
        return Err(Error::NonFinite(format!(
            "importance weight from {new_logprob} and {old_logprob}"
        )));
    }
    Ok(w)
}

/// Geometric mean of the per-token ratios, `exp(Σ(new - old) / |τ|)`.
pub fn gspo_weight(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<f64> {
    if new_logprobs.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    if new_logprobs.len() != old_logprobs.len() {
        return Err(Error::DimensionMismatch {
            expected: old_logprobs.len(),
            actual: new_logprobs.len(),
        });
    }
    let total: f64 = new_logprobs.iter().zip(old_logprobs).map(|(n, o)| n - o).sum();
    let w = (total / new_logprobs.len() as f64).exp();
    if !w.is_finite() {
        return Err(Error::NonFinite("sequence importance weight".into()));
    }
    Ok(w)
}

/// `min(A w, A clip(w))` together with the branch that produced it.
///
/// The flag names the binding bound only when the clipped product is strictly
/// smaller; otherwise gradients flow through the unclipped branch.
pub fn clipped_term(advantage: f64, weight: f64, clip: &ClipConfig) -> (f64, ClipFlag) {
    let unclipped = advantage * weight;
    let clamped = weight.clamp(clip.lower(), clip.upper());
    let clipped = advantage * clamped;
    if clipped < unclipped {
        let flag = if weight > clip.upper() {
            ClipFlag::Upper
        } else {
            ClipFlag::Lower
        };
        (clipped, flag)
    } else {
        (unclipped, ClipFlag::Unclipped)
    }
}

/// Token counts by clip outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClipStats {
    pub upper: u64,
    pub lower: u64,
    pub unclipped: u64,
    /// Log-probabilities that left the cast format's finite range.
    pub cast_overflow: u64,
}

impl ClipStats {
    pub fn total(&self) -> u64 {
        self.upper + self.lower + self.unclipped
    }

    pub fn record(&mut self, flag: ClipFlag, tokens: u64) {
        match flag {
            ClipFlag::Unclipped => self.unclipped += tokens,
            ClipFlag::Upper => self.upper += tokens,
            ClipFlag::Lower => self.lower += tokens,
        }
    }

    pub fn merge(&mut self, other: &ClipStats) {
        self.upper += other.upper;
        self.lower += other.lower;
        self.unclipped += other.unclipped;
        self.cast_overflow += other.cast_overflow;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipFractions {
    pub upper: f64,
    pub lower: f64,
    pub none: f64,
}

pub fn clip_fraction_report(stats: &ClipStats) -> Result<ClipFractions> {
    let total = stats.total();
    if total == 0 {
        return Err(Error::invalid("no tokens recorded"));
    }
    let t = total as f64;
    let upper = stats.upper as f64 / t;
    let lower = stats.lower as f64 / t;
    Ok(ClipFractions {
        upper,
        lower,
        none: 1.0 - upper - lower,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `1/|τ|` per trajectory, then mean over trajectories.
    #[default]
    TokenMean,
    /// Sum over tokens, then mean over trajectories.
    TrajectorySum,
}

/// Advantages aligned with a slice of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub base: Vec<f64>,
    /// Optional per-token overrides, one vector per trajectory.
    pub per_token: Option<Vec<Vec<f64>>>,
}

impl AdvantageBatch {
    pub fn uniform(base: Vec<f64>) -> Self {
        Self { base, per_token: None }
    }

    pub fn token(&self, traj: usize, step: usize) -> f64 {
        match &self.per_token {
            Some(tokens) => tokens[traj][step],
            None => self.base[traj],
        }
    }

    fn check(&self, batch: &[&Trajectory]) -> Result<()> {
        if self.base.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                actual: self.base.len(),
            });
        }
        if let Some(tokens) = &self.per_token {
            if tokens.len() != batch.len() {
                return Err(Error::DimensionMismatch {
                    expected: batch.len(),
                    actual: tokens.len(),
                });
            }
            for (t, traj) in tokens.iter().zip(batch) {
                if t.len() != traj.len() {
                    return Err(Error::DimensionMismatch {
                        expected: traj.len(),
                        actual: t.len(),
                    });
                }
            }
        }
        if self.base.iter().any(|a| !a.is_finite())
            || self.per_token.iter().flatten().flatten().any(|a| !a.is_finite())
        {
            return Err(Error::NonFinite("advantage".into()));
        }
        Ok(())
    }
}

/// What the surrogate computes; shared by its value and its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub clip: Option<ClipConfig>,
    pub aggregation: Aggregation,
    pub quantization: QuantMode,
}

impl SurrogateSpec {
    pub fn unclipped() -> Self {
        Self {
            clip: None,
            aggregation: Aggregation::TokenMean,
            quantization: QuantMode::Off,
        }
    }

    pub fn clipped(clip: ClipConfig) -> Self {
        Self {
            clip: Some(clip),
            ..Self::unclipped()
        }
    }
}

/// Dense gradient with the same row-major layout as the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    num_states: usize,
    num_actions: usize,
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        Self {
            num_states: policy.num_states(),
            num_actions: policy.num_actions(),
            data: vec![0.0; policy.num_states() * policy.num_actions()],
        }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.data[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn add_row(&mut self, state: usize, v: &ScoreVector, scale: f64) {
        let row = &mut self.data[state * self.num_actions..(state + 1) * self.num_actions];
        for (r, g) in row.iter_mut().zip(&v.grad) {
            *r += scale * g;
        }
    }

    pub fn add(&mut self, other: &Gradient) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-state softmax rows, computed once per surrogate evaluation.
struct ProbTable {
    num_actions: usize,
    probs: Vec<f64>,
    logp: Vec<f64>,
}

impl ProbTable {
    fn new(policy: &TabularPolicy) -> Result<Self> {
        let mut probs = Vec::with_capacity(policy.logits().len());
        let mut logp = Vec::with_capacity(policy.logits().len());
        for s in 0..policy.num_states() {
            probs.extend(softmax(policy.row(s)?));
            logp.extend(policy.log_probs(s)?);
        }
        Ok(Self {
            num_actions: policy.num_actions(),
            probs,
            logp,
        })
    }

    fn probs(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }

    fn logp(&self, state: usize, action: usize) -> f64 {
        self.logp[state * self.num_actions + action]
    }
}

struct SurrogateEval {
    value: f64,
    gradient: Gradient,
    stats: ClipStats,
}

fn evaluate_surrogate(
    policy: &TabularPolicy,
    batch: &[&Trajectory],
    advantages: &AdvantageBatch,
    spec: &SurrogateSpec,
) -> Result<SurrogateEval> {
    advantages.check(batch)?;
    if let Some(clip) = &spec.clip {
        clip.validate()?;
    }
    let table = ProbTable::new(policy)?;
    let mut gradient = Gradient::zeros_like(policy);
    let mut stats = ClipStats::default();
    let mut value = 0.0;
    if batch.is_empty() {
        return Ok(SurrogateEval { value, gradient, stats });
    }
    let per_traj = 1.0 / batch.len() as f64;
    let quant = spec.quantization;

    for (ti, traj) in batch.iter().enumerate() {
        if traj.is_empty() {
            return Err(Error::invalid("empty trajectory in batch"));
        }
        for step in &traj.steps {
            if step.state >= policy.num_states() || step.action >= policy.num_actions() {
                return Err(Error::invalid("trajectory does not fit the policy"));
            }
        }
        let n = traj.len() as f64;
        let log_ratios: Vec<f64> = traj
            .steps
            .iter()
            .map(|s| quant.apply(table.logp(s.state, s.action)) - quant.apply(s.sampling_logprob))
            .collect();
        if log_ratios.iter().any(|d| !d.is_finite()) {
            stats.cast_overflow += log_ratios.iter().filter(|d| !d.is_finite()).count() as u64;
            continue;
        }
        let level = spec.clip.map_or(ClipLevel::Token, |c| c.level);
        match level {
            ClipLevel::Token => {
                let coef = match spec.aggregation {
                    Aggregation::TokenMean => per_traj / n,
                    Aggregation::TrajectorySum => per_traj,
                };
                for (t, step) in traj.steps.iter().enumerate() {
                    let adv = advantages.token(ti, t);
                    let w = log_ratios[t].exp();
                    let (term, flag) = match &spec.clip {
                        Some(clip) => clipped_term(adv, w, clip),
                        None => (adv * w, ClipFlag::Unclipped),
                    };
                    stats.record(flag, 1);
                    value += coef * term;
                    if flag == ClipFlag::Unclipped && adv != 0.0 {
                        let score = score_from_probs(table.probs(step.state), step.action);
                        gradient.add_row(step.state, &score, coef * adv * w);
                    }
                }
            }
            ClipLevel::Sequence => {
                let adv = advantages.base[ti];
                let w = (log_ratios.iter().sum::<f64>() / n).exp();
                let (term, flag) = match &spec.clip {
                    Some(clip) => clipped_term(adv, w, clip),
                    None => (adv * w, ClipFlag::Unclipped),
                };
                stats.record(flag, traj.len() as u64);
                value += per_traj * term;
                if flag == ClipFlag::Unclipped && adv != 0.0 {
                    for step in &traj.steps {
                        let score = score_from_probs(table.probs(step.state), step.action);
                        gradient.add_row(step.state, &score, per_traj * adv * w / n);
                    }
                }
            }
        }
    }
    Ok(SurrogateEval { value, gradient, stats })
}

/// Scalar surrogate objective at the current policy.
pub fn surrogate_value(
    policy: &TabularPolicy,
    batch: &[&Trajectory],
    advantages: &AdvantageBatch,
    spec: &SurrogateSpec,
) -> Result<f64> {
    Ok(evaluate_surrogate(policy, batch, advantages, spec)?.value)
}

/// Gradient of [`surrogate_value`] with respect to the logits, plus the clip
/// outcome of every token.
pub fn surrogate_gradient(
    policy: &TabularPolicy,
    batch: &[&Trajectory],
    advantages: &AdvantageBatch,
    spec: &SurrogateSpec,
) -> Result<(Gradient, ClipStats)> {
    let eval = evaluate_surrogate(policy, batch, advantages, spec)?;
    Ok((eval.gradient, eval.stats))
}

/// `β Σ_s w_s ∇H(s)` over visited states with weights `w_s`.
pub fn entropy_bonus_gradient_term(
    policy: &TabularPolicy,
    visited_states: &[(usize, f64)],
    beta: f64,
) -> Result<Gradient> {
    let mut out = Gradient::zeros_like(policy);
    if beta == 0.0 {
        return Ok(out);
    }
    for (state, weight) in visited_states {
        let h = policy.entropy_gradient(*state)?;
        out.add_row(*state, &h, beta * weight);
    }
    Ok(out)
}

/// Total surrogate coefficient mass per state in a batch, the weights under
/// which an entropy bonus matches the REPO-D extra term.
pub fn state_token_weights(
    num_states: usize,
    batch: &[&Trajectory],
    aggregation: Aggregation,
) -> Vec<(usize, f64)> {
    let mut mass = vec![0.0; num_states];
    if batch.is_empty() {
        return Vec::new();
    }
    let per_traj = 1.0 / batch.len() as f64;
    for traj in batch {
        let coef = match aggregation {
            Aggregation::TokenMean => per_traj / traj.len() as f64,
            Aggregation::TrajectorySum => per_traj,
        };
        for step in &traj.steps {
            mass[step.state] += coef;
        }
    }
    mass.into_iter()
        .enumerate()
        .filter(|(_, m)| *m > 0.0)
        .collect()
}

/// Controller parameters; unset values fall back to per-algorithm defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub zeta_init: Option<f64>,
    pub zeta_min: Option<f64>,
    pub zeta_max: Option<f64>,
    pub eps_low: Option<f64>,
    pub eps_high_init: Option<f64>,
    pub eps_high_min: Option<f64>,
    pub eps_high_max: Option<f64>,
    pub growth: Option<f64>,
    pub decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    /// Defaults to 1 for RLOO and 2 otherwise.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Trajectories per minibatch; defaults to the whole batch. Ignored by RLOO.
    #[serde(default)]
    pub minibatch_size: Option<usize>,
    #[serde(rename = "k")]
    pub group_size: usize,
    #[serde(default = "default_groups")]
    pub groups_per_task: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub quantization: QuantMode,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub std_kind: StdKind,
    /// Overrides the algorithm's clip widths.
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    /// Pull each visited row back inside the ratio trust region after every step.
    #[serde(default)]
    pub trust_region_projection: bool,
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Keep every scored token in [`IterationOutput::tokens`].
    #[serde(skip)]
    pub record_tokens: bool,
}

fn default_groups() -> usize {
    1
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, learning_rate: f64, group_size: usize, iterations: usize) -> Self {
        Self {
            algorithm,
            learning_rate,
            epochs: None,
            minibatch_size: None,
            group_size,
            groups_per_task: 1,
            iterations,
            seed: 0,
            quantization: QuantMode::Off,
            aggregation: Aggregation::TokenMean,
            std_kind: StdKind::Population,
            clip: None,
            trust_region_projection: false,
            controller: ControllerConfig::default(),
            record_tokens: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        if self.groups_per_task < 1 || self.iterations < 1 {
            return Err(Error::Config("groups_per_task and iterations must be >= 1".into()));
        }
        if self.epochs == Some(0) || self.minibatch_size == Some(0) {
            return Err(Error::Config("epochs and minibatch_size must be >= 1".into()));
        }
        if self.algorithm.is_strictly_on_policy() && self.epochs.unwrap_or(1) != 1 {
            return Err(Error::Config("RLOO is strictly on-policy: one full-batch epoch".into()));
        }
        if let Some(c) = &self.clip {
            c.validate()?;
        }
        self.controllers()?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.algorithm.default_epochs())
    }

    pub fn clip(&self) -> Option<ClipConfig> {
        self.clip.or_else(|| self.algorithm.default_clip())
    }

    /// Fresh controller states for this algorithm.
    pub fn controllers(&self) -> Result<Controllers> {
        let c = &self.controller;
        let zeta = match self.algorithm {
            Algorithm::RepoR => Some(ZetaControllerState::repo_r()),
            Algorithm::RepoD | Algorithm::GrpoEntropyBonus => Some(ZetaControllerState::repo_d()),
            _ => None,
        };
        let zeta = zeta
            .map(|d| {
                ZetaControllerState::new(
                    c.zeta_init.unwrap_or(d.zeta),
                    c.zeta_min.unwrap_or(d.zeta_min),
                    c.zeta_max.unwrap_or(d.zeta_max),
                )
                .map_err(|e| Error::Config(e.to_string()))
            })
            .transpose()?;
        let adapo = if self.algorithm == Algorithm::Adapo {
            let d = AdapoControllerState::default();
            let clip = self.clip();
            let state = AdapoControllerState {
                eps_low: c.eps_low.or(clip.map(|k| k.eps_low)).unwrap_or(d.eps_low),
                eps_high: c.eps_high_init.or(clip.map(|k| k.eps_high)).unwrap_or(d.eps_high),
                eps_high_min: c.eps_high_min.unwrap_or(d.eps_high_min),
                eps_high_max: c.eps_high_max.unwrap_or(d.eps_high_max),
                growth: c.growth.unwrap_or(d.growth),
                decay: c.decay.unwrap_or(d.decay),
                target_entropy: None,
            };
            state.validate().map_err(|e| Error::Config(e.to_string()))?;
            Some(state)
        } else {
            None
        };
        Ok(Controllers { zeta, adapo })
    }
}

/// Adaptive state carried across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Controllers {
    pub zeta: Option<ZetaControllerState>,
    pub adapo: Option<AdapoControllerState>,
}

impl Controllers {
    fn set_targets(&mut self, entropy: f64) {
        if let Some(z) = &mut self.zeta {
            z.target_entropy.get_or_insert(entropy);
        }
        if let Some(a) = &mut self.adapo {
            a.target_entropy.get_or_insert(entropy);
        }
    }

    fn step(&mut self, entropy: f64) {
        if let Some(z) = &mut self.zeta {
            *z = zeta_controller_step(*z, entropy);
        }
        if let Some(a) = &mut self.adapo {
            *a = adapo_controller_step(*a, entropy);
        }
    }
}

/// Everything produced by one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    pub policy: TabularPolicy,
    pub metrics: MetricsRow,
    pub clip_stats: ClipStats,
    /// Fraction of training tokens whose final ratio left the trust region.
    pub ratio_violation_frac: f64,
    /// Groups dropped because all rewards tied.
    pub degenerate_groups: usize,
    /// Scored tokens, filled only when `record_tokens` is set.
    pub tokens: Vec<TokenRecord>,
}

/// One scored token: the inputs of a clipped term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub new_logprob: f64,
    pub old_logprob: f64,
    pub advantage: f64,
}

/// Visit-weighted exact state entropy of the states in `trajectories`.
pub fn visit_weighted_entropy<'a>(
    policy: &TabularPolicy,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<f64> {
    let mut counts = vec![0u64; policy.num_states()];
    for traj in trajectories {
        for step in &traj.steps {
            counts[step.state] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no visited states"));
    }
    let mut acc = 0.0;
    for (s, c) in counts.iter().enumerate() {
        if *c > 0 {
            acc += *c as f64 * policy.state_entropy(s)?;
        }
    }
    Ok(acc / total as f64)
}

fn per_token_advantages(
    algorithm: Algorithm,
    policy: &TabularPolicy,
    batch: &[&Trajectory],
    base: &[f64],
    all: &[(&Trajectory, f64)],
    zeta: f64,
) -> Result<Option<Vec<Vec<f64>>>> {
    match algorithm {
        Algorithm::RepoR => {
            let out = batch
                .iter()
                .zip(base)
                .map(|(traj, a)| {
                    traj.steps
                        .iter()
                        .map(|s| Ok(repo_r_advantage(*a, policy.log_prob(s.state, s.action)?, zeta)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(out))
        }
        Algorithm::RepoD => {
            let psi: Vec<Vec<f64>> = (0..policy.num_states())
                .map(|s| policy.centered_logprobs(s))
                .collect::<Result<_>>()?;
            let probs: Vec<Vec<f64>> = (0..policy.num_states())
                .map(|s| policy.action_probs(s).map(|d| d.probs))
                .collect::<Result<_>>()?;
            let mut samples: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); policy.num_states()];
            for (traj, adv) in all {
                for s in &traj.steps {
                    samples[s.state].push((*adv, psi[s.state][s.action], probs[s.state][s.action]));
                }
            }
            let betas: Vec<f64> = samples
                .iter()
                .map(|sm| {
                    if sm.is_empty() {
                        Ok(0.0)
                    } else {
                        repo_d_beta(&StateStats::from_samples(sm), zeta)
                    }
                })
                .collect::<Result<_>>()?;
            let out = batch
                .iter()
                .zip(base)
                .map(|(traj, a)| {
                    traj.steps
                        .iter()
                        .map(|s| a - betas[s.state] * psi[s.state][s.action])
                        .collect()
                })
                .collect();
            Ok(Some(out))
        }
        _ => Ok(None),
    }
}

/// Moves each changed row of `policy` back toward `anchor` until every action
/// ratio lies in `[lower, upper]`.
fn project_rows(policy: &mut TabularPolicy, anchor: &TabularPolicy, lower: f64, upper: f64) -> Result<()> {
    for s in 0..policy.num_states() {
        let old = softmax(anchor.row(s)?);
        let start = anchor.row(s)?.to_vec();
        let end = policy.row(s)?.to_vec();
        let feasible = |t: f64| {
            let row: Vec<f64> = start.iter().zip(&end).map(|(a, b)| a + t * (b - a)).collect();
            softmax(&row)
                .iter()
                .zip(&old)
                .all(|(n, o)| (lower..=upper).contains(&(n / o)))
        };
        if feasible(1.0) {
            continue;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for ((l, a), b) in policy.row_mut(s)?.iter_mut().zip(&start).zip(&end) {
            *l = a + lo * (b - a);
        }
    }
    Ok(())
}

/// One iteration: sample, score, run epochs of minibatch ascent, update controllers.
///
/// `iteration` is 1-based; controller targets are fixed from the entropy
/// measured in the first iteration they see.
pub fn train_iteration(
    policy: &TabularPolicy,
    tasks: &[Task],
    config: &TrainConfig,
    controllers: &mut Controllers,
    iteration: usize,
    cumulative_entropy: f64,
) -> Result<IterationOutput> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks".into()));
    }
    let algorithm = config.algorithm;

    let mut groups = Vec::with_capacity(tasks.len() * config.groups_per_task);
    for (ti, task) in tasks.iter().enumerate() {
        for g in 0..config.groups_per_task {
            let seed = derive_seed(config.seed, &[iteration as u64, ti as u64, g as u64]);
            groups.push(sample_group(policy, task, config.group_size, seed)?);
        }
    }
    let all_trajs = groups.iter().flat_map(|g| &g.trajectories);
    let entropy = visit_weighted_entropy(policy, all_trajs.clone())?;
    let (mut reward_sum, mut logp_sum, mut n_traj, mut n_tok) = (0.0, 0.0, 0usize, 0usize);
    for t in all_trajs {
        reward_sum += t.terminal_reward;
        n_traj += 1;
        for s in &t.steps {
            logp_sum += s.sampling_logprob;
            n_tok += 1;
        }
    }
    let eval_reward = tasks
        .iter()
        .map(|t| crate::envs::expected_reward(policy, t))
        .sum::<Result<f64>>()?
        / tasks.len() as f64;
    controllers.set_targets(entropy);

    let mut training: Vec<(&Trajectory, f64)> = Vec::new();
    let mut degenerate_groups = 0;
    for group in &groups {
        let rewards = group.rewards();
        if is_degenerate(&rewards) {
            degenerate_groups += 1;
            continue;
        }
        let adv = match algorithm.estimator() {
            Estimator::LeaveOneOut => rloo_advantages(&rewards)?,
            Estimator::GroupNormalized => grpo_advantages(&rewards, config.std_kind)?
                .into_option()
                .expect("non-degenerate group normalizes"),
        };
        training.extend(group.trajectories.iter().zip(adv));
    }

    let zeta = controllers.zeta.map(|z| z.zeta);
    let clip = config.clip().map(|mut c| {
        if let Some(a) = &controllers.adapo {
            c.eps_low = a.eps_low;
            c.eps_high = a.eps_high;
        }
        c
    });
    let spec = SurrogateSpec {
        clip,
        aggregation: config.aggregation,
        quantization: config.quantization,
    };

    let anchor = policy.clone();
    let mut current = policy.clone();
    let mut clip_stats = ClipStats::default();
    let mut tokens = Vec::new();
    if !training.is_empty() && config.learning_rate > 0.0 {
        let mb = if algorithm.is_strictly_on_policy() {
            training.len()
        } else {
            config.minibatch_size.unwrap_or(training.len()).min(training.len())
        };
        let mut order: Vec<usize> = (0..training.len()).collect();
        for epoch in 0..config.epochs() {
            let mut rng = rng_from_seed(derive_seed(config.seed, &[iteration as u64, 0xE0C4, epoch as u64]));
            order.shuffle(&mut rng);
            for chunk in order.chunks(mb) {
                let batch: Vec<&Trajectory> = chunk.iter().map(|i| training[*i].0).collect();
                let base: Vec<f64> = chunk.iter().map(|i| training[*i].1).collect();
                let per_token = per_token_advantages(
                    algorithm,
                    &current,
                    &batch,
                    &base,
                    &training,
                    zeta.unwrap_or(0.0),
                )?;
                let advantages = AdvantageBatch { base, per_token };
                if config.record_tokens {
                    for (ti, traj) in batch.iter().enumerate() {
                        for (t, s) in traj.steps.iter().enumerate() {
                            tokens.push(TokenRecord {
                                new_logprob: current.log_prob(s.state, s.action)?,
                                old_logprob: s.sampling_logprob,
                                advantage: advantages.token(ti, t),
                            });
                        }
                    }
                }
                let (mut grad, stats) = surrogate_gradient(&current, &batch, &advantages, &spec)?;
                clip_stats.merge(&stats);
                if algorithm == Algorithm::GrpoEntropyBonus {
                    let weights = state_token_weights(current.num_states(), &batch, config.aggregation);
                    grad.add(&entropy_bonus_gradient_term(&current, &weights, zeta.unwrap_or(0.0))?);
                }
                current.apply_update(&grad.data, config.learning_rate)?;
                if config.trust_region_projection {
                    if let Some(c) = &spec.clip {
                        project_rows(&mut current, &anchor, c.lower(), c.upper())?;
                    }
                }
            }
        }
    }

    let ratio_violation_frac = match &spec.clip {
        Some(c) if !training.is_empty() => {
            let mut outside = 0usize;
            let mut total = 0usize;
            for (traj, _) in &training {
                for s in &traj.steps {
                    let r = (current.log_prob(s.state, s.action)? - s.sampling_logprob).exp();
                    total += 1;
                    if r < c.lower() || r > c.upper() {
                        outside += 1;
                    }
                }
            }
            outside as f64 / total as f64
        }
        _ => 0.0,
    };

    let fractions = clip_fraction_report(&clip_stats).ok();
    let metrics = MetricsRow {
        iteration,
        seed: config.seed,
        mean_per_token_entropy: entropy,
        sampled_entropy: -logp_sum / n_tok as f64,
        cumulative_entropy: cumulative_entropy + entropy,
        mean_reward: reward_sum / n_traj as f64,
        eval_reward,
        clip_upper_frac: fractions.map_or(0.0, |f| f.upper),
        clip_lower_frac: fractions.map_or(0.0, |f| f.lower),
        zeta,
        eps_high: clip.map(|c| c.eps_high),
    };

    controllers.step(entropy);

    Ok(IterationOutput {
        policy: current,
        metrics,
        clip_stats,
        ratio_violation_frac,
        degenerate_groups,
        tokens,
    })
}

/// Stateful driver around [`train_iteration`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub tasks: Vec<Task>,
    pub policy: TabularPolicy,
    pub controllers: Controllers,
    iteration: usize,
    cumulative_entropy: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig, tasks: Vec<Task>, policy: TabularPolicy) -> Result<Self> {
        config.validate()?;
        for t in &tasks {
            t.check_fits(&policy)?;
        }
        let controllers = config.controllers()?;
        Ok(Self {
            config,
            tasks,
            policy,
            controllers,
            iteration: 0,
            cumulative_entropy: 0.0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<IterationOutput> {
        let out = train_iteration(
            &self.policy,
            &self.tasks,
            &self.config,
            &mut self.controllers,
            self.iteration + 1,
            self.cumulative_entropy,
        )?;
        self.iteration += 1;
        self.cumulative_entropy = out.metrics.cumulative_entropy;
        self.policy = out.policy.clone();
        Ok(out)
    }

    /// Runs all configured iterations and returns the metrics rows.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        (0..self.config.iterations)
            .map(|_| self.step().map(|o| o.metrics))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Step;

    fn traj(steps: &[(usize, usize, f64)]) -> Trajectory {
        Trajectory {
            task_id: 0,
            steps: steps
                .iter()
                .map(|(s, a, lp)| Step {
                    state: *s,
                    action: *a,
                    sampling_logprob: *lp,
                })
                .collect(),
            terminal_reward: 0.0,
        }
    }

    #[test]
    fn weights() {
        assert_eq!(token_weight(-0.3, -0.3).unwrap(), 1.0);
        assert!((token_weight(1.5f64.ln() - 2.0, -2.0).unwrap() - 1.5).abs() < 1e-12);
        assert!(token_weight(800.0, 0.0).is_err());
        assert_eq!(gspo_weight(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 1.0);
        let two = gspo_weight(&[2f64.ln() - 1.0, 0.5f64.ln() - 1.0], &[-1.0, -1.0]).unwrap();
        assert!((two - 1.0).abs() < 1e-15);
        assert_eq!(gspo_weight(&[-0.2], &[-0.7]).unwrap(), token_weight(-0.2, -0.7).unwrap());
        assert!(gspo_weight(&[], &[]).is_err());
    }

    #[test]
    fn clipped_term_examples() {
        let c = ClipConfig::ppo();
        assert_eq!(clipped_term(0.7, 1.0, &c), (0.7, ClipFlag::Unclipped));
        let (v, f) = clipped_term(1.0, 1.5, &c);
        assert!((v - 1.2).abs() < 1e-15 && f == ClipFlag::Upper);
        let (v, f) = clipped_term(-1.0, 0.5, &c);
        assert!((v + 0.8).abs() < 1e-15 && f == ClipFlag::Lower);
        // Unclipped branch is already the pessimistic one.
        assert_eq!(clipped_term(1.0, 0.5, &c), (0.5, ClipFlag::Unclipped));
        assert_eq!(clipped_term(-1.0, 1.5, &c), (-1.5, ClipFlag::Unclipped));
    }

    #[test]
    fn clip_fraction_examples() {
        let on_policy = ClipStats {
            unclipped: 12,
            ..Default::default()
        };
        let f = clip_fraction_report(&on_policy).unwrap();
        assert_eq!((f.upper, f.lower, f.none), (0.0, 0.0, 1.0));
        let mixed = ClipStats {
            upper: 2,
            unclipped: 8,
            ..Default::default()
        };
        let f = clip_fraction_report(&mixed).unwrap();
        assert!((f.upper - 0.2).abs() < 1e-15 && f.lower == 0.0 && (f.none - 0.8).abs() < 1e-15);
        assert!(clip_fraction_report(&ClipStats::default()).is_err());
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let policy = TabularPolicy::from_logits(2, 3, vec![0.1, -0.4, 0.3, 1.0, 0.0, -1.0]).unwrap();
        let t = traj(&[(0, 1, -1.3), (1, 2, -2.0)]);
        let (g, stats) = surrogate_gradient(
            &policy,
            &[&t],
            &AdvantageBatch::uniform(vec![0.0]),
            &SurrogateSpec::clipped(ClipConfig::ppo()),
        )
        .unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(stats.total(), 2);
    }

    #[test]
    fn misaligned_batch_is_rejected() {
        let policy = TabularPolicy::uniform(1, 2).unwrap();
        let t = traj(&[(0, 0, -0.69)]);
        let adv = AdvantageBatch::uniform(vec![1.0, 2.0]);
        assert!(surrogate_gradient(&policy, &[&t], &adv, &SurrogateSpec::unclipped()).is_err());
        let bad = AdvantageBatch {
            base: vec![1.0],
            per_token: Some(vec![vec![1.0, 1.0]]),
        };
        assert!(surrogate_gradient(&policy, &[&t], &bad, &SurrogateSpec::unclipped()).is_err());
    }

    #[test]
    fn entropy_bonus_trivial_cases() {
        let policy = TabularPolicy::from_logits(1, 3, vec![0.5, -0.2, 0.0]).unwrap();
        assert_eq!(entropy_bonus_gradient_term(&policy, &[(0, 1.0)], 0.0).unwrap().max_abs(), 0.0);
        let u = TabularPolicy::uniform(2, 3).unwrap();
        assert!(entropy_bonus_gradient_term(&u, &[(0, 1.0), (1, 0.5)], 2.0).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("PPO2".parse::<Algorithm>().is_err());
    }

    #[test]
    fn rloo_rejects_multiple_epochs() {
        let mut c = TrainConfig::new(Algorithm::Rloo, 0.1, 4, 3);
        c.validate().unwrap();
        c.epochs = Some(2);
        assert!(c.validate().is_err());
    }
}

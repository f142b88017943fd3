//! 16-bit float codecs and the importance-ratio rounding audits.
//!
//! Casting takes and returns `f64`; the returned value is always exactly
//! representable in the target format. Only the rounding function matters
//! here, so no native 16-bit storage type is involved.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Binary floating-point layout with IEEE round-to-nearest-even semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
}

impl FloatFormat {
    pub const BF16: FloatFormat = FloatFormat {
        exponent_bits: 8,
        mantissa_bits: 7,
    };
    pub const FP16: FloatFormat = FloatFormat {
        exponent_bits: 5,
        mantissa_bits: 10,
    };
    pub const FP32: FloatFormat = FloatFormat {
        exponent_bits: 8,
        mantissa_bits: 23,
    };

    fn bias(self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    /// Exponent of the smallest normal number.
    pub fn min_exponent(self) -> i32 {
        1 - self.bias()
    }

    pub fn max_exponent(self) -> i32 {
        self.bias()
    }

    pub fn max_finite(self) -> f64 {
        (2.0 - pow2(-(self.mantissa_bits as i32))) * pow2(self.max_exponent())
    }
}

fn pow2(k: i32) -> f64 {
    2f64.powi(k)
}

/// `floor(log2 |x|)` for finite nonzero `x`, exact for normal doubles.
fn binade(x: f64) -> i32 {
    let raw = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if raw == 0 {
        x.abs().log2().floor() as i32
    } else {
        raw - 1023
    }
}

/// Rounds `x` to the nearest value representable in `fmt`, ties to even.
///
/// Subnormals follow the format's fixed spacing below the normal range, and
/// magnitudes that round past the largest finite value become infinite.
pub fn cast(x: f64, fmt: FloatFormat) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let quantum = binade(x).max(fmt.min_exponent()) - fmt.mantissa_bits as i32;
    let units = (x * pow2(-quantum)).round_ties_even();
    let y = units * pow2(quantum);
    if y.abs() > fmt.max_finite() {
        f64::INFINITY.copysign(x)
    } else {
        y
    }
}

/// Spacing of representable values in the binade containing `x`.
///
/// For `x == 0` this is the subnormal spacing.
pub fn ulp(x: f64, fmt: FloatFormat) -> f64 {
    let e = if x == 0.0 {
        fmt.min_exponent()
    } else {
        binade(x).max(fmt.min_exponent())
    };
    pow2(e - fmt.mantissa_bits as i32)
}

/// How log-probabilities are treated before the importance ratio is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QuantMode {
    #[default]
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "bf16-cast")]
    Bf16,
    #[serde(rename = "fp16-cast")]
    Fp16,
}

impl QuantMode {
    pub fn format(self) -> Option<FloatFormat> {
        match self {
            QuantMode::Off => None,
            QuantMode::Bf16 => Some(FloatFormat::BF16),
            QuantMode::Fp16 => Some(FloatFormat::FP16),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self.format() {
            Some(fmt) => cast(x, fmt),
            None => x,
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Off => "off",
            QuantMode::Bf16 => "bf16-cast",
            QuantMode::Fp16 => "fp16-cast",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "none" => Ok(QuantMode::Off),
            "bf16" | "bf16-cast" => Ok(QuantMode::Bf16),
            "fp16" | "fp16-cast" => Ok(QuantMode::Fp16),
            other => Err(Error::invalid(format!("unknown quantization mode `{other}`"))),
        }
    }
}

/// `exp(new - old)`, with both log-probabilities cast first unless `mode` is off.
pub fn observed_ratio(logp_new: f64, logp_old: f64, mode: QuantMode) -> f64 {
    (mode.apply(logp_new) - mode.apply(logp_old)).exp()
}

/// Monte-Carlo audit of the uniform-error model for cast log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBiasReport {
    pub r_true: f64,
    pub ulp_new: f64,
    pub ulp_old: f64,
    pub mean_r_observed: f64,
    pub taylor_prediction: f64,
    pub mc_std_error: f64,
    pub sample_count: u64,
}

impl RatioBiasReport {
    /// Distance of the MC mean above `r_true`, in standard errors.
    pub fn bias_sigmas(&self) -> f64 {
        (self.mean_r_observed - self.r_true) / self.mc_std_error
    }

    /// Distance between the MC mean and the second-order prediction, in standard errors.
    pub fn taylor_sigmas(&self) -> f64 {
        (self.mean_r_observed - self.taylor_prediction).abs() / self.mc_std_error
    }
}

/// `r_true * (1 + (ulp_new² + ulp_old²) / 24)`.
pub fn taylor_ratio_bias(r_true: f64, ulp_new: f64, ulp_old: f64) -> f64 {
    r_true * (1.0 + (ulp_new * ulp_new + ulp_old * ulp_old) / 24.0)
}

/// Estimates `E[r_true · exp(-δ)]` with `δ = ε_new - ε_old` and
/// `ε ~ Uniform(-ulp/2, ulp/2)` independently.
///
/// Each of the `n_samples` draws is evaluated antithetically at `±δ`, which
/// averages to `r_true · cosh(δ)` and removes the first-order noise that would
/// otherwise swamp a bias of order `ulp²`.
pub fn bias_mc_oracle(
    r_true: f64,
    ulp_new: f64,
    ulp_old: f64,
    n_samples: u64,
    seed: u64,
) -> Result<RatioBiasReport> {
    if n_samples < 10_000 {
        return Err(Error::invalid("bias oracle needs at least 10^4 samples"));
    }
    if !(r_true > 0.0) || ulp_new < 0.0 || ulp_old < 0.0 {
        return Err(Error::invalid("r_true must be positive and ulps nonnegative"));
    }
    let mut rng = rng_from_seed(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let eps_new = (rng.gen::<f64>() - 0.5) * ulp_new;
        let eps_old = (rng.gen::<f64>() - 0.5) * ulp_old;
        let delta = eps_new - eps_old;
        // cosh(δ) - 1 = 2 sinh²(δ/2), kept as a deviation for accuracy.
        let half = (0.5 * delta).sinh();
        let dev = r_true * 2.0 * half * half;
        sum += dev;
        sum_sq += dev * dev;
    }
    let n = n_samples as f64;
    let mean_dev = sum / n;
    let var = (sum_sq / n - mean_dev * mean_dev).max(0.0) * n / (n - 1.0);
    Ok(RatioBiasReport {
        r_true,
        ulp_new,
        ulp_old,
        mean_r_observed: r_true + mean_dev,
        taylor_prediction: taylor_ratio_bias(r_true, ulp_new, ulp_old),
        mc_std_error: (var / n).sqrt(),
        sample_count: n_samples,
    })
}

/// Deterministic-rounding counterpart of the bias oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CastBiasReport {
    pub binade: i32,
    pub mean_ratio_factor: f64,
    pub std_error: f64,
    pub sample_count: u64,
}

/// Averages `r_observed / r_true` over random log-probability pairs whose old
/// value lies in `[-2^(binade+1), -2^binade)`.
///
/// Every pair is scored in both orders; since casting is deterministic, the
/// swapped pair sees the exact opposite rounding offset.
pub fn cast_bias_check(
    mode: QuantMode,
    binade: i32,
    max_log_ratio: f64,
    n_samples: u64,
    seed: u64,
) -> Result<CastBiasReport> {
    if n_samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let mut rng = rng_from_seed(seed);
    let lo = pow2(binade);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let old = -(lo + rng.gen::<f64>() * lo);
        let new = old + (2.0 * rng.gen::<f64>() - 1.0) * max_log_ratio;
        let r_true = (new - old).exp();
        let forward = observed_ratio(new, old, mode) / r_true;
        let backward = observed_ratio(old, new, mode) * r_true;
        let dev = 0.5 * (forward + backward) - 1.0;
        sum += dev;
        sum_sq += dev * dev;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(CastBiasReport {
        binade,
        mean_ratio_factor: 1.0 + mean,
        std_error: (var / n).sqrt(),
        sample_count: n_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Softmax backward terms for a sampled token of probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnderflowAudit {
    /// `-A (1 - p)`, the logit gradient of the sampled token.
    pub sampled: f64,
    /// `A q` for the remaining mass `q = 1 - p` carried by the other tokens.
    pub other: f64,
}

impl UnderflowAudit {
    pub fn sum(&self) -> f64 {
        self.sampled + self.other
    }
}

/// Simulates the sampled-token and other-token logit gradients at the given
/// precision. The other tokens' mass comes from their own softmax outputs, so
/// it survives even when `1 - p` rounds to zero for the sampled token. With
/// `fix` on, both terms are formed in double precision from the same `1 - p`.
pub fn softmax_grad_underflow_audit(
    prob_p: f64,
    advantage: f64,
    precision: Precision,
    fix: bool,
) -> Result<UnderflowAudit> {
    if !(prob_p > 0.0 && prob_p < 1.0) {
        return Err(Error::invalid("probability must lie strictly inside (0, 1)"));
    }
    let rest = 1.0 - prob_p;
    Ok(match precision {
        Precision::Double => UnderflowAudit {
            sampled: -advantage * rest,
            other: advantage * rest,
        },
        Precision::Single => {
            let p32 = prob_p as f32;
            let rest32 = rest as f32;
            let a32 = advantage as f32;
            if fix {
                UnderflowAudit {
                    sampled: -advantage * rest,
                    other: advantage * rest,
                }
            } else {
                UnderflowAudit {
                    sampled: f64::from(-a32 * (1.0f32 - p32)),
                    other: f64::from(a32 * rest32),
                }
            }
        }
    })
}

/// Smallest `k` for which `1 - 2^-k` rounds to exactly 1 in single precision.
pub fn single_precision_vanishing_exponent() -> u32 {
    (1..64)
        .find(|k| (1.0 - pow2(-(*k as i32))) as f32 == 1.0f32)
        .expect("single precision saturates well before 2^-64")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bf16_cast_examples() {
        let bf = FloatFormat::BF16;
        assert_eq!(cast(1.0, bf), 1.0);
        assert_eq!(cast(1.0 + pow2(-8), bf), 1.0);
        assert_eq!(cast(1.0 + 3.0 * pow2(-9), bf), 1.0 + pow2(-7));
        // Tie at an odd mantissa rounds up to the even neighbour.
        assert_eq!(cast(1.0 + pow2(-7) + pow2(-8), bf), 1.0 + pow2(-6));
        assert_eq!(cast(-1.0 - pow2(-8), bf), -1.0);
    }

    #[test]
    fn special_values_pass_through() {
        let bf = FloatFormat::BF16;
        assert!(cast(f64::NAN, bf).is_nan());
        assert_eq!(cast(f64::NEG_INFINITY, bf), f64::NEG_INFINITY);
        assert_eq!(cast(-0.0, bf).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn fp16_range_edges() {
        let h = FloatFormat::FP16;
        assert_eq!(h.max_finite(), 65504.0);
        assert_eq!(cast(65504.0, h), 65504.0);
        assert_eq!(cast(65519.0, h), 65504.0);
        assert_eq!(cast(65520.0, h), f64::INFINITY);
        assert_eq!(cast(-1e6, h), f64::NEG_INFINITY);
        // Smallest subnormal is 2^-24; half of it ties to zero.
        assert_eq!(cast(pow2(-24), h), pow2(-24));
        assert_eq!(cast(pow2(-25), h), 0.0);
        assert_eq!(cast(1.5 * pow2(-24), h), 2.0 * pow2(-24));
    }

    #[test]
    fn ulp_examples() {
        assert_eq!(ulp(1.0, FloatFormat::BF16), pow2(-7));
        assert_eq!(ulp(0.5, FloatFormat::BF16), pow2(-8));
        assert_eq!(ulp(-1.5, FloatFormat::BF16), pow2(-7));
        assert_eq!(ulp(1.0, FloatFormat::FP16), pow2(-10));
        assert_eq!(ulp(0.0, FloatFormat::FP16), pow2(-24));
    }

    #[test]
    fn observed_ratio_examples() {
        assert_eq!(observed_ratio(-0.7, -0.7, QuantMode::Off), 1.0);
        assert_eq!(observed_ratio(-1.0, -0.5, QuantMode::Bf16), observed_ratio(-1.0, -0.5, QuantMode::Off));
        let new = -1.0 + pow2(-9);
        assert_eq!(observed_ratio(new, -1.0, QuantMode::Bf16), 1.0);
        assert_eq!(observed_ratio(new, -1.0, QuantMode::Off), pow2(-9).exp());
    }

    #[test]
    fn zero_ulp_bias_is_exact() {
        let report = bias_mc_oracle(1.7, 0.0, 0.0, 10_000, 3).unwrap();
        assert_eq!(report.mean_r_observed, 1.7);
        assert_eq!(report.taylor_prediction, 1.7);
        assert!(bias_mc_oracle(1.0, 0.1, 0.1, 10, 3).is_err());
    }

    #[test]
    fn underflow_examples() {
        let half = softmax_grad_underflow_audit(0.5, 1.0, Precision::Single, false).unwrap();
        assert_eq!(half, UnderflowAudit { sampled: -0.5, other: 0.5 });
        let fixed = softmax_grad_underflow_audit(0.5, 1.0, Precision::Single, true).unwrap();
        assert_eq!(half, fixed);

        let p = 1.0 - pow2(-25);
        let broken = softmax_grad_underflow_audit(p, 1.0, Precision::Single, false).unwrap();
        assert_eq!(broken.sampled, 0.0);
        assert!(broken.other > 0.0);
        let repaired = softmax_grad_underflow_audit(p, 1.0, Precision::Single, true).unwrap();
        assert_eq!(repaired.sampled, -pow2(-25));
        assert_eq!(repaired.sum(), 0.0);

        let ok = softmax_grad_underflow_audit(1.0 - pow2(-20), 1.0, Precision::Single, false).unwrap();
        assert_eq!(ok.sampled, -pow2(-20));
        assert_eq!(single_precision_vanishing_exponent(), 25);
    }

    #[test]
    fn quant_mode_parsing() {
        assert_eq!("bf16".parse::<QuantMode>().unwrap(), QuantMode::Bf16);
        assert_eq!("fp16-cast".parse::<QuantMode>().unwrap(), QuantMode::Fp16);
        assert!("int8".parse::<QuantMode>().is_err());
    }
}

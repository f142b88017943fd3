mod common;

use common::rng;
use entropy_lab::quantize::{
    cast, observed_ratio, single_precision_vanishing_exponent, softmax_grad_underflow_audit, ulp, FloatFormat,
    Precision, QuantMode,
};
use half::{bf16, f16};
use proptest::prelude::*;
use rand::Rng;

fn random_finite_f32(r: &mut impl Rng) -> f32 {
    loop {
        let x = f32::from_bits(r.gen());
        if x.is_finite() {
            return x;
        }
    }
}

#[test]
fn bf16_cast_matches_reference_codec() {
    let mut r = rng(31);
    for _ in 0..1_000_000 {
        let x = random_finite_f32(&mut r);
        let expected = f64::from(bf16::from_f32(x).to_f32());
        assert_eq!(cast(f64::from(x), FloatFormat::BF16).to_bits(), expected.to_bits(), "x = {x:e}");
    }
}

#[test]
fn fp16_cast_matches_reference_codec() {
    let mut r = rng(32);
    for _ in 0..1_000_000 {
        // Concentrate draws on the range fp16 can represent, subnormals included.
        let x = if r.gen_bool(0.8) {
            r.gen_range(-70000.0f32..70000.0) * 2f32.powi(-r.gen_range(0..30))
        } else {
            random_finite_f32(&mut r)
        };
        let expected = f64::from(f16::from_f32(x).to_f32());
        assert_eq!(cast(f64::from(x), FloatFormat::FP16).to_bits(), expected.to_bits(), "x = {x:e}");
    }
}

#[test]
fn ulp_matches_reference_spacing() {
    for x in [-0.7, -1.0, -1.5, -3.0, -9.0, -100.0] {
        let b = bf16::from_f64(x);
        let next = bf16::from_bits(b.to_bits() + 1);
        assert_eq!(ulp(x, FloatFormat::BF16), (next.to_f64() - b.to_f64()).abs());
        let h = f16::from_f64(x);
        let next = f16::from_bits(h.to_bits() + 1);
        assert_eq!(ulp(x, FloatFormat::FP16), (next.to_f64() - h.to_f64()).abs());
    }
}

#[test]
fn underflow_fix_restores_gradient() {
    let k = single_precision_vanishing_exponent();
    let p = 1.0 - 2f64.powi(-(k as i32));
    let off = softmax_grad_underflow_audit(p, 1.0, Precision::Single, false).unwrap();
    assert_eq!(off.sampled, 0.0);
    let on = softmax_grad_underflow_audit(p, 1.0, Precision::Single, true).unwrap();
    assert!(on.sampled != 0.0);
    assert_eq!(on.sum(), 0.0);
}

proptest! {
    #[test]
    fn cast_is_idempotent(x in -1e4f64..1e4) {
        for fmt in [FloatFormat::BF16, FloatFormat::FP16] {
            let once = cast(x, fmt);
            prop_assert_eq!(cast(once, fmt), once);
        }
    }

    #[test]
    fn cast_is_monotone(x in -1e4f64..1e4, y in -1e4f64..1e4) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        for fmt in [FloatFormat::BF16, FloatFormat::FP16] {
            prop_assert!(cast(lo, fmt) <= cast(hi, fmt));
        }
    }

    #[test]
    fn cast_error_within_half_ulp(x in -1e3f64..-1e-3) {
        for fmt in [FloatFormat::BF16, FloatFormat::FP16] {
            prop_assert!((cast(x, fmt) - x).abs() <= 0.5 * ulp(x, fmt));
        }
    }

    #[test]
    fn ratio_without_casting_is_exact(a in -20.0f64..0.0, b in -20.0f64..0.0) {
        prop_assert_eq!(observed_ratio(a, b, QuantMode::Off), (a - b).exp());
    }
}

// Upward bias of importance ratios formed from 16-bit-cast log-probabilities.

use entropy_lab::quantize::{bias_mc_oracle, cast, cast_bias_check, ulp, FloatFormat, QuantMode};
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let x = -1.2345678;
    println!("bf16({x}) = {}  fp16({x}) = {}", cast(x, FloatFormat::BF16), cast(x, FloatFormat::FP16));

    let u = ulp(-1.0, FloatFormat::BF16);
    println!("bf16 ulp on [1, 2): {u}");
    for r in [0.5, 1.0, 2.0] {
        let rep = bias_mc_oracle(r, u, u, 200_000, 1)?;
        println!(
            "r_true {r}: mean {:.10}  second-order {:.10}  ({:.1} σ above r_true)",
            rep.mean_r_observed,
            rep.taylor_prediction,
            rep.bias_sigmas()
        );
    }

    // Deterministic casting of actual log-probabilities, not the uniform-error model.
    for mode in [QuantMode::Bf16, QuantMode::Fp16] {
        let rep = cast_bias_check(mode, 0, 0.3, 200_000, 2)?;
        println!("{mode}: E[r_obs / r_true] = 1 + {:.3e} ± {:.1e}", rep.mean_ratio_factor - 1.0, rep.std_error);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

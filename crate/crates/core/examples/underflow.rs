// Vanishing sampled-token gradient for near-certain tokens in single precision.

use entropy_lab::quantize::{single_precision_vanishing_exponent, softmax_grad_underflow_audit, Precision};
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let k = single_precision_vanishing_exponent();
    println!("1 - 2^-{k} is the first such value to round to 1.0 in f32");
    for e in [20, 23, 24, 25, 30] {
        let p = 1.0 - 2f64.powi(-e);
        let raw = softmax_grad_underflow_audit(p, 1.0, Precision::Single, false)?;
        let fixed = softmax_grad_underflow_audit(p, 1.0, Precision::Single, true)?;
        println!(
            "p = 1 - 2^-{e:<2}  raw: sampled {:>12.4e} other {:>12.4e} sum {:>11.3e} | fixed: sampled {:>12.4e} sum {:.1e}",
            raw.sampled,
            raw.other,
            raw.sum(),
            fixed.sampled,
            fixed.sum()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

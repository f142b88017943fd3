// Score one recorded training stream with and without bf16 casting.

use entropy_lab::harness::{compare_clipping, record_token_stream, AuditConfig, ClipComparison};
use entropy_lab::quantize::QuantMode;
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let mut cfg = AuditConfig::default_for(QuantMode::Bf16, 10_000);
    cfg.stream.train.iterations = 10;
    let tokens = record_token_stream(&cfg.stream, 0)?;
    for clip in &cfg.clip_settings {
        let (c, d) = compare_clipping(&tokens, clip, QuantMode::Bf16);
        println!(
            "eps {}/{}: {} tokens, upper {:.5} -> {:.5} (z {:+.2}), lower {:.5} -> {:.5} (z {:+.2})",
            c.eps_low,
            c.eps_high,
            c.tokens,
            c.upper_frac_off(),
            c.upper_frac_cast(),
            ClipComparison::paired_z(d.upper_gained, d.upper_lost),
            c.lower_frac_off(),
            c.lower_frac_cast(),
            ClipComparison::paired_z(d.lower_gained, d.lower_lost)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

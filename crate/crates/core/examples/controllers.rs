// Entropy-feedback controllers: the REPO coefficient ζ and ADAPO's upper clip width.

use entropy_lab::estimators::{
    adapo_controller_step, zeta_controller_step, AdapoControllerState, ZetaControllerState,
};
use entropy_lab::Result;

pub fn run_example() -> Result<()> {
    let target = 1.0;
    // Entropy falls below target, then overshoots above it.
    let entropies = [0.9, 0.9, 0.9, 0.9, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1, 0.95];

    let mut zeta = ZetaControllerState::repo_r().with_target(target);
    let mut adapo = AdapoControllerState::default().with_target(target);
    println!("{:>4} {:>6} {:>10} {:>8}", "step", "H", "zeta", "eps_high");
    for (i, h) in entropies.iter().enumerate() {
        zeta = zeta_controller_step(zeta, *h);
        adapo = adapo_controller_step(adapo, *h);
        println!("{i:>4} {h:>6.2} {:>10.5} {:>8.4}", zeta.zeta, adapo.eps_high);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}

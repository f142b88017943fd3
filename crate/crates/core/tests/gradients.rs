mod common;

use common::{random_batch, random_policy, rng, uniform_vec};
use entropy_lab::objectives::{
    surrogate_gradient, surrogate_value, AdvantageBatch, Aggregation, ClipConfig, SurrogateSpec,
};
use entropy_lab::policy::TabularPolicy;
use rand::Rng;

const H: f64 = 1e-6;
const REL: f64 = 1e-6;

fn perturbed(p: &TabularPolicy, idx: usize, delta: f64) -> TabularPolicy {
    let mut logits = p.logits().to_vec();
    logits[idx] += delta;
    TabularPolicy::from_logits(p.num_states(), p.num_actions(), logits).unwrap()
}

fn assert_close(analytic: &[f64], numeric: &[f64]) {
    let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
    for (a, n) in analytic.iter().zip(numeric) {
        assert!((a - n).abs() <= REL * scale, "analytic {a} numeric {n}");
    }
}

#[test]
fn entropy_gradient_matches_central_differences() {
    let mut r = rng(21);
    for _ in 0..200 {
        let p = random_policy(&mut r, 3, 4, 1.5);
        for s in 0..3 {
            let analytic = p.entropy_gradient(s).unwrap().grad;
            let numeric: Vec<f64> = (0..4)
                .map(|a| {
                    let idx = s * 4 + a;
                    let up = perturbed(&p, idx, H).state_entropy(s).unwrap();
                    let down = perturbed(&p, idx, -H).state_entropy(s).unwrap();
                    (up - down) / (2.0 * H)
                })
                .collect();
            assert_close(&analytic, &numeric);
        }
    }
}

#[test]
fn surrogate_gradient_matches_central_differences() {
    let mut r = rng(22);
    let specs = [
        SurrogateSpec::unclipped(),
        SurrogateSpec::clipped(ClipConfig::ppo()),
        SurrogateSpec::clipped(ClipConfig::dapo()),
        SurrogateSpec::clipped(ClipConfig::gspo()),
        SurrogateSpec {
            aggregation: Aggregation::TrajectorySum,
            ..SurrogateSpec::clipped(ClipConfig::dapo())
        },
    ];
    for _ in 0..100 {
        let p = random_policy(&mut r, 3, 4, 1.0);
        let batch = random_batch(&mut r, &p, 5, 6, 0.25);
        let refs: Vec<_> = batch.iter().collect();
        let mut adv = AdvantageBatch::uniform(uniform_vec(&mut r, refs.len(), -1.0, 1.0));
        if r.gen_bool(0.5) {
            adv.per_token = Some(refs.iter().map(|t| uniform_vec(&mut r, t.len(), -1.0, 1.0)).collect());
        }
        for spec in &specs {
            let (g, _) = surrogate_gradient(&p, &refs, &adv, spec).unwrap();
            let numeric: Vec<f64> = (0..p.logits().len())
                .map(|i| {
                    let up = surrogate_value(&perturbed(&p, i, H), &refs, &adv, spec).unwrap();
                    let down = surrogate_value(&perturbed(&p, i, -H), &refs, &adv, spec).unwrap();
                    (up - down) / (2.0 * H)
                })
                .collect();
            assert_close(&g.data, &numeric);
        }
    }
}

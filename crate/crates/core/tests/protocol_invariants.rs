//! End-to-end invariants of every protocol with untrained networks.

use std::sync::Arc;

use nvsense::model::{shot_cost, ShotDesign};
use nvsense::nn::{LayerSpec, NetworkParams};
use nvsense::policy::PolicyTable;
use nvsense::posterior::Support;
use nvsense::protocols::{run, ProtocolSpec, RangeMode, Variant};
use nvsense::rng::stream;
use nvsense::stage1::BnnEstimator;
use proptest::prelude::*;

fn spec(variant: Variant, omega_max: f64, policy_seed: u64) -> ProtocolSpec {
    let actions = if variant == Variant::PhaseOnly { 1 } else { 2 };
    let params = NetworkParams::init(LayerSpec::policy(actions), &mut stream(policy_seed, &[]));
    let table = PolicyTable::single(Support::new(0.0, omega_max).unwrap(), params).unwrap();
    ProtocolSpec::defaults(variant, omega_max)
        .with_bnn(Arc::new(BnnEstimator::untrained(omega_max, 50)))
        .with_policy(Arc::new(table))
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_respect_budget_and_support(
        v in variant(),
        omega_max in prop::sample::select(vec![10.0, 20.0]),
        frac in 0.001f64..0.999,
        seed in any::<u64>(),
        budget in 500.0f64..22_000.0,
        fixed in any::<bool>(),
    ) {
        let mut s = spec(v, omega_max, seed ^ 1);
        s.budget = budget;
        if fixed {
            s.range_mode = RangeMode::Fixed;
        }
        let omega = frac * omega_max;
        let r = run(&s, omega, seed).unwrap();
        let mut previous = 0.0;
        let mut total = 0.0;
        for shot in &r.shots {
            total += shot_cost(&s.model, &ShotDesign::new(shot.tau, shot.phi));
            prop_assert_eq!(shot.elapsed, total);
            prop_assert!(shot.elapsed > previous);
            prop_assert!(shot.elapsed <= budget);
            prop_assert!((0.0..=omega_max).contains(&shot.estimate));
            previous = shot.elapsed;
        }
        // Runs stop at the first shot that does not fit, and no shot costs more than the longest one.
        prop_assert!(budget - r.elapsed() < shot_cost(&s.model, &ShotDesign::new(40.0, 0.0)));
        if let Some(sub) = r.subrange {
            prop_assert!(sub.lo >= 0.0 && sub.hi <= omega_max && sub.lo < sub.hi);
        }
        prop_assert_eq!(run(&s, omega, seed).unwrap(), r);
    }
}

#[test]
fn protocols_share_stage_one_draws() {
    // Two-stage and NN-shots see the same first 70 outcomes for a given seed.
    let two = run(&spec(Variant::TwoStage, 10.0, 3), 4.2, 99).unwrap();
    let nn = run(&spec(Variant::NnShots, 10.0, 3), 4.2, 99).unwrap();
    for (a, b) in two.shots.iter().zip(&nn.shots).take(70) {
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.elapsed, b.elapsed);
    }
    assert_eq!(two.stage1_shots, 70);
}

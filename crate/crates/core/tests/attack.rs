use made_core::attack::{
    attack_objective, pgd, project_linf, AttackContext, AttackRegistry, AttackSpec, PerturbationSet,
};
use made_core::pipeline::{Detector, DetectorArch, FeatureMap};
use made_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn detector() -> Detector {
    let arch = DetectorArch {
        height: 6,
        width: 6,
        in_channels: 2,
        feature_channels: 3,
        hidden_channels: 4,
        num_classes: 3,
        num_agents: 4,
        max_offset: 1.5,
        min_size: 0.5,
        max_size: 4.0,
    };
    Detector::init(arch, 17).unwrap()
}

fn maps(seed: u64) -> Vec<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|agent| FeatureMap {
            agent,
            tensor: Tensor::new(vec![6, 6, 3], (0..108).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap(),
        })
        .collect()
}

const CONF: f64 = 0.3;

#[test]
fn zero_steps_returns_zero_delta_and_clean_objective() {
    let det = detector();
    let maps = maps(1);
    let ctx = AttackContext { detector: &det, maps: &maps, conf_threshold: CONF };
    let clean = ctx.clean_output(0).unwrap();
    let mut spec = AttackSpec::standard(0, vec![2], 0.5, "independent");
    spec.steps = 0;
    let (p, trace) = pgd(&ctx, &spec, &[2], &clean).unwrap();
    assert_eq!(p.max_norm(), 0.0);
    assert_eq!(trace.len(), 1);
    let j0 = attack_objective(&ctx, 0, &clean, &PerturbationSet::default()).unwrap();
    assert!((trace[0] - j0).abs() <= 1e-12 * (1.0 + j0.abs()));
    assert!(j0 > 0.0);
    assert_eq!(ctx.attacked_output(0, &p).unwrap(), clean);
}

#[test]
fn every_iterate_stays_in_budget() {
    let det = detector();
    let maps = maps(2);
    let ctx = AttackContext { detector: &det, maps: &maps, conf_threshold: CONF };
    let clean = ctx.clean_output(1).unwrap();
    let eps = 0.3;
    let full = AttackSpec::standard(1, vec![3], eps, "independent");
    let (_, trace) = pgd(&ctx, &full, &[3], &clean).unwrap();
    assert_eq!(trace.len(), full.steps + 1);
    for steps in 0..=full.steps {
        let spec = AttackSpec { steps, ..full.clone() };
        let (p, t) = pgd(&ctx, &spec, &[3], &clean).unwrap();
        assert!(p.max_norm() <= eps);
        assert_eq!(t[..], trace[..=steps]);
    }
    assert!(trace.last().unwrap() < &trace[0], "{trace:?}");
}

#[test]
fn modes_perturb_only_attackers_within_budget() {
    let det = detector();
    let maps = maps(3);
    let ctx = AttackContext { detector: &det, maps: &maps, conf_threshold: CONF };
    let reg = AttackRegistry::default();
    assert_eq!(reg.names(), vec!["independent", "collaborative"]);
    for mode in reg.names() {
        let out = reg.run(&ctx, &AttackSpec::standard(0, vec![1, 3], 0.4, mode)).unwrap();
        assert_eq!(out.perturbations.deltas.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert!(out.perturbations.max_norm() <= 0.4);
        let runs = if mode == "independent" { 2 } else { 1 };
        assert_eq!(out.objective_traces.len(), runs);
        let received = out.perturbations.apply(&maps).unwrap();
        assert!(received[0].tensor.bit_eq(&maps[0].tensor));
        assert!(received[2].tensor.bit_eq(&maps[2].tensor));
    }
}

#[test]
fn collaborative_objective_is_at_most_single_attacker() {
    let det = detector();
    let maps = maps(4);
    let ctx = AttackContext { detector: &det, maps: &maps, conf_threshold: CONF };
    let clean = ctx.clean_output(0).unwrap();
    let joint = AttackRegistry::default().run(&ctx, &AttackSpec::standard(0, vec![1, 2], 0.5, "collaborative")).unwrap();
    let single = AttackRegistry::default().run(&ctx, &AttackSpec::standard(0, vec![1], 0.5, "collaborative")).unwrap();
    let j = |p: &PerturbationSet| attack_objective(&ctx, 0, &clean, p).unwrap();
    assert!(j(&joint.perturbations) <= j(&single.perturbations) + 1e-9);
}

#[test]
fn invalid_specs_are_rejected() {
    let det = detector();
    let maps = maps(5);
    let ctx = AttackContext { detector: &det, maps: &maps, conf_threshold: CONF };
    let reg = AttackRegistry::default();
    assert!(reg.run(&ctx, &AttackSpec::standard(0, vec![0], 0.1, "independent")).is_err());
    assert!(reg.run(&ctx, &AttackSpec::standard(0, vec![], 0.1, "independent")).is_err());
    assert!(reg.run(&ctx, &AttackSpec::standard(9, vec![1], 0.1, "independent")).is_err());
    assert!(reg.run(&ctx, &AttackSpec::standard(0, vec![1], 0.1, "sneaky")).is_err());
}

#[test]
fn perturbation_checkpoint_round_trip() {
    let mut p = PerturbationSet::default();
    p.deltas.insert(2, Tensor::full(&[6, 6, 3], -0.25));
    let back = PerturbationSet::from_checkpoint(&p.to_checkpoint(serde_json::json!({"victim": 0}))).unwrap();
    assert!(back.deltas[&2].bit_eq(&p.deltas[&2]));
}

proptest! {
    #[test]
    fn projection_bounds_norm_and_fixes_feasible_points(
        v in prop::collection::vec(-5.0f64..5.0, 1..40),
        eps in 0.0f64..3.0,
    ) {
        let t = Tensor::new(vec![v.len()], v.clone()).unwrap();
        let p = project_linf(&t, eps);
        prop_assert!(p.max_abs() <= eps);
        for (a, b) in v.iter().zip(p.data()) {
            if a.abs() <= eps {
                prop_assert_eq!(a, b);
            } else {
                prop_assert_eq!(b.abs(), eps);
                prop_assert_eq!(a.signum(), b.signum());
            }
        }
        prop_assert!(project_linf(&p, eps).bit_eq(&p));
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableflow::fixtures::{isotropic_policy, random_policy, RandomPolicySpec};
use stableflow::rollout::{
    convergence_stats, integrate, vector_field_grid, EventKind, Integrator, ObservationProvider,
    PerturbationEvent, RolloutOptions, ScheduledObservation,
};
use stableflow::weightnet::{Activation, HiddenLayer, WeightNetConfig, WeightNetParams};
use stableflow::{Execution, Observation, PolicyParams, StateVector};

fn rk4(horizon: f64) -> RolloutOptions {
    let mut o = RolloutOptions::new(1e-3, horizon);
    o.stop_on_convergence = true;
    o
}

/// A start at distance `r` from the attractor in a random direction.
fn start_at(p: &PolicyParams, r: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dir: Vec<f64> = (0..p.d_c()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    p.attractor().iter().zip(&dir).map(|(a, d)| a + r * d / n).collect()
}

/// One-hot keyed weight network on top of a random policy.
fn keyed_policy(seed: u64, d: usize, n: usize) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_policy(&RandomPolicySpec::new(d, n), &mut rng).unwrap();
    let hidden = vec![HiddenLayer { width: 12, activation: Activation::Tanh }];
    let mut net = WeightNetParams::init(WeightNetConfig::vector(d, 3, hidden, n), &mut rng).unwrap();
    // Large output weights so the observation visibly changes the mixture.
    let mut blocks = net.blocks().to_vec();
    let k = blocks.len();
    blocks[k - 2].iter_mut().for_each(|v| *v *= 8.0);
    net = WeightNetParams::from_blocks(net.config().clone(), blocks).unwrap();
    p.with_weight_net(net).unwrap()
}

#[test]
fn random_certified_policies_converge_from_random_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dims = [1usize, 2, 3, 6];
    let mut rollouts = 0;
    for i in 0..100 {
        let d = dims[i % dims.len()];
        let n = 1 + i % 8;
        let p = random_policy(&RandomPolicySpec::new(d, n), &mut rng).unwrap();
        for _ in 0..10 {
            let r = rng.random_range(0.0..=10.0);
            let x0 = StateVector::controllable_only(start_at(&p, r, &mut rng)).unwrap();
            let rec = integrate(&p, &x0, &ObservationProvider::Static(Observation::empty()), &[], &rk4(100.0)).unwrap();
            let stats = convergence_stats(&rec).unwrap();
            assert!(stats.converged, "policy {i}, |e0| = {r}: final error {}", stats.final_error);
            assert_eq!(stats.lyapunov_violations, 0, "policy {i}");
            assert!(rec.lyapunov.iter().all(|&v| v >= 0.0));
            rollouts += 1;
        }
    }
    assert_eq!(rollouts, 1000);
}

#[test]
fn lyapunov_strictly_decreases_until_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let p = random_policy(&RandomPolicySpec::new(2, 4), &mut rng).unwrap();
        let x0 = StateVector::controllable_only(start_at(&p, 3.0, &mut rng)).unwrap();
        let rec = integrate(&p, &x0, &ObservationProvider::Static(Observation::empty()), &[], &rk4(60.0)).unwrap();
        for k in 1..rec.len() {
            if rec.lyapunov[k - 1].sqrt() < 1e-6 {
                break;
            }
            assert!(rec.lyapunov[k] < rec.lyapunov[k - 1], "step {k}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_perturbation_is_recovered(seed in any::<u64>(), at in 0.0..5.0f64,
                                        dx in -1.0..1.0f64, dy in -1.0..1.0f64, mag in 0.0..=5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_policy(&RandomPolicySpec::new(2, 3), &mut rng).unwrap();
        let n = (dx * dx + dy * dy).sqrt().max(1e-12);
        let delta = vec![mag * dx / n, mag * dy / n];
        let x0 = StateVector::controllable_only(start_at(&p, 1.0, &mut rng)).unwrap();
        let ev = PerturbationEvent::new(at, delta).unwrap();
        let rec = integrate(&p, &x0, &ObservationProvider::Static(Observation::empty()), &[ev], &rk4(100.0)).unwrap();
        let stats = convergence_stats(&rec).unwrap();
        prop_assert!(stats.converged);
        prop_assert_eq!(stats.lyapunov_violations, 0);
        prop_assert_eq!(rec.events.len(), 1);
        prop_assert!(stats.convergence_time.unwrap() >= rec.events[0].time);
    }

    #[test]
    fn observation_switch_is_recovered(seed in any::<u64>(), at in 0.01..3.0f64, from in 0usize..3, to in 0usize..3) {
        let p = keyed_policy(seed, 2, 4);
        let x0 = StateVector::new(vec![2.0, -1.5], Observation::one_hot(3, from).unwrap()).unwrap();
        let provider = ObservationProvider::scheduled(vec![ScheduledObservation {
            time: at,
            observation: Observation::one_hot(3, to).unwrap(),
        }]).unwrap();
        let rec = integrate(&p, &x0, &provider, &[], &rk4(100.0)).unwrap();
        let stats = convergence_stats(&rec).unwrap();
        prop_assert!(stats.converged);
        prop_assert_eq!(stats.lyapunov_violations, 0);
        prop_assert!(matches!(rec.events[0].kind, EventKind::ObservationSwitch));
    }

    #[test]
    fn field_points_toward_attractor(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_policy(&RandomPolicySpec::new(2, n), &mut rng).unwrap();
        let grid = vector_field_grid(&p, &Observation::empty(), [(-3.0, 3.0), (-3.0, 3.0)], [9, 7], Execution::default()).unwrap();
        prop_assert_eq!(grid.samples.len(), 63);
        for s in &grid.samples {
            let e = [p.attractor()[0] - s.x[0], p.attractor()[1] - s.x[1]];
            prop_assert!(e[0] * s.v[0] + e[1] * s.v[1] > 0.0);
        }
    }
}

#[test]
fn switch_changes_path_but_not_endpoint() {
    let p = keyed_policy(31, 2, 4);
    let x0 = StateVector::new(vec![2.0, -1.5], Observation::one_hot(3, 0).unwrap()).unwrap();
    let plain = integrate(&p, &x0, &ObservationProvider::Static(Observation::one_hot(3, 0).unwrap()), &[], &rk4(100.0)).unwrap();
    let provider = ObservationProvider::scheduled(vec![ScheduledObservation {
        time: 0.5,
        observation: Observation::one_hot(3, 2).unwrap(),
    }])
    .unwrap();
    let switched = integrate(&p, &x0, &provider, &[], &rk4(100.0)).unwrap();
    let k = 1000.min(plain.len()).min(switched.len());
    let gap = (plain.states[k - 1][0] - switched.states[k - 1][0]).hypot(plain.states[k - 1][1] - switched.states[k - 1][1]);
    assert!(gap > 1e-3, "gap {gap}");
    assert!(plain.converged && switched.converged);
    // Before the switch the two rollouts are identical.
    assert_eq!(plain.states[..500], switched.states[..500]);
}

#[test]
fn euler_at_small_step_tracks_rk4() {
    let p = keyed_policy(5, 2, 3);
    let x0 = StateVector::new(vec![1.0, 1.0], Observation::one_hot(3, 1).unwrap()).unwrap();
    let provider = ObservationProvider::Static(Observation::one_hot(3, 1).unwrap());
    let a = integrate(&p, &x0, &provider, &[], &RolloutOptions::new(1e-3, 5.0)).unwrap();
    let mut euler = RolloutOptions::new(1e-3, 5.0);
    euler.method = Integrator::Euler;
    let b = integrate(&p, &x0, &provider, &[], &euler).unwrap();
    let (fa, fb) = (a.final_state().unwrap(), b.final_state().unwrap());
    assert!(fa.iter().zip(fb).all(|(u, v)| (u - v).abs() < 1e-4));
}

#[test]
fn scalar_decay_matches_closed_form_for_several_gains() {
    for &a in &[0.25, 1.0, 4.0] {
        let p = isotropic_policy(1, a, vec![0.0]).unwrap();
        let x0 = StateVector::controllable_only(vec![1.0]).unwrap();
        let rec = integrate(&p, &x0, &ObservationProvider::Static(Observation::empty()), &[], &RolloutOptions::new(1e-3, 1.0)).unwrap();
        let x1 = rec.final_state().unwrap()[0];
        assert!((x1 - (-a).exp()).abs() < 1e-9, "gain {a}: {x1}");
    }
}

#[test]
fn exports_have_one_row_per_step() {
    let p = isotropic_policy(2, 1.0, vec![0.0, 0.0]).unwrap();
    let x0 = StateVector::controllable_only(vec![1.0, -1.0]).unwrap();
    let ev = PerturbationEvent::new(0.5, vec![0.3, 0.0]).unwrap();
    let rec = integrate(&p, &x0, &ObservationProvider::Static(Observation::empty()), &[ev], &RolloutOptions::new(0.01, 1.0)).unwrap();
    let csv = rec.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,xc_0,xc_1,v_0,v_1,V"));
    assert_eq!(lines.count(), rec.len());
    let json: serde_json::Value = serde_json::from_str(&rec.to_json()).unwrap();
    assert_eq!(json["times"].as_array().unwrap().len(), rec.len());
    assert_eq!(json["events"][0]["kind"], "perturbation");
    assert_eq!(json["events"][0]["step"], 50);
}

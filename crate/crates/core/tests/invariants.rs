//! Cross-module invariants: generated containers, the pick oracle, the
//! observation pipeline, masked selection and the vectorized runner.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unload_core::container::{
    build_substack_catalog, generate_container, Catalog, ContainerSpec, ContainerState,
};
use unload_core::dqn::{select_action_masked, ActionMask};
use unload_core::env::{
    evaluate, EnvConfig, EvalConfig, Policy, PositionPool, TuningConfig, TuningFactory, UnloadEnv,
    UnloadFactory, VecRunner,
};
use unload_core::observation::{lattice_value, make_observation, ViewerConfig};
use unload_core::physics::{
    attempt_pick, build_support_graph, pickable_set, unsupported_items, PhysicsConfig,
    CONTACT_TOLERANCE,
};
use unload_core::qnet::{init_params, NetworkConfig};

fn catalog() -> Catalog {
    build_substack_catalog().unwrap()
}

fn overlap_volume(state: &ContainerState, a: usize, b: usize) -> f64 {
    let (amin, amax) = state.bounds(&state.items[a]);
    let (bmin, bmax) = state.bounds(&state.items[b]);
    (0..3)
        .map(|d| (amax[d].min(bmax[d]) - amin[d].max(bmin[d])).max(0.0))
        .product()
}

fn assert_no_overlap(state: &ContainerState) {
    let live: Vec<usize> = state.live_items().map(|it| it.item_id as usize).collect();
    for (k, &a) in live.iter().enumerate() {
        for &b in &live[k + 1..] {
            assert!(
                overlap_volume(state, a, b) < 1e-12,
                "items {a} and {b} overlap"
            );
        }
    }
}

fn assert_supported(state: &ContainerState) {
    let graph = build_support_graph(state, CONTACT_TOLERANCE);
    assert_eq!(unsupported_items(state, &graph), Vec::<u32>::new());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_containers_are_consistent(seed in any::<u64>()) {
        let spec = ContainerSpec::default();
        let catalog = catalog();
        let state = generate_container(&spec, &catalog, seed).unwrap();
        prop_assert!((spec.min_items..=spec.max_items).contains(&state.live_count()));
        assert_no_overlap(&state);
        assert_supported(&state);
        prop_assert_eq!(&state, &generate_container(&spec, &catalog, seed).unwrap());
    }

    #[test]
    fn masked_selection_avoids_blocked_rows(
        q in prop::collection::vec(-1.0f64..1.0, 1..64),
        blocked in prop::collection::vec(any::<bool>(), 64),
    ) {
        let mut mask = ActionMask::new(q.len());
        for (a, &b) in blocked.iter().take(q.len()).enumerate() {
            if b {
                mask.block(a);
            }
        }
        match select_action_masked(&q, &mask) {
            Ok(a) => {
                prop_assert!(!mask.is_blocked(a));
                for (b, &v) in q.iter().enumerate() {
                    prop_assert!(mask.is_blocked(b) || v <= q[a]);
                }
            }
            Err(_) => prop_assert!(mask.all_blocked()),
        }
    }
}

#[test]
fn pick_oracle_agrees_with_brute_force_and_keeps_support() {
    let catalog = catalog();
    let cfg = PhysicsConfig::default();
    for seed in [3, 17] {
        let state = generate_container(&ContainerSpec::default(), &catalog, seed).unwrap();
        let oracle = pickable_set(&state, &cfg);
        assert!(!oracle.is_empty());
        for it in state.live_items() {
            let out = attempt_pick(&state, it.item_id, &cfg).unwrap();
            assert_eq!(
                out.success,
                oracle.contains(&it.item_id),
                "item {}",
                it.item_id
            );
            if out.success {
                assert_eq!(out.next_state.live_count(), state.live_count() - 1);
                assert_supported(&out.next_state);
            } else {
                assert_eq!(out.next_state, state);
            }
        }
    }
}

fn assert_observation_is_lattice(features: &[f64], rows: usize) {
    for axis in 0..3 {
        let mut column: Vec<f64> = features.iter().skip(axis).step_by(3).copied().collect();
        column.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (0..rows).map(|r| lattice_value(r, rows)).collect();
        assert_eq!(column, expected, "axis {axis}");
    }
}

#[test]
fn random_episode_respects_environment_invariants() {
    let catalog = catalog();
    let config = Arc::new(EnvConfig::default());
    let mut env = UnloadEnv::reset(config.clone(), &catalog, 99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut successes, mut failures) = (0, 0);
    for step in 0..150 {
        let before = env.state().clone();
        let obs_before = env.observation().features.clone();
        let rows = env.observation().rows();
        assert_eq!(rows, config.viewer.visible_count);
        assert_observation_is_lattice(&obs_before, rows);
        let fresh = make_observation(env.state(), &config.viewer, 0).unwrap();
        assert_eq!(fresh.features, obs_before);
        assert_eq!(fresh.item_ids, env.observation().item_ids);

        let action = rng.gen_range(0..rows);
        let info = env.env_step(action).unwrap();
        assert_eq!(env.step_count(), step + 1);
        if info.success {
            successes += 1;
            assert_eq!(info.reward, 1.0);
            assert_eq!(env.state().live_count(), before.live_count() - 1);
            assert_supported(env.state());
        } else {
            failures += 1;
            assert_eq!(info.reward, -1.0);
            assert_eq!(env.state(), &before);
            assert_eq!(env.observation().features, obs_before);
        }
        assert!(env.state().live_count() > config.viewer.visible_count);
    }
    assert!(successes > 0 && failures > 0);
}

#[test]
fn masked_greedy_reaches_a_success_within_one_sweep() {
    let env = EnvConfig::default();
    let params = init_params(&NetworkConfig::default(), 4);
    let report = evaluate(
        &env,
        &Policy::Greedy {
            params,
            masked: true,
        },
        &EvalConfig {
            episodes: 2,
            seed: 8,
            steps: Some(120),
        },
    )
    .unwrap();
    assert!(report.max_attempts_with_pickable <= env.viewer.visible_count);
    for ep in &report.episodes {
        assert_eq!(ep.successes + ep.failures, 120);
        assert!(ep.successes > 0);
    }
}

/// `(obs, action, reward, next_obs)` of every step.
type Trace = Vec<(Vec<f64>, usize, f64, Option<Vec<f64>>)>;

fn run_rounds<F>(factory: F, workers: usize, rounds: u64) -> Trace
where
    F: unload_core::env::EnvFactory + Send,
    F::Env: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .unwrap();
    let params = init_params(&NetworkConfig::default(), 2);
    pool.install(|| {
        let mut runner = VecRunner::new(factory, 4, 21).unwrap();
        let mut out = Vec::new();
        for k in 0..rounds {
            let eps = if k % 2 == 0 { 1.0 } else { 0.0 };
            for r in runner.round(&params, eps, k % 3 == 0, true, k).unwrap() {
                out.push((r.obs, r.action, r.info.reward, r.next_obs));
            }
        }
        out
    })
}

#[test]
fn vec_runner_is_independent_of_worker_count() {
    let catalog = Arc::new(catalog());
    let unload = |seed| UnloadFactory {
        config: Arc::new(EnvConfig {
            episode_limit: 5,
            ..EnvConfig::default()
        }),
        catalog: catalog.clone(),
        master_seed: seed,
    };
    assert_eq!(run_rounds(unload(7), 1, 12), run_rounds(unload(7), 3, 12));

    let tuning = Arc::new(TuningConfig::default());
    let pool = Arc::new(PositionPool::generate(&tuning, &catalog, 5).unwrap());
    let make = || TuningFactory {
        config: tuning.clone(),
        pool: pool.clone(),
        master_seed: 5,
    };
    assert_eq!(run_rounds(make(), 1, 30), run_rounds(make(), 4, 30));
}

#[test]
fn visibility_is_a_function_of_the_state() {
    let catalog = catalog();
    let state = generate_container(&ContainerSpec::default(), &catalog, 41).unwrap();
    let viewer = ViewerConfig::default();
    let a = make_observation(&state, &viewer, 3).unwrap();
    let b = make_observation(&state.clone(), &viewer, 3).unwrap();
    assert_eq!(a, b);
    assert_observation_is_lattice(&a.features, a.rows());
}

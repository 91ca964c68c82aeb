mod common;

use common::*;
use proptest::prelude::*;
use vecplan::constraints::{ConstraintParams, LossWeights};
use vecplan::interact::{encode_queries, forward_plan, InteractionConfig, InteractionParams};
use vecplan::learning::{train, Objective, TrainConfig};
use vecplan::scene::GeneratorConfig;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn plans_ignore_element_order(seed in 0u64..100_000) {
        prop_assert!(permutation_deviation(seed) < 1e-10);
    }

    #[test]
    fn agent_queries_permute_with_agents(seed in 0u64..100_000) {
        let params = InteractionParams::init(&InteractionConfig::default(), seed).unwrap();
        let s = generated(seed);
        let mut reversed = s.clone();
        reversed.agents.reverse();
        reversed.agent_gt_futures.reverse();
        let a = encode_queries(&s, &params).unwrap().agent_queries;
        let b = encode_queries(&reversed, &params).unwrap().agent_queries;
        let n = a.rows();
        for i in 0..n {
            prop_assert_eq!(a.row_slice(i), b.row_slice(n - 1 - i));
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..100_000, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let config = InteractionConfig { n_heads: heads, ..InteractionConfig::default() };
        let params = InteractionParams::init(&config, seed).unwrap();
        let s = generated(seed);
        let (_, pass) = forward_plan(&s, &params, &config).unwrap();
        prop_assert_eq!(pass.agent_attention.len(), heads);
        prop_assert_eq!(pass.map_attention.len(), heads);
        for &id in pass.agent_attention.iter().chain(&pass.map_attention) {
            let w = pass.tape.value(id);
            for r in 0..w.rows() {
                let row = w.row_slice(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                if !row.is_empty() {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    for seed in [100, 101] {
        let e = network_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e:e}");
    }
}

#[test]
fn trained_plans_respond_to_agent_positions() {
    let config = InteractionConfig::default();
    let objective = Objective {
        interact: config.clone(),
        constraints: ConstraintParams::default(),
        weights: LossWeights::default(),
        focal_gamma: 2.0,
        focal_alpha: 0.25,
    };
    let cfg = TrainConfig {
        epochs: 4,
        train_scenarios: 32,
        val_scenarios: 4,
        ..TrainConfig::default()
    };
    let params = train(&cfg, &GeneratorConfig::default(), &objective)
        .unwrap()
        .params;
    let s = (0..).map(generated).find(|s| !s.agents.is_empty()).unwrap();
    let mut moved = s.clone();
    for a in &mut moved.agents {
        *a = agent_points(a, |q| q + p(0.0, 10.0));
    }
    let (a, _) = forward_plan(&s, &params, &config).unwrap();
    let (b, _) = forward_plan(&moved, &params, &config).unwrap();
    let change: f64 = a
        .waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(x, y)| x.distance(*y))
        .sum();
    assert!(change > 0.0);
}

#[test]
fn disabled_blocks_drop_their_inputs() {
    let config = InteractionConfig {
        agent_interaction: false,
        map_interaction: false,
        ..InteractionConfig::default()
    };
    let params = InteractionParams::init(&config, 5).unwrap();
    let s = generated(5);
    let mut empty = s.clone();
    empty.agents.clear();
    empty.agent_gt_futures.clear();
    empty.map.clear();
    let (a, _) = forward_plan(&s, &params, &config).unwrap();
    let (b, _) = forward_plan(&empty, &params, &config).unwrap();
    assert_eq!(a, b);
}

mod common;

use common::*;
use proptest::prelude::*;
use vecplan::geometry::Point2;
use vecplan::metrics::{
    collision_rate, displacement_error, evaluate, MetricsConfig, PlanMetrics, DEFAULT_EGO_SIZE,
};
use vecplan::scene::PlanTrajectory;

proptest! {
    #[test]
    fn displacement_is_translation_invariant(seed in 0u64..100_000, dx in -80.0..80.0f64, dy in -80.0..80.0f64) {
        let s = generated(seed);
        let plan = jittered_plan(&s, &mut rng(seed), 3.0);
        let d = Point2::new(dx, dy);
        let a = displacement_error(&plan, &s.expert, s.horizon_dt).unwrap();
        let shifted: Vec<Point2> = s.expert.iter().map(|&q| q + d).collect();
        let b = displacement_error(&translate_plan(&plan, d), &shifted, s.horizon_dt).unwrap();
        for (x, y) in a.at.iter().zip(b.at) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn collision_rate_matches_per_tick_scan() {
    let mut rng = rng(70);
    let scenarios: Vec<_> = (0..100).map(generated).collect();
    for scale in [1.0, 3.0, 6.0] {
        let plans: Vec<PlanTrajectory> = scenarios
            .iter()
            .map(|s| jittered_plan(s, &mut rng, scale))
            .collect();
        let got = collision_rate(&scenarios, &plans, DEFAULT_EGO_SIZE).unwrap();
        let want = oracle_collision_rate(&scenarios, &plans, DEFAULT_EGO_SIZE);
        assert_eq!(got.at, want, "scale {scale}");
        // cumulative protocol
        assert!(got.at[0] <= got.at[1] && got.at[1] <= got.at[2]);
    }
}

#[test]
fn averages_are_means_of_horizons() {
    let mut rng = rng(71);
    let scenarios: Vec<_> = (0..30).map(generated).collect();
    let plans: Vec<_> = scenarios
        .iter()
        .map(|s| jittered_plan(s, &mut rng, 4.0))
        .collect();
    let m = evaluate(&scenarios, &plans, &MetricsConfig::default()).unwrap();
    assert_eq!(m.l2.avg, (m.l2.at[0] + m.l2.at[1] + m.l2.at[2]) / 3.0);
    assert_eq!(
        m.collision.avg,
        (m.collision.at[0] + m.collision.at[1] + m.collision.at[2]) / 3.0
    );
    assert!(m.collision.at.iter().all(|r| (0.0..=100.0).contains(r)));
    assert!((0.0..=100.0).contains(&m.overstep));

    let mean = PlanMetrics::mean([&m, &m]);
    assert_eq!(
        mean.l2.avg,
        (mean.l2.at[0] + mean.l2.at[1] + mean.l2.at[2]) / 3.0
    );
}

#[test]
fn expert_plans_score_zero() {
    let scenarios: Vec<_> = (0..50).map(generated).collect();
    let plans: Vec<_> = scenarios
        .iter()
        .map(|s| PlanTrajectory::new(s.expert.clone()))
        .collect();
    let m = evaluate(&scenarios, &plans, &MetricsConfig::default()).unwrap();
    assert_eq!(m.l2.avg, 0.0);
    assert_eq!(m.collision.avg, 0.0);
    assert_eq!(m.overstep, 0.0);
}

//! Open-loop planning metrics: L2 displacement error and collision rate at
//! 1/2/3 s, plus a boundary-overstep rate.
//!
//! Collision rate is cumulative: a sample counts as colliding at horizon `h`
//! if the ego box at any planned waypoint with tick `<= h` overlaps any agent
//! box at its ground-truth position for that tick.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_segment, OrientedRect, Point2};
use crate::scene::{AgentPrediction, PlanTrajectory, Scenario, Side};

pub const HORIZONS_S: [f64; 3] = [1.0, 2.0, 3.0];
pub const DEFAULT_EGO_SIZE: (f64, f64) = (4.0, 1.85);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Ego footprint (length, width) in meters.
    pub ego_size: (f64, f64),
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ego_size: DEFAULT_EGO_SIZE,
        }
    }
}

/// Values at 1, 2, 3 s and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HorizonValues {
    pub at: [f64; 3],
    pub avg: f64,
}

impl HorizonValues {
    pub fn new(at: [f64; 3]) -> Self {
        Self {
            at,
            avg: (at[0] + at[1] + at[2]) / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub l2: HorizonValues,
    /// Percent.
    pub collision: HorizonValues,
    /// Percent of samples whose ego box leaves the drivable area within 3 s.
    pub overstep: f64,
}

/// 1-based tick index nearest to `horizon_s`.
pub fn horizon_tick(horizon_s: f64, dt: f64, ticks: usize) -> Result<usize> {
    let tick = (horizon_s / dt).round() as usize;
    if tick == 0 || tick > ticks {
        return Err(Error::HorizonExceeded {
            horizon_s,
            ticks,
            dt,
        });
    }
    Ok(tick)
}

pub fn displacement_error(
    plan: &PlanTrajectory,
    expert: &[Point2],
    horizon_dt: f64,
) -> Result<HorizonValues> {
    if plan.len() != expert.len() {
        return Err(Error::LengthMismatch {
            expected: expert.len(),
            got: plan.len(),
        });
    }
    let mut at = [0.0; 3];
    for (slot, &h) in at.iter_mut().zip(&HORIZONS_S) {
        let tick = horizon_tick(h, horizon_dt, plan.len())?;
        *slot = plan.waypoints[tick - 1].distance(expert[tick - 1]);
    }
    Ok(HorizonValues::new(at))
}

/// Ego pose at each waypoint; heading follows the step vector and is kept
/// through zero-length steps.
pub fn plan_poses(plan: &PlanTrajectory, origin: Point2, heading: f64) -> Vec<(Point2, f64)> {
    let mut prev = origin;
    let mut h = heading;
    plan.waypoints
        .iter()
        .map(|&p| {
            let v = p - prev;
            if v.norm() > 1e-9 {
                h = v.heading();
            }
            prev = p;
            (p, h)
        })
        .collect()
}

/// Agent pose at each ground-truth tick, heading by finite difference.
pub fn agent_poses(agent: &AgentPrediction, future: &[Point2]) -> Vec<(Point2, f64)> {
    let mut prev = agent.position;
    let mut h = agent.heading;
    future
        .iter()
        .map(|&p| {
            let v = p - prev;
            if v.norm() > 1e-9 {
                h = v.heading();
            }
            prev = p;
            (p, h)
        })
        .collect()
}

/// First 1-based tick at which the planned ego box hits an agent.
pub fn first_collision_tick(
    scenario: &Scenario,
    plan: &PlanTrajectory,
    ego_size: (f64, f64),
) -> Option<usize> {
    let ego = plan_poses(plan, scenario.ego.position, scenario.ego.heading);
    let agents: Vec<Vec<(Point2, f64)>> = scenario
        .agents
        .iter()
        .zip(&scenario.agent_gt_futures)
        .map(|(a, f)| agent_poses(a, f))
        .collect();
    for (t, &(p, h)) in ego.iter().enumerate() {
        let ego_box = OrientedRect::new(p, h, ego_size);
        for (agent, poses) in scenario.agents.iter().zip(&agents) {
            let Some(&(ap, ah)) = poses.get(t) else {
                continue;
            };
            if ego_box.overlaps(&OrientedRect::new(ap, ah, agent.size)) {
                return Some(t + 1);
            }
        }
    }
    None
}

pub fn collision_rate(
    scenarios: &[Scenario],
    plans: &[PlanTrajectory],
    ego_size: (f64, f64),
) -> Result<HorizonValues> {
    if scenarios.len() != plans.len() {
        return Err(Error::LengthMismatch {
            expected: scenarios.len(),
            got: plans.len(),
        });
    }
    if scenarios.is_empty() {
        return Ok(HorizonValues::default());
    }
    let mut counts = [0usize; 3];
    for (s, p) in scenarios.iter().zip(plans) {
        let first = first_collision_tick(s, p, ego_size);
        for (c, &h) in counts.iter_mut().zip(&HORIZONS_S) {
            let tick = horizon_tick(h, s.horizon_dt, p.len())?;
            if first.is_some_and(|f| f <= tick) {
                *c += 1;
            }
        }
    }
    let n = scenarios.len() as f64;
    Ok(HorizonValues::new(counts.map(|c| c as f64 / n * 100.0)))
}

/// Whether `p` lies on the non-drivable side of its nearest labelled boundary.
pub fn beyond_boundary(scenario: &Scenario, p: Point2) -> bool {
    let mut best: Option<(f64, Point2, Point2, Side)> = None;
    for b in scenario.boundaries() {
        let Some(side) = b.drivable_side else {
            continue;
        };
        let Ok(hit) = nearest_segment(p, &b.points) else {
            continue;
        };
        if best.is_none_or(|(d, ..)| hit.distance < d) {
            let pts = b.points.points();
            best = Some((hit.distance, pts[hit.segment], pts[hit.segment + 1], side));
        }
    }
    match best {
        Some((_, a, b, drivable)) => Side::of(p, a, b).is_some_and(|s| s != drivable),
        None => false,
    }
}

pub fn box_oversteps(scenario: &Scenario, center: Point2, heading: f64, size: (f64, f64)) -> bool {
    OrientedRect::new(center, heading, size)
        .corners()
        .iter()
        .any(|&c| beyond_boundary(scenario, c))
}

pub fn plan_oversteps(
    scenario: &Scenario,
    plan: &PlanTrajectory,
    ego_size: (f64, f64),
    upto_tick: usize,
) -> bool {
    plan_poses(plan, scenario.ego.position, scenario.ego.heading)
        .iter()
        .take(upto_tick)
        .any(|&(p, h)| box_oversteps(scenario, p, h, ego_size))
}

pub fn evaluate(
    scenarios: &[Scenario],
    plans: &[PlanTrajectory],
    config: &MetricsConfig,
) -> Result<PlanMetrics> {
    if scenarios.len() != plans.len() {
        return Err(Error::LengthMismatch {
            expected: scenarios.len(),
            got: plans.len(),
        });
    }
    let mut l2 = [0.0; 3];
    let mut oversteps = 0usize;
    for (s, p) in scenarios.iter().zip(plans) {
        let de = displacement_error(p, &s.expert, s.horizon_dt)?;
        for (acc, v) in l2.iter_mut().zip(de.at) {
            *acc += v;
        }
        let tick = horizon_tick(HORIZONS_S[2], s.horizon_dt, p.len())?;
        if plan_oversteps(s, p, config.ego_size, tick) {
            oversteps += 1;
        }
    }
    let n = scenarios.len().max(1) as f64;
    Ok(PlanMetrics {
        l2: HorizonValues::new(l2.map(|v| v / n)),
        collision: collision_rate(scenarios, plans, config.ego_size)?,
        overstep: oversteps as f64 / n * 100.0,
    })
}

pub const METRIC_COLUMNS: [&str; 8] = [
    "l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg",
];

impl PlanMetrics {
    /// Horizon-wise mean over several evaluations; averages are recomputed
    /// from the averaged horizons.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a PlanMetrics>) -> PlanMetrics {
        let mut l2 = [0.0; 3];
        let mut col = [0.0; 3];
        let mut overstep = 0.0;
        let mut n = 0usize;
        for m in items {
            for i in 0..3 {
                l2[i] += m.l2.at[i];
                col[i] += m.collision.at[i];
            }
            overstep += m.overstep;
            n += 1;
        }
        let k = n.max(1) as f64;
        PlanMetrics {
            l2: HorizonValues::new(l2.map(|v| v / k)),
            collision: HorizonValues::new(col.map(|v| v / k)),
            overstep: overstep / k,
        }
    }

    pub fn columns(&self) -> [f64; 8] {
        [
            self.l2.at[0],
            self.l2.at[1],
            self.l2.at[2],
            self.l2.avg,
            self.collision.at[0],
            self.collision.at[1],
            self.collision.at[2],
            self.collision.avg,
        ]
    }
}

/// Comma-separated metrics table with a header row.
pub fn metrics_csv(rows: &[(String, PlanMetrics)]) -> String {
    let mut out = format!("name,{},overstep\n", METRIC_COLUMNS.join(","));
    for (name, m) in rows {
        out.push_str(name);
        for v in m.columns() {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{}", m.overstep).unwrap();
    }
    out
}

/// Aligned table laid out as `L2 (m)` and `Collision (%)` at 1s/2s/3s/Avg.
pub fn metrics_table(rows: &[(String, PlanMetrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$} | {:^31} | {:^31} | {:>9}",
        "Method", "L2 (m)", "Collision (%)", "Overstep"
    )
    .unwrap();
    writeln!(
        out,
        "{:<width$} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} {:>7} | {:>9}",
        "", "1s", "2s", "3s", "Avg.", "1s", "2s", "3s", "Avg.", "(%)"
    )
    .unwrap();
    for (name, m) in rows {
        let c = m.columns();
        writeln!(
            out,
            "{name:<width$} | {:>7.3} {:>7.3} {:>7.3} {:>7.3} | {:>7.2} {:>7.2} {:>7.2} {:>7.2} | {:>9.2}",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], m.overstep
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenario, GeneratorConfig};

    fn straight(step: f64, dx: f64) -> PlanTrajectory {
        PlanTrajectory::new((1..=6).map(|k| Point2::new(dx, step * k as f64)).collect())
    }

    #[test]
    fn displacement_cases() {
        let e = straight(2.0, 0.0);
        let zero = displacement_error(&e, &e.waypoints, 0.5).unwrap();
        assert_eq!(zero, HorizonValues::default());
        let off = displacement_error(&straight(2.0, 0.3), &e.waypoints, 0.5).unwrap();
        for v in off.at {
            assert!((v - 0.3).abs() < 1e-12);
        }
        assert!((off.avg - 0.3).abs() < 1e-12);
        assert!((off.avg - (off.at[0] + off.at[1] + off.at[2]) / 3.0).abs() < 1e-12);
        // 3 s needs 6 ticks at 0.5 s
        let short = PlanTrajectory::new(e.waypoints[..4].to_vec());
        assert!(matches!(
            displacement_error(&short, &e.waypoints[..4], 0.5),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn horizon_rounding() {
        assert_eq!(horizon_tick(1.0, 0.5, 6).unwrap(), 2);
        assert_eq!(horizon_tick(3.0, 0.5, 6).unwrap(), 6);
        assert_eq!(horizon_tick(1.0, 0.4, 8).unwrap(), 3);
        assert!(horizon_tick(3.0, 0.5, 5).is_err());
    }

    #[test]
    fn empty_scenes_never_collide() {
        let cfg = GeneratorConfig {
            agents: 0,
            ..Default::default()
        };
        let scenes: Vec<_> = (0..5)
            .map(|s| generate_scenario(s, &cfg).unwrap())
            .collect();
        let plans: Vec<_> = scenes
            .iter()
            .map(|s| PlanTrajectory::new(s.expert.clone()))
            .collect();
        let r = collision_rate(&scenes, &plans, DEFAULT_EGO_SIZE).unwrap();
        assert_eq!(r, HorizonValues::default());
    }

    #[test]
    fn parked_agent_on_one_second_waypoint() {
        let cfg = GeneratorConfig {
            agents: 0,
            ..Default::default()
        };
        let mut s = generate_scenario(0, &cfg).unwrap();
        let plan = straight(2.0, 0.0);
        let spot = plan.waypoints[1];
        s.agents.push(AgentPrediction {
            position: spot,
            heading: std::f64::consts::FRAC_PI_2,
            size: (4.5, 1.9),
            confidence: 1.0,
            modes: vec![vec![spot; 6]],
            mode_scores: vec![1.0],
        });
        s.agent_gt_futures.push(vec![spot; 6]);
        let r = collision_rate(&[s.clone()], &[plan.clone()], DEFAULT_EGO_SIZE).unwrap();
        assert_eq!(r.at, [100.0; 3]);
        assert_eq!(r.avg, 100.0);
        assert_eq!(first_collision_tick(&s, &plan, DEFAULT_EGO_SIZE), Some(1));
    }

    #[test]
    fn expert_plans_stay_on_road() {
        let cfg = GeneratorConfig::default();
        for seed in 0..300 {
            let s = generate_scenario(seed, &cfg).unwrap();
            let p = PlanTrajectory::new(s.expert.clone());
            assert!(!plan_oversteps(&s, &p, DEFAULT_EGO_SIZE, 6), "seed {seed}");
            assert_eq!(
                first_collision_tick(&s, &p, DEFAULT_EGO_SIZE),
                None,
                "seed {seed}"
            );
        }
        let s = generate_scenario(0, &cfg).unwrap();
        let off_road = straight(2.0, 30.0);
        assert!(plan_oversteps(&s, &off_road, DEFAULT_EGO_SIZE, 6));
    }

    #[test]
    fn table_shapes() {
        let rows = vec![("a".to_string(), PlanMetrics::default())];
        let csv = metrics_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 10);
        assert!(metrics_table(&rows).contains("Collision (%)"));
    }
}

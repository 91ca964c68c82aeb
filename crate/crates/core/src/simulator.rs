//! Closed-loop rollouts: the planner replans every tick while agents replay
//! their ground-truth futures.
//!
//! All poses in [`SimState`] and [`RolloutLog`] are expressed in the frame of
//! the original scenario (the ego frame at tick 0). Each replan sees the scene
//! re-expressed in the ego frame of the current tick.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::constraints::{total_planning_loss, ConstraintParams, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::geometry::{oriented_rect_overlap, Point2, Transform2};
use crate::interact::{forward_plan, InteractionConfig, InteractionParams};
use crate::metrics::{agent_poses, box_oversteps, DEFAULT_EGO_SIZE};
use crate::scene::{AgentPrediction, EgoState, PlanTrajectory, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Use the scenario's expert for the ω₆ term. Off means the ω₆ weight
    /// applies to a second-difference smoothness prior instead.
    pub use_expert: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            step_size: 0.5,
            use_expert: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("refine: step_size must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Planner {
    /// Trained interaction network.
    Model {
        params: InteractionParams,
        config: InteractionConfig,
    },
    /// Constant-velocity seed refined by gradient descent on the planning
    /// constraints.
    Refine {
        constraints: ConstraintParams,
        weights: LossWeights,
        refine: RefineConfig,
    },
    /// Replays the scenario's expert trajectory.
    Expert,
    ConstantVelocity,
}

/// Straight-ahead plan at the ego's current speed.
pub fn constant_velocity_plan(scenario: &Scenario) -> PlanTrajectory {
    let ego = &scenario.ego;
    let step = Point2::from_heading(ego.heading) * (ego.velocity * scenario.horizon_dt);
    PlanTrajectory::new(
        (1..=scenario.t_f())
            .map(|t| ego.position + step * t as f64)
            .collect(),
    )
}

pub fn plan_once(scenario: &Scenario, planner: &Planner) -> Result<PlanTrajectory> {
    match planner {
        Planner::Model { params, config } => forward_plan(scenario, params, config).map(|(p, _)| p),
        Planner::Refine {
            constraints,
            weights,
            refine,
        } => refine_trajectory(
            &constant_velocity_plan(scenario),
            scenario,
            constraints,
            weights,
            refine,
        ),
        Planner::Expert => Ok(PlanTrajectory::new(scenario.expert.clone())),
        Planner::ConstantVelocity => Ok(constant_velocity_plan(scenario)),
    }
}

/// Mean squared second difference of the waypoints, anchored at `origin`.
pub fn smoothness_prior(plan: &PlanTrajectory, origin: Point2) -> (f64, Vec<Point2>) {
    let n = plan.len();
    let mut grad = vec![Point2::ORIGIN; n];
    if n < 2 {
        return (0.0, grad);
    }
    let at = |i: usize| {
        if i == 0 {
            origin
        } else {
            plan.waypoints[i - 1]
        }
    };
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    // Points are indexed 0 = origin, 1..=n = waypoints.
    for i in 1..n {
        let d = at(i + 1) - at(i) * 2.0 + at(i - 1);
        value += d.dot(d) * inv;
        let g = d * (2.0 * inv);
        grad[i] = grad[i] + g;
        grad[i - 1] = grad[i - 1] - g * 2.0;
        if i >= 2 {
            grad[i - 2] = grad[i - 2] + g;
        }
    }
    (value, grad)
}

fn refine_objective(
    plan: &PlanTrajectory,
    scenario: &Scenario,
    constraints: &ConstraintParams,
    weights: &LossWeights,
    use_expert: bool,
) -> Result<(f64, Vec<Point2>)> {
    let mut w = weights.clone();
    if !use_expert {
        w.imitation = 0.0;
    }
    let (mut loss, _) = total_planning_loss(plan, scenario, constraints, &w)?;
    if !use_expert && weights.imitation != 0.0 {
        let (v, g) = smoothness_prior(plan, scenario.ego.position);
        loss.value += weights.imitation * v;
        for (dst, g) in loss.grad.iter_mut().zip(g) {
            *dst = *dst + g * weights.imitation;
        }
    }
    Ok((loss.value, loss.grad))
}

fn clamp_to_range(p: Point2, scenario: &Scenario) -> Point2 {
    let (long, lat) = scenario.perception_range;
    let c = scenario.ego.position;
    Point2::new(
        p.x.clamp(c.x - lat / 2.0, c.x + lat / 2.0),
        p.y.clamp(c.y - long / 2.0, c.y + long / 2.0),
    )
}

/// Projected gradient descent on the waypoints; returns the lowest-loss
/// iterate seen, the seed included.
pub fn refine_trajectory(
    seed: &PlanTrajectory,
    scenario: &Scenario,
    constraints: &ConstraintParams,
    weights: &LossWeights,
    config: &RefineConfig,
) -> Result<PlanTrajectory> {
    config.validate()?;
    Ok(refine_with_history(seed, scenario, constraints, weights, config)?.0)
}

/// Like [`refine_trajectory`], also returning the best-so-far loss after
/// each evaluation.
pub fn refine_with_history(
    seed: &PlanTrajectory,
    scenario: &Scenario,
    constraints: &ConstraintParams,
    weights: &LossWeights,
    config: &RefineConfig,
) -> Result<(PlanTrajectory, Vec<f64>)> {
    if config.steps == 0 {
        return Ok((seed.clone(), Vec::new()));
    }
    let mut current = seed.clone();
    let mut best = seed.clone();
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let (loss, grad) =
            refine_objective(&current, scenario, constraints, weights, config.use_expert)?;
        if loss < best_loss {
            best_loss = loss;
            best = current.clone();
        }
        history.push(best_loss);
        if step == config.steps {
            break;
        }
        for (w, g) in current.waypoints.iter_mut().zip(&grad) {
            *w = clamp_to_range(*w - *g * config.step_size, scenario);
        }
    }
    Ok((best, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub position: Point2,
    pub heading: f64,
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub tick: usize,
    pub ego_position: Point2,
    pub ego_heading: f64,
    pub ego_velocity: f64,
    pub ego_acceleration: f64,
    pub ego_size: (f64, f64),
    pub agents: Vec<AgentPose>,
    /// Ticks of ground truth left to replay.
    pub remaining: usize,
}

impl SimState {
    pub fn initial(scenario: &Scenario, ego_size: (f64, f64)) -> Self {
        Self {
            tick: 0,
            ego_position: scenario.ego.position,
            ego_heading: scenario.ego.heading,
            ego_velocity: scenario.ego.velocity,
            ego_acceleration: scenario.ego.acceleration,
            ego_size,
            agents: scenario
                .agents
                .iter()
                .map(|a| AgentPose {
                    position: a.position,
                    heading: a.heading,
                    size: a.size,
                })
                .collect(),
            remaining: scenario.t_f(),
        }
    }

    /// Map from the scenario frame into this tick's ego frame.
    pub fn frame(&self) -> Transform2 {
        Transform2::into_ego_frame(self.ego_position, self.ego_heading)
    }
}

/// Positions at ticks `k+1 ..= k+len` of a track whose tick-0 position is
/// `start`, continued at constant velocity past its end.
fn shifted_track(start: Point2, track: &[Point2], k: usize, len: usize) -> Vec<Point2> {
    let at = |j: usize| if j == 0 { start } else { track[j - 1] };
    let n = track.len();
    let last = at(n);
    let vel = if n == 0 {
        Point2::ORIGIN
    } else {
        last - at(n - 1)
    };
    (k + 1..=k + len)
        .map(|j| {
            if j <= n {
                at(j)
            } else {
                last + vel * (j - n) as f64
            }
        })
        .collect()
}

/// The scene as seen from the ego at `state`, in its own ego frame.
pub fn scene_at(base: &Scenario, state: &SimState) -> Scenario {
    let k = state.tick;
    let t_f = base.t_f();
    let agents = base
        .agents
        .iter()
        .zip(&state.agents)
        .map(|(a, pose)| AgentPrediction {
            position: pose.position,
            heading: pose.heading,
            modes: a
                .modes
                .iter()
                .map(|m| shifted_track(a.position, m, k, t_f))
                .collect(),
            ..a.clone()
        })
        .collect();
    let world = Scenario {
        agents,
        agent_gt_futures: base
            .agents
            .iter()
            .zip(&base.agent_gt_futures)
            .map(|(a, f)| shifted_track(a.position, f, k, t_f))
            .collect(),
        expert: shifted_track(base.ego.position, &base.expert, k, t_f),
        ego: EgoState {
            position: state.ego_position,
            heading: state.ego_heading,
            velocity: state.ego_velocity,
            acceleration: state.ego_acceleration,
            ..base.ego
        },
        ..base.clone()
    };
    world.transformed(&state.frame())
}

/// Executes the first waypoint of `plan` (given in the ego frame of `state`)
/// and advances agents one tick.
pub fn step(base: &Scenario, state: &SimState, plan: &PlanTrajectory) -> Result<SimState> {
    if state.remaining == 0 {
        return Err(Error::HorizonExhausted(state.tick));
    }
    let first = plan
        .waypoints
        .first()
        .copied()
        .ok_or(Error::LengthMismatch {
            expected: 1,
            got: 0,
        })?;
    let to_world = state.frame().inverse();
    let position = to_world.apply(first);
    let moved = position - state.ego_position;
    let heading = if moved.norm() > 1e-12 {
        moved.heading()
    } else {
        state.ego_heading
    };
    let velocity = moved.norm() / base.horizon_dt;
    let tick = state.tick + 1;
    let agents = base
        .agents
        .iter()
        .zip(&base.agent_gt_futures)
        .map(|(a, f)| {
            let (position, heading) = agent_poses(a, f)[tick - 1];
            AgentPose {
                position,
                heading,
                size: a.size,
            }
        })
        .collect();
    Ok(SimState {
        tick,
        ego_position: position,
        ego_heading: heading,
        ego_velocity: velocity,
        ego_acceleration: (velocity - state.ego_velocity) / base.horizon_dt,
        ego_size: state.ego_size,
        agents,
        remaining: state.remaining - 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Ticks to roll out; `None` uses the whole ground-truth horizon.
    pub ticks: Option<usize>,
    pub ego_size: (f64, f64),
    pub refine: RefineConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ticks: None,
            ego_size: DEFAULT_EGO_SIZE,
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: usize,
    /// Plan made at the start of the tick, in the scenario frame.
    pub plan: Vec<Point2>,
    pub ego_position: Point2,
    pub ego_heading: f64,
    pub agents: Vec<AgentPose>,
    pub collision: bool,
    pub overstep: bool,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutLog {
    pub records: Vec<TickRecord>,
}

impl RolloutLog {
    pub fn any_collision(&self) -> bool {
        self.records.iter().any(|r| r.collision)
    }

    pub fn any_overstep(&self) -> bool {
        self.records.iter().any(|r| r.overstep)
    }

    /// Column order: `tick, ego_x, ego_y, ego_heading, collision, overstep,
    /// l_col, l_bd, l_dir, l_imi`, then `plan{t}_x, plan{t}_y` per waypoint,
    /// then `agent{i}_x, agent{i}_y, agent{i}_heading` per agent.
    pub fn to_delimited(&self) -> String {
        let mut out =
            String::from("tick,ego_x,ego_y,ego_heading,collision,overstep,l_col,l_bd,l_dir,l_imi");
        if let Some(first) = self.records.first() {
            for t in 1..=first.plan.len() {
                write!(out, ",plan{t}_x,plan{t}_y").unwrap();
            }
            for i in 0..first.agents.len() {
                write!(out, ",agent{i}_x,agent{i}_y,agent{i}_heading").unwrap();
            }
        }
        out.push('\n');
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.tick,
                r.ego_position.x,
                r.ego_position.y,
                r.ego_heading,
                r.collision as u8,
                r.overstep as u8,
                r.losses.collision,
                r.losses.boundary,
                r.losses.direction,
                r.losses.imitation
            )
            .unwrap();
            for p in &r.plan {
                write!(out, ",{},{}", p.x, p.y).unwrap();
            }
            for a in &r.agents {
                write!(out, ",{},{},{}", a.position.x, a.position.y, a.heading).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Replans and executes `ticks` times (default: the ground-truth horizon).
pub fn run_closed_loop(
    scenario: &Scenario,
    planner: &Planner,
    constraints: &ConstraintParams,
    weights: &LossWeights,
    config: &SimConfig,
) -> Result<RolloutLog> {
    scenario.validate()?;
    let horizon = scenario.t_f();
    let ticks = config.ticks.unwrap_or(horizon);
    if ticks > horizon {
        return Err(Error::Config(format!(
            "simulator: {ticks} ticks exceed the {horizon}-tick ground truth"
        )));
    }
    let mut state = SimState::initial(scenario, config.ego_size);
    let mut log = RolloutLog::default();
    for _ in 0..ticks {
        let local = scene_at(scenario, &state);
        let plan = plan_once(&local, planner)?;
        let (_, losses) = total_planning_loss(&plan, &local, constraints, weights)?;
        let to_world = state.frame().inverse();
        let world_plan: Vec<Point2> = plan.waypoints.iter().map(|&p| to_world.apply(p)).collect();
        state = step(scenario, &state, &plan)?;
        let collision = state.agents.iter().any(|a| {
            oriented_rect_overlap(
                state.ego_position,
                state.ego_heading,
                state.ego_size,
                a.position,
                a.heading,
                a.size,
            )
        });
        let overstep = box_oversteps(
            scenario,
            state.ego_position,
            state.ego_heading,
            state.ego_size,
        );
        log.records.push(TickRecord {
            tick: state.tick,
            plan: world_plan,
            ego_position: state.ego_position,
            ego_heading: state.ego_heading,
            agents: state.agents.clone(),
            collision,
            overstep,
            losses,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::boundary_loss;
    use crate::geometry::Polyline;
    use crate::scene::{generate_scenario, GeneratorConfig, MapClass, MapVector, Side};
    use std::f64::consts::FRAC_PI_2;

    fn empty_scene(v: f64) -> Scenario {
        let mut s = generate_scenario(
            3,
            &GeneratorConfig {
                agents: 0,
                ..Default::default()
            },
        )
        .unwrap();
        s.map.clear();
        s.ego.velocity = v;
        s
    }

    #[test]
    fn constant_velocity_is_straight() {
        let s = empty_scene(4.0);
        let plan = plan_once(&s, &Planner::ConstantVelocity).unwrap();
        for (t, p) in plan.waypoints.iter().enumerate() {
            assert!(p.x.abs() < 1e-12);
            assert!((p.y - 2.0 * (t + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_plan_keeps_ego_still() {
        let s = empty_scene(0.0);
        let state = SimState::initial(&s, DEFAULT_EGO_SIZE);
        let plan = PlanTrajectory::new(vec![Point2::ORIGIN; s.t_f()]);
        let next = step(&s, &state, &plan).unwrap();
        assert_eq!(next.ego_position, Point2::ORIGIN);
        assert_eq!(next.ego_heading, FRAC_PI_2);
    }

    #[test]
    fn frame_round_trip() {
        let s = generate_scenario(8, &GeneratorConfig::default()).unwrap();
        let state = SimState {
            ego_position: Point2::new(1.3, 4.2),
            ego_heading: 1.2,
            ..SimState::initial(&s, DEFAULT_EGO_SIZE)
        };
        let t = state.frame();
        let back = s.transformed(&t).transformed(&t.inverse());
        for (a, b) in s.expert.iter().zip(&back.expert) {
            assert!(a.distance(*b) < 1e-9);
        }
        for (a, b) in s.map.iter().zip(&back.map) {
            for (p, q) in a.points.points().iter().zip(b.points.points()) {
                assert!(p.distance(*q) < 1e-9);
            }
        }
    }

    #[test]
    fn agents_after_one_step_match_ground_truth() {
        let s = generate_scenario(5, &GeneratorConfig::default()).unwrap();
        let state = SimState::initial(&s, DEFAULT_EGO_SIZE);
        let next = step(&s, &state, &PlanTrajectory::new(s.expert.clone())).unwrap();
        let local = scene_at(&s, &next);
        let t = Transform2::into_ego_frame(next.ego_position, next.ego_heading);
        for (a, gt) in local.agents.iter().zip(&s.agent_gt_futures) {
            assert!(a.position.distance(t.apply(gt[0])) < 1e-9);
        }
        assert!(local.ego.position.norm() < 1e-9);
        assert!((local.ego.heading - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn expert_pass_through() {
        let s = generate_scenario(11, &GeneratorConfig::default()).unwrap();
        let zero = LossWeights {
            collision: 0.0,
            boundary: 0.0,
            direction: 0.0,
            ..Default::default()
        };
        let log = run_closed_loop(
            &s,
            &Planner::Expert,
            &ConstraintParams::default(),
            &zero,
            &SimConfig::default(),
        )
        .unwrap();
        assert_eq!(log.records.len(), s.t_f());
        for (r, e) in log.records.iter().zip(&s.expert) {
            assert!(r.ego_position.distance(*e) < 1e-9);
            assert!(!r.collision);
        }
    }

    #[test]
    fn horizon_is_enforced() {
        let s = empty_scene(1.0);
        let cfg = SimConfig {
            ticks: Some(s.t_f() + 1),
            ..Default::default()
        };
        let err = run_closed_loop(
            &s,
            &Planner::ConstantVelocity,
            &ConstraintParams::default(),
            &LossWeights::default(),
            &cfg,
        );
        assert!(err.is_err());
        let mut state = SimState::initial(&s, DEFAULT_EGO_SIZE);
        state.remaining = 0;
        let plan = constant_velocity_plan(&s);
        assert!(matches!(
            step(&s, &state, &plan),
            Err(Error::HorizonExhausted(0))
        ));
    }

    #[test]
    fn refine_steps_zero_and_descent() {
        let mut s = empty_scene(2.0);
        s.map.push(MapVector {
            class: MapClass::RoadBoundary,
            points: Polyline::new(vec![Point2::new(0.5, -10.0), Point2::new(0.5, 20.0)]).unwrap(),
            confidence: 1.0,
            drivable_side: Some(Side::Left),
        });
        let params = ConstraintParams::default();
        let only_bd = LossWeights {
            collision: 0.0,
            direction: 0.0,
            imitation: 0.0,
            ..Default::default()
        };
        let seed = constant_velocity_plan(&s);
        let cfg0 = RefineConfig {
            steps: 0,
            ..Default::default()
        };
        assert_eq!(
            refine_trajectory(&seed, &s, &params, &only_bd, &cfg0).unwrap(),
            seed
        );
        let before = boundary_loss(&seed, &s.map, &params).value;
        let (out, hist) =
            refine_with_history(&seed, &s, &params, &only_bd, &RefineConfig::default()).unwrap();
        let after = boundary_loss(&out, &s.map, &params).value;
        assert!(after < before, "{after} vs {before}");
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn smoothness_gradient_matches_central_difference() {
        let plan = PlanTrajectory::new(vec![
            Point2::new(0.1, 1.0),
            Point2::new(0.5, 2.2),
            Point2::new(0.4, 2.9),
            Point2::new(1.2, 4.5),
        ]);
        let origin = Point2::new(0.0, 0.0);
        let (_, g) = smoothness_prior(&plan, origin);
        let h = 1e-6;
        for t in 0..plan.len() {
            for axis in 0..2 {
                let mut a = plan.clone();
                let mut b = plan.clone();
                if axis == 0 {
                    a.waypoints[t].x += h;
                    b.waypoints[t].x -= h;
                } else {
                    a.waypoints[t].y += h;
                    b.waypoints[t].y -= h;
                }
                let num =
                    (smoothness_prior(&a, origin).0 - smoothness_prior(&b, origin).0) / (2.0 * h);
                let ana = if axis == 0 { g[t].x } else { g[t].y };
                assert!((num - ana).abs() < 1e-6, "{t} {axis}: {num} vs {ana}");
            }
        }
    }
}

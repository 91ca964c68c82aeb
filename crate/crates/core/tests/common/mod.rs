//! Shared fixtures, finite-difference helpers and brute-force oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vecplan::constraints::{
    boundary_loss, collision_loss, direction_loss, imitation_loss, ConstraintParams, FilteredScene,
    LossWeights,
};
use vecplan::geometry::{Point2, Polyline};
use vecplan::interact::{forward_plan, InteractionConfig, InteractionParams};
use vecplan::learning::{objective_and_grads, Objective};
use vecplan::metrics::{agent_poses, plan_poses, HORIZONS_S};
use vecplan::scene::{
    generate_scenario, AgentPrediction, GeneratorConfig, MapClass, MapVector, PlanTrajectory,
    Scenario, Side,
};

pub const T_F: usize = 6;
pub const FD_STEP: f64 = 1e-5;
/// Distance kept from every hinge, tie and kink in "non-degenerate" draws.
pub const MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn p(x: f64, y: f64) -> Point2 {
    Point2::new(x, y)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn random_plan(rng: &mut ChaCha8Rng) -> PlanTrajectory {
    PlanTrajectory::new(
        (1..=T_F)
            .map(|t| {
                p(
                    uniform(rng, -1.0, 1.0),
                    2.0 * t as f64 + uniform(rng, -0.6, 0.6),
                )
            })
            .collect(),
    )
}

pub fn track_agent(track: Vec<Point2>, confidence: f64) -> AgentPrediction {
    AgentPrediction {
        position: track[0],
        heading: std::f64::consts::FRAC_PI_2,
        size: (4.0, 1.8),
        confidence,
        modes: vec![track],
        mode_scores: vec![1.0],
    }
}

pub fn vector(class: MapClass, points: Vec<Point2>) -> MapVector {
    MapVector {
        class,
        points: Polyline::new(points).unwrap(),
        confidence: 1.0,
        drivable_side: (class == MapClass::RoadBoundary).then_some(Side::Left),
    }
}

/// Values of a sorted slice that are separated from the minimum by less
/// than `MARGIN` (excluding the minimum itself).
fn near_tie(sorted: &[f64]) -> bool {
    sorted.len() > 1 && sorted[1] - sorted[0] < MARGIN
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn segments(pl: &Polyline) -> Vec<(Point2, Point2)> {
    pl.segments().filter(|(a, b)| a != b).collect()
}

fn oracle_foot(q: Point2, a: Point2, b: Point2) -> Point2 {
    let ab = b - a;
    let t = ((q - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    a + ab * t
}

/// A plan plus agents with active, well-separated collision hinges.
pub struct CollisionCase {
    pub plan: PlanTrajectory,
    pub agents: Vec<AgentPrediction>,
}

pub fn collision_case(rng: &mut ChaCha8Rng, params: &ConstraintParams) -> CollisionCase {
    loop {
        let plan = random_plan(rng);
        let n = rng.random_range(1..=3);
        let agents: Vec<AgentPrediction> = (0..n)
            .map(|_| {
                let track = plan
                    .waypoints
                    .iter()
                    .map(|&w| w + p(uniform(rng, -3.0, 3.0), uniform(rng, -3.2, 3.2)))
                    .collect();
                track_agent(track, 1.0)
            })
            .collect();
        if collision_well_posed(&plan, &agents, params) {
            let v = collision_loss(&plan, &agents, params).value;
            if v > 0.0 {
                return CollisionCase { plan, agents };
            }
        }
    }
}

fn collision_well_posed(
    plan: &PlanTrajectory,
    agents: &[AgentPrediction],
    params: &ConstraintParams,
) -> bool {
    for (t, &w) in plan.waypoints.iter().enumerate() {
        let mut lat = Vec::new();
        let mut lon = Vec::new();
        for a in agents {
            let d = w - a.modes[0][t];
            if (d.norm() - params.delta_a).abs() < MARGIN {
                return false;
            }
            if d.norm() > params.delta_a {
                continue;
            }
            let (dx, dy) = (d.x.abs(), d.y.abs());
            if dx < MARGIN
                || dy < MARGIN
                || (dx - params.delta_x).abs() < MARGIN
                || (dy - params.delta_y).abs() < MARGIN
            {
                return false;
            }
            lat.push(dx);
            lon.push(dy);
        }
        if near_tie(&sorted(lat)) || near_tie(&sorted(lon)) {
            return false;
        }
    }
    true
}

pub struct BoundaryCase {
    pub plan: PlanTrajectory,
    pub boundaries: Vec<MapVector>,
}

fn wiggly_line(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), class: MapClass) -> MapVector {
    let x = uniform(rng, lo, hi);
    let k = rng.random_range(2..=5);
    let pts = (0..k)
        .map(|i| {
            let y = -4.0 + 18.0 * i as f64 / (k - 1) as f64;
            p(x + uniform(rng, -0.5, 0.5), y)
        })
        .collect();
    vector(class, pts)
}

pub fn boundary_case(rng: &mut ChaCha8Rng, params: &ConstraintParams) -> BoundaryCase {
    loop {
        let plan = random_plan(rng);
        let boundaries = vec![
            wiggly_line(rng, (-2.2, -0.8), MapClass::RoadBoundary),
            wiggly_line(rng, (0.8, 2.2), MapClass::RoadBoundary),
        ];
        let ok = plan.waypoints.iter().all(|&w| {
            let mut hits: Vec<(f64, Point2)> = boundaries
                .iter()
                .flat_map(|b| segments(&b.points))
                .map(|(a, b)| {
                    let f = oracle_foot(w, a, b);
                    (w.distance(f), f)
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (d, foot) = hits[0];
            let tie = hits[1..]
                .iter()
                .any(|&(o, f)| o - d < MARGIN && f.distance(foot) > 1e-9);
            !tie && d > MARGIN && (d - params.delta_bd).abs() > MARGIN
        });
        if ok && boundary_loss(&plan, &boundaries, params).value > 0.0 {
            return BoundaryCase { plan, boundaries };
        }
    }
}

pub struct DirectionCase {
    pub plan: PlanTrajectory,
    pub dividers: Vec<MapVector>,
}

pub fn direction_case(rng: &mut ChaCha8Rng, params: &ConstraintParams) -> DirectionCase {
    loop {
        let plan = random_plan(rng);
        let dividers = vec![
            wiggly_line(rng, (-2.5, 0.0), MapClass::LaneDivider),
            wiggly_line(rng, (0.0, 2.5), MapClass::LaneDivider),
        ];
        let mut prev = Point2::ORIGIN;
        let ok = plan.waypoints.iter().all(|&w| {
            let v = w - prev;
            prev = w;
            let mut hits: Vec<(f64, Point2)> = dividers
                .iter()
                .flat_map(|d| segments(&d.points))
                .map(|(a, b)| (w.distance(oracle_foot(w, a, b)), b - a))
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (d, lane) = hits[0];
            if (d - params.delta_dir).abs() < MARGIN || hits[1].0 - d < MARGIN {
                return false;
            }
            if d > params.delta_dir {
                return true;
            }
            let c = lane.dot(v) / (lane.norm() * v.norm());
            let angle = c.clamp(-1.0, 1.0).acos();
            v.norm() > 0.1 && angle > 0.05 && angle < std::f64::consts::PI - 0.05
        });
        if ok && direction_loss(&plan, &dividers, params, Point2::ORIGIN).value > 0.0 {
            return DirectionCase { plan, dividers };
        }
    }
}

pub fn imitation_case(rng: &mut ChaCha8Rng) -> (PlanTrajectory, Vec<Point2>) {
    loop {
        let plan = random_plan(rng);
        let expert: Vec<Point2> = plan
            .waypoints
            .iter()
            .map(|&w| w + p(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)))
            .collect();
        let ok = plan
            .waypoints
            .iter()
            .zip(&expert)
            .all(|(a, b)| (a.x - b.x).abs() > MARGIN && (a.y - b.y).abs() > MARGIN);
        if ok {
            return (plan, expert);
        }
    }
}

/// Worst relative error of each constraint gradient over `configs` seeded
/// draws: `[collision, boundary, direction, imitation]`.
pub fn constraint_gradient_errors(configs: usize, seed: u64) -> [f64; 4] {
    let params = ConstraintParams::default();
    let mut rng = rng(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..configs {
        let c = collision_case(&mut rng, &params);
        let a = collision_loss(&c.plan, &c.agents, &params).flat_grad();
        let n = central_diff(
            |x| collision_loss(&PlanTrajectory::from_flat(x), &c.agents, &params).value,
            &c.plan.to_flat(),
            FD_STEP,
        );
        worst[0] = worst[0].max(max_rel_err(&a, &n));

        let b = boundary_case(&mut rng, &params);
        let a = boundary_loss(&b.plan, &b.boundaries, &params).flat_grad();
        let n = central_diff(
            |x| boundary_loss(&PlanTrajectory::from_flat(x), &b.boundaries, &params).value,
            &b.plan.to_flat(),
            FD_STEP,
        );
        worst[1] = worst[1].max(max_rel_err(&a, &n));

        let d = direction_case(&mut rng, &params);
        let a = direction_loss(&d.plan, &d.dividers, &params, Point2::ORIGIN).flat_grad();
        let n = central_diff(
            |x| {
                direction_loss(
                    &PlanTrajectory::from_flat(x),
                    &d.dividers,
                    &params,
                    Point2::ORIGIN,
                )
                .value
            },
            &d.plan.to_flat(),
            FD_STEP,
        );
        worst[2] = worst[2].max(max_rel_err(&a, &n));

        let (plan, expert) = imitation_case(&mut rng);
        let a = imitation_loss(&plan, &expert).unwrap().flat_grad();
        let n = central_diff(
            |x| {
                imitation_loss(&PlanTrajectory::from_flat(x), &expert)
                    .unwrap()
                    .value
            },
            &plan.to_flat(),
            FD_STEP,
        );
        worst[3] = worst[3].max(max_rel_err(&a, &n));
    }
    worst
}

pub fn generated(seed: u64) -> Scenario {
    generate_scenario(seed, &GeneratorConfig::default()).unwrap()
}

/// Full objective (planning constraints plus auxiliary map/motion heads):
/// worst relative error of all parameter gradients against central
/// differences.
pub fn network_gradient_error(seed: u64) -> f64 {
    let config = InteractionConfig {
        d_model: 8,
        aux_heads: true,
        aux_modes: 6,
        aux_points: 20,
        ..InteractionConfig::default()
    };
    let objective = Objective {
        interact: config.clone(),
        constraints: ConstraintParams::default(),
        weights: LossWeights::default(),
        focal_gamma: 2.0,
        focal_alpha: 0.25,
    };
    let scenario = generated(seed);
    let filtered = FilteredScene::new(&scenario, &objective.constraints);
    let mut params = InteractionParams::init(&config, seed).unwrap();
    let (_, grads) = objective_and_grads(&scenario, &filtered, &params, &objective).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();

    let flat: Vec<f64> = params
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect();
    let mut numeric = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut eval = |v: f64| {
            set_scalar(&mut params, i, v);
            objective_and_grads(&scenario, &filtered, &params, &objective)
                .unwrap()
                .0
                .total
        };
        let up = eval(flat[i] + FD_STEP);
        let down = eval(flat[i] - FD_STEP);
        set_scalar(&mut params, i, flat[i]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    max_rel_err(&analytic, &numeric)
}

fn set_scalar(params: &mut InteractionParams, mut index: usize, value: f64) {
    for t in params.tensors_mut() {
        let n = t.data().len();
        if index < n {
            t.data_mut()[index] = value;
            return;
        }
        index -= n;
    }
    panic!("scalar index out of range");
}

/// Largest deviation of a softmax row sum from 1 over random inputs.
pub fn softmax_row_sum_error(trials: usize, seed: u64) -> f64 {
    use vecplan::autodiff::{Tape, Tensor};
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let scale = uniform(&mut rng, 0.1, 50.0);
        let data = (0..r * c)
            .map(|_| uniform(&mut rng, -scale, scale))
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(r, c, data).unwrap());
        let s = tape.softmax_rows(x);
        let out = tape.value(s);
        for i in 0..r {
            let sum: f64 = out.row_slice(i).iter().sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

// ---- brute-force oracles ----

/// Lowest-index polyline attaining the exhaustive minimum distance, if that
/// minimum is within `range`.
pub fn oracle_closest_polyline(q: Point2, lines: &[Polyline], range: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, pl) in lines.iter().enumerate() {
        for (a, b) in segments(pl) {
            let d = q.distance(oracle_foot(q, a, b));
            if d <= range && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    best
}

pub fn oracle_best_mode(scores: &[f64]) -> usize {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().position(|&s| s == max).unwrap()
}

pub fn oracle_minfde(modes: &[Vec<Point2>], gt: &[Point2]) -> usize {
    let target = *gt.last().unwrap();
    let dists: Vec<f64> = modes
        .iter()
        .map(|m| m.last().unwrap().distance(target))
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

fn rect_corners(center: Point2, heading: f64, (len, wid): (f64, f64)) -> [Point2; 4] {
    let (s, c) = heading.sin_cos();
    let f = p(c, s) * (len / 2.0);
    let l = p(-s, c) * (wid / 2.0);
    [
        center + f + l,
        center - f + l,
        center - f - l,
        center + f - l,
    ]
}

fn inside(q: Point2, poly: &[Point2; 4]) -> bool {
    (0..4).all(|i| (poly[(i + 1) % 4] - poly[i]).cross(q - poly[i]) >= 0.0)
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let o = |p: Point2, q: Point2, r: Point2| (q - p).cross(r - p);
    let (d1, d2, d3, d4) = (o(c, d, a), o(c, d, b), o(a, b, c), o(a, b, d));
    d1 * d2 <= 0.0 && d3 * d4 <= 0.0
}

/// Polygon-intersection overlap test, independent of the separating-axis
/// implementation.
pub fn oracle_overlap(a: [Point2; 4], b: [Point2; 4]) -> bool {
    a.iter().any(|&q| inside(q, &b))
        || b.iter().any(|&q| inside(q, &a))
        || (0..4)
            .any(|i| (0..4).any(|j| segments_cross(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4])))
}

/// Percent of scenarios with any ego-agent overlap at ticks up to each
/// horizon, by direct per-tick, per-agent scan.
pub fn oracle_collision_rate(
    scenarios: &[Scenario],
    plans: &[PlanTrajectory],
    ego_size: (f64, f64),
) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for (s, plan) in scenarios.iter().zip(plans) {
        let ego = plan_poses(plan, s.ego.position, s.ego.heading);
        for (h, count) in HORIZONS_S.iter().zip(counts.iter_mut()) {
            let ticks = ((h / s.horizon_dt).round() as usize).min(plan.len());
            let hit = (0..ticks).any(|t| {
                s.agents
                    .iter()
                    .zip(&s.agent_gt_futures)
                    .any(|(agent, fut)| {
                        let poses = agent_poses(agent, fut);
                        let Some(&(ap, ah)) = poses.get(t) else {
                            return false;
                        };
                        let (ep, eh) = ego[t];
                        oracle_overlap(
                            rect_corners(ep, eh, ego_size),
                            rect_corners(ap, ah, agent.size),
                        )
                    })
            });
            if hit {
                *count += 1;
            }
        }
    }
    counts.map(|c| c as f64 / scenarios.len() as f64 * 100.0)
}

/// Expert plans jittered enough to produce a mix of clear and colliding
/// samples.
pub fn jittered_plan(s: &Scenario, rng: &mut ChaCha8Rng, scale: f64) -> PlanTrajectory {
    PlanTrajectory::new(
        s.expert
            .iter()
            .map(|&w| w + p(uniform(rng, -scale, scale), uniform(rng, -scale, scale)))
            .collect(),
    )
}

// ---- invariance helpers ----

/// Plan from a freshly initialised network on `scenario` with agents and
/// map elements permuted by reversal; returns the largest waypoint change.
pub fn permutation_deviation(seed: u64) -> f64 {
    let config = InteractionConfig::default();
    let params = InteractionParams::init(&config, seed).unwrap();
    let s = generated(seed);
    let mut permuted = s.clone();
    let mut rng = rng(seed ^ 0x5eed);
    let n = s.agents.len();
    let order: Vec<usize> = shuffled(n, &mut rng);
    permuted.agents = order.iter().map(|&i| s.agents[i].clone()).collect();
    permuted.agent_gt_futures = order
        .iter()
        .map(|&i| s.agent_gt_futures[i].clone())
        .collect();
    let order = shuffled(s.map.len(), &mut rng);
    permuted.map = order.iter().map(|&i| s.map[i].clone()).collect();
    let (a, _) = forward_plan(&s, &params, &config).unwrap();
    let (b, _) = forward_plan(&permuted, &params, &config).unwrap();
    a.waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(x, y)| x.distance(*y))
        .fold(0.0, f64::max)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

pub fn translate_plan(plan: &PlanTrajectory, d: Point2) -> PlanTrajectory {
    PlanTrajectory::new(plan.waypoints.iter().map(|&w| w + d).collect())
}

pub fn map_vector_points(m: &MapVector, f: impl Fn(Point2) -> Point2) -> MapVector {
    MapVector {
        points: m.points.map_points(f),
        ..m.clone()
    }
}

pub fn agent_points(a: &AgentPrediction, f: impl Fn(Point2) -> Point2) -> AgentPrediction {
    AgentPrediction {
        position: f(a.position),
        modes: a
            .modes
            .iter()
            .map(|m| m.iter().map(|&q| f(q)).collect())
            .collect(),
        ..a.clone()
    }
}

/// Worst change of collision and boundary loss under a joint translation,
/// and of direction loss under a joint rotation, over `trials` draws.
pub fn rigid_motion_deviation(trials: usize, seed: u64) -> [f64; 3] {
    let params = ConstraintParams::default();
    let mut rng = rng(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..trials {
        let d = p(
            uniform(&mut rng, -50.0, 50.0),
            uniform(&mut rng, -50.0, 50.0),
        );
        let shift = |q: Point2| q + d;

        let c = collision_case(&mut rng, &params);
        let before = collision_loss(&c.plan, &c.agents, &params).value;
        let agents: Vec<_> = c.agents.iter().map(|a| agent_points(a, shift)).collect();
        let after = collision_loss(&translate_plan(&c.plan, d), &agents, &params).value;
        worst[0] = worst[0].max((before - after).abs());

        let b = boundary_case(&mut rng, &params);
        let before = boundary_loss(&b.plan, &b.boundaries, &params).value;
        let bds: Vec<_> = b
            .boundaries
            .iter()
            .map(|m| map_vector_points(m, shift))
            .collect();
        let after = boundary_loss(&translate_plan(&b.plan, d), &bds, &params).value;
        worst[1] = worst[1].max((before - after).abs());

        let dc = direction_case(&mut rng, &params);
        let angle = uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
        let pivot = p(
            uniform(&mut rng, -20.0, 20.0),
            uniform(&mut rng, -20.0, 20.0),
        );
        let rot = |q: Point2| pivot + (q - pivot).rotate(angle);
        let before = direction_loss(&dc.plan, &dc.dividers, &params, Point2::ORIGIN).value;
        let plan = PlanTrajectory::new(dc.plan.waypoints.iter().map(|&w| rot(w)).collect());
        let divs: Vec<_> = dc
            .dividers
            .iter()
            .map(|m| map_vector_points(m, rot))
            .collect();
        let after = direction_loss(&plan, &divs, &params, rot(Point2::ORIGIN)).value;
        worst[2] = worst[2].max((before - after).abs());
    }
    worst
}

/// Worst change of angular_difference under positive rescaling of both
/// arguments.
pub fn angular_scaling_deviation(trials: usize, seed: u64) -> f64 {
    use vecplan::geometry::angular_difference;
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v1 = p(uniform(&mut rng, -5.0, 5.0), uniform(&mut rng, -5.0, 5.0));
        let v2 = p(uniform(&mut rng, -5.0, 5.0), uniform(&mut rng, -5.0, 5.0));
        let (a, b) = (
            10f64.powf(uniform(&mut rng, -3.0, 3.0)),
            10f64.powf(uniform(&mut rng, -3.0, 3.0)),
        );
        let base = angular_difference(v1, v2).unwrap();
        let scaled = angular_difference(v1 * a, v2 * b).unwrap();
        worst = worst.max((base - scaled).abs());
    }
    worst
}

//! Procedural synthetic scenes.
//!
//! The road is a set of parallel lanes that run straight behind the ego and
//! bend with a constant curvature from the ego position onward. Positions on
//! the road are addressed by `(station, offset)`: station is arc length along
//! the ego-lane centerline, offset is lateral (+right).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrientedRect, Point2, Polyline};
use crate::scene::{
    AgentPrediction, Command, EgoState, MapClass, MapVector, Scenario, Side, DEFAULT_HORIZON_DT,
    DEFAULT_PERCEPTION_RANGE, DEFAULT_T_F,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub lanes: usize,
    /// Lane width range; each scene draws one width.
    pub lane_width: (f64, f64),
    /// Largest lateral offset of the ego from its lane center.
    pub ego_lane_offset: f64,
    pub max_curvature: f64,
    pub agents: usize,
    /// Probability that the first agent is a slower leader in the ego lane.
    pub lead_probability: f64,
    pub lane_change_probability: f64,
    pub crossing_probability: f64,
    pub modes: usize,
    /// Scale of the perturbation applied to non-ground-truth modes.
    pub mode_noise: f64,
    pub points_per_vector: usize,
    pub ego_speed: (f64, f64),
    pub ego_accel: (f64, f64),
    pub agent_speed: (f64, f64),
    pub ego_size: (f64, f64),
    /// Minimum center distance between the expert and any agent at every tick.
    pub expert_clearance: f64,
    #[serde(rename = "T_f")]
    pub t_f: usize,
    pub horizon_dt: f64,
    pub perception_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lanes: 3,
            lane_width: (3.3, 4.0),
            ego_lane_offset: 0.4,
            max_curvature: 0.012,
            agents: 4,
            lead_probability: 0.6,
            lane_change_probability: 0.3,
            crossing_probability: 0.3,
            modes: 6,
            mode_noise: 0.5,
            points_per_vector: 20,
            ego_speed: (2.0, 7.5),
            ego_accel: (-1.0, 1.0),
            agent_speed: (0.0, 9.0),
            ego_size: (4.0, 1.85),
            expert_clearance: 3.5,
            t_f: DEFAULT_T_F,
            horizon_dt: DEFAULT_HORIZON_DT,
            perception_range: DEFAULT_PERCEPTION_RANGE,
        }
    }
}

const MIN_POLYLINE_SPAN: f64 = 10.0;
const PLACEMENT_ATTEMPTS: usize = 30;
/// Shortest distance over which the expert completes a lateral maneuver.
const MIN_MANEUVER_LENGTH: f64 = 12.0;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.lanes == 0 {
            return bad("lanes must be >= 1");
        }
        if self.modes == 0 {
            return bad("modes must be >= 1");
        }
        if self.t_f == 0 {
            return bad("T_f must be >= 1");
        }
        if self.points_per_vector < 2 {
            return bad("points_per_vector must be >= 2");
        }
        if !(self.horizon_dt > 0.0)
            || !(self.lane_width.0 > 0.0)
            || self.lane_width.0 > self.lane_width.1
        {
            return bad("horizon_dt must be positive and lane_width a positive [lo, hi] range");
        }
        if !(self.ego_lane_offset >= 0.0) || self.ego_lane_offset >= self.lane_width.0 / 2.0 {
            return bad("ego_lane_offset must lie in [0, lane_width / 2)");
        }
        if !self.max_curvature.is_finite() || self.max_curvature < 0.0 {
            return bad("max_curvature must be finite and >= 0");
        }
        for (name, (lo, hi)) in [
            ("ego_speed", self.ego_speed),
            ("ego_accel", self.ego_accel),
            ("agent_speed", self.agent_speed),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(&format!("{name} must be a finite [lo, hi] range"));
            }
        }
        if self.ego_speed.0 < 0.0 || self.agent_speed.0 < 0.0 {
            return bad("speeds must be non-negative");
        }
        let (long, lat) = self.perception_range;
        if !(long > 0.0 && lat > 0.0) {
            return bad("perception_range must be positive");
        }
        // Outermost boundary when the ego sits in an edge lane.
        let outer = (self.lanes as f64 - 0.5) * self.lane_width.1 + self.ego_lane_offset;
        if outer >= lat / 2.0 {
            return bad(&format!(
                "{} lanes of up to {} m do not fit a {} m lateral range",
                self.lanes, self.lane_width.1, lat
            ));
        }
        // Worst-case expert travel must stay inside the forward range.
        let t = self.t_f as f64 * self.horizon_dt;
        let reach = self.ego_speed.1 * t + 0.5 * self.ego_accel.1.max(0.0) * t * t;
        if reach >= long / 2.0 {
            return bad(&format!(
                "expert can travel {reach:.1} m, beyond the {} m forward range",
                long / 2.0
            ));
        }
        let worst = Road {
            curvature: self.max_curvature,
            lanes: self.lanes,
            lane_width: self.lane_width.1,
            ego_lane: 0,
            shift: 0.0,
        };
        for ego_lane in [0, self.lanes - 1] {
            for curvature in [self.max_curvature, -self.max_curvature] {
                for shift in [self.ego_lane_offset, -self.ego_lane_offset] {
                    let road = Road {
                        curvature,
                        ego_lane,
                        shift,
                        ..worst
                    };
                    for offset in road.boundary_offsets() {
                        if road.polyline_span(offset, self).is_none() {
                            return bad("road geometry does not fit the perception range");
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Road {
    curvature: f64,
    lanes: usize,
    lane_width: f64,
    ego_lane: usize,
    /// Lateral offset of the ego from its lane center (+right).
    shift: f64,
}

impl Road {
    fn point(&self, station: f64, offset: f64) -> Point2 {
        if station <= 0.0 || self.curvature.abs() < 1e-12 {
            return Point2::new(offset, station);
        }
        let r = 1.0 / self.curvature;
        let theta = station * self.curvature;
        Point2::new(r - (r - offset) * theta.cos(), (r - offset) * theta.sin())
    }

    fn heading(&self, station: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 - station.max(0.0) * self.curvature
    }

    fn lane_offset(&self, lane: usize) -> f64 {
        (lane as f64 - self.ego_lane as f64) * self.lane_width - self.shift
    }

    fn boundary_offsets(&self) -> [f64; 2] {
        [
            self.lane_offset(0) - self.lane_width / 2.0,
            self.lane_offset(self.lanes - 1) + self.lane_width / 2.0,
        ]
    }

    fn divider_offsets(&self) -> Vec<f64> {
        (0..self.lanes - 1)
            .map(|j| self.lane_offset(j) + self.lane_width / 2.0)
            .collect()
    }

    fn sample(&self, offset: f64, lo: f64, hi: f64, n: usize) -> Vec<Point2> {
        (0..n)
            .map(|i| {
                let s = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                self.point(s, offset)
            })
            .collect()
    }

    /// Largest station interval whose sampled line stays in range.
    fn polyline_span(&self, offset: f64, cfg: &GeneratorConfig) -> Option<(f64, f64)> {
        let (long, lat) = cfg.perception_range;
        let inside = |p: Point2| p.y.abs() <= long / 2.0 - 0.5 && p.x.abs() <= lat / 2.0 - 0.5;
        let (mut lo, mut hi) = (-(long / 2.0 - 0.5), long / 2.0 - 0.5);
        while hi - lo >= MIN_POLYLINE_SPAN {
            let pts = self.sample(offset, lo, hi, cfg.points_per_vector);
            let first_out = !inside(pts[0]);
            let last_out = !inside(*pts.last().unwrap());
            if pts.iter().all(|&p| inside(p)) {
                return Some((lo, hi));
            }
            if first_out || !last_out {
                lo += 0.5;
            }
            if last_out || !first_out {
                hi -= 0.5;
            }
        }
        None
    }
}

struct AgentPlan {
    lane: usize,
    station: f64,
    speed: f64,
    size: (f64, f64),
}

impl AgentPlan {
    fn station_at(&self, t: f64) -> f64 {
        self.station + self.speed * t
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

struct ExpertPlan {
    speed: f64,
    accel: f64,
    target_lane: usize,
}

impl ExpertPlan {
    fn free_station(&self, t: f64) -> f64 {
        if self.accel < 0.0 {
            let t_stop = self.speed / -self.accel;
            let t = t.min(t_stop);
            self.speed * t + 0.5 * self.accel * t * t
        } else {
            self.speed * t + 0.5 * self.accel * t * t
        }
    }

    /// Station of the expert at `t`, kept behind any leader in its lanes.
    fn station(&self, t: f64, road: &Road, agents: &[AgentPlan], ego_len: f64) -> f64 {
        let mut s = self.free_station(t);
        for a in agents {
            if (a.lane == road.ego_lane || a.lane == self.target_lane) && a.station > 0.0 {
                let gap = 0.5 * (ego_len + a.size.0) + 2.0;
                s = s.min(a.station_at(t) - gap);
            }
        }
        s.max(0.0)
    }

    /// Lateral offset after travelling `s` of a horizon-long `s_total`.
    /// Lateral progress follows distance, so a stopped expert stays put.
    fn offset(&self, s: f64, s_total: f64, road: &Road) -> f64 {
        road.lane_offset(self.target_lane) * smoothstep(s / s_total.max(MIN_MANEUVER_LENGTH))
    }

    fn waypoints(&self, road: &Road, agents: &[AgentPlan], cfg: &GeneratorConfig) -> Vec<Point2> {
        let stations: Vec<f64> = (1..=cfg.t_f)
            .map(|k| self.station(k as f64 * cfg.horizon_dt, road, agents, cfg.ego_size.0))
            .collect();
        let s_total = stations.last().copied().unwrap_or(0.0);
        stations
            .iter()
            .map(|&s| road.point(s, self.offset(s, s_total, road)))
            .collect()
    }
}

fn heading_along(points: &[Point2], k: usize, fallback: f64) -> f64 {
    if k == 0 {
        return fallback;
    }
    let v = points[k] - points[k - 1];
    if v.norm() > 1e-9 {
        v.heading()
    } else {
        fallback
    }
}

/// Expert must keep `expert_clearance` from every agent center and never
/// overlap a slightly inflated ego box.
fn agent_conflicts(a: &AgentPlan, road: &Road, expert: &[Point2], cfg: &GeneratorConfig) -> bool {
    let mut ego_track = vec![Point2::ORIGIN];
    ego_track.extend_from_slice(expert);
    let mut ego_heading = std::f64::consts::FRAC_PI_2;
    let offset = road.lane_offset(a.lane);
    for (k, &e) in ego_track.iter().enumerate() {
        let t = k as f64 * cfg.horizon_dt;
        let s = a.station_at(t);
        let p = road.point(s, offset);
        if p.distance(e) < cfg.expert_clearance {
            return true;
        }
        ego_heading = heading_along(&ego_track, k, ego_heading);
        let ego_box =
            OrientedRect::new(e, ego_heading, (cfg.ego_size.0 + 1.0, cfg.ego_size.1 + 0.6));
        if ego_box.overlaps(&OrientedRect::new(p, road.heading(s), a.size)) {
            return true;
        }
    }
    false
}

fn agents_overlap(a: &AgentPlan, b: &AgentPlan, road: &Road) -> bool {
    let ra = OrientedRect::new(
        road.point(a.station, road.lane_offset(a.lane)),
        road.heading(a.station),
        (a.size.0 + 1.0, a.size.1),
    );
    let rb = OrientedRect::new(
        road.point(b.station, road.lane_offset(b.lane)),
        road.heading(b.station),
        (b.size.0 + 1.0, b.size.1),
    );
    ra.overlaps(&rb)
}

/// Deterministic synthetic scenario for `seed`.
pub fn generate_scenario(seed: u64, cfg: &GeneratorConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ego_lane = rng.random_range(0..cfg.lanes);
    let curvature = uniform(&mut rng, (-cfg.max_curvature, cfg.max_curvature));
    let road = Road {
        curvature,
        lanes: cfg.lanes,
        lane_width: uniform(&mut rng, cfg.lane_width),
        ego_lane,
        shift: uniform(&mut rng, (-cfg.ego_lane_offset, cfg.ego_lane_offset)),
    };

    let mut turns = Vec::new();
    if ego_lane > 0 {
        turns.push((Command::TurnLeft, ego_lane - 1));
    }
    if ego_lane + 1 < cfg.lanes {
        turns.push((Command::TurnRight, ego_lane + 1));
    }
    let (command, target_lane) =
        if !turns.is_empty() && rng.random_bool(cfg.lane_change_probability.clamp(0.0, 1.0)) {
            turns[rng.random_range(0..turns.len())]
        } else {
            (Command::GoStraight, ego_lane)
        };

    let speed = uniform(&mut rng, cfg.ego_speed);
    let accel = uniform(&mut rng, cfg.ego_accel);
    let expert_plan = ExpertPlan {
        speed,
        accel,
        target_lane,
    };
    let horizon = cfg.t_f as f64 * cfg.horizon_dt;

    let mut placed: Vec<AgentPlan> = Vec::new();
    for i in 0..cfg.agents {
        let leader = i == 0 && rng.random_bool(cfg.lead_probability.clamp(0.0, 1.0));
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = (uniform(&mut rng, (3.8, 5.0)), uniform(&mut rng, (1.7, 2.0)));
            let candidate = if leader {
                let gap = 0.5 * (cfg.ego_size.0 + size.0) + 3.0;
                AgentPlan {
                    lane: ego_lane,
                    station: uniform(&mut rng, (gap, gap + 15.0)),
                    speed: uniform(&mut rng, (cfg.agent_speed.0, speed.max(cfg.agent_speed.0))),
                    size,
                }
            } else {
                AgentPlan {
                    lane: rng.random_range(0..cfg.lanes),
                    station: uniform(&mut rng, (-20.0, 25.0)),
                    speed: uniform(&mut rng, cfg.agent_speed),
                    size,
                }
            };
            if placed.iter().any(|p| agents_overlap(p, &candidate, &road)) {
                continue;
            }
            placed.push(candidate);
            let expert = expert_plan.waypoints(&road, &placed, cfg);
            if placed
                .iter()
                .any(|a| agent_conflicts(a, &road, &expert, cfg))
            {
                placed.pop();
                continue;
            }
            break;
        }
    }
    let expert = expert_plan.waypoints(&road, &placed, cfg);

    let mut agents = Vec::with_capacity(placed.len());
    let mut futures = Vec::with_capacity(placed.len());
    for a in &placed {
        let offset = road.lane_offset(a.lane);
        let future: Vec<Point2> = (1..=cfg.t_f)
            .map(|k| road.point(a.station_at(k as f64 * cfg.horizon_dt), offset))
            .collect();
        let gt_index = rng.random_range(0..cfg.modes);
        let mut modes = Vec::with_capacity(cfg.modes);
        let mut scores = Vec::with_capacity(cfg.modes);
        for m in 0..cfg.modes {
            if m == gt_index {
                modes.push(future.clone());
                scores.push(1.0);
                continue;
            }
            let dv = uniform(&mut rng, (-2.0, 2.0)) * cfg.mode_noise;
            let dlat = uniform(&mut rng, (-3.5, 3.5)) * cfg.mode_noise;
            modes.push(
                (1..=cfg.t_f)
                    .map(|k| {
                        let t = k as f64 * cfg.horizon_dt;
                        road.point(
                            a.station + (a.speed + dv).max(0.0) * t,
                            offset + dlat * t / horizon,
                        )
                    })
                    .collect(),
            );
            scores.push(uniform(&mut rng, (0.05, 0.9)));
        }
        agents.push(AgentPrediction {
            position: road.point(a.station, offset),
            heading: road.heading(a.station),
            size: a.size,
            confidence: 1.0,
            modes,
            mode_scores: scores,
        });
        futures.push(future);
    }

    let mut map = Vec::new();
    let n = cfg.points_per_vector;
    let [left, right] = road.boundary_offsets();
    for (offset, side) in [(left, Side::Right), (right, Side::Left)] {
        let (lo, hi) = road
            .polyline_span(offset, cfg)
            .ok_or_else(|| Error::Config("boundary does not fit perception range".into()))?;
        map.push(MapVector {
            class: MapClass::RoadBoundary,
            points: Polyline::new(road.sample(offset, lo, hi, n))?,
            confidence: 1.0,
            drivable_side: Some(side),
        });
    }
    for offset in road.divider_offsets() {
        let (lo, hi) = road
            .polyline_span(offset, cfg)
            .ok_or_else(|| Error::Config("divider does not fit perception range".into()))?;
        map.push(MapVector {
            class: MapClass::LaneDivider,
            points: Polyline::new(road.sample(offset, lo, hi, n))?,
            confidence: 1.0,
            drivable_side: None,
        });
    }
    if rng.random_bool(cfg.crossing_probability.clamp(0.0, 1.0)) {
        let s0 = uniform(&mut rng, (8.0, 22.0));
        if let Some(c) = crossing(&road, s0, 3.0, n, cfg) {
            map.push(c);
        }
    }

    let scenario = Scenario {
        map,
        agents,
        agent_gt_futures: futures,
        ego: EgoState {
            velocity: speed,
            acceleration: accel,
            command,
            ..EgoState::default()
        },
        expert,
        horizon_dt: cfg.horizon_dt,
        perception_range: cfg.perception_range,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Closed outline of a crosswalk spanning the road, resampled to `n` points.
fn crossing(
    road: &Road,
    s0: f64,
    depth: f64,
    n: usize,
    cfg: &GeneratorConfig,
) -> Option<MapVector> {
    let [left, right] = road.boundary_offsets();
    let corners = [
        road.point(s0, left),
        road.point(s0, right),
        road.point(s0 + depth, right),
        road.point(s0 + depth, left),
        road.point(s0, left),
    ];
    let lengths: Vec<f64> = corners.windows(2).map(|w| w[0].distance(w[1])).collect();
    let total: f64 = lengths.iter().sum();
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = total * i as f64 / (n - 1) as f64;
        let mut seg = 0;
        while seg + 1 < lengths.len() && d > lengths[seg] {
            d -= lengths[seg];
            seg += 1;
        }
        let u = (d / lengths[seg]).min(1.0);
        pts.push(corners[seg] + (corners[seg + 1] - corners[seg]) * u);
    }
    let (long, lat) = cfg.perception_range;
    if pts
        .iter()
        .any(|p| p.y.abs() > long / 2.0 || p.x.abs() > lat / 2.0)
    {
        return None;
    }
    Some(MapVector {
        class: MapClass::PedestrianCrossing,
        points: Polyline::new(pts).ok()?,
        confidence: 1.0,
        drivable_side: None,
    })
}

//! Vectorized planning constraints and the planning-side loss terms.
//!
//! Every loss returns its value together with the gradient with respect to
//! the plan waypoints. The hinges are evaluated on the zero branch at exact
//! equality (`d == δ`), and every kink uses a zero subgradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{closest_polyline_within, nearest_segment, Point2, Vector2};
use crate::scene::{
    best_mode, filter_agents, filter_map, AgentPrediction, MapClass, MapVector, PlanTrajectory,
    Scenario,
};

/// Frame in which per-axis ego-agent distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentFrame {
    /// Ego frame at planning time: x lateral, y longitudinal.
    #[default]
    Fixed,
    /// Re-aligned to the planned heading at each step.
    PerStep,
}

/// How the lateral and longitudinal agent distances are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSelection {
    /// Independent minimum per axis over all agents in range.
    #[default]
    PerAxis,
    /// Both axes taken from the single Euclidean-nearest agent in range.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintParams {
    pub eps_a: f64,
    pub eps_m: f64,
    pub delta_a: f64,
    pub delta_bd: f64,
    pub delta_dir: f64,
    pub delta_x: f64,
    pub delta_y: f64,
    pub agent_frame: AgentFrame,
    pub agent_selection: AgentSelection,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            eps_a: 0.5,
            eps_m: 0.5,
            delta_a: 3.0,
            delta_bd: 1.0,
            delta_dir: 2.0,
            delta_x: 1.5,
            delta_y: 3.0,
            agent_frame: AgentFrame::Fixed,
            agent_selection: AgentSelection::PerAxis,
        }
    }
}

impl ConstraintParams {
    pub fn validate(&self) -> Result<()> {
        for (name, eps) in [("eps_a", self.eps_a), ("eps_m", self.eps_m)] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        for (name, d) in [
            ("delta_a", self.delta_a),
            ("delta_bd", self.delta_bd),
            ("delta_dir", self.delta_dir),
            ("delta_x", self.delta_x),
            ("delta_y", self.delta_y),
        ] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.delta_a < self.delta_x.max(self.delta_y) {
            log::warn!(
                "delta_a = {} is smaller than max(delta_x, delta_y); some hinges can never activate",
                self.delta_a
            );
        }
        Ok(())
    }
}

/// ω₁..ω₆ of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub map: f64,
    pub motion: f64,
    pub collision: f64,
    pub boundary: f64,
    pub direction: f64,
    pub imitation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            map: 1.0,
            motion: 1.0,
            collision: 1.0,
            boundary: 1.0,
            direction: 1.0,
            imitation: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.map,
            self.motion,
            self.collision,
            self.boundary,
            self.direction,
            self.imitation,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<Vector2>,
}

impl LossResult {
    pub fn zero(t_f: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![Point2::ORIGIN; t_f],
        }
    }

    fn accumulate(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g = *g + *o * weight;
        }
    }

    /// Gradient flattened row-major as `[gx1, gy1, gx2, gy2, ...]`.
    pub fn flat_grad(&self) -> Vec<f64> {
        self.grad.iter().flat_map(|g| [g.x, g.y]).collect()
    }
}

/// Unweighted planning loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub collision: f64,
    pub boundary: f64,
    pub direction: f64,
    pub imitation: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unit axes used to split an ego-agent offset into lateral/longitudinal parts.
struct AxisFrame {
    /// Longitudinal unit vector.
    h: Vector2,
    /// Lateral unit vector (+right of `h`).
    n: Vector2,
    /// `|v|` of the step vector for per-step frames; `None` for fixed axes.
    step_norm: Option<f64>,
}

impl AxisFrame {
    fn fixed() -> Self {
        Self {
            h: Point2::new(0.0, 1.0),
            n: Point2::new(1.0, 0.0),
            step_norm: None,
        }
    }

    fn along(v: Vector2) -> Self {
        let len = v.norm();
        if len < 1e-9 {
            return Self::fixed();
        }
        let h = v * (1.0 / len);
        Self {
            h,
            n: Point2::new(h.y, -h.x),
            step_norm: Some(len),
        }
    }

    /// Gradient of `|delta · axis|` w.r.t. (current waypoint, previous waypoint).
    fn abs_projection_grad(&self, delta: Vector2, lateral: bool) -> (Vector2, Vector2) {
        let axis = if lateral { self.n } else { self.h };
        let s = sign(delta.dot(axis));
        let Some(len) = self.step_norm else {
            return (axis * s, Point2::ORIGIN);
        };
        // d(axis)/dv transposed applied to delta, with v = w_t - w_{t-1}.
        let rotated = if lateral {
            Point2::new(-delta.y, delta.x)
        } else {
            delta
        };
        let proj = rotated - self.h * self.h.dot(rotated);
        let dv = proj * (1.0 / len);
        ((axis + dv) * s, -dv * s)
    }
}

/// Ego-agent collision constraint.
///
/// Candidates at step `t` are agents whose best-mode position lies within
/// `delta_a` of the waypoint; the lateral and longitudinal distances to the
/// candidates feed hinges at `delta_x` and `delta_y`.
pub fn collision_loss(
    plan: &PlanTrajectory,
    agents: &[AgentPrediction],
    params: &ConstraintParams,
) -> LossResult {
    let t_f = plan.len();
    let mut out = LossResult::zero(t_f);
    if t_f == 0 {
        return out;
    }
    let inv = 1.0 / t_f as f64;
    let tracks: Vec<&[Point2]> = agents.iter().map(best_mode).collect();
    let mut prev = Point2::ORIGIN;
    for (t, &w) in plan.waypoints.iter().enumerate() {
        let frame = match params.agent_frame {
            AgentFrame::Fixed => AxisFrame::fixed(),
            AgentFrame::PerStep => AxisFrame::along(w - prev),
        };
        let candidates: Vec<Vector2> = tracks
            .iter()
            .filter_map(|tr| tr.get(t))
            .map(|&a| w - a)
            .filter(|d| d.norm() <= params.delta_a)
            .collect();
        prev = w;
        if candidates.is_empty() {
            continue;
        }
        let pick_min = |key: &dyn Fn(Vector2) -> f64| -> Vector2 {
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if key(c) < key(best) {
                    best = c;
                }
            }
            best
        };
        let lat = |d: Vector2| d.dot(frame.n).abs();
        let lon = |d: Vector2| d.dot(frame.h).abs();
        let (dx_delta, dy_delta) = match params.agent_selection {
            AgentSelection::PerAxis => (pick_min(&lat), pick_min(&lon)),
            AgentSelection::Nearest => {
                let d = pick_min(&|d: Vector2| d.norm());
                (d, d)
            }
        };
        for (delta, lateral, threshold) in [
            (dx_delta, true, params.delta_x),
            (dy_delta, false, params.delta_y),
        ] {
            let d = if lateral { lat(delta) } else { lon(delta) };
            if d < threshold {
                out.value += (threshold - d) * inv;
                let (g_cur, g_prev) = frame.abs_projection_grad(delta, lateral);
                out.grad[t] = out.grad[t] - g_cur * inv;
                if t > 0 {
                    out.grad[t - 1] = out.grad[t - 1] - g_prev * inv;
                }
            }
        }
    }
    out
}

/// Ego-boundary overstepping constraint.
pub fn boundary_loss(
    plan: &PlanTrajectory,
    boundaries: &[MapVector],
    params: &ConstraintParams,
) -> LossResult {
    let t_f = plan.len();
    let mut out = LossResult::zero(t_f);
    if t_f == 0 {
        return out;
    }
    let inv = 1.0 / t_f as f64;
    for (t, &w) in plan.waypoints.iter().enumerate() {
        let mut best: Option<(f64, Point2)> = None;
        for b in boundaries {
            if let Ok(hit) = nearest_segment(w, &b.points) {
                if best.is_none_or(|(d, _)| hit.distance < d) {
                    best = Some((hit.distance, hit.foot));
                }
            }
        }
        let Some((d, foot)) = best else { continue };
        if d < params.delta_bd {
            out.value += (params.delta_bd - d) * inv;
            if d > 0.0 {
                out.grad[t] = (w - foot) * (-inv / d);
            }
        }
    }
    out
}

/// Ego-lane directional constraint.
///
/// The lane vector at step `t` is the winning segment of the closest divider
/// within `delta_dir` of waypoint `t`, in stored point order.
pub fn direction_loss(
    plan: &PlanTrajectory,
    dividers: &[MapVector],
    params: &ConstraintParams,
    origin: Point2,
) -> LossResult {
    let t_f = plan.len();
    let mut out = LossResult::zero(t_f);
    if t_f == 0 {
        return out;
    }
    let inv = 1.0 / t_f as f64;
    let mut prev = origin;
    for (t, &w) in plan.waypoints.iter().enumerate() {
        let v = w - prev;
        prev = w;
        let Some(hit) =
            closest_polyline_within(w, dividers.iter().map(|d| &d.points), params.delta_dir)
        else {
            continue;
        };
        let pts = dividers[hit.index].points.points();
        let lane = pts[hit.segment + 1] - pts[hit.segment];
        let (lane_len, v_len) = (lane.norm(), v.norm());
        if v_len == 0.0 || lane_len == 0.0 {
            continue;
        }
        let u = lane * (1.0 / lane_len);
        let e = v * (1.0 / v_len);
        let c = u.dot(e).clamp(-1.0, 1.0);
        let angle = c.acos();
        out.value += angle * inv;
        let s = (1.0 - c * c).sqrt();
        if s > 0.0 {
            // d acos(u·e) / dv = -(u - c e) / (|v| sin θ)
            let g = (u - e * c) * (-inv / (v_len * s));
            out.grad[t] = out.grad[t] + g;
            if t > 0 {
                out.grad[t - 1] = out.grad[t - 1] - g;
            }
        }
    }
    out
}

/// Mean per-step L1 distance to the expert trajectory.
pub fn imitation_loss(plan: &PlanTrajectory, expert: &[Point2]) -> Result<LossResult> {
    if plan.len() != expert.len() {
        return Err(Error::LengthMismatch {
            expected: expert.len(),
            got: plan.len(),
        });
    }
    let t_f = plan.len();
    let mut out = LossResult::zero(t_f);
    if t_f == 0 {
        return Ok(out);
    }
    let inv = 1.0 / t_f as f64;
    for (t, (&p, &e)) in plan.waypoints.iter().zip(expert).enumerate() {
        let r = p - e;
        out.value += (r.x.abs() + r.y.abs()) * inv;
        out.grad[t] = Point2::new(sign(r.x), sign(r.y)) * inv;
    }
    Ok(out)
}

/// Scene elements that survive confidence filtering, split by role.
#[derive(Debug, Clone)]
pub struct FilteredScene {
    pub agents: Vec<AgentPrediction>,
    pub boundaries: Vec<MapVector>,
    pub dividers: Vec<MapVector>,
}

impl FilteredScene {
    pub fn new(scenario: &Scenario, params: &ConstraintParams) -> Self {
        Self {
            agents: filter_agents(&scenario.agents, params.eps_a),
            boundaries: filter_map(&scenario.map, params.eps_m, Some(MapClass::RoadBoundary)),
            dividers: filter_map(&scenario.map, params.eps_m, Some(MapClass::LaneDivider)),
        }
    }
}

/// ω₃·L_col + ω₄·L_bd + ω₅·L_dir + ω₆·L_imi for one plan.
pub fn total_planning_loss(
    plan: &PlanTrajectory,
    scenario: &Scenario,
    params: &ConstraintParams,
    weights: &LossWeights,
) -> Result<(LossResult, LossBreakdown)> {
    let filtered = FilteredScene::new(scenario, params);
    total_on_filtered(plan, scenario, &filtered, params, weights)
}

pub(crate) fn total_on_filtered(
    plan: &PlanTrajectory,
    scenario: &Scenario,
    filtered: &FilteredScene,
    params: &ConstraintParams,
    weights: &LossWeights,
) -> Result<(LossResult, LossBreakdown)> {
    let col = collision_loss(plan, &filtered.agents, params);
    let bd = boundary_loss(plan, &filtered.boundaries, params);
    let dir = direction_loss(plan, &filtered.dividers, params, scenario.ego.position);
    let imi = imitation_loss(plan, &scenario.expert)?;
    let mut total = LossResult::zero(plan.len());
    total.accumulate(&col, weights.collision);
    total.accumulate(&bd, weights.boundary);
    total.accumulate(&dir, weights.direction);
    total.accumulate(&imi, weights.imitation);
    Ok((
        total,
        LossBreakdown {
            collision: col.value,
            boundary: bd.value,
            direction: dir.value,
            imitation: imi.value,
        },
    ))
}

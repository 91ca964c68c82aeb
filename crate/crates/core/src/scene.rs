//! Vectorized scene model: map elements, agent predictions, ego state,
//! confidence filtering, and scenario files.
//!
//! Agent modes and ground-truth futures are stored as absolute ego-frame
//! positions, one point per future tick (`t = 1..=T_f`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Polyline, Transform2, Vector2};

pub use crate::generator::{generate_scenario, GeneratorConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_T_F: usize = 6;
pub const DEFAULT_HORIZON_DT: f64 = 0.5;
pub const DEFAULT_PERCEPTION_RANGE: (f64, f64) = (60.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    LaneDivider,
    RoadBoundary,
    PedestrianCrossing,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [
        MapClass::LaneDivider,
        MapClass::RoadBoundary,
        MapClass::PedestrianCrossing,
    ];

    pub fn index(self) -> usize {
        match self {
            MapClass::LaneDivider => 0,
            MapClass::RoadBoundary => 1,
            MapClass::PedestrianCrossing => 2,
        }
    }
}

/// Side of a directed polyline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Side of `p` relative to the directed segment `a -> b`; `None` if on the line.
    pub fn of(p: Point2, a: Point2, b: Point2) -> Option<Side> {
        let c = (b - a).cross(p - a);
        if c > 0.0 {
            Some(Side::Left)
        } else if c < 0.0 {
            Some(Side::Right)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapVector {
    pub class: MapClass,
    pub points: Polyline,
    pub confidence: f64,
    /// For road boundaries: which side of the polyline (in point order) is drivable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drivable_side: Option<Side>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPrediction {
    pub position: Point2,
    pub heading: f64,
    /// (length, width) in meters.
    pub size: (f64, f64),
    pub confidence: f64,
    pub modes: Vec<Vec<Point2>>,
    pub mode_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    TurnLeft,
    TurnRight,
    GoStraight,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::TurnLeft, Command::TurnRight, Command::GoStraight];

    pub fn index(self) -> usize {
        match self {
            Command::TurnLeft => 0,
            Command::TurnRight => 1,
            Command::GoStraight => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoState {
    pub position: Point2,
    pub heading: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub steering_angle: f64,
    pub command: Command,
}

impl Default for EgoState {
    fn default() -> Self {
        Self {
            position: Point2::ORIGIN,
            heading: std::f64::consts::FRAC_PI_2,
            velocity: 0.0,
            acceleration: 0.0,
            steering_angle: 0.0,
            command: Command::GoStraight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub map: Vec<MapVector>,
    pub agents: Vec<AgentPrediction>,
    pub agent_gt_futures: Vec<Vec<Point2>>,
    pub ego: EgoState,
    pub expert: Vec<Point2>,
    pub horizon_dt: f64,
    /// (longitudinal extent, lateral extent) in meters, centered on the ego.
    pub perception_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanTrajectory {
    pub waypoints: Vec<Point2>,
}

impl PlanTrajectory {
    pub fn new(waypoints: Vec<Point2>) -> Self {
        Self { waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Row-major `[x1, y1, x2, y2, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        Self::new(
            values
                .chunks_exact(2)
                .map(|c| Point2::new(c[0], c[1]))
                .collect(),
        )
    }
}

impl Scenario {
    pub fn t_f(&self) -> usize {
        self.expert.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t_f = self.t_f();
        if t_f == 0 {
            return Err(Error::Config("expert trajectory is empty".into()));
        }
        if !(self.horizon_dt > 0.0) {
            return Err(Error::Config("horizon_dt must be positive".into()));
        }
        if self.agent_gt_futures.len() != self.agents.len() {
            return Err(Error::LengthMismatch {
                expected: self.agents.len(),
                got: self.agent_gt_futures.len(),
            });
        }
        for (i, agent) in self.agents.iter().enumerate() {
            if agent.modes.is_empty() || agent.modes.len() != agent.mode_scores.len() {
                return Err(Error::Config(format!(
                    "agent {i}: need >= 1 mode with one score each"
                )));
            }
            if let Some(m) = agent.modes.iter().find(|m| m.len() != t_f) {
                return Err(Error::LengthMismatch {
                    expected: t_f,
                    got: m.len(),
                });
            }
            if self.agent_gt_futures[i].len() != t_f {
                return Err(Error::LengthMismatch {
                    expected: t_f,
                    got: self.agent_gt_futures[i].len(),
                });
            }
        }
        Ok(())
    }

    /// Whether `p` lies inside the perception box around the ego.
    pub fn in_perception_range(&self, p: Point2) -> bool {
        let (long, lat) = self.perception_range;
        p.y.abs() <= long / 2.0 && p.x.abs() <= lat / 2.0
    }

    /// Applies a rigid transform to every spatial quantity.
    pub fn transformed(&self, t: &Transform2) -> Scenario {
        let tp = |p: &Point2| t.apply(*p);
        Scenario {
            map: self
                .map
                .iter()
                .map(|m| MapVector {
                    points: m.points.map_points(|p| t.apply(p)),
                    ..m.clone()
                })
                .collect(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentPrediction {
                    position: t.apply(a.position),
                    heading: t.apply_heading(a.heading),
                    modes: a.modes.iter().map(|m| m.iter().map(tp).collect()).collect(),
                    ..a.clone()
                })
                .collect(),
            agent_gt_futures: self
                .agent_gt_futures
                .iter()
                .map(|f| f.iter().map(tp).collect())
                .collect(),
            ego: EgoState {
                position: t.apply(self.ego.position),
                heading: t.apply_heading(self.ego.heading),
                ..self.ego
            },
            expert: self.expert.iter().map(tp).collect(),
            ..self.clone()
        }
    }

    pub fn boundaries(&self) -> impl Iterator<Item = &MapVector> {
        self.map
            .iter()
            .filter(|m| m.class == MapClass::RoadBoundary)
    }
}

/// Keeps map elements with `confidence >= eps_m` (and the given class, if any).
pub fn filter_map(map: &[MapVector], eps_m: f64, class_filter: Option<MapClass>) -> Vec<MapVector> {
    map.iter()
        .filter(|m| m.confidence >= eps_m && class_filter.is_none_or(|c| m.class == c))
        .cloned()
        .collect()
}

pub fn filter_agents(agents: &[AgentPrediction], eps_a: f64) -> Vec<AgentPrediction> {
    agents
        .iter()
        .filter(|a| a.confidence >= eps_a)
        .cloned()
        .collect()
}

/// Index of the highest-scoring mode (first wins on ties).
pub fn best_mode_index(agent: &AgentPrediction) -> usize {
    let mut best = 0;
    for (i, &s) in agent.mode_scores.iter().enumerate().skip(1) {
        if s > agent.mode_scores[best] {
            best = i;
        }
    }
    best
}

pub fn best_mode(agent: &AgentPrediction) -> &[Point2] {
    &agent.modes[best_mode_index(agent)]
}

/// Per-step displacement vectors of a plan, starting from `origin`.
pub fn ego_vectors(plan: &PlanTrajectory, origin: Point2) -> Vec<Vector2> {
    let mut prev = origin;
    plan.waypoints
        .iter()
        .map(|&p| {
            let v = p - prev;
            prev = p;
            v
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    #[serde(rename = "T_f")]
    t_f: usize,
    horizon_dt: f64,
    perception_range: (f64, f64),
    map: Vec<MapVector>,
    agents: Vec<AgentPrediction>,
    agent_gt_futures: Vec<Vec<Point2>>,
    ego: EgoState,
    expert: Vec<Point2>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u32>,
}

pub fn scenario_to_string(s: &Scenario) -> String {
    let file = ScenarioFile {
        version: SCHEMA_VERSION,
        t_f: s.t_f(),
        horizon_dt: s.horizon_dt,
        perception_range: s.perception_range,
        map: s.map.clone(),
        agents: s.agents.clone(),
        agent_gt_futures: s.agent_gt_futures.clone(),
        ego: s.ego,
        expert: s.expert.clone(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("scenario serializes");
    out.push('\n');
    out
}

pub fn scenario_from_str(text: &str, path: &Path) -> Result<Scenario> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
    match probe.version {
        Some(SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found,
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "missing field `version`".into(),
            })
        }
    }
    let file: ScenarioFile = serde_json::from_str(text).map_err(parse_err)?;
    if file.expert.len() != file.t_f {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!(
                "field `expert` has {} points but T_f = {}",
                file.expert.len(),
                file.t_f
            ),
        });
    }
    let scenario = Scenario {
        map: file.map,
        agents: file.agents,
        agent_gt_futures: file.agent_gt_futures,
        ego: file.ego,
        expert: file.expert,
        horizon_dt: file.horizon_dt,
        perception_range: file.perception_range,
    };
    scenario.validate().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(scenario)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scenario_to_string(scenario)).map_err(|e| Error::io(path, e))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scenario_from_str(&text, path)
}

//! Design-choice ablations: train one model per arm and training seed, then
//! score every model on one fixed evaluation set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintParams, LossWeights};
use crate::error::{Error, Result};
use crate::interact::InteractionConfig;
use crate::learning::{predict_plans, scenario_set, train, Objective, TrainConfig};
use crate::metrics::{evaluate, first_collision_tick, MetricsConfig, PlanMetrics, METRIC_COLUMNS};
use crate::scene::GeneratorConfig;

pub const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub agent_interaction: bool,
    pub map_interaction: bool,
    pub boundary: bool,
    pub direction: bool,
    pub collision: bool,
}

impl ArmSpec {
    pub fn new(name: &str, toggles: [bool; 5]) -> Self {
        let [agent_interaction, map_interaction, boundary, direction, collision] = toggles;
        Self {
            name: name.to_string(),
            agent_interaction,
            map_interaction,
            boundary,
            direction,
            collision,
        }
    }

    /// The seven design-choice rows: interaction toggles, then constraint
    /// toggles in (overstep, direction, collision) order.
    pub fn design_table() -> Vec<ArmSpec> {
        vec![
            ArmSpec::new("1", [false, false, true, true, true]),
            ArmSpec::new("2", [true, false, true, true, true]),
            ArmSpec::new("3", [true, true, false, false, false]),
            ArmSpec::new("4", [true, true, true, false, false]),
            ArmSpec::new("5", [true, true, false, true, false]),
            ArmSpec::new("6", [true, true, false, false, true]),
            ArmSpec::new("7", [true, true, true, true, true]),
        ]
    }

    pub fn apply(
        &self,
        interact: &InteractionConfig,
        weights: &LossWeights,
    ) -> (InteractionConfig, LossWeights) {
        let interact = InteractionConfig {
            agent_interaction: self.agent_interaction,
            map_interaction: self.map_interaction,
            ..interact.clone()
        };
        let off = |on: bool, w: f64| if on { w } else { 0.0 };
        let weights = LossWeights {
            boundary: off(self.boundary, weights.boundary),
            direction: off(self.direction, weights.direction),
            collision: off(self.collision, weights.collision),
            ..weights.clone()
        };
        (interact, weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub arms: Vec<ArmSpec>,
    /// One model per arm and seed; metrics are averaged over seeds.
    pub train_seeds: Vec<u64>,
    pub eval_scenarios: usize,
    pub eval_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arms: ArmSpec::design_table(),
            train_seeds: vec![0, 1, 2],
            eval_scenarios: 200,
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: ArmSpec,
    /// Seed-averaged metrics.
    pub metrics: PlanMetrics,
    /// Colliding evaluation samples within the full horizon, summed over
    /// training seeds.
    pub collisions: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ArmResult>,
}

pub struct AblationSetup<'a> {
    pub train: &'a TrainConfig,
    pub generator: &'a GeneratorConfig,
    pub interact: &'a InteractionConfig,
    pub constraints: &'a ConstraintParams,
    pub weights: &'a LossWeights,
    pub metrics: &'a MetricsConfig,
}

pub fn ablation_report(setup: &AblationSetup, config: &AblationConfig) -> Result<AblationReport> {
    if config.train_seeds.is_empty() {
        return Err(Error::Config("ablation: train_seeds is empty".into()));
    }
    let eval_set = scenario_set(
        config.eval_scenarios,
        config.eval_seed,
        EVAL_STREAM,
        setup.generator,
    )?;
    let jobs: Vec<(usize, u64)> = (0..config.arms.len())
        .flat_map(|a| config.train_seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs: Vec<(PlanMetrics, usize)> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let (interact, weights) = config.arms[a].apply(setup.interact, setup.weights);
            let objective = Objective {
                interact,
                constraints: setup.constraints.clone(),
                weights,
                focal_gamma: setup.train.focal_gamma,
                focal_alpha: setup.train.focal_alpha,
            };
            let train_cfg = TrainConfig {
                seed,
                ..setup.train.clone()
            };
            let outcome = train(&train_cfg, setup.generator, &objective)?;
            let plans = predict_plans(&eval_set, &outcome.params, &objective.interact)?;
            let metrics = evaluate(&eval_set, &plans, setup.metrics)?;
            let collisions = eval_set
                .iter()
                .zip(&plans)
                .filter(|(s, p)| first_collision_tick(s, p, setup.metrics.ego_size).is_some())
                .count();
            Ok((metrics, collisions))
        })
        .collect::<Result<_>>()?;

    let n = config.train_seeds.len();
    let rows = config
        .arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let chunk = &runs[a * n..(a + 1) * n];
            ArmResult {
                arm: arm.clone(),
                metrics: PlanMetrics::mean(chunk.iter().map(|(m, _)| m)),
                collisions: chunk.iter().map(|(_, c)| c).sum(),
                evaluated: eval_set.len() * n,
            }
        })
        .collect();
    Ok(AblationReport { rows })
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.arm.name == name)
    }

    pub fn to_delimited(&self) -> String {
        let mut out = String::from("id,agent_inter,map_inter,overstep_const,dir_const,col_const");
        for c in METRIC_COLUMNS {
            write!(out, ",{c}").unwrap();
        }
        out.push_str(",overstep,collisions,evaluated\n");
        for r in &self.rows {
            let a = &r.arm;
            write!(
                out,
                "{},{},{},{},{},{}",
                a.name,
                a.agent_interaction as u8,
                a.map_interaction as u8,
                a.boundary as u8,
                a.direction as u8,
                a.collision as u8
            )
            .unwrap();
            for v in r.metrics.columns() {
                write!(out, ",{v}").unwrap();
            }
            writeln!(
                out,
                ",{},{},{}",
                r.metrics.overstep, r.collisions, r.evaluated
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<6} {:>5} {:>5} {:>5} {:>5} {:>5} | {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6}",
            "ID", "Agent", "Map", "Bd", "Dir", "Col", "L2 1s", "2s", "3s", "Avg", "Col 1s", "2s", "3s", "Avg"
        )
        .unwrap();
        for r in &self.rows {
            let a = &r.arm;
            let c = r.metrics.columns();
            writeln!(
                out,
                "{:<6} {:>5} {:>5} {:>5} {:>5} {:>5} | {:>6.3} {:>6.3} {:>6.3} {:>6.3} | {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
                a.name,
                mark(a.agent_interaction),
                mark(a.map_interaction),
                mark(a.boundary),
                mark(a.direction),
                mark(a.collision),
                c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]
            )
            .unwrap();
        }
        out
    }
}

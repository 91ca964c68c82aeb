//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vecplan::ablation::AblationConfig;
use vecplan::constraints::{ConstraintParams, LossWeights};
use vecplan::interact::InteractionConfig;
use vecplan::learning::TrainConfig;
use vecplan::metrics::MetricsConfig;
use vecplan::scene::GeneratorConfig;
use vecplan::simulator::SimConfig;

use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "VECPLAN_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    /// Trained interaction network (needs a checkpoint).
    Model,
    /// Constant-velocity seed refined against the planning constraints.
    #[default]
    Refine,
    Expert,
    ConstantVelocity,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub kind: PlannerKind,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Scenarios produced by `generate` or built on the fly when a command
    /// gets no scenario files.
    pub scenarios: usize,
    pub generator: GeneratorConfig,
    pub interact: InteractionConfig,
    pub train: TrainConfig,
    pub constraints: ConstraintParams,
    pub weights: LossWeights,
    pub planner: PlannerSection,
    pub simulator: SimConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            scenarios: 10,
            generator: GeneratorConfig::default(),
            interact: InteractionConfig::default(),
            train: TrainConfig::default(),
            constraints: ConstraintParams::default(),
            weights: LossWeights::default(),
            planner: PlannerSection::default(),
            simulator: SimConfig::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn parse_error(path: &Path, message: impl ToString) -> CliError {
    vecplan::Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
    .into()
}

/// Sets `key.path = value` inside a TOML table, creating tables on the way.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let key = key.trim();
    let raw = raw.trim();
    // Bare words are taken as strings so `--set planner.kind=expert` works.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides, then fills
    /// defaults and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let label = path.unwrap_or(Path::new("<overrides>"));
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| vecplan::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| parse_error(p, e.message()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| parse_error(label, e.message()))?;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.interact.validate()?;
        self.train.validate()?;
        self.constraints.validate()?;
        self.weights.validate()?;
        self.simulator.refine.validate()?;
        if self.interact.t_f != self.generator.t_f {
            return Err(vecplan::Error::Config(format!(
                "interact.T_f = {} but generator.T_f = {}",
                self.interact.t_f, self.generator.t_f
            ))
            .into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Output directory, placed under the override root when one is set
    /// and the configured path is relative.
    pub fn output_root(&self, env_root: Option<&Path>) -> PathBuf {
        match env_root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let c = RunConfig::resolve(
            None,
            &[
                "train.epochs=3".into(),
                "planner.kind=expert".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.planner.kind, PlannerKind::Expert);
        assert_eq!(c.train.seed, 9);
        let err = RunConfig::resolve(None, &["train.epoch=3".into()]).unwrap_err();
        assert_eq!(err.category(), "parse");
    }

    #[test]
    fn paper_thresholds_are_defaults() {
        let c = RunConfig::default().constraints;
        assert_eq!((c.eps_a, c.eps_m), (0.5, 0.5));
        assert_eq!((c.delta_a, c.delta_bd, c.delta_dir), (3.0, 1.0, 2.0));
        assert_eq!((c.delta_x, c.delta_y), (1.5, 3.0));
    }
}

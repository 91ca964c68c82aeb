//! Python bindings: scenarios, constraint losses, the interaction planner,
//! training, closed-loop simulation and metrics.

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vecplan::constraints::{total_planning_loss, ConstraintParams, LossWeights};
use vecplan::geometry::{self, Point2};
use vecplan::interact::{forward_plan, InteractionConfig, InteractionParams};
use vecplan::learning::{self, Objective, TrainConfig};
use vecplan::metrics::{self, MetricsConfig};
use vecplan::scene::{self, GeneratorConfig, PlanTrajectory};
use vecplan::simulator::{run_closed_loop, Planner, RefineConfig, SimConfig};

fn to_py(e: vecplan::Error) -> PyErr {
    match &e {
        vecplan::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        vecplan::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Parses an optional JSON object into a config, falling back to defaults.
fn config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn points(v: &[Point2]) -> Vec<(f64, f64)> {
    v.iter().map(|p| (p.x, p.y)).collect()
}

fn plan_from(v: Vec<(f64, f64)>) -> PlanTrajectory {
    PlanTrajectory::new(v.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
}

/// A driving scene in the ego frame (+y forward, +x right).
#[pyclass(name = "Scenario", module = "vecplan", frozen, from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: scene::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Generates the scene for `seed`; `config` is an optional JSON object of
    /// generator settings.
    #[staticmethod]
    #[pyo3(signature = (seed, config=None))]
    fn generate(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: GeneratorConfig = self::config(config)?;
        scene::generate_scenario(seed, &cfg)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        scene::scenario_from_str(text, std::path::Path::new("<python>"))
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        scene::load_scenario(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        scene::save_scenario(&self.inner, path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        scene::scenario_to_string(&self.inner)
    }

    #[getter]
    fn t_f(&self) -> usize {
        self.inner.t_f()
    }

    #[getter]
    fn horizon_dt(&self) -> f64 {
        self.inner.horizon_dt
    }

    #[getter]
    fn expert(&self) -> Vec<(f64, f64)> {
        points(&self.inner.expert)
    }

    #[getter]
    fn num_agents(&self) -> usize {
        self.inner.agents.len()
    }

    #[getter]
    fn num_map_elements(&self) -> usize {
        self.inner.map.len()
    }

    #[getter]
    fn command(&self) -> String {
        format!("{:?}", self.inner.ego.command)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(agents={}, map_elements={}, T_f={})",
            self.inner.agents.len(),
            self.inner.map.len(),
            self.inner.t_f()
        )
    }
}

/// Interaction planner parameters plus their architecture config.
#[pyclass(name = "Model", module = "vecplan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: InteractionParams,
    config: InteractionConfig,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (seed, config=None))]
    fn init(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let config: InteractionConfig = self::config(config)?;
        let params = InteractionParams::init(&config, seed).map_err(to_py)?;
        Ok(Self { params, config })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: &str, config: Option<&str>) -> PyResult<Self> {
        let config: InteractionConfig = self::config(config)?;
        let params = InteractionParams::load(path, &config).map_err(to_py)?;
        Ok(Self { params, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.params.save(path).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Planned waypoints for one scenario.
    fn plan(&self, scenario: &PyScenario) -> PyResult<Vec<(f64, f64)>> {
        let (plan, _) = forward_plan(&scenario.inner, &self.params, &self.config).map_err(to_py)?;
        Ok(points(&plan.waypoints))
    }
}

/// Unsigned angle between two vectors in `[0, pi]`.
#[pyfunction]
fn angular_difference(v1: (f64, f64), v2: (f64, f64)) -> PyResult<f64> {
    geometry::angular_difference(Point2::new(v1.0, v1.1), Point2::new(v2.0, v2.1)).map_err(to_py)
}

#[pyfunction]
fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let pt = |v: (f64, f64)| Point2::new(v.0, v.1);
    geometry::point_segment_distance(pt(p), pt(a), pt(b))
}

/// Weighted planning loss of `plan` on `scenario`.
///
/// Returns `(total, gradient, breakdown)` where breakdown maps each
/// unweighted term to its value. `constraints` and `weights` are optional
/// JSON objects.
#[pyfunction]
#[pyo3(signature = (plan, scenario, constraints=None, weights=None))]
fn planning_loss<'py>(
    py: Python<'py>,
    plan: Vec<(f64, f64)>,
    scenario: &PyScenario,
    constraints: Option<&str>,
    weights: Option<&str>,
) -> PyResult<(f64, Vec<(f64, f64)>, Bound<'py, PyDict>)> {
    let params: ConstraintParams = config(constraints)?;
    params.validate().map_err(to_py)?;
    let weights: LossWeights = config(weights)?;
    let (loss, parts) =
        total_planning_loss(&plan_from(plan), &scenario.inner, &params, &weights).map_err(to_py)?;
    let breakdown = PyDict::new(py);
    breakdown.set_item("collision", parts.collision)?;
    breakdown.set_item("boundary", parts.boundary)?;
    breakdown.set_item("direction", parts.direction)?;
    breakdown.set_item("imitation", parts.imitation)?;
    Ok((loss.value, points(&loss.grad), breakdown))
}

/// Trains a planner. Returns the model and the per-epoch log as CSV text.
#[pyfunction]
#[pyo3(signature = (seed=0, train=None, generator=None, interact=None, constraints=None, weights=None))]
fn train(
    py: Python<'_>,
    seed: u64,
    train: Option<&str>,
    generator: Option<&str>,
    interact: Option<&str>,
    constraints: Option<&str>,
    weights: Option<&str>,
) -> PyResult<(PyModel, String)> {
    let mut train_cfg: TrainConfig = config(train)?;
    train_cfg.seed = seed;
    let generator: GeneratorConfig = config(generator)?;
    let objective = Objective {
        interact: config(interact)?,
        constraints: config(constraints)?,
        weights: config(weights)?,
        focal_gamma: train_cfg.focal_gamma,
        focal_alpha: train_cfg.focal_alpha,
    };
    let outcome = py
        .detach(|| learning::train(&train_cfg, &generator, &objective))
        .map_err(to_py)?;
    Ok((
        PyModel {
            params: outcome.params,
            config: objective.interact,
        },
        outcome.log.to_delimited(),
    ))
}

/// Closed-loop rollout. `planner` is a Model or one of "expert",
/// "constant_velocity", "refine". Returns the rollout log as CSV text.
#[pyfunction]
#[pyo3(signature = (scenario, planner, ticks=None))]
fn simulate(
    scenario: &PyScenario,
    planner: &Bound<'_, PyAny>,
    ticks: Option<usize>,
) -> PyResult<String> {
    let constraints = ConstraintParams::default();
    let weights = LossWeights::default();
    let planner = if let Ok(model) = planner.cast::<PyModel>() {
        let m = model.get();
        Planner::Model {
            params: m.params.clone(),
            config: m.config.clone(),
        }
    } else {
        match planner.extract::<String>()?.as_str() {
            "expert" => Planner::Expert,
            "constant_velocity" => Planner::ConstantVelocity,
            "refine" => Planner::Refine {
                constraints: constraints.clone(),
                weights,
                refine: RefineConfig::default(),
            },
            other => return Err(PyValueError::new_err(format!("unknown planner `{other}`"))),
        }
    };
    let config = SimConfig {
        ticks,
        ..SimConfig::default()
    };
    run_closed_loop(&scenario.inner, &planner, &constraints, &weights, &config)
        .map(|log| log.to_delimited())
        .map_err(to_py)
}

/// Open-loop metrics for plans against their scenarios' experts.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    scenarios: Vec<PyScenario>,
    plans: Vec<Vec<(f64, f64)>>,
) -> PyResult<Bound<'py, PyDict>> {
    let scenarios: Vec<_> = scenarios.into_iter().map(|s| s.inner).collect();
    let plans: Vec<_> = plans.into_iter().map(plan_from).collect();
    let m = metrics::evaluate(&scenarios, &plans, &MetricsConfig::default()).map_err(to_py)?;
    let out = PyDict::new(py);
    for (name, value) in metrics::METRIC_COLUMNS.iter().zip(m.columns()) {
        out.set_item(*name, value)?;
    }
    out.set_item("overstep", m.overstep)?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "vecplan")]
fn vecplan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(angular_difference, m)?)?;
    m.add_function(wrap_pyfunction!(point_segment_distance, m)?)?;
    m.add_function(wrap_pyfunction!(planning_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

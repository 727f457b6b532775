//! Python bindings for the grid environment, action spaces, Q-networks and
//! batch evaluation.

use std::path::PathBuf;
use std::sync::Arc;

use gridtopo as core;
use core::actions::{self, ActionManifest};
use core::chronics::{self, SyntheticConfig};
use core::env::EnvConfig;
use core::evaluation::{self as eval, EWConfig};
use core::nn;
use core::powerflow::FlowMode;
use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn env_config(mode: &str) -> PyResult<EnvConfig> {
    let mode = match mode {
        "ac" => FlowMode::Ac,
        "dc" => FlowMode::Dc,
        other => return Err(PyValueError::new_err(format!("unknown flow mode {other:?}, expected \"ac\" or \"dc\""))),
    };
    Ok(EnvConfig {
        mode,
        ..EnvConfig::default()
    })
}

/// Static network description.
#[pyclass(module = "gridtopo", frozen, from_py_object)]
#[derive(Clone)]
struct Grid {
    inner: Arc<core::grid::GridModel>,
}

#[pymethods]
impl Grid {
    /// The bundled 14-bus test system.
    #[staticmethod]
    fn ieee14() -> Self {
        Grid {
            inner: Arc::new(core::grid::GridModel::ieee14()),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Grid {
            inner: Arc::new(core::grid::GridModel::from_json(text).map_err(err)?),
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn n_lines(&self) -> usize {
        self.inner.lines().len()
    }

    #[getter]
    fn n_substations(&self) -> usize {
        self.inner.substations().len()
    }

    #[getter]
    fn observation_len(&self) -> usize {
        core::env::observation_len(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid({:?}, {} substations, {} lines)",
            self.inner.name(),
            self.inner.substations().len(),
            self.inner.lines().len()
        )
    }
}

/// One time-series scenario.
#[pyclass(module = "gridtopo", frozen, from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: Arc<chronics::Chronic>,
}

#[pymethods]
impl Scenario {
    /// Reproducible synthetic scenario.
    #[staticmethod]
    #[pyo3(signature = (grid, seed, days = 1, load_scale = 1.0, maintenance_per_day = 0.0))]
    fn synthetic(grid: &Grid, seed: u64, days: usize, load_scale: f64, maintenance_per_day: f64) -> PyResult<Self> {
        let cfg = SyntheticConfig {
            seed,
            days,
            load_scale,
            maintenance_per_day,
            ..SyntheticConfig::default()
        };
        Ok(Scenario {
            inner: Arc::new(chronics::generate_synthetic(&grid.inner, &cfg).map_err(err)?),
        })
    }

    /// Read a scenario directory written by `gen-chronics` or `write`.
    #[staticmethod]
    fn load(path: PathBuf, grid: &Grid) -> PyResult<Self> {
        Ok(Scenario {
            inner: Arc::new(chronics::load_chronic(path, &grid.inner).map_err(err)?),
        })
    }

    fn write(&self, grid: &Grid, path: PathBuf) -> PyResult<()> {
        self.inner.write(&grid.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Ordered list of discrete actions; index 0 is do-nothing.
#[pyclass(module = "gridtopo", frozen, from_py_object)]
#[derive(Clone)]
struct ActionSpace {
    inner: Arc<actions::ActionSpace>,
    grid: Arc<core::grid::GridModel>,
}

#[pymethods]
impl ActionSpace {
    /// Every legal single action on the default topology.
    #[staticmethod]
    fn full(grid: &Grid) -> Self {
        ActionSpace {
            inner: Arc::new(actions::build_full_space(&grid.inner)),
            grid: grid.inner.clone(),
        }
    }

    /// Load an action manifest JSON file.
    #[staticmethod]
    fn load(path: PathBuf, grid: &Grid) -> PyResult<Self> {
        let manifest = ActionManifest::load(path).map_err(err)?;
        Ok(ActionSpace {
            inner: Arc::new(actions::ActionSpace::from_manifest(&grid.inner, &manifest).map_err(err)?),
            grid: grid.inner.clone(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_manifest(&self.grid).save(path).map_err(err)
    }

    /// Hex digest identifying the space.
    fn hash(&self) -> String {
        self.inner.to_manifest(&self.grid).hash_hex()
    }

    fn describe(&self, index: usize) -> PyResult<String> {
        self.inner
            .get(index)
            .map(|a| a.describe(&self.grid))
            .ok_or_else(|| PyIndexError::new_err(format!("action {index} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Step-by-step environment over one scenario, driven by action indices.
#[pyclass(module = "gridtopo")]
struct Environment {
    inner: core::env::Environment,
    space: Arc<actions::ActionSpace>,
}

fn result_dict<'py>(py: Python<'py>, r: &core::env::StepResult) -> PyResult<Bound<'py, PyDict>> {
    let info = PyDict::new(py);
    info.set_item("t", r.info.t)?;
    info.set_item("step_score", r.info.step_score)?;
    info.set_item("tripped_lines", r.info.tripped_lines.clone())?;
    info.set_item("game_over", r.info.game_over.map(|c| c.as_str()))?;
    info.set_item("legal", r.info.legality.legal)?;
    info.set_item("rho", r.info.rho.clone())?;
    Ok(info)
}

impl Environment {
    fn action(&self, index: usize) -> PyResult<&actions::Action> {
        self.space
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("action {index} out of range")))
    }
}

#[pymethods]
impl Environment {
    #[new]
    #[pyo3(signature = (grid, scenario, space, mode = "ac"))]
    fn new(grid: &Grid, scenario: &Scenario, space: &ActionSpace, mode: &str) -> PyResult<Self> {
        let inner = core::env::Environment::new(grid.inner.clone(), scenario.inner.clone(), env_config(mode)?).map_err(err)?;
        Ok(Environment {
            inner,
            space: space.inner.clone(),
        })
    }

    fn observe(&self) -> Vec<f64> {
        self.inner.observe()
    }

    /// Apply an action; returns `(observation, reward, done, info)`.
    fn step<'py>(&mut self, py: Python<'py>, action: usize) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let a = self.action(action)?.clone();
        let r = self.inner.step(&a).map_err(err)?;
        let info = result_dict(py, &r)?;
        Ok((r.observation, r.reward, r.done, info))
    }

    /// One-step lookahead on forecast injections; the state is unchanged.
    fn simulate<'py>(&self, py: Python<'py>, action: usize) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let r = self.inner.simulate(self.action(action)?).map_err(err)?;
        let info = result_dict(py, &r)?;
        Ok((r.observation, r.reward, r.done, info))
    }

    fn is_legal(&self, action: usize) -> PyResult<bool> {
        Ok(actions::is_legal(&self.inner, self.action(action)?).legal)
    }

    fn warning(&self, lam: f64) -> bool {
        eval::warning_flag(&self.inner, lam)
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t()
    }

    #[getter]
    fn rho(&self) -> Vec<f64> {
        self.inner.rho().to_vec()
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn game_over(&self) -> Option<&'static str> {
        self.inner.game_over().map(|c| c.as_str())
    }

    #[getter]
    fn chronic_score(&self) -> f64 {
        self.inner.chronic_score()
    }
}

/// Dueling Q-network loaded from a weights file.
#[pyclass(module = "gridtopo", frozen, from_py_object)]
#[derive(Clone)]
struct Network {
    inner: Arc<nn::Network>,
}

#[pymethods]
impl Network {
    /// Fresh network with the given layer sizes.
    #[new]
    #[pyo3(signature = (input_dim, n_actions, trunk = vec![128, 64], head_hidden = 32, seed = 0))]
    fn new(input_dim: usize, n_actions: usize, trunk: Vec<usize>, head_hidden: usize, seed: u64) -> PyResult<Self> {
        let cfg = nn::NetConfig {
            input_dim,
            trunk,
            head_hidden,
            n_actions,
            seed,
            init: Default::default(),
        };
        Ok(Network {
            inner: Arc::new(nn::Network::new(cfg).map_err(err)?),
        })
    }

    /// Load weights; when `space` is given its hash must match the file.
    #[staticmethod]
    #[pyo3(signature = (path, space = None))]
    fn load(path: PathBuf, space: Option<&ActionSpace>) -> PyResult<Self> {
        let hash = space.map(|s| s.inner.to_manifest(&s.grid).hash());
        let (net, _) = nn::Network::load(&path, hash.as_ref()).map_err(err)?;
        Ok(Network { inner: Arc::new(net) })
    }

    fn save(&self, path: PathBuf, space: &ActionSpace) -> PyResult<()> {
        let hash = space.inner.to_manifest(&space.grid).hash();
        self.inner.save(&path, &hash).map_err(err)
    }

    fn q_values(&self, observation: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.q_single(&observation).map_err(err)
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.config().n_actions
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

fn agent(kind: &str, network: Option<&Network>, width: usize, lam: f64) -> PyResult<eval::Agent> {
    let net = || {
        network
            .map(|n| n.inner.clone())
            .ok_or_else(|| PyValueError::new_err(format!("agent {kind:?} needs a network")))
    };
    Ok(match kind {
        "do-nothing" => eval::Agent::DoNothing,
        "greedy" => eval::Agent::Greedy,
        "guided" => eval::Agent::Guided { net: net()?, width },
        "ew" => eval::Agent::EarlyWarning {
            net: net()?,
            config: EWConfig {
                lambda: lam,
                guided_width: width,
                ..EWConfig::default()
            },
        },
        other => return Err(PyValueError::new_err(format!("unknown agent {other:?}"))),
    })
}

/// Run an agent on named scenarios. Returns one dict per scenario.
#[pyfunction]
#[pyo3(signature = (grid, scenarios, space, agent_kind = "do-nothing", network = None, width = 10, lam = 0.885, mode = "ac"))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    grid: &Grid,
    scenarios: Vec<(String, Scenario)>,
    space: &ActionSpace,
    agent_kind: &str,
    network: Option<&Network>,
    width: usize,
    lam: f64,
    mode: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let agent = agent(agent_kind, network, width, lam)?;
    let cfg = env_config(mode)?;
    let scenarios: Vec<_> = scenarios.into_iter().map(|(n, s)| (n, s.inner)).collect();
    let report = py.detach(|| eval::evaluate(&grid.inner, &scenarios, &cfg, &space.inner, &agent));
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("scenario", &r.scenario_id)?;
            d.set_item("steps", r.steps)?;
            d.set_item("score", r.chronic_score)?;
            d.set_item("game_over", r.game_over)?;
            d.set_item("cause", r.cause.map(|c| c.as_str()))?;
            d.set_item("mean_decision_ms", r.mean_decision_ms)?;
            d.set_item("error", r.error.clone())?;
            Ok(d)
        })
        .collect()
}

#[pymodule(name = "gridtopo")]
fn gridtopo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<ActionSpace>()?;
    m.add_class::<Environment>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("LAMBDA_GRID", eval::LAMBDA_GRID.to_vec())?;
    Ok(())
}

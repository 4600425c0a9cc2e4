//! Python bindings: environments, datasets, planners and the two training stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffplan::config::Config;
use diffplan::datagen::{generate_dataset, Dataset};
use diffplan::diffusion::StateHistory;
use diffplan::eval::{evaluate, DiffusionPolicy};
use diffplan::finetune::{finetune_task, FinetuneOutputs};
use diffplan::pretrain::{pretrain, Outputs};
use diffplan::tasks::{suite_by_name, EnvState, TaskSpec, TaskSuite};
use diffplan::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Format(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn suite_for(config: &Config) -> PyResult<TaskSuite> {
    suite_by_name(&config.env.suite, config.env.episode_length).map_err(py_err)
}

/// Run configuration: TOML file plus `key=value` overrides.
#[pyclass(name = "Config", module = "pydiffplan", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::load(path.as_deref(), &overrides).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }
}

/// One episode of a task from the default suite.
#[pyclass(name = "Env", module = "pydiffplan")]
struct PyEnv {
    spec: TaskSpec,
    state: EnvState,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task_id, seed, episode_length=diffplan::tasks::DEFAULT_EPISODE_LENGTH))]
    fn new(task_id: &str, seed: u64, episode_length: usize) -> PyResult<Self> {
        let suite = suite_by_name("default", episode_length).map_err(py_err)?;
        let spec = suite.get(task_id).map_err(py_err)?.clone();
        let state = spec.reset(seed);
        Ok(PyEnv { spec, state })
    }

    #[getter]
    fn state(&self) -> Vec<f64> {
        self.state.s.clone()
    }

    #[getter]
    fn goal(&self) -> Vec<f64> {
        self.state.goal.to_vec()
    }

    #[getter]
    fn done(&self) -> bool {
        self.state.done
    }

    /// Applies one action; returns `(reward, done, success)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(f64, bool, bool)> {
        let out = self.spec.step(&mut self.state, &action).map_err(py_err)?;
        Ok((out.reward, out.done, out.success))
    }

    /// The scripted controller's action for the current state.
    fn scripted_action(&self) -> Vec<f64> {
        self.spec.scripted_action(&self.state).to_vec()
    }
}

#[pyclass(name = "Dataset", module = "pydiffplan")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (episodes_per_task, noise=0.5, seed=0, episode_length=diffplan::tasks::DEFAULT_EPISODE_LENGTH))]
    fn generate(episodes_per_task: usize, noise: f64, seed: u64, episode_length: usize) -> PyResult<Self> {
        let suite = suite_by_name("default", episode_length).map_err(py_err)?;
        Ok(PyDataset {
            inner: generate_dataset(&suite, episodes_per_task, noise, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::read(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Per task: `(episodes, success_rate, mean_return)`.
    fn stats(&self) -> Vec<(String, usize, f64, f64)> {
        self.inner
            .stats()
            .into_iter()
            .map(|(id, s)| (id, s.episodes, s.success_rate, s.mean_return))
            .collect()
    }
}

#[pyclass(name = "Planner", module = "pydiffplan", skip_from_py_object)]
#[derive(Clone)]
struct PyPlanner {
    inner: diffplan::planner::Planner,
}

#[pymethods]
impl PyPlanner {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPlanner {
            inner: diffplan::planner::Planner::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.config().horizon
    }

    #[getter]
    fn action_horizon(&self) -> usize {
        self.inner.action_horizon
    }

    #[getter]
    fn obs_horizon(&self) -> usize {
        self.inner.config().obs_horizon
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.config().state_dim
    }

    /// Draws one `H x A` action sequence for a `T_o x S` state history
    /// using the evaluation sampler of `config`.
    #[pyo3(signature = (history, seed, config=None))]
    fn sample(&self, history: Vec<Vec<f64>>, seed: u64, config: Option<&PyConfig>) -> PyResult<Vec<Vec<f64>>> {
        let c = self.inner.config();
        if history.len() != c.obs_horizon || history.iter().any(|r| r.len() != c.state_dim) {
            return Err(PyValueError::new_err(format!(
                "history must be {} rows of {} states",
                c.obs_horizon, c.state_dim
            )));
        }
        let default = Config::default();
        let config = config.map_or(&default, |c| &c.inner);
        let plan = config.eval_plan(&self.inner.schedule).map_err(py_err)?;
        let s = StateHistory::from_rows(&history).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, _) = self.inner.sample(&s, &plan, &mut rng, false).map_err(py_err)?;
        Ok(a.to_rows())
    }
}

/// Pre-trains on `dataset`; returns the planner and `(step, loss, loss_avg)` rows.
#[pyfunction]
#[pyo3(name = "pretrain", signature = (config, dataset, checkpoint=None, metrics=None))]
fn py_pretrain(
    py: Python<'_>,
    config: &PyConfig,
    dataset: &PyDataset,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> PyResult<(PyPlanner, Vec<(usize, f64, f64)>)> {
    let suite = suite_for(&config.inner)?;
    let out = Outputs { checkpoint, metrics };
    let o = py
        .detach(|| pretrain(&config.inner, &dataset.inner, &suite, &out))
        .map_err(py_err)?;
    let rows = o.rows.iter().map(|r| (r.step, r.loss, r.loss_avg)).collect();
    Ok((PyPlanner { inner: o.planner }, rows))
}

/// Fine-tunes a copy of `planner` on one task; returns the new planner and
/// `(episode, env_steps, episode_return, rolling_success_rate)` rows.
#[pyfunction]
#[pyo3(name = "finetune", signature = (planner, task_id, config, checkpoint=None, metrics=None))]
fn py_finetune(
    py: Python<'_>,
    planner: &PyPlanner,
    task_id: &str,
    config: &PyConfig,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> PyResult<(PyPlanner, Vec<(usize, usize, f64, f64)>)> {
    let suite = suite_for(&config.inner)?;
    let spec = suite.get(task_id).map_err(py_err)?;
    let out = FinetuneOutputs { checkpoint, metrics };
    let start = planner.inner.clone();
    let o = py
        .detach(|| finetune_task(start, spec, &config.inner, &out))
        .map_err(py_err)?;
    let rows = o
        .rows
        .iter()
        .map(|r| (r.episode, r.env_steps, r.episode_return, r.rolling_success_rate))
        .collect();
    Ok((PyPlanner { inner: o.planner }, rows))
}

/// Returns `(success_rate, mean_return)` over `episodes` seeded episodes.
#[pyfunction]
#[pyo3(name = "evaluate", signature = (planner, task_id, episodes=50, seed=0, config=None))]
fn py_evaluate(
    py: Python<'_>,
    planner: &PyPlanner,
    task_id: &str,
    episodes: usize,
    seed: u64,
    config: Option<&PyConfig>,
) -> PyResult<(f64, f64)> {
    let default = Config::default();
    let config = config.map_or(&default, |c| &c.inner);
    let suite = suite_for(config)?;
    let spec = suite.get(task_id).map_err(py_err)?;
    let plan = config.eval_plan(&planner.inner.schedule).map_err(py_err)?;
    let s = py
        .detach(|| {
            let mut policy = DiffusionPolicy {
                planner: &planner.inner,
                plan,
            };
            evaluate(&mut policy, spec, episodes, seed)
        })
        .map_err(py_err)?;
    Ok((s.success_rate, s.mean_return))
}

/// Task ids of a named suite.
#[pyfunction]
#[pyo3(signature = (name="default"))]
fn task_ids(name: &str) -> PyResult<Vec<String>> {
    let suite = suite_by_name(name, diffplan::tasks::DEFAULT_EPISODE_LENGTH).map_err(py_err)?;
    Ok(suite.ids().into_iter().map(str::to_owned).collect())
}

#[pymodule]
fn pydiffplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPlanner>()?;
    m.add_function(wrap_pyfunction!(py_pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(py_finetune, m)?)?;
    m.add_function(wrap_pyfunction!(py_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(task_ids, m)?)?;
    Ok(())
}

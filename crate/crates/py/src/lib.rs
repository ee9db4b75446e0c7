//! Python bindings for the primitives, planner and metrics harness.

use std::path::{Path, PathBuf};

use hrc_core::dmp::{Sample, DEFAULT_SETTLE_FACTOR, DEFAULT_STEPS_PER_TAU};
use hrc_core::metrics::{self, Experiment};
use hrc_core::planner::{PlanBackend, StubBackend, StubTable};
use hrc_core::{
    DmpConfig, DmpModel, ObjectShape, OverrideRegistry, ReportFormat, ShapeKind, Trajectory,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load_overrides(path: Option<PathBuf>) -> PyResult<OverrideRegistry> {
    match path {
        Some(p) => OverrideRegistry::load(&p).map_err(value_error),
        None => Ok(OverrideRegistry::new()),
    }
}

/// A fitted movement primitive.
#[pyclass(name = "Dmp", frozen)]
struct PyDmp(DmpModel);

#[pymethods]
impl PyDmp {
    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    #[getter]
    fn dof(&self) -> usize {
        self.0.dof()
    }

    #[getter]
    fn n_basis(&self) -> usize {
        self.0.n_basis()
    }

    #[getter]
    fn start(&self) -> Vec<f64> {
        self.0.y0.clone()
    }

    #[getter]
    fn goal(&self) -> Vec<f64> {
        self.0.g.clone()
    }

    /// Rolls out from `start` to `goal`. Returns `(times, positions)`.
    #[pyo3(signature = (start, goal, tau=None, dt=None))]
    fn rollout(
        &self,
        start: Vec<f64>,
        goal: Vec<f64>,
        tau: Option<f64>,
        dt: Option<f64>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let tau = tau.unwrap_or(self.0.tau);
        let dt = dt.unwrap_or(tau / DEFAULT_STEPS_PER_TAU);
        let path = self
            .0
            .rollout(&start, &goal, tau, dt)
            .map_err(value_error)?;
        Ok(path.samples().iter().map(|s| (s.t, s.y.clone())).unzip())
    }

    /// Rollout with the demonstrated start, goal and duration.
    fn reproduce(&self) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let path = self.0.reproduce().map_err(value_error)?;
        Ok(path.samples().iter().map(|s| (s.t, s.y.clone())).unzip())
    }

    fn forcing_term(&self, phase: f64, dof: usize) -> PyResult<f64> {
        if dof >= self.0.dof() {
            return Err(value_error(format!("dof {dof} out of range")));
        }
        Ok(self.0.forcing_term(phase, dof))
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        DmpModel::from_json(text).map(Self).map_err(value_error)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dmp(dof={}, n_basis={}, tau={})",
            self.0.dof(),
            self.0.n_basis(),
            self.0.tau
        )
    }
}

/// Fits a primitive to a demonstration given as sample times and one
/// position vector per sample.
#[pyfunction]
#[pyo3(signature = (times, positions, n_basis=25, alpha_z=25.0, beta_z=6.25, alpha_x=4.0, regularization=1e-8))]
fn fit_dmp(
    times: Vec<f64>,
    positions: Vec<Vec<f64>>,
    n_basis: usize,
    alpha_z: f64,
    beta_z: f64,
    alpha_x: f64,
    regularization: f64,
) -> PyResult<PyDmp> {
    if times.len() != positions.len() {
        return Err(value_error(format!(
            "{} times but {} positions",
            times.len(),
            positions.len()
        )));
    }
    let samples = times
        .into_iter()
        .zip(positions)
        .map(|(t, y)| Sample::new(t, y))
        .collect();
    let demo = Trajectory::new(samples).map_err(value_error)?;
    let config = DmpConfig {
        n_basis,
        alpha_z,
        beta_z,
        alpha_x,
        regularization,
    };
    hrc_core::fit_dmp(&demo, &config)
        .map(PyDmp)
        .map_err(value_error)
}

#[pyfunction]
#[pyo3(signature = (t, tau, alpha_x=4.0))]
fn canonical_phase(t: f64, tau: f64, alpha_x: f64) -> PyResult<f64> {
    hrc_core::canonical_phase(t, tau, alpha_x).map_err(value_error)
}

/// Whether the default grasp can hold a shape of this kind and width.
#[pyfunction]
#[pyo3(signature = (kind, grasp_width, max_grip_width=None))]
fn grasp_feasibility(kind: &str, grasp_width: f64, max_grip_width: Option<f64>) -> PyResult<bool> {
    let kind = ShapeKind::from_name(kind)
        .ok_or_else(|| value_error(format!("unknown shape kind `{kind}`")))?;
    let max = max_grip_width.unwrap_or(hrc_core::RobotConfig::default().max_grip_width);
    Ok(hrc_core::grasp_feasibility(
        max,
        &ObjectShape::new(kind, grasp_width),
    ))
}

/// Plans a command with the stub backend. Returns the plan as a dict.
#[pyfunction]
#[pyo3(signature = (command, error_probability=0.0, seed=0, stub_table=None))]
fn build_plan<'py>(
    py: Python<'py>,
    command: &str,
    error_probability: f64,
    seed: u64,
    stub_table: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let table = match stub_table {
        Some(p) => StubTable::load(&p).map_err(value_error)?,
        None => StubTable::builtin(),
    };
    let backend =
        PlanBackend::Stub(StubBackend::new(table, error_probability, seed).map_err(value_error)?);
    let plan = hrc_core::build_plan(command, &backend, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(value_error)?;
    let text = serde_json::to_string(&plan).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// One row of the metrics table.
#[pyclass(name = "MetricsRow", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyMetricsRow {
    task: String,
    num: usize,
    fns: usize,
    sr: f64,
    exec: f64,
    fsb: f64,
}

impl From<metrics::MetricsRow> for PyMetricsRow {
    fn from(r: metrics::MetricsRow) -> Self {
        Self {
            task: r.task,
            num: r.num,
            fns: r.fns,
            sr: r.sr,
            exec: r.exec,
            fsb: r.fsb,
        }
    }
}

impl From<&PyMetricsRow> for metrics::MetricsRow {
    fn from(r: &PyMetricsRow) -> Self {
        Self {
            task: r.task.clone(),
            num: r.num,
            fns: r.fns,
            sr: r.sr,
            exec: r.exec,
            fsb: r.fsb,
        }
    }
}

#[pymethods]
impl PyMetricsRow {
    fn __repr__(&self) -> String {
        format!(
            "MetricsRow(task={:?}, num={}, fns={}, sr={:.2}, exec={:.2}, fsb={:.2})",
            self.task, self.num, self.fns, self.sr, self.exec, self.fsb
        )
    }
}

/// Runs `n` trials of a command on the bundled desk scene.
#[pyfunction]
#[pyo3(signature = (command, n, seed=0, error_probability=0.0, overrides=None))]
fn run_trials(
    py: Python<'_>,
    command: &str,
    n: usize,
    seed: u64,
    error_probability: f64,
    overrides: Option<PathBuf>,
) -> PyResult<PyMetricsRow> {
    let overrides = load_overrides(overrides)?;
    let exp = Experiment::desk(command, n, seed, error_probability).map_err(value_error)?;
    py.detach(|| metrics::run_trials(&exp, n, seed, &overrides))
        .map(Into::into)
        .map_err(value_error)
}

/// Runs every experiment in a suite file.
#[pyfunction]
#[pyo3(signature = (path, overrides=None))]
fn run_suite(
    py: Python<'_>,
    path: PathBuf,
    overrides: Option<PathBuf>,
) -> PyResult<Vec<PyMetricsRow>> {
    let overrides = load_overrides(overrides)?;
    let suite = metrics::Suite::load(&path).map_err(value_error)?;
    let exps = suite
        .prepare(path.parent().unwrap_or(Path::new(".")))
        .map_err(value_error)?;
    let rows = py
        .detach(|| metrics::run_suite(&exps, &overrides))
        .map_err(value_error)?;
    Ok(rows.into_iter().map(Into::into).collect())
}

/// Renders rows as `"text"` or `"csv"`.
#[pyfunction]
#[pyo3(signature = (rows, format="text"))]
fn render_report(rows: Vec<PyRef<'_, PyMetricsRow>>, format: &str) -> PyResult<String> {
    let format: ReportFormat = format.parse().map_err(value_error)?;
    let rows: Vec<metrics::MetricsRow> = rows.iter().map(|r| (&**r).into()).collect();
    hrc_core::render_report(&rows, format).map_err(value_error)
}

#[pymodule]
fn hrc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_SETTLE_FACTOR", DEFAULT_SETTLE_FACTOR)?;
    m.add_class::<PyDmp>()?;
    m.add_class::<PyMetricsRow>()?;
    m.add_function(wrap_pyfunction!(fit_dmp, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_phase, m)?)?;
    m.add_function(wrap_pyfunction!(grasp_feasibility, m)?)?;
    m.add_function(wrap_pyfunction!(build_plan, m)?)?;
    m.add_function(wrap_pyfunction!(run_trials, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    Ok(())
}

//! Python bindings: feeders, power flow, projection, estimation, CVaR
//! constraints, closed-loop simulation and the frozen-instance report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use opfse::control::{cvar_constraint as cvar, VoltageLimits};
use opfse::devices::{project_feasible, DerCapability};
use opfse::estimation::wls_closed_form;
use opfse::network::{build_linear_model, load_feeder, solve_distflow, FeederModel, InjectionVector, Line};
use opfse::runner::{analyze as analyze_config, run_simulation, write_outputs, RunnerError, SimulationConfig, SimulationOutput};
use opfse::sensing::{MeasurementSnapshot, ScenarioSet};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runner_err(e: RunnerError) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn vector(name: &str, x: Vec<f64>, n: usize) -> PyResult<DVector<f64>> {
    if x.len() != n {
        return Err(PyValueError::new_err(format!("{name}: expected {n} values, got {}", x.len())));
    }
    Ok(DVector::from_vec(x))
}

/// Radial feeder in per-unit. Node 0 is the substation.
#[pyclass(name = "Feeder", module = "opfse")]
#[derive(Clone)]
struct PyFeeder {
    inner: FeederModel,
}

#[pymethods]
impl PyFeeder {
    /// Build from `(from, to, r_pu, x_pu)` tuples.
    #[new]
    fn new(lines: Vec<(usize, usize, f64, f64)>, v_sub: f64) -> PyResult<Self> {
        let lines = lines.into_iter().map(|(from, to, r, x)| Line { from, to, r, x }).collect();
        Ok(Self { inner: FeederModel::new(lines, v_sub).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_feeder(path).map_err(value_err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn v_sub(&self) -> f64 {
        self.inner.v_sub()
    }

    /// Original bus ids, substation first.
    #[getter]
    fn bus_ids(&self) -> Vec<u64> {
        self.inner.bus_ids.clone()
    }

    /// Nonlinear DistFlow voltage magnitudes for injections `p`, `q` (nodes 1..N).
    fn distflow(&self, p: Vec<f64>, q: Vec<f64>) -> PyResult<Vec<f64>> {
        let n = self.inner.n();
        let inj = InjectionVector { p: vector("p", p, n)?, q: vector("q", q, n)? };
        let sol = solve_distflow(&self.inner, &inj).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        if !sol.converged {
            return Err(PyRuntimeError::new_err(format!("no convergence after {} sweeps", sol.iterations)));
        }
        Ok(sol.v.iter().copied().collect())
    }

    /// Linearized voltages `R p + X q + v_sub`.
    fn linear_voltage(&self, p: Vec<f64>, q: Vec<f64>) -> PyResult<Vec<f64>> {
        let n = self.inner.n();
        let model = build_linear_model(&self.inner);
        let z = InjectionVector { p: vector("p", p, n)?, q: vector("q", q, n)? }.stacked();
        Ok(model.predict_stacked(&z).iter().copied().collect())
    }

    /// `(R, X)` as nested lists.
    fn sensitivities(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = build_linear_model(&self.inner);
        let rows = |a: &nalgebra::DMatrix<f64>| a.row_iter().map(|r| r.iter().copied().collect()).collect();
        (rows(&m.r), rows(&m.x))
    }

    fn __repr__(&self) -> String {
        format!("Feeder(n={}, v_sub={})", self.inner.n(), self.inner.v_sub())
    }
}

/// Closest point to `(p, q)` with `0 <= p <= p_av` and `p^2 + q^2 <= s_rating^2`.
#[pyfunction]
fn project_capability(p: f64, q: f64, p_av: f64, s_rating: f64) -> (f64, f64) {
    project_feasible(p, q, &DerCapability::new(1, p_av, s_rating))
}

/// Weighted least-squares injection estimate `[p; q]`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn wls_estimate(
    feeder: &PyFeeder,
    v_nodes: Vec<usize>,
    v_hat: Vec<f64>,
    w_v: Vec<f64>,
    p_hat: Vec<f64>,
    q_hat: Vec<f64>,
    w_p: Vec<f64>,
    w_q: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let n = feeder.inner.n();
    if v_hat.len() != v_nodes.len() || w_v.len() != v_nodes.len() {
        return Err(PyValueError::new_err("v_nodes, v_hat and w_v must have equal length"));
    }
    if let Some(&bad) = v_nodes.iter().find(|&&k| k == 0 || k > n) {
        return Err(PyValueError::new_err(format!("sensor node {bad} outside 1..={n}")));
    }
    let m = MeasurementSnapshot {
        v_nodes,
        v_hat,
        w_v,
        p_hat: vector("p_hat", p_hat, n)?,
        q_hat: vector("q_hat", q_hat, n)?,
        w_p: vector("w_p", w_p, n)?,
        w_q: vector("w_q", w_q, n)?,
    };
    let z = wls_closed_form(&m, &build_linear_model(&feeder.inner)).map_err(value_err)?;
    Ok(z.iter().copied().collect())
}

/// Sample-average CVaR constraint values `[upper; lower]` for voltages `v`.
#[pyfunction]
fn cvar_constraint(
    v: Vec<f64>,
    tau: Vec<f64>,
    samples: Vec<Vec<f64>>,
    beta: f64,
    v_min: f64,
    v_max: f64,
) -> PyResult<Vec<f64>> {
    let n = v.len();
    let scen = ScenarioSet::new(samples.into_iter().map(DVector::from_vec).collect(), beta).map_err(value_err)?;
    let limits = VoltageLimits::uniform(n, v_min, v_max).map_err(value_err)?;
    let g = cvar(&DVector::from_vec(v), &vector("tau", tau, 2 * n)?, &scen, &limits).map_err(value_err)?;
    Ok(g.iter().copied().collect())
}

/// Result of a closed-loop run.
#[pyclass(name = "SimulationResult", module = "opfse")]
struct PySimulationResult {
    out: SimulationOutput,
}

#[pymethods]
impl PySimulationResult {
    #[getter]
    fn summary(&self) -> BTreeMap<String, String> {
        self.out.summary.clone()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.out.records.iter().map(|r| r.t).collect()
    }

    /// Plant voltages, one list per step.
    #[getter]
    fn v_true(&self) -> Vec<Vec<f64>> {
        self.out.records.iter().map(|r| r.v_true.iter().copied().collect()).collect()
    }

    #[getter]
    fn v_est(&self) -> Vec<Vec<f64>> {
        self.out.records.iter().map(|r| r.v_est.iter().copied().collect()).collect()
    }

    /// Applied setpoints `[p; q]`, one list per step.
    #[getter]
    fn setpoints(&self) -> Vec<Vec<f64>> {
        self.out.records.iter().map(|r| r.u.iter().copied().collect()).collect()
    }

    #[getter]
    fn violation_counts(&self) -> Vec<usize> {
        self.out.records.iter().map(|r| r.violations.iter().filter(|&&b| b).count()).collect()
    }

    /// Write `trajectory.csv` and `summary.txt` into `directory`.
    fn write(&self, directory: PathBuf) -> PyResult<()> {
        write_outputs(directory, &self.out, self.out.final_state.n()).map_err(runner_err)
    }

    fn __len__(&self) -> usize {
        self.out.records.len()
    }
}

fn load_config(path: PathBuf, overrides: Vec<String>) -> PyResult<SimulationConfig> {
    SimulationConfig::load(path, &overrides).map_err(runner_err)
}

/// Run the simulation described by a config file.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn simulate(py: Python<'_>, config: PathBuf, overrides: Vec<String>) -> PyResult<PySimulationResult> {
    let cfg = load_config(config, overrides)?;
    let out = py.detach(|| run_simulation(&cfg)).map_err(runner_err)?;
    Ok(PySimulationResult { out })
}

/// Frozen-instance certification report as a `key -> value` dict.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new()))]
fn analyze(py: Python<'_>, config: PathBuf, overrides: Vec<String>) -> PyResult<BTreeMap<String, String>> {
    let cfg = load_config(config, overrides)?;
    let lines = py.detach(|| analyze_config(&cfg)).map_err(runner_err)?;
    Ok(lines
        .into_iter()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect())
}

#[pymodule]
fn _opfse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeeder>()?;
    m.add_class::<PySimulationResult>()?;
    m.add_function(wrap_pyfunction!(project_capability, m)?)?;
    m.add_function(wrap_pyfunction!(wls_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(cvar_constraint, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    Ok(())
}

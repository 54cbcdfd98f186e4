//! Python bindings for the fbcontrol toolkit.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fbcontrol::algebra::{self, FixedPointConfig};
use fbcontrol::assumptions;
use fbcontrol::fbsde::{self, TrajectoryBundle};
use fbcontrol::hjb;
use fbcontrol::problem::{self, load_scenario};
use fbcontrol::verify::{self, RelationId};

fn to_py(e: fbcontrol::Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Split a row-major `paths × times` array into one list per path.
fn by_path(values: &[f64], times: usize) -> Vec<Vec<f64>> {
    values.chunks(times).map(<[f64]>::to_vec).collect()
}

/// A validated problem instance.
#[pyclass(name = "Scenario", module = "pyfbcontrol", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: problem::Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        Ok(PyScenario {
            inner: load_scenario(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyScenario {
            inner: problem::Scenario::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn t0(&self) -> f64 {
        self.inner.t0
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn x0(&self) -> f64 {
        self.inner.x0
    }

    #[getter]
    fn beta0(&self) -> f64 {
        self.inner.beta0
    }

    #[getter]
    fn regime(&self) -> &'static str {
        self.inner.regime.as_str()
    }

    #[getter]
    fn controls(&self) -> Vec<f64> {
        self.inner.controls.points().to_vec()
    }

    #[getter]
    fn paths(&self) -> usize {
        self.inner.montecarlo.paths
    }

    #[setter]
    fn set_paths(&mut self, paths: usize) -> PyResult<()> {
        if paths < 2 {
            return Err(PyValueError::new_err("at least two paths are needed"));
        }
        self.inner.montecarlo.paths = paths;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.montecarlo.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.montecarlo.seed = seed;
    }

    /// Terminal cost `φ(x)`.
    fn phi(&self, x: f64) -> f64 {
        self.inner.coefficients.phi(x)
    }

    /// Diffusion coefficient `σ(t, x, y, z, u)`.
    fn sigma(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> f64 {
        self.inner
            .coefficients
            .sigma(&problem::Point::new(t, x, y, z, u))
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!(
            "Scenario(horizon={}, x0={}, regime='{}', controls={}, paths={})",
            s.horizon,
            s.x0,
            s.regime.as_str(),
            s.controls.len(),
            s.montecarlo.paths
        )
    }
}

/// Grid solution of the generalized HJB equation.
#[pyclass(name = "ValueField", module = "pyfbcontrol", frozen)]
struct PyValueField {
    inner: hjb::ValueField,
}

#[pymethods]
impl PyValueField {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    #[getter]
    fn xs(&self) -> Vec<f64> {
        self.inner.xs.clone()
    }

    /// `W` as one row per time level.
    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        by_path(&self.inner.w, self.inner.nx())
    }

    fn value(&self, t: f64, x: f64) -> f64 {
        self.inner.value(t, x)
    }

    fn value_x(&self, t: f64, x: f64) -> f64 {
        self.inner.value_x(t, x)
    }

    fn value_xx(&self, t: f64, x: f64) -> f64 {
        self.inner.value_xx(t, x)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// Value field, optimal trajectories and adjoints of one scenario.
#[pyclass(name = "Artifacts", module = "pyfbcontrol", frozen)]
struct PyArtifacts {
    scenario: problem::Scenario,
    inner: verify::Artifacts,
}

impl PyArtifacts {
    fn bundle(&self) -> &TrajectoryBundle {
        &self.inner.bundle
    }

    fn local(&self) -> PyResult<&fbcontrol::adjoint::LocalAdjointPath> {
        self.inner.local.as_ref().ok_or_else(|| {
            PyValueError::new_err("the local adjoint exists only in the local_convex regime")
        })
    }
}

#[pymethods]
impl PyArtifacts {
    #[getter]
    fn field(&self) -> PyValueField {
        PyValueField {
            inner: self.inner.field.clone(),
        }
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.bundle().times.clone()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        by_path(&self.bundle().x, self.bundle().times.len())
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        by_path(&self.bundle().y, self.bundle().times.len())
    }

    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        by_path(&self.bundle().z, self.bundle().times.len())
    }

    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        by_path(&self.bundle().u, self.bundle().times.len())
    }

    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        by_path(&self.inner.first.p, self.bundle().times.len())
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        by_path(&self.inner.first.q, self.bundle().times.len())
    }

    #[getter]
    #[allow(non_snake_case)]
    fn P(&self) -> Vec<Vec<f64>> {
        by_path(&self.inner.second.big_p, self.bundle().times.len())
    }

    #[getter]
    #[allow(non_snake_case)]
    fn Q(&self) -> Vec<Vec<f64>> {
        by_path(&self.inner.second.big_q, self.bundle().times.len())
    }

    #[getter]
    fn h(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(by_path(&self.local()?.h, self.bundle().times.len()))
    }

    #[getter]
    fn m(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(by_path(&self.local()?.m, self.bundle().times.len()))
    }

    /// Monte Carlo estimate of the cost as `(mean, standard error)`.
    fn cost(&self) -> (f64, f64) {
        let e = fbsde::cost(self.bundle());
        (e.mean, e.stderr)
    }

    fn trajectories_csv(&self) -> String {
        self.bundle().to_csv()
    }

    fn adjoint_csv(&self) -> String {
        self.inner.second.to_csv()
    }

    fn local_adjoint_csv(&self) -> PyResult<String> {
        Ok(self.local()?.to_csv())
    }

    /// Run relation checks; `relations` is a list of names such as
    /// `"MP_GLOBAL"`, defaulting to every relation that applies.
    #[pyo3(signature = (relations=None))]
    fn verify<'py>(
        &self,
        py: Python<'py>,
        relations: Option<Vec<String>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let reports = self.reports(py, relations)?;
        json_to_py(py, &verify::to_json(&reports))
    }

    /// Same checks as [`verify`], as an aligned text table.
    #[pyo3(signature = (relations=None))]
    fn verify_table(&self, py: Python<'_>, relations: Option<Vec<String>>) -> PyResult<String> {
        Ok(verify::to_table(&self.reports(py, relations)?))
    }
}

impl PyArtifacts {
    fn reports(
        &self,
        py: Python<'_>,
        relations: Option<Vec<String>>,
    ) -> PyResult<Vec<verify::RelationReport>> {
        let selection = match relations {
            Some(names) => names
                .iter()
                .map(|n| n.parse::<RelationId>())
                .collect::<fbcontrol::Result<Vec<_>>>()
                .map_err(to_py)?,
            None => verify::default_relations(&self.scenario),
        };
        py.detach(|| verify::run_relations(&self.scenario, &self.inner, &selection))
            .map_err(to_py)
    }
}

/// Assumption report of a scenario as a dict.
#[pyfunction]
fn assess<'py>(py: Python<'py>, scenario: &PyScenario) -> PyResult<Bound<'py, PyAny>> {
    let report = py.detach(|| assumptions::assess(&scenario.inner));
    json_to_py(
        py,
        &serde_json::to_string(&report).expect("assumption report is plain data"),
    )
}

/// Solve `V = p σ(t, x, v, V, u)`; returns `(V, iterations, residual)`.
#[pyfunction]
fn solve_v(
    scenario: &PyScenario,
    t: f64,
    x: f64,
    v: f64,
    p: f64,
    u: f64,
) -> PyResult<(f64, usize, f64)> {
    let s = &scenario.inner;
    let cfg = FixedPointConfig::from_scenario(s);
    let sol = algebra::solve_v(&s.coefficients, t, x, v, p, u, &cfg).map_err(to_py)?;
    Ok((sol.value, sol.iterations, sol.residual))
}

/// `K1` from `(σ_x, σ_y, σ_z)`, `p` and `q`.
#[pyfunction]
fn k1(dsigma: [f64; 3], p: f64, q: f64) -> PyResult<f64> {
    algebra::k1(dsigma, p, q).map_err(to_py)
}

/// `K2` from the first and second derivatives of σ, the adjoints and `K1`.
#[pyfunction]
#[allow(non_snake_case)]
fn k2(dsigma: [f64; 3], d2sigma: [[f64; 3]; 3], p: f64, P: f64, Q: f64, k1: f64) -> PyResult<f64> {
    algebra::k2(dsigma, &d2sigma, p, P, Q, k1).map_err(to_py)
}

#[pyfunction]
fn solve_hjb(py: Python<'_>, scenario: &PyScenario) -> PyResult<PyValueField> {
    let inner = py
        .detach(|| hjb::solve_hjb(&scenario.inner))
        .map_err(to_py)?;
    Ok(PyValueField { inner })
}

/// HJB solve, feedback simulation and adjoints.
#[pyfunction]
fn solve(py: Python<'_>, scenario: &PyScenario) -> PyResult<PyArtifacts> {
    let s = scenario.inner.clone();
    let inner = py
        .detach(|| verify::Artifacts::compute(&s))
        .map_err(to_py)?;
    Ok(PyArtifacts { scenario: s, inner })
}

#[pymodule]
fn pyfbcontrol(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyValueField>()?;
    m.add_class::<PyArtifacts>()?;
    m.add_function(wrap_pyfunction!(assess, m)?)?;
    m.add_function(wrap_pyfunction!(solve_v, m)?)?;
    m.add_function(wrap_pyfunction!(k1, m)?)?;
    m.add_function(wrap_pyfunction!(k2, m)?)?;
    m.add_function(wrap_pyfunction!(solve_hjb, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    Ok(())
}

//! Python extension module wrapping the core solvers. Matrices cross the
//! boundary as nested lists (row-major), reports as plain dicts, so the
//! module has no runtime dependency beyond the interpreter itself.

use std::path::PathBuf;

use mflq_core::model::{validate_assumptions, PeriodicTable, ProblemData};
use mflq_core::montecarlo::{closed_loop_moments, cross_validate, simulate_closed_loop};
use mflq_core::numerics::Trajectory;
use mflq_core::periodic_lq::solve_periodic_law;
use mflq_core::riccati::{
    solve_finite_horizon, solve_stationary, stability_report, Method, Route,
};
use mflq_core::turnpike::analyze_horizons;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use serde_json::Value;

const PSD_TOL: f64 = 1e-8;

fn to_py_err(e: mflq_core::Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn mat_list(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn col_list(m: &DMatrix<f64>) -> Vec<f64> {
    m.column(0).iter().cloned().collect()
}

fn traj_times(tr: &Trajectory) -> Vec<f64> {
    (0..tr.len()).map(|j| tr.time(j)).collect()
}

fn traj_lists(tr: &Trajectory) -> Vec<Vec<Vec<f64>>> {
    tr.values().iter().map(mat_list).collect()
}

fn json_to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any().unbind()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind()
            }
        }
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialized_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value)
        .map_err(|e| PyRuntimeError::new_err(format!("report serialization: {e}")))?;
    json_to_py(py, &v)
}

fn parse_route(s: &str) -> PyResult<Route> {
    match s {
        "shifted" => Ok(Route::Shifted),
        "direct" => Ok(Route::Direct),
        other => Err(PyValueError::new_err(format!(
            "unknown route {other:?}; expected \"shifted\" or \"direct\""
        ))),
    }
}

fn parse_method(s: &str) -> PyResult<Method> {
    match s {
        "kleinman" => Ok(Method::Kleinman),
        "horizon-extension" => Ok(Method::Horizon),
        "both" => Ok(Method::Both),
        other => Err(PyValueError::new_err(format!(
            "unknown method {other:?}; expected \"kleinman\", \"horizon-extension\" or \"both\""
        ))),
    }
}

/// A periodic mean-field LQ problem plus every solver the crate exposes.
#[pyclass]
struct Problem {
    inner: ProblemData,
}

impl Problem {
    fn initial_state(&self, x0: Option<Vec<f64>>) -> PyResult<DVector<f64>> {
        match x0 {
            None => Ok(DVector::from_element(self.inner.n, 1.0)),
            Some(v) if v.len() == self.inner.n => Ok(DVector::from_vec(v)),
            Some(v) => Err(PyValueError::new_err(format!(
                "initial state has {} entries, problem has n = {}",
                v.len(),
                self.inner.n
            ))),
        }
    }

    fn set_tables<'py>(
        &self,
        dict: &Bound<'py, PyDict>,
        tables: &[(&str, &PeriodicTable)],
    ) -> PyResult<()> {
        for (name, table) in tables {
            let tr = table.trajectory(1);
            dict.set_item(*name, traj_lists(&tr))?;
            if !dict.contains("t")? {
                dict.set_item("t", traj_times(&tr))?;
            }
        }
        Ok(())
    }
}

#[pymethods]
impl Problem {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Problem {
            inner: ProblemData::from_json(text).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Problem {
            inner: ProblemData::from_file(&path).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn grid_steps(&self) -> usize {
        self.inner.steps
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(n={}, m={}, tau={}, grid_steps={})",
            self.inner.n, self.inner.m, self.inner.tau, self.inner.steps
        )
    }

    /// Weight positivity and Schur-complement checks.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = validate_assumptions(&self.inner, PSD_TOL);
        let dict = PyDict::new(py);
        dict.set_item("delta_r", report.delta_r)?;
        dict.set_item("delta_r_hat", report.delta_r_hat)?;
        dict.set_item("min_schur", report.min_schur)?;
        dict.set_item("min_schur_hat", report.min_schur_hat)?;
        dict.set_item("coefficients_bounded", report.coefficients_bounded)?;
        dict.set_item("failures", report.failures.clone())?;
        dict.set_item("notes", report.notes.clone())?;
        dict.set_item("ok", report.a2_ok())?;
        Ok(dict)
    }

    /// Open-loop, detectability and synthesized closed-loop diagnostics for
    /// the centered and the mean loop.
    fn stability<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = stability_report(&self.inner).map_err(to_py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("state", serialized_to_py(py, &report.state)?)?;
        dict.set_item("mean", serialized_to_py(py, &report.mean)?)?;
        dict.set_item("ok", report.ok())?;
        Ok(dict)
    }

    /// Stationary periodic solution and the induced optimal periodic regime,
    /// tabulated over one period.
    #[pyo3(signature = (route="shifted", method="kleinman"))]
    fn periodic<'py>(
        &self,
        py: Python<'py>,
        route: &str,
        method: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let sol = solve_stationary(&self.inner, parse_route(route)?, parse_method(method)?)
            .map_err(to_py_err)?;
        let law = solve_periodic_law(&self.inner, &sol).map_err(to_py_err)?;
        let dict = PyDict::new(py);
        self.set_tables(
            &dict,
            &[
                ("P", &sol.p),
                ("Pi", &sol.pi),
                ("Theta", &sol.theta),
                ("Theta_hat", &sol.theta_hat),
                ("eta", &law.eta),
                ("v_star", &law.v_star),
                ("mu_star", &law.moments.mu),
                ("Sigma_star", &law.moments.sigma),
            ],
        )?;
        dict.set_item("residual_p", sol.residual_p)?;
        dict.set_item("residual_pi", sol.residual_pi)?;
        dict.set_item("method_agreement_p", sol.method_agreement_p)?;
        dict.set_item("method_agreement_pi", sol.method_agreement_pi)?;
        dict.set_item("detectability_p", serialized_to_py(py, &sol.detectability_p)?)?;
        dict.set_item("detectability_pi", serialized_to_py(py, &sol.detectability_pi)?)?;
        dict.set_item("optimality_residual", law.optimality_residual)?;
        dict.set_item("eta_boundary_mismatch", law.eta_boundary_mismatch)?;
        dict.set_item("psd_identity_min", law.psd_identity_min)?;
        Ok(dict)
    }

    /// Coupled backward solution on [0, periods * tau].
    fn finite_horizon<'py>(&self, py: Python<'py>, periods: usize) -> PyResult<Bound<'py, PyDict>> {
        if periods == 0 {
            return Err(PyValueError::new_err("horizon must be at least one period"));
        }
        let fin = solve_finite_horizon(&self.inner, periods as f64 * self.inner.tau)
            .map_err(to_py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("t", traj_times(&fin.p))?;
        dict.set_item("P", traj_lists(&fin.p))?;
        dict.set_item("Pi", traj_lists(&fin.pi))?;
        dict.set_item("Theta", traj_lists(&fin.theta))?;
        dict.set_item("Theta_hat", traj_lists(&fin.theta_hat))?;
        dict.set_item("varphi", traj_lists(&fin.varphi))?;
        dict.set_item("phi", traj_lists(&fin.phi))?;
        Ok(dict)
    }

    /// Gap curves and fitted decay rates for each horizon, one dict per
    /// horizon in input order.
    #[pyo3(signature = (periods, x0=None, route="shifted"))]
    fn turnpike<'py>(
        &self,
        py: Python<'py>,
        periods: Vec<usize>,
        x0: Option<Vec<f64>>,
        route: &str,
    ) -> PyResult<Bound<'py, PyList>> {
        if periods.is_empty() {
            return Err(PyValueError::new_err("need at least one horizon"));
        }
        let x = self.initial_state(x0)?;
        let per = solve_stationary(&self.inner, parse_route(route)?, Method::Kleinman)
            .map_err(to_py_err)?;
        let law = solve_periodic_law(&self.inner, &per).map_err(to_py_err)?;
        let reports = analyze_horizons(&self.inner, &per, &law, &periods, &x).map_err(to_py_err)?;
        let out = PyList::empty(py);
        for report in &reports {
            let dict = PyDict::new(py);
            dict.set_item("horizon", report.horizon)?;
            dict.set_item("all_passed", report.all_passed())?;
            dict.set_item("fits", serialized_to_py(py, &report.fits)?)?;
            let curves = PyDict::new(py);
            let c = &report.curves;
            curves.set_item("t", c.t.clone())?;
            curves.set_item("gap_P", c.gap_p.clone())?;
            curves.set_item("gap_Pi", c.gap_pi.clone())?;
            curves.set_item("gap_Theta", c.gap_theta.clone())?;
            curves.set_item("gap_Theta_hat", c.gap_theta_hat.clone())?;
            curves.set_item("gap_varphi", c.gap_varphi.clone())?;
            curves.set_item("gap_phi", c.gap_phi.clone())?;
            curves.set_item("gap_state_sq", c.gap_state.clone())?;
            curves.set_item("gap_control_sq", c.gap_control.clone())?;
            curves.set_item("w2_state", c.w2_state.clone())?;
            dict.set_item("curves", curves)?;
            out.append(dict)?;
        }
        Ok(out)
    }

    /// Interacting particle cloud under the horizon-optimal law, checked
    /// against the deterministic moment system.
    #[pyo3(signature = (periods=5, particles=10000, seed=0, substeps=1, x0=None))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        periods: usize,
        particles: usize,
        seed: u64,
        substeps: usize,
        x0: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        if periods == 0 {
            return Err(PyValueError::new_err("horizon must be at least one period"));
        }
        let x = self.initial_state(x0)?;
        let fin = solve_finite_horizon(&self.inner, periods as f64 * self.inner.tau)
            .map_err(to_py_err)?;
        let mc = simulate_closed_loop(
            &self.inner,
            &fin.theta,
            &fin.theta_hat,
            &fin.phi,
            &x,
            particles,
            seed,
            substeps,
        )
        .map_err(to_py_err)?;
        let (mean, _) = closed_loop_moments(&self.inner, &fin.theta, &fin.theta_hat, &fin.phi, &x)
            .map_err(to_py_err)?;
        let report = cross_validate(&mc, &mean).map_err(to_py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("particles", mc.n_particles)?;
        dict.set_item("seed", mc.seed)?;
        dict.set_item("substeps", mc.substeps)?;
        dict.set_item("nodes", report.nodes)?;
        dict.set_item("max_abs_z", report.max_abs_z)?;
        dict.set_item("exceed_count", report.exceed_count)?;
        dict.set_item("exceed_fraction", report.exceed_fraction)?;
        dict.set_item("pass", report.pass)?;
        dict.set_item("t", traj_times(&mc.mean))?;
        dict.set_item(
            "empirical_mean",
            mc.mean.values().iter().map(col_list).collect::<Vec<_>>(),
        )?;
        dict.set_item(
            "deterministic_mean",
            mean.values().iter().map(col_list).collect::<Vec<_>>(),
        )?;
        Ok(dict)
    }
}

#[pymodule]
fn mflq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings for `pik-core`. Matrices cross the boundary as lists of
//! rows; summaries and configs as JSON strings.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pik_core::numlin::{self, DampingSpec};
use pik_core::runner::{self, Mode, RunOptions};
use pik_core::{acceptance, config, orthqr, scenarios, CallbackSystem, PikError, SolverConfig, SolverFamily};

fn py_err(e: PikError) -> PyErr {
    match e {
        PikError::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        PikError::Numerical(_) | PikError::Integration { .. } | PikError::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.into_iter().flatten()))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// `J = C_e J_hat_e` in priority order.
#[pyclass(name = "PriorityDecomposition", frozen)]
struct PyDecomposition {
    inner: orthqr::PriorityDecomposition,
}

#[pymethods]
impl PyDecomposition {
    #[getter]
    fn c_e(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.c_e())
    }

    #[getter]
    fn j_hat_e(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.j_hat_e())
    }

    #[getter]
    fn task_dims(&self) -> Vec<usize> {
        self.inner.task_dims().to_vec()
    }

    fn diag(&self) -> Vec<f64> {
        self.inner.diag()
    }

    fn det_c(&self) -> f64 {
        self.inner.det_c()
    }

    fn reconstruct(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.reconstruct())
    }

    /// Projector of task `a` (zero based).
    fn projector(&self, a: usize) -> PyResult<Vec<Vec<f64>>> {
        orthqr::projector(&self.inner, a).map(|p| from_matrix(&p)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "PriorityDecomposition(m={}, n={}, task_dims={:?})",
            self.inner.m(),
            self.inner.n(),
            self.inner.task_dims()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (j, task_dims, zero_tol = 0.0))]
fn orthogonalize(j: Vec<Vec<f64>>, task_dims: Vec<usize>, zero_tol: f64) -> PyResult<PyDecomposition> {
    let j = to_matrix(j)?;
    let inner = orthqr::orthogonalize(&j, &task_dims, zero_tol).map_err(py_err)?;
    Ok(PyDecomposition { inner })
}

/// `A^T (A A^T + lambda^2 I)^+` with `lambda` from the `(mu, nu)` schedule.
#[pyfunction]
#[pyo3(signature = (a, mu, nu = 1))]
fn damped_pinv(a: Vec<Vec<f64>>, mu: f64, nu: u32) -> PyResult<Vec<Vec<f64>>> {
    let a = to_matrix(a)?;
    let lam = numlin::damping_value(&(&a * a.transpose()), mu, nu).map_err(py_err)?;
    numlin::extended_damped_pinv(&a, lam).map(|p| from_matrix(&p)).map_err(py_err)
}

/// `(M1, M2)` norm bounds of the damped pseudoinverse.
#[pyfunction]
#[pyo3(signature = (a, mu, nu = 1.0))]
fn pinv_norm_bound(a: Vec<Vec<f64>>, mu: f64, nu: f64) -> PyResult<(f64, f64)> {
    let b = numlin::pinv_norm_bound(&to_matrix(a)?, mu, nu);
    Ok((b.m1, b.m2))
}

/// Joint velocity for a constant velocity map `f_q` and reference `r`.
#[pyfunction]
#[pyo3(signature = (f_q, r, task_dims, alpha, mu = None, nu = 1))]
fn pik_velocity(
    f_q: Vec<Vec<f64>>,
    r: Vec<f64>,
    task_dims: Vec<usize>,
    alpha: u8,
    mu: Option<Vec<f64>>,
    nu: u32,
) -> PyResult<Vec<f64>> {
    let f_q = to_matrix(f_q)?;
    let n = f_q.ncols();
    let family = SolverFamily::from_alpha(alpha).map_err(py_err)?;
    let l = task_dims.len();
    let damping = match mu {
        Some(mu) => DampingSpec::new(mu, nu).map_err(py_err)?,
        None if family.is_damped() => return Err(PyValueError::new_err("damped families need `mu`")),
        None => DampingSpec::undamped(l),
    };
    let cfg = SolverConfig::new(family, damping);
    let sys = CallbackSystem::constant(task_dims, f_q, DVector::from_vec(r)).map_err(py_err)?;
    let sol = pik_core::pik_velocity(0.0, &DVector::zeros(n), &sys, &cfg).map_err(py_err)?;
    Ok(from_vector(&sol.u))
}

/// Task position and Jacobian of the planar two-link arm.
#[pyfunction]
fn two_link_fk(l1: f64, l2: f64, q: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    if q.len() != 2 {
        return Err(PyValueError::new_err("q must have 2 entries"));
    }
    let p = scenarios::TwoLinkParams::new(l1, l2).map_err(py_err)?;
    let (f, j) = scenarios::two_link_fk(&p, 0.0, &DVector::from_vec(q));
    Ok((from_vector(&f), from_matrix(&j)))
}

/// Bundled scenario presets as `{name: config_json}`.
#[pyfunction]
fn presets() -> Vec<(String, String)> {
    config::presets()
        .into_iter()
        .map(|c| (c.name.clone().unwrap_or_default(), serde_json::to_string_pretty(&c).unwrap()))
        .collect()
}

/// Runs a config given as JSON text; returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, probe = false, seed = None))]
fn run_scenario(py: Python<'_>, config_json: &str, out_dir: &str, probe: bool, seed: Option<u64>) -> PyResult<String> {
    let cfg = config::parse_config(config_json).map_err(py_err)?;
    let mut opts = RunOptions::new(if probe { Mode::Probe } else { Mode::Run }, out_dir);
    opts.seed = seed;
    let summary = py.detach(|| runner::run_scenario(&cfg, &opts)).map_err(py_err)?;
    Ok(serde_json::to_string(&summary).unwrap())
}

/// Runs the acceptance suite; returns the report JSON.
#[pyfunction]
fn verify(py: Python<'_>) -> String {
    let report = py.detach(|| acceptance::run_suite(&acceptance::SuiteOptions::default(), |_| {}));
    serde_json::to_string(&report).unwrap()
}

#[pymodule]
fn pik_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDecomposition>()?;
    m.add_function(wrap_pyfunction!(orthogonalize, m)?)?;
    m.add_function(wrap_pyfunction!(damped_pinv, m)?)?;
    m.add_function(wrap_pyfunction!(pinv_norm_bound, m)?)?;
    m.add_function(wrap_pyfunction!(pik_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(two_link_fk, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

//! Python bindings for the Wigner-Fokker-Planck laboratory.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wfp_core::cli_io::{self, RunConfig};
use wfp_core::constants::{compute_constants, ConstantsOptions};
use wfp_core::phase_grid::{GridSpec, WignerField, SIGMA};
use wfp_core::potential_theta::{PotentialKind, PotentialSpec};
use wfp_core::propagator::{displaced_gaussian, evolve_with_state, PropagatorConfig};
use wfp_core::spectral::{self, CoarseBox};
use wfp_core::steady_state::{self, LinvBackend};
use wfp_core::{wfp_operator, WfpError};

create_exception!(wfp_lab, WfpLabError, PyException);
create_exception!(wfp_lab, DivergenceError, WfpLabError);
create_exception!(wfp_lab, InvariantError, WfpLabError);

fn to_py(err: WfpError) -> PyErr {
    let msg = err.to_string();
    match err {
        WfpError::Divergence(_) | WfpError::NoConvergence(_) => DivergenceError::new_err(msg),
        WfpError::Invariant(_) => InvariantError::new_err(msg),
        WfpError::Io(_) | WfpError::Format(_) => WfpLabError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn backend(name: &str) -> PyResult<LinvBackend> {
    match name {
        "semigroup" => Ok(LinvBackend::Semigroup),
        "krylov" => Ok(LinvBackend::Krylov),
        other => Err(PyValueError::new_err(format!("unknown backend '{other}' (semigroup or krylov)"))),
    }
}

/// Uniform periodic phase-space grid.
#[pyclass(name = "Grid", module = "wfp_lab", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyGrid(GridSpec);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (d, n_x, n_xi, x_max, xi_max))]
    fn new(d: usize, n_x: usize, n_xi: usize, x_max: f64, xi_max: f64) -> PyResult<Self> {
        GridSpec::new(d, n_x, n_xi, x_max, xi_max).map(Self).map_err(to_py)
    }

    /// Default box for `n` points per axis.
    #[staticmethod]
    #[pyo3(signature = (n = 128, d = 1))]
    fn default(n: usize, d: usize) -> PyResult<Self> {
        GridSpec::default_for(d, n).map(Self).map_err(to_py)
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }
    #[getter]
    fn n_x(&self) -> usize {
        self.0.n_x()
    }
    #[getter]
    fn n_xi(&self) -> usize {
        self.0.n_xi()
    }
    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max()
    }
    #[getter]
    fn xi_max(&self) -> f64 {
        self.0.xi_max()
    }
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape()
    }

    fn x_nodes(&self) -> Vec<f64> {
        self.0.x_nodes()
    }

    fn xi_nodes(&self) -> Vec<f64> {
        self.0.xi_nodes()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        let g = &self.0;
        format!("Grid(d={}, n_x={}, n_xi={}, x_max={}, xi_max={})", g.d(), g.n_x(), g.n_xi(), g.x_max(), g.xi_max())
    }
}

/// Real phase-space field on a grid, stored row-major.
#[pyclass(name = "WignerField", module = "wfp_lab", from_py_object)]
#[derive(Clone)]
struct PyField(WignerField);

#[pymethods]
impl PyField {
    #[new]
    fn new(grid: PyGrid, values: Vec<f64>) -> PyResult<Self> {
        WignerField::new(grid.0, values).map(Self).map_err(to_py)
    }

    /// The normalized steady state.
    #[staticmethod]
    fn mu(grid: PyGrid) -> Self {
        Self(WignerField::mu(grid.0))
    }

    /// `mu` translated to mean `(shift_x, shift_xi)`, unit mass.
    #[staticmethod]
    fn displaced_gaussian(grid: PyGrid, shift_x: f64, shift_xi: f64) -> PyResult<Self> {
        let w = displaced_gaussian(&grid.0, shift_x, shift_xi).map_err(to_py)?;
        Ok(Self(w.scaled(1.0 / w.mass())))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| to_py(e.into()))?;
        WignerField::read_binary(std::io::BufReader::new(file)).map(Self).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| to_py(e.into()))?;
        self.0.write_binary(std::io::BufWriter::new(file)).map_err(to_py)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(*self.0.grid())
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn mass(&self) -> f64 {
        self.0.mass()
    }

    fn norm_l2(&self) -> f64 {
        self.0.norm_l2()
    }

    fn norm_hm(&self, m: u32) -> f64 {
        self.0.norm_hm(m)
    }

    fn __sub__(&self, other: &PyField) -> PyResult<Self> {
        self.0.sub(&other.0).map(Self).map_err(to_py)
    }

    fn __mul__(&self, s: f64) -> Self {
        Self(self.0.scaled(s))
    }

    fn __len__(&self) -> usize {
        self.0.values().len()
    }
}

/// Potential `V_0` together with the coupling `lambda`.
#[pyclass(name = "Potential", module = "wfp_lab", frozen, from_py_object)]
#[derive(Clone)]
struct PyPotential(PotentialSpec);

#[pymethods]
impl PyPotential {
    #[staticmethod]
    fn none() -> Self {
        Self(PotentialSpec::none())
    }

    /// `lambda * amp * sin(k0 . x)`.
    #[staticmethod]
    #[pyo3(signature = (lam, k0 = vec![1.0], amp = 1.0))]
    fn sinusoidal(lam: f64, k0: Vec<f64>, amp: f64) -> PyResult<Self> {
        PotentialSpec::new(lam, PotentialKind::Sinusoidal { k0, amp }).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (lam, center, width = 1.0, amp = 1.0))]
    fn gaussian_bump(lam: f64, center: Vec<f64>, width: f64, amp: f64) -> PyResult<Self> {
        PotentialSpec::new(lam, PotentialKind::GaussianBump { center, width, amp }).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (lam, amp = 1.0))]
    fn quadratic(lam: f64, amp: f64) -> PyResult<Self> {
        PotentialSpec::new(lam, PotentialKind::Quadratic { amp }).map(Self).map_err(to_py)
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.0.lambda
    }

    fn with_lambda(&self, lam: f64) -> Self {
        Self(self.0.with_lambda(lam))
    }

    fn __repr__(&self) -> String {
        format!("Potential(lambda={}, kind={:?})", self.0.lambda, self.0.kind)
    }
}

#[pyfunction]
fn apply_l(w: &PyField) -> PyField {
    PyField(wfp_operator::apply_l(&w.0))
}

#[pyfunction]
fn apply_theta(w: &PyField, potential: &PyPotential) -> PyResult<PyField> {
    wfp_core::potential_theta::apply_theta(&w.0, &potential.0).map(PyField).map_err(to_py)
}

/// `||L w - lambda Theta w||_{H_m}`.
#[pyfunction]
#[pyo3(signature = (w, potential, m = 4))]
fn stationarity_residual(w: &PyField, potential: &PyPotential, m: u32) -> PyResult<f64> {
    steady_state::stationarity_residual(&w.0, &potential.0, m).map_err(to_py)
}

/// Result of the stationary fixed-point iteration.
#[pyclass(name = "FixedPoint", module = "wfp_lab", get_all, frozen)]
struct PyFixedPoint {
    w_inf: PyField,
    iterations: usize,
    converged: bool,
    residuals: Vec<f64>,
    increments: Vec<f64>,
    contraction: Vec<f64>,
    mass: f64,
}

#[pyfunction]
#[pyo3(signature = (grid, potential, m = 4, tol = 1e-10, max_iter = 50, backend = "semigroup"))]
fn fixed_point(py: Python<'_>, grid: PyGrid, potential: PyPotential, m: u32, tol: f64, max_iter: usize, backend: &str) -> PyResult<PyFixedPoint> {
    let b = self::backend(backend)?;
    let r = py.detach(move || steady_state::fixed_point_solve(&grid.0, &potential.0, m, tol, max_iter, b)).map_err(to_py)?;
    Ok(PyFixedPoint {
        iterations: r.iterations,
        converged: r.converged,
        residuals: r.residuals,
        increments: r.increments,
        contraction: r.contraction,
        mass: r.mass,
        w_inf: PyField(r.w_inf),
    })
}

/// Time series recorded by `evolve`.
#[pyclass(name = "Evolution", module = "wfp_lab", get_all, frozen)]
struct PyEvolution {
    times: Vec<f64>,
    mass: Vec<f64>,
    hm_distance: Vec<f64>,
    h_distance: Vec<f64>,
    fitted_rate: Option<f64>,
    final_field: PyField,
}

#[pyfunction]
#[pyo3(signature = (w0, potential, reference, dt = 1e-3, t_end = 10.0, record_every = 10, m = 4, fit_window = (2.0, 8.0)))]
#[allow(clippy::too_many_arguments)]
fn evolve(
    py: Python<'_>,
    w0: PyField,
    potential: PyPotential,
    reference: PyField,
    dt: f64,
    t_end: f64,
    record_every: usize,
    m: u32,
    fit_window: (f64, f64),
) -> PyResult<PyEvolution> {
    let cfg = PropagatorConfig { dt, t_end, record_every, m, fit_window: [fit_window.0, fit_window.1], ..Default::default() };
    let (report, w) = py.detach(move || evolve_with_state(&w0.0, &cfg, &potential.0, &reference.0)).map_err(to_py)?;
    Ok(PyEvolution {
        fitted_rate: report.fit.as_ref().map(|f| f.rate),
        times: report.times,
        mass: report.mass,
        hm_distance: report.hm_distance,
        h_distance: report.h_distance_trunc,
        final_field: PyField(w),
    })
}

/// Rightmost eigenvalues `(re, im)` of the dense generator on an `n x n`
/// coarse grid, and whether the gap check passes.
#[pyfunction]
#[pyo3(signature = (n = 32, k = 10))]
fn spectrum(py: Python<'_>, n: usize, k: usize) -> PyResult<(Vec<(f64, f64)>, bool)> {
    let eigs = py
        .detach(move || spectral::assemble_generator(&CoarseBox::new(n)).and_then(|h| spectral::all_eigenvalues(&h)))
        .map_err(to_py)?;
    let pass = spectral::verify_gap(&eigs, SIGMA).pass;
    Ok((eigs.iter().take(k).map(|z| (z.re, z.im)).collect(), pass))
}

/// Theory constants as a JSON string.
#[pyfunction]
#[pyo3(signature = (m = 4, d = 1, potential = None))]
fn constants_json(m: u32, d: usize, potential: Option<PyPotential>) -> PyResult<String> {
    let spec = potential.map_or_else(PotentialSpec::none, |p| p.0);
    let opts = ConstantsOptions { gamma_grid: GridSpec::default_for(d, 64).ok(), ..ConstantsOptions::default() };
    let c = compute_constants(m, d, &spec, &opts).map_err(to_py)?;
    serde_json::to_string(&c).map_err(|e| WfpLabError::new_err(e.to_string()))
}

/// Trace, Hermiticity, spectrum bounds and the `T_2` relation of the
/// density matrix of a one-dimensional field.
#[pyfunction]
fn density_diagnostics<'py>(py: Python<'py>, w: &PyField) -> PyResult<Bound<'py, PyDict>> {
    let (d, _) = cli_io::density_diagnostics(&w.0).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("trace", d.trace)?;
    out.set_item("hermiticity_error", d.hermiticity_error)?;
    out.set_item("min_eigenvalue", d.positivity.min_eigenvalue)?;
    out.set_item("max_eigenvalue", d.positivity.max_eigenvalue)?;
    out.set_item("negative_mass", d.positivity.negative_mass)?;
    out.set_item("t2_norm", d.t2_norm)?;
    out.set_item("t2_relative_error", d.t2_relative_error)?;
    out.set_item("pass", d.pass)?;
    Ok(out)
}

/// Run a scenario as `wfp-lab` would; returns the exit code.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = vec![]))]
fn run(py: Python<'_>, config: Option<String>, overrides: Vec<String>) -> PyResult<i32> {
    py.detach(move || {
        let cfg = RunConfig::load(config.as_deref().map(std::path::Path::new), &overrides)?;
        cli_io::run(&cfg).map(|o| o.code)
    })
    .or_else(|e| match e {
        WfpError::Config { .. } => Err(to_py(e)),
        other => Ok(cli_io::exit_code(&other)),
    })
}

#[pymodule]
fn wfp_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SIGMA", SIGMA)?;
    m.add("VERSION", cli_io::VERSION)?;
    m.add("WfpLabError", m.py().get_type::<WfpLabError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add("InvariantError", m.py().get_type::<InvariantError>())?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyPotential>()?;
    m.add_class::<PyFixedPoint>()?;
    m.add_class::<PyEvolution>()?;
    m.add_function(wrap_pyfunction!(apply_l, m)?)?;
    m.add_function(wrap_pyfunction!(apply_theta, m)?)?;
    m.add_function(wrap_pyfunction!(stationarity_residual, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(constants_json, m)?)?;
    m.add_function(wrap_pyfunction!(density_diagnostics, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

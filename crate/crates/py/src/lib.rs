//! Python bindings: `vsub.Model`, `vsub.Session` and the theory checks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use vsub_core::deform::{build_model, read_container, subspace_blob, write_container, ModelConfig};
use vsub_core::mesh::{generate_primitive, load_mesh, MeshFormat, ProxyMode};
use vsub_core::runtime::{
    parse_script, run_script, ConstraintMode, ScriptOutput, Session, SessionOptions, SharedModel, DEFAULT_ITERS,
    DEFAULT_PSI_CAP,
};
use vsub_core::service::ModelCatalog;
use vsub_core::theory::{exactness_suite, run_verify};
use vsub_core::{Error, ErrorClass};

fn py_err(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Parse | ErrorClass::Validation => PyValueError::new_err(msg),
        ErrorClass::Numeric => PyRuntimeError::new_err(msg),
        ErrorClass::Io => PyOSError::new_err(msg),
    }
}

/// Serializable value as plain Python objects.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn triples(v: &[nalgebra::Vector3<f64>]) -> Vec<[f64; 3]> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// A precomputed reduced model, shared by any number of sessions.
#[pyclass(name = "Model", module = "vsub", frozen)]
struct PyModel {
    inner: Arc<SharedModel>,
}

#[pymethods]
impl PyModel {
    /// Precomputes a model from a mesh file or a bundled name
    /// (plane, cylinder, bar, solid_cylinder).
    #[staticmethod]
    #[pyo3(signature = (mesh, m=None, d=None, alpha=None, beta=None, gamma=None, seed=None, group=false))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        py: Python<'_>,
        mesh: &str,
        m: Option<usize>,
        d: Option<usize>,
        alpha: Option<f64>,
        beta: Option<f64>,
        gamma: Option<f64>,
        seed: Option<u64>,
        group: bool,
    ) -> PyResult<Self> {
        let (mesh, mut cfg) = if MeshFormat::from_path(Path::new(mesh)).is_some() {
            (load_mesh(Path::new(mesh), None).map_err(py_err)?, ModelConfig::default())
        } else {
            let catalog = ModelCatalog::bundled();
            let entry = catalog
                .entries()
                .iter()
                .find(|e| e.name == mesh)
                .ok_or_else(|| PyValueError::new_err(format!("unknown mesh '{mesh}'")))?;
            (generate_primitive(&entry.primitive).map_err(py_err)?, entry.config.clone())
        };
        cfg.m = m.unwrap_or(cfg.m);
        cfg.d = d.unwrap_or(cfg.d);
        cfg.params.alpha = alpha.unwrap_or(cfg.params.alpha);
        cfg.params.beta = beta.unwrap_or(cfg.params.beta);
        cfg.params.gamma = gamma.unwrap_or(cfg.params.gamma);
        cfg.seed = seed.unwrap_or(cfg.seed);
        if group {
            cfg.proxy_mode = ProxyMode::Group;
        }
        let shared = py
            .detach(|| build_model(mesh, &cfg).map_err(Error::from).and_then(|m| Ok(SharedModel::new(m)?)))
            .map_err(py_err)?;
        Ok(Self {
            inner: Arc::new(shared),
        })
    }

    /// Reads a VSUB container.
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let shared = py
            .detach(|| read_container(&path).map_err(Error::from).and_then(|m| Ok(SharedModel::new(m)?)))
            .map_err(py_err)?;
        Ok(Self {
            inner: Arc::new(shared),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_container(&self.inner.model, &path).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.model.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.model.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.model.d()
    }

    /// Number of patches.
    #[getter]
    fn s(&self) -> usize {
        self.inner.model.s()
    }

    /// Length of the reduced position vector X.
    #[getter]
    fn k(&self) -> usize {
        self.inner.model.k()
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.model.kind()).to_lowercase()
    }

    fn matrix_bytes(&self) -> usize {
        self.inner.model.matrix_bytes()
    }

    fn rest_vertices(&self) -> Vec<[f64; 3]> {
        triples(self.inner.model.mesh().vertices())
    }

    fn rest_x(&self) -> Vec<f64> {
        self.inner.model.rest_x().as_slice().to_vec()
    }

    /// The N_W / U_W vertex blocks in the streaming layout.
    fn subspace_blob<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &subspace_blob(&self.inner.model))
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.model;
        format!("Model(n={}, m={}, d={}, s={}, kind={})", m.n(), m.m(), m.d(), m.s(), self.kind())
    }
}

/// A deformation session over a model.
#[pyclass(name = "Session", module = "vsub")]
struct PySession {
    inner: Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (model, iters=DEFAULT_ITERS, conformal=false, psi_cap=DEFAULT_PSI_CAP, soft=false, soft_delta=None, adapt_rotation=true))]
    fn new(
        model: &PyModel,
        iters: usize,
        conformal: bool,
        psi_cap: f64,
        soft: bool,
        soft_delta: Option<f64>,
        adapt_rotation: bool,
    ) -> PyResult<Self> {
        let mode = if soft || soft_delta.is_some() {
            ConstraintMode::Soft { delta: soft_delta }
        } else {
            ConstraintMode::Hard
        };
        let opts = SessionOptions {
            iters,
            mode,
            conformal,
            psi_cap,
            adapt_rotation,
        };
        let inner = Session::new(Arc::clone(&model.inner), opts).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Constrains coordinate rows: `3v + c` for vertex `v`, component `c`.
    fn set_handles(&mut self, py: Python<'_>, rows: Vec<usize>) -> PyResult<()> {
        let s = &mut self.inner;
        py.detach(|| s.set_handles(&rows)).map_err(py_err)
    }

    fn handles(&self) -> Vec<usize> {
        self.inner.handles().to_vec()
    }

    fn rest_targets(&self) -> Vec<f64> {
        self.inner.rest_targets().as_slice().to_vec()
    }

    fn set_targets(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_targets(&values).map_err(py_err)
    }

    /// Runs one frame and returns its energy, residual and timings.
    fn frame<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = &mut self.inner;
        let stats = py.detach(|| s.frame()).map_err(py_err)?;
        to_py(py, &stats)
    }

    fn reconstruct(&self, py: Python<'_>) -> Vec<[f64; 3]> {
        let s = &self.inner;
        triples(&py.detach(|| s.reconstruct()))
    }

    /// Largest handle deviation of the given (or current) reconstruction.
    #[pyo3(signature = (vertices=None))]
    fn reconstruction_residual(&self, vertices: Option<Vec<[f64; 3]>>) -> f64 {
        let v = match vertices {
            Some(v) => v.iter().map(|p| nalgebra::Vector3::from(*p)).collect(),
            None => self.inner.reconstruct(),
        };
        self.inner.reconstruction_residual(&v)
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn x(&self) -> Vec<f64> {
        self.inner.x().as_slice().to_vec()
    }

    fn s(&self) -> Vec<f64> {
        self.inner.s().as_slice().to_vec()
    }

    fn r0(&self) -> [[f64; 3]; 3] {
        let r = self.inner.r0();
        [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]])
    }

    fn psi(&self) -> Vec<f64> {
        self.inner.psi().to_vec()
    }

    fn reset(&mut self) {
        self.inner.reset();
    }

    /// Runs a JSON-lines batch script and returns its trace rows.
    #[pyo3(signature = (script, frames_dir=None, base_dir=None))]
    fn run_script<'py>(
        &mut self,
        py: Python<'py>,
        script: &str,
        frames_dir: Option<PathBuf>,
        base_dir: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ops = parse_script(script).map_err(py_err)?;
        let out = ScriptOutput {
            frames_dir,
            base_dir: base_dir.unwrap_or_default(),
        };
        let s = &mut self.inner;
        let trace = py.detach(|| run_script(s, &ops, &out)).map_err(py_err)?;
        to_py(py, &trace)
    }
}

/// Error-bound Monte Carlo plus exactness cases, as a dict.
#[pyfunction]
#[pyo3(signature = (seed=7, instances=200, max_n=24))]
fn verify(py: Python<'_>, seed: u64, instances: usize, max_n: usize) -> PyResult<Bound<'_, PyAny>> {
    let report = py.detach(|| run_verify(seed, instances, max_n));
    to_py(py, &report)
}

/// Worst relative H-norm error of reduced solves over random instances.
#[pyfunction]
#[pyo3(signature = (seed=2024, instances=50, max_n=30))]
fn exactness(py: Python<'_>, seed: u64, instances: usize, max_n: usize) -> f64 {
    py.detach(|| exactness_suite(seed, instances, max_n, 1e-8)).max_rel_error
}

#[pymodule]
fn vsub(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(exactness, m)?)?;
    m.add("PROTOCOL_VERSION", vsub_core::service::PROTOCOL_VERSION)?;
    Ok(())
}

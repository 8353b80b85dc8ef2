//! Python bindings. Matrices cross the boundary as lists of rows.

use fbc2c::basis::{BasisSpec, BasisSystem, FemSpec, RfmSpec};
use fbc2c::encoder::{self, EncodeConfig, Encoder as CoreEncoder};
use fbc2c::experiment::{self, ExperimentConfig};
use fbc2c::io::{self, Container};
use fbc2c::neuralop::{self, OperatorNet as CoreNet};
use fbc2c::{Error, ErrorKind};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(msg),
        ErrorKind::MissingFile => PyFileNotFoundError::new_err(msg),
        ErrorKind::Numerical | ErrorKind::Other => PyRuntimeError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_name<T: DeserializeOwned>(field: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("invalid {field} `{name}`")))
}

/// Converts any serializable value into Python objects via `json.loads`.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load_config(problem: Option<&str>, toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match (problem, toml) {
        (_, Some(text)) => io::parse_config(text).map_err(to_py),
        (Some(p), None) => ExperimentConfig::preset(p).map_err(to_py),
        (None, None) => Err(PyValueError::new_err("pass problem= or config_toml=")),
    }
}

/// A fixed basis (RFM or 1D FEM).
#[pyclass(module = "pyfbc2c")]
struct Basis {
    inner: BasisSystem,
}

#[pymethods]
impl Basis {
    #[staticmethod]
    #[pyo3(signature = (dim, partitions, features, range, seed, window="smooth", activation="tanh", coordinates="local", bounds=None))]
    #[allow(clippy::too_many_arguments)]
    fn rfm(
        dim: usize,
        partitions: Vec<usize>,
        features: usize,
        range: f64,
        seed: u64,
        window: &str,
        activation: &str,
        coordinates: &str,
        bounds: Option<Vec<[f64; 2]>>,
    ) -> PyResult<Self> {
        let mut spec = RfmSpec::new(partitions, features, range, seed)
            .with_window(from_name("window", window)?)
            .with_activation(from_name("activation", activation)?)
            .with_coordinates(from_name("coordinates", coordinates)?);
        spec.bounds = bounds;
        let inner = BasisSystem::build(dim, &BasisSpec::Rfm(spec)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn fem(nodes: Vec<f64>) -> PyResult<Self> {
        let inner = BasisSystem::build(1, &BasisSpec::Fem(FemSpec { elements: None, nodes: Some(nodes), bounds: [0.0, 1.0] })).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Rows are points, columns basis functions.
    fn design_matrix(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.design_matrix(&matrix(points)?).map_err(to_py)?))
    }

    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.spec())
    }
}

/// Least-squares encoder for one design matrix.
#[pyclass(module = "pyfbc2c")]
struct Encoder {
    inner: CoreEncoder,
}

#[pymethods]
impl Encoder {
    /// `method` is "svd" (cut relative to the largest singular value),
    /// "svd_absolute" or "ridge".
    #[new]
    #[pyo3(signature = (design, method="svd", strength=1e-2))]
    fn new(design: Vec<Vec<f64>>, method: &str, strength: f64) -> PyResult<Self> {
        let config = match method {
            "svd" => EncodeConfig::svd(strength),
            "svd_absolute" => EncodeConfig::svd_absolute(strength),
            "ridge" => EncodeConfig::ridge(strength),
            other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
        };
        let design = matrix(design)?;
        let inner = CoreEncoder::new(&design, design.nrows(), config).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// One row of coefficients per row of sampled values.
    fn encode(&self, values: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&matrix(values)?).map_err(to_py)?))
    }

    #[getter]
    fn retained_modes(&self) -> usize {
        self.inner.retained_modes()
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.singular_values().to_vec()
    }
}

/// One-hidden-layer coefficient-to-coefficient network.
#[pyclass(module = "pyfbc2c")]
struct OperatorNet {
    inner: CoreNet,
}

#[pymethods]
impl OperatorNet {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dim, output_dim, seed=0))]
    fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: CoreNet::init(input_dim, hidden_dim, output_dim, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = Container::read(path.as_ref()).map_err(to_py)?;
        Ok(Self { inner: io::checkpoint_from_container(&c).map_err(to_py)?.net })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.input_dim(), self.inner.hidden_dim(), self.inner.output_dim())
    }

    fn flat_params(&self) -> Vec<f64> {
        self.inner.flat_params()
    }

    fn forward(&self, coefficients: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.forward(&matrix(coefficients)?).map_err(to_py)?))
    }
}

/// Mean and per-sample relative L2 error of `coeffs @ design.T` against `targets`.
#[pyfunction]
fn relative_loss(coeffs: Vec<Vec<f64>>, design: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>)> {
    let loss = neuralop::relative_loss(&matrix(coeffs)?, &matrix(design)?, &matrix(targets)?).map_err(to_py)?;
    Ok((loss.mean, loss.per_sample))
}

#[pyfunction]
fn effective_rank(singular_values: Vec<f64>) -> f64 {
    encoder::effective_rank(&singular_values)
}

/// Effective rank, variance entropy and spectra of a coefficient matrix.
#[pyfunction]
fn diagnostics<'py>(py: Python<'py>, coeffs: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    to_object(py, &encoder::diagnostics(&matrix(coeffs)?).map_err(to_py)?)
}

/// Resolved preset config as TOML text.
#[pyfunction]
fn preset_config(problem: &str) -> PyResult<String> {
    io::to_toml(&ExperimentConfig::preset(problem).map_err(to_py)?).map_err(to_py)
}

/// Generates a dataset and returns it as a dict of lists.
#[pyfunction]
#[pyo3(signature = (problem=None, config_toml=None))]
fn generate_dataset<'py>(py: Python<'py>, problem: Option<&str>, config_toml: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(problem, config_toml)?;
    let ds = cfg.dataset.generate().map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("input_points", rows(&ds.input_points))?;
    d.set_item("output_points", rows(&ds.output_points))?;
    d.set_item("inputs", rows(&ds.inputs))?;
    d.set_item("outputs", rows(&ds.outputs))?;
    d.set_item("tags", ds.tags.iter().map(|t| t.code() as i64).collect::<Vec<_>>())?;
    d.set_item("input_components", ds.input_components)?;
    d.set_item("output_components", ds.output_components)?;
    Ok(d)
}

/// Runs the full pipeline and returns the run report. `epochs` overrides
/// the config; `out_dir` writes the run directory.
#[pyfunction]
#[pyo3(signature = (problem=None, config_toml=None, epochs=None, out_dir=None))]
fn run<'py>(
    py: Python<'py>,
    problem: Option<&str>,
    config_toml: Option<&str>,
    epochs: Option<usize>,
    out_dir: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = load_config(problem, config_toml)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let result = py.detach(|| experiment::execute(&cfg)).map_err(to_py)?;
    if let Some(dir) = out_dir {
        experiment::write_run_dir(dir.as_ref(), &result).map_err(to_py)?;
    }
    to_object(py, &result.report)
}

/// Reads a container and returns `{name: (shape, flat row-major data)}`
/// plus its metadata under the key `"metadata"`.
#[pyfunction]
fn read_container<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let c = Container::read(path.as_ref()).map_err(to_py)?;
    let d = PyDict::new(py);
    for a in c.arrays() {
        d.set_item(&a.name, (a.shape.clone(), a.data.clone()))?;
    }
    d.set_item("metadata", to_object(py, &c.metadata)?)?;
    Ok(d)
}

#[pymodule]
fn pyfbc2c(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Basis>()?;
    m.add_class::<Encoder>()?;
    m.add_class::<OperatorNet>()?;
    m.add_function(wrap_pyfunction!(relative_loss, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(diagnostics, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(read_container, m)?)?;
    Ok(())
}

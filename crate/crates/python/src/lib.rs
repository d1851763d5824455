use std::collections::HashSet;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use lkconv::analysis::{self, OpticBudget, Policy};
use lkconv::{arch, fixtures, inference, reparam, ErrorClass};

create_exception!(lkconv, LkconvError, PyValueError);
create_exception!(lkconv, ParseError, LkconvError);
create_exception!(lkconv, ShapeError, LkconvError);
create_exception!(lkconv, PassError, LkconvError);

fn err(e: lkconv::Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Parse => ParseError::new_err(msg),
        ErrorClass::Shape => ShapeError::new_err(msg),
        ErrorClass::Pass => PassError::new_err(msg),
    }
}

/// Serializes through JSON so reports arrive as plain dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Dense `(n, c, h, w)` float32 tensor.
#[pyclass(name = "Tensor", module = "lkconv", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: lkconv::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        let shape = lkconv::Shape::new(shape.0, shape.1, shape.2, shape.3).map_err(err)?;
        Ok(Self {
            inner: lkconv::Tensor::from_vec(shape, data).map_err(err)?,
        })
    }

    /// Uniform in `[low, high)` from a seeded stream.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, low = -1.0, high = 1.0))]
    fn random(shape: (usize, usize, usize, usize), seed: u64, low: f32, high: f32) -> PyResult<Self> {
        let inner = lkconv::Tensor::random(shape, &mut lkconv::Rng::new(seed), low, high).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: lkconv::Tensor::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor({})", self.inner.shape())
    }
}

/// Validated layer graph with its weights.
#[pyclass(name = "Graph", module = "lkconv", skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: lkconv::LayerGraph,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    #[pyo3(signature = (path, weights = None))]
    fn load(path: PathBuf, weights: Option<PathBuf>) -> PyResult<Self> {
        let inner = arch::load_arch(path, weights.as_deref()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, weights = None))]
    fn parse(text: &str, weights: Option<PathBuf>) -> PyResult<Self> {
        let inner = arch::parse_arch(text, weights.as_deref()).map_err(err)?;
        Ok(Self { inner })
    }

    /// The shipped 15x15 segmentation encoder with seeded weights.
    #[staticmethod]
    fn extremec3() -> PyResult<Self> {
        Ok(Self {
            inner: fixtures::extremec3(None).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn input(&self) -> (usize, usize, usize) {
        self.inner.input()
    }

    fn node_names(&self) -> Vec<String> {
        self.inner.nodes().iter().map(|n| n.name.clone()).collect()
    }

    fn with_input(&self, input: (usize, usize, usize)) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_input(input).map_err(err)?,
        })
    }

    fn run(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyTensor> {
        let g = &self.inner;
        let x = &x.inner;
        let y = py.detach(|| inference::run_graph(g, x)).map_err(err)?;
        Ok(PyTensor { inner: y })
    }

    fn to_json(&self) -> String {
        arch::to_json(&self.inner)
    }

    fn save_weights(&self, dir: PathBuf) -> PyResult<()> {
        arch::save_weights(&self.inner, dir).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Graph({:?}, {} nodes)", self.inner.name(), self.inner.nodes().len())
    }
}

/// Per-node MACs and parameters as a dict.
#[pyfunction]
fn count_macs<'py>(py: Python<'py>, graph: &PyGraph) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::count_macs(&graph.inner).map_err(err)?)
}

/// The human-readable report table.
#[pyfunction]
fn render_table(graph: &PyGraph) -> PyResult<String> {
    Ok(analysis::render_table(&analysis::count_macs(&graph.inner).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (graph, offload = vec!["first".to_string()]))]
fn partition<'py>(py: Python<'py>, graph: &PyGraph, offload: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let report = analysis::count_macs(&graph.inner).map_err(err)?;
    let names = analysis::resolve_offload(&report, &offload).map_err(err)?;
    to_py(py, &analysis::partition(&report, &names).map_err(err)?)
}

/// Merges branch blocks and folds batch norms; returns the graph and per-block reports.
#[pyfunction]
#[pyo3(signature = (graph, skip = Vec::new()))]
fn compress<'py>(py: Python<'py>, graph: &PyGraph, skip: Vec<String>) -> PyResult<(PyGraph, Bound<'py, PyAny>)> {
    let report = analysis::count_macs(&graph.inner).map_err(err)?;
    let skip: HashSet<String> = analysis::resolve_offload(&report, &skip).map_err(err)?.into_iter().collect();
    let g = &graph.inner;
    let (compressed, reports) = py.detach(|| reparam::compress_graph(g, &skip)).map_err(err)?;
    Ok((PyGraph { inner: compressed }, to_py(py, &reports)?))
}

#[pyfunction]
#[pyo3(signature = (a, b, trials = 3, seed = 0, tol = reparam::GRAPH_TOLERANCE))]
fn verify<'py>(
    py: Python<'py>,
    a: &PyGraph,
    b: &PyGraph,
    trials: usize,
    seed: u64,
    tol: f32,
) -> PyResult<Bound<'py, PyAny>> {
    let (ga, gb) = (&a.inner, &b.inner);
    let v = py
        .detach(|| reparam::verify_equivalence(ga, gb, trials, seed, tol))
        .map_err(err)?;
    to_py(py, &v)
}

/// Feasible `(channels, side)` pairs, best first.
#[pyfunction]
#[pyo3(signature = (budget, channels, sides, policy = "size-first"))]
fn tradeoff(
    budget: (u64, u64, u64),
    channels: Vec<u64>,
    sides: Vec<u64>,
    policy: &str,
) -> PyResult<Vec<(u64, u64)>> {
    let budget = OpticBudget::new(budget.0, budget.1, budget.2).map_err(err)?;
    let policy: Policy = policy.parse().map_err(err)?;
    let configs = analysis::enumerate_tradeoff(&budget, &channels, &sides, policy).map_err(err)?;
    Ok(configs.iter().map(|c| (c.channels, c.side)).collect())
}

#[pyfunction]
#[pyo3(signature = (pred, truth, classes = 2))]
fn miou(pred: &PyTensor, truth: &PyTensor, classes: usize) -> PyResult<f64> {
    analysis::miou(&pred.inner, &truth.inner, classes).map_err(err)
}

#[pymodule]
#[pyo3(name = "lkconv")]
fn lkconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(count_macs, m)?)?;
    m.add_function(wrap_pyfunction!(render_table, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(tradeoff, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add("LkconvError", py.get_type::<LkconvError>())?;
    m.add("ParseError", py.get_type::<ParseError>())?;
    m.add("ShapeError", py.get_type::<ShapeError>())?;
    m.add("PassError", py.get_type::<PassError>())?;
    Ok(())
}

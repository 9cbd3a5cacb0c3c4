//! Python bindings: the code solver, clustering metrics, the blob generator
//! and read-only access to trained checkpoints. Matrices cross the boundary
//! as lists of rows.

use llpco::datagen::{gen_blobs, BlobConfig};
use llpco::eval::{accuracies, ari, nmi, prototype_assignments};
use llpco::model::{encode, ModelState};
use llpco::ot::{self, MarginalSpec, ScoreMatrix, SinkhornParams, TransportPlan};
use llpco::trainer::{load_checkpoint, TrainingState};
use llpco::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Format(_) | Error::UnsupportedVersion { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>], width: usize) -> PyResult<Array2<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("expected rows of length {width}, found one of length {}", r.len())));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn marginals(scores: &ScoreMatrix, row: Vec<f64>, col: Option<Vec<f64>>) -> PyResult<MarginalSpec> {
    match col {
        Some(col) => MarginalSpec::new(row, col),
        None => MarginalSpec::with_uniform_columns(row, scores.samples()),
    }
    .map_err(to_py)
}

fn plan_dict<'py>(py: Python<'py>, plan: &TransportPlan) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("plan", rows_of(&plan.values))?;
    d.set_item("residual", plan.residual)?;
    d.set_item("iterations", plan.iterations_used)?;
    d.set_item("converged", plan.converged)?;
    d.set_item("entropy", ot::entropy(plan))?;
    Ok(d)
}

/// Entropic codes for a `K × n` score matrix with row marginal `row` and
/// column marginal `col` (uniform when omitted). Without `tol` exactly
/// `iters` sweeps run.
#[pyfunction]
#[pyo3(signature = (scores, row, col=None, epsilon=0.05, iters=5, tol=None))]
fn solve_codes<'py>(
    py: Python<'py>,
    scores: Vec<Vec<f64>>,
    row: Vec<f64>,
    col: Option<Vec<f64>>,
    epsilon: f64,
    iters: usize,
    tol: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = ScoreMatrix::from_rows(&scores).map_err(to_py)?;
    let m = marginals(&s, row, col)?;
    let params = match tol {
        Some(tol) => SinkhornParams::converged(epsilon, iters, tol),
        None => SinkhornParams::fixed(epsilon, iters),
    };
    let plan = py.detach(|| ot::solve_codes(&s, &m, &params)).map_err(to_py)?;
    plan_dict(py, &plan)
}

/// Exact zero-temperature plan for small instances (`K·n ≤ 64`).
#[pyfunction]
fn lp_oracle<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, row: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = ScoreMatrix::from_rows(&scores).map_err(to_py)?;
    let m = marginals(&s, row, None)?;
    let plan = ot::lp_oracle(&s, &m).map_err(to_py)?;
    plan_dict(py, &plan)
}

/// Acc_P, Acc_H (Hungarian), NMI and ARI of cluster `assignments` against
/// `labels`, with `permutation[cluster] = class`.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, labels: Vec<usize>, assignments: Vec<usize>, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let acc = accuracies(&labels, &assignments, k).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("acc_p", acc.acc_p)?;
    d.set_item("acc_h", acc.acc_h)?;
    d.set_item("nmi", nmi(&labels, &assignments).map_err(to_py)?)?;
    d.set_item("ari", ari(&labels, &assignments).map_err(to_py)?)?;
    d.set_item("permutation", acc.permutation)?;
    Ok(d)
}

/// Gaussian blobs; returns `(features, labels)`.
#[pyfunction]
#[pyo3(signature = (proportions, dim, samples, center_separation=6.0, sigma=1.0, seed=0))]
fn blobs(
    py: Python<'_>,
    proportions: Vec<f64>,
    dim: usize,
    samples: usize,
    center_separation: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f32>>, Vec<usize>)> {
    let config = BlobConfig { class_count: proportions.len(), dim, proportions, center_separation, sigma, samples, seed };
    let ds = py.detach(|| gen_blobs(&config)).map_err(to_py)?;
    let rows = ds.features.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok((rows, ds.labels))
}

/// A trained encoder and prototype bank.
#[pyclass(frozen)]
struct Model {
    state: ModelState,
    training: Option<TrainingState>,
}

impl Model {
    fn embed_rows(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
        let x = matrix(&x, self.state.config.input_dim)?;
        py.detach(|| encode(&self.state, x.view()).map(|(z, _)| z.into_values())).map_err(to_py)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(py: Python<'_>, path: std::path::PathBuf) -> PyResult<Self> {
        let ck = py.detach(|| load_checkpoint(&path)).map_err(to_py)?;
        Ok(Self { state: ck.model, training: ck.training })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.state.config.input_dim
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.state.config.embed_dim
    }

    #[getter]
    fn cluster_count(&self) -> usize {
        self.state.config.cluster_count
    }

    #[getter]
    fn prototypes(&self) -> Vec<Vec<f64>> {
        rows_of(&self.state.prototypes)
    }

    /// Training config, trace and run description as a JSON string, or
    /// `None` for a parameters-only checkpoint.
    #[getter]
    fn training_json(&self) -> Option<String> {
        self.training.as_ref().map(|t| serde_json::to_string(t).expect("training state serializes"))
    }

    /// Unit-norm embeddings of the rows of `x`.
    fn embed(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows_of(&self.embed_rows(py, x)?))
    }

    /// Highest-scoring prototype for each row of `x`.
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let z = self.embed_rows(py, x)?;
        prototype_assignments(&self.state, &z).map_err(to_py)
    }
}

#[pymodule]
fn pyllpco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve_codes, m)?)?;
    m.add_function(wrap_pyfunction!(lp_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(blobs, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}

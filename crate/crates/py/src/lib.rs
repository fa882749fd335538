//! Python module `ovo`.
//!
//! Matrices cross the boundary as lists of rows and vectors as flat lists.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ovo_core::later::{self, CorrectionMode, LoraBankB, StreamVideo};
use ovo_core::metrics;
use ovo_core::ovosplit::{self, Regime, SplitConfig};
use ovo_core::tensorio::{self, Manifest, TensorFile};
use ovo_core::viewscore;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn from_vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Orthogonal-complement projector of the LoRA-B subspace.
#[pyclass(name = "ProjectorAnchor", module = "ovo", frozen)]
struct PyAnchor(later::ProjectorAnchor);

#[pymethods]
impl PyAnchor {
    /// Build from a list of `d × r` B matrices. Matrices whose row count is
    /// not `dim` are skipped.
    #[staticmethod]
    #[pyo3(signature = (matrices, dim, sv_threshold_rel = later::DEFAULT_SV_THRESHOLD))]
    fn build(matrices: Vec<Vec<Vec<f64>>>, dim: usize, sv_threshold_rel: f64) -> PyResult<Self> {
        let mut bank = LoraBankB::new(dim);
        for (i, m) in matrices.into_iter().enumerate() {
            bank.push(format!("b{i}"), to_matrix(m)?);
        }
        later::build_anchor(&bank, sv_threshold_rel).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self(later::ProjectorAnchor::identity(dim))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.rank()
    }

    #[getter]
    fn basis(&self) -> Vec<Vec<f64>> {
        from_matrix(self.0.basis())
    }

    #[getter]
    fn projector(&self) -> Vec<Vec<f64>> {
        from_matrix(self.0.projector())
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.0.singular_values().to_vec()
    }

    fn apply(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(v.len())?;
        Ok(from_vector(&self.0.apply(&to_vector(v))))
    }

    fn apply_implicit(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(v.len())?;
        Ok(from_vector(&self.0.apply_implicit(&to_vector(v))))
    }

    fn __repr__(&self) -> String {
        format!("ProjectorAnchor(dim={}, rank={})", self.0.dim(), self.0.rank())
    }
}

impl PyAnchor {
    fn check(&self, len: usize) -> PyResult<()> {
        if len != self.0.dim() {
            return Err(value_err(later::LaterError::DimensionMismatch {
                expected: self.0.dim(),
                actual: len,
            }));
        }
        Ok(())
    }
}

/// Source center plus the running target queue.
#[pyclass(name = "CenterState", module = "ovo")]
struct PyCenterState(later::CenterState);

#[pymethods]
impl PyCenterState {
    #[new]
    #[pyo3(signature = (mu_s, alpha = later::DEFAULT_ALPHA, capacity = None))]
    fn new(mu_s: Vec<f64>, alpha: f64, capacity: Option<usize>) -> PyResult<Self> {
        later::CenterState::new(to_vector(mu_s), alpha, capacity)
            .map(Self)
            .map_err(value_err)
    }

    fn observe(&mut self, h: Vec<f64>) -> PyResult<()> {
        self.0.observe(&to_vector(h)).map_err(value_err)
    }

    fn target_center(&self) -> Option<Vec<f64>> {
        self.0.target_center().as_ref().map(from_vector)
    }

    fn correction(&self, anchor: &PyAnchor) -> PyResult<Vec<f64>> {
        self.0.correction(&anchor.0).map(|d| from_vector(&d)).map_err(value_err)
    }

    #[getter]
    fn queue_count(&self) -> usize {
        self.0.queue_count()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }
}

/// Affine classifier over pooled view features.
#[pyclass(name = "ClassifierHead", module = "ovo", frozen)]
struct PyHead(later::ClassifierHead);

#[pymethods]
impl PyHead {
    #[new]
    fn new(weight: Vec<Vec<f64>>, bias: Vec<f64>, class_names: Vec<String>) -> PyResult<Self> {
        later::ClassifierHead::new(to_matrix(weight)?, to_vector(bias), class_names)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.class_names().to_vec()
    }

    fn logits(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        if h.len() != self.0.dim() {
            return Err(PyValueError::new_err(format!("expected {} features, got {}", self.0.dim(), h.len())));
        }
        Ok(from_vector(&self.0.logits(&to_vector(h))))
    }

    /// Subtract `delta` from every view, average the logits and return
    /// `(class index, averaged logits)`.
    #[pyo3(signature = (views, delta = None))]
    fn classify(&self, views: Vec<Vec<f64>>, delta: Option<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
        let delta = delta.map_or_else(|| DVector::zeros(self.0.dim()), to_vector);
        let p = later::classify_video(&to_matrix(views)?, &delta, &self.0).map_err(value_err)?;
        Ok((p.predicted, from_vector(&p.logits)))
    }
}

/// Run an ordered stream of `(video_id, views, label or None)` tuples.
/// Returns a dict with `predictions` (list of class indices) and `accuracy`
/// (percent, or None without labels).
#[pyfunction]
#[pyo3(signature = (videos, state, anchor, head, mode = "later"))]
fn evaluate_stream<'py>(
    py: Python<'py>,
    videos: Vec<(String, Vec<Vec<f64>>, Option<usize>)>,
    state: &PyCenterState,
    anchor: &PyAnchor,
    head: &PyHead,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: CorrectionMode = mode.parse().map_err(PyValueError::new_err)?;
    let videos = videos
        .into_iter()
        .map(|(video_id, views, label)| Ok(StreamVideo { video_id, views: to_matrix(views)?, label }))
        .collect::<PyResult<Vec<_>>>()?;
    let result = later::evaluate_stream(&videos, state.0.clone(), &anchor.0, &head.0, mode).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("predictions", result.predictions.iter().map(|p| p.predicted).collect::<Vec<_>>())?;
    out.set_item("accuracy", result.accuracy())?;
    Ok(out)
}

#[pyfunction]
fn compute_pd(acc_id: f64, acc_ood: f64) -> Option<f64> {
    metrics::compute_pd(acc_id, acc_ood)
}

/// Returns `(h, degenerate)`.
#[pyfunction]
fn compute_h(acc_id: f64, acc_ood: f64) -> (f64, bool) {
    metrics::compute_h(acc_id, acc_ood)
}

#[pyfunction]
fn round2(x: f64) -> f64 {
    metrics::round2(x)
}

#[pyfunction]
fn median(values: Vec<f64>) -> PyResult<f64> {
    viewscore::median(&values).map_err(value_err)
}

/// `"low_pool"`, `"isolation"`, `"ood_pool"` or `"excluded:<reason>"` under
/// the default split thresholds.
#[pyfunction]
fn assign_regime(score: f64) -> String {
    match ovosplit::assign_regime(score, &SplitConfig::default()) {
        Regime::LowPool => "low_pool".into(),
        Regime::Isolation => "isolation".into(),
        Regime::OodPool => "ood_pool".into(),
        Regime::Excluded(r) => format!("excluded:{}", r.as_str()),
    }
}

/// Split a scored manifest given as CSV text. Returns a dict with the
/// assigned `manifest_csv`, `assignments_csv` and `summary` (a dict).
#[pyfunction]
#[pyo3(signature = (manifest_csv, topup_csv = None, seed = 0, per_class_test_count = 20))]
fn split_manifest<'py>(
    py: Python<'py>,
    manifest_csv: &str,
    topup_csv: Option<&str>,
    seed: u64,
    per_class_test_count: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SplitConfig {
        seed,
        per_class_test_count,
        ..SplitConfig::default()
    };
    let base = Manifest::from_csv_str(manifest_csv).map_err(value_err)?;
    let merged = match topup_csv {
        Some(t) => {
            let topup = Manifest::from_csv_str(t).map_err(value_err)?;
            ovosplit::merge_topup(&base, &topup, &cfg).map_err(value_err)?.0
        }
        None => base,
    };
    let out = ovosplit::build_splits(&merged, &cfg).map_err(value_err)?;
    let summary = serde_json::to_string(&out.summary).map_err(value_err)?;
    let json = py.import("json")?;
    let dict = PyDict::new(py);
    dict.set_item("manifest_csv", out.manifest.to_csv_string())?;
    dict.set_item("assignments_csv", ovosplit::assignments_csv(&out.assignments))?;
    dict.set_item("summary", json.call_method1("loads", (summary,))?)?;
    Ok(dict)
}

/// Read a tensor file as `(dims, flat row-major data)`.
#[pyfunction]
fn read_tensor(path: &str) -> PyResult<(Vec<u64>, Vec<f32>)> {
    let t = tensorio::read_tensor(path).map_err(value_err)?;
    Ok((t.dims().to_vec(), t.into_data()))
}

#[pyfunction]
fn write_tensor(path: &str, dims: Vec<u64>, data: Vec<f32>) -> PyResult<()> {
    let t = TensorFile::new(dims, data).map_err(value_err)?;
    tensorio::write_tensor(&t, path).map_err(value_err)
}

/// Read and validate a pose file; returns one dict per frame.
#[pyfunction]
fn read_poses<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    let poses = tensorio::read_poses(path).map_err(value_err)?;
    let text = serde_json::to_string(&poses).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule]
fn ovo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAnchor>()?;
    m.add_class::<PyCenterState>()?;
    m.add_class::<PyHead>()?;
    m.add_function(wrap_pyfunction!(evaluate_stream, m)?)?;
    m.add_function(wrap_pyfunction!(compute_pd, m)?)?;
    m.add_function(wrap_pyfunction!(compute_h, m)?)?;
    m.add_function(wrap_pyfunction!(round2, m)?)?;
    m.add_function(wrap_pyfunction!(median, m)?)?;
    m.add_function(wrap_pyfunction!(assign_regime, m)?)?;
    m.add_function(wrap_pyfunction!(split_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(read_poses, m)?)?;
    Ok(())
}

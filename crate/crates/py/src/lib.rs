//! Python bindings for the rfshim toolkit.

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;

use rfshim::dataset_io::{load_dataset, save_dataset};
use rfshim::field::{augment_rotate, generate_dataset, Dataset, GenConfig, SliceRecord, Split};
use rfshim::nfd::{classify, load_nfd, save_nfd, uniformity_stats, Label, NfdModel, UniformityCriterion};
use rfshim::objective::{mls_objective, objective_gradient, quadrature_weights, rmse_percent, ObjectiveParams, ShimWeights};
use rfshim::predictor::{build_predictor, load_model, predict, save_model, train, PredictorModel, TrainConfig};
use rfshim::solvers::{self, AdamHyper, AdamOptions, MlsOptions, RestartOptions, SolveReport};
use rfshim::ShimError;

create_exception!(rfshim_py, DataError, PyValueError, "Malformed, corrupt or inconsistent data.");

fn to_py(e: ShimError) -> PyErr {
    match e {
        ShimError::InvalidArgument(_) | ShimError::InvalidGeometry(_) => PyValueError::new_err(e.to_string()),
        ShimError::Io(_) => PyOSError::new_err(e.to_string()),
        _ => DataError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for rfshim::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn weights(values: Vec<Complex64>) -> PyResult<ShimWeights> {
    ShimWeights::new(values).py_err()
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {name:?}"))),
    }
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Uniform => "uniform",
        Label::NonUniform => "non_uniform",
    }
}

/// One slice: per-coil complex field, mask, target and optional reference.
#[pyclass(name = "SliceRecord", module = "rfshim_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySliceRecord {
    inner: SliceRecord,
}

#[pymethods]
impl PySliceRecord {
    #[getter]
    fn slice_id(&self) -> String {
        self.inner.slice_id.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_coils(&self) -> usize {
        self.inner.n_coils()
    }

    /// Field samples, coil-major then row-major.
    #[getter]
    fn field(&self) -> Vec<Complex64> {
        self.inner.field.samples().to_vec()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.inner.mask.as_slice().to_vec()
    }

    #[getter]
    fn target(&self) -> Vec<f64> {
        self.inner.target.as_slice().to_vec()
    }

    #[getter]
    fn reference_weights(&self) -> Option<Vec<Complex64>> {
        self.inner.reference().map(|r| r.weights.values().to_vec())
    }

    #[getter]
    fn reference_rmse(&self) -> Option<f64> {
        self.inner.reference().map(|r| r.rmse_percent)
    }

    fn rmse_percent(&self, w: Vec<Complex64>) -> PyResult<f64> {
        let r = &self.inner;
        rmse_percent(&r.field, &weights(w)?, &r.mask, &r.target).py_err()
    }

    #[pyo3(signature = (w, lam = 0.0))]
    fn objective(&self, w: Vec<Complex64>, lam: f64) -> PyResult<f64> {
        let r = &self.inner;
        mls_objective(&r.field, &weights(w)?, &r.mask, &r.target, &ObjectiveParams::with_lambda(lam)).py_err()
    }

    /// Real gradient laid out as `[Re..., Im...]`.
    #[pyo3(signature = (w, lam = 0.0))]
    fn gradient(&self, w: Vec<Complex64>, lam: f64) -> PyResult<Vec<f64>> {
        let r = &self.inner;
        objective_gradient(&r.field, &weights(w)?, &r.mask, &r.target, &ObjectiveParams::with_lambda(lam)).py_err()
    }

    fn rotated(&self, quarter_turns: u8) -> PyResult<Self> {
        Ok(Self {
            inner: augment_rotate(&self.inner, quarter_turns).py_err()?,
        })
    }

    fn with_reference(&self, w: Vec<Complex64>) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.set_reference(&weights(w)?).py_err()?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "SliceRecord({:?}, n={}, coils={}, reference={})",
            self.inner.slice_id,
            self.inner.n(),
            self.inner.n_coils(),
            self.inner.reference().is_some()
        )
    }
}

#[pyclass(name = "Dataset", module = "rfshim_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n_slices = 100, n_coils = 8, grid = 101, seed = 0))]
    fn generate(py: Python<'_>, n_slices: usize, n_coils: usize, grid: usize, seed: u64) -> PyResult<Self> {
        let cfg = GenConfig {
            n_slices,
            n_coils,
            grid,
            seed,
            ..GenConfig::default()
        };
        let inner = py.detach(|| generate_dataset(&cfg)).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(path).py_err()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(&self.inner, path).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: isize) -> PyResult<PySliceRecord> {
        let n = self.inner.len() as isize;
        let j = if i < 0 { i + n } else { i };
        if !(0..n).contains(&j) {
            return Err(PyIndexError::new_err("record index out of range"));
        }
        Ok(PySliceRecord {
            inner: self.inner.records[j as usize].clone(),
        })
    }

    fn split_of(&self, i: usize) -> PyResult<&'static str> {
        self.inner
            .splits
            .get(i)
            .map(|s| split_name(*s))
            .ok_or_else(|| PyIndexError::new_err("record index out of range"))
    }

    /// Records of one split, or all records.
    #[pyo3(signature = (split = None))]
    fn records(&self, split: Option<&str>) -> PyResult<Vec<PySliceRecord>> {
        let recs: Vec<&SliceRecord> = match split {
            Some(s) => self.inner.records_in(parse_split(s)?),
            None => self.inner.records.iter().collect(),
        };
        Ok(recs.into_iter().map(|r| PySliceRecord { inner: r.clone() }).collect())
    }

    fn set_reference(&mut self, i: usize, w: Vec<Complex64>) -> PyResult<()> {
        let w = weights(w)?;
        let r = self
            .inner
            .records
            .get_mut(i)
            .ok_or_else(|| PyIndexError::new_err("record index out of range"))?;
        r.set_reference(&w).py_err()
    }
}

#[pyclass(name = "SolveReport", module = "rfshim_py", frozen)]
struct PySolveReport {
    inner: SolveReport,
}

#[pymethods]
impl PySolveReport {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn weights(&self) -> Vec<Complex64> {
        self.inner.final_weights.values().to_vec()
    }

    #[getter]
    fn rmse_percent(&self) -> f64 {
        self.inner.final_rmse_percent
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.final_objective
    }

    #[getter]
    fn trace(&self) -> Vec<f64> {
        self.inner.objective_trace.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn wall_time_s(&self) -> f64 {
        self.inner.wall_time_s
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("report serializes")
    }
}

fn report(r: rfshim::Result<SolveReport>) -> PyResult<PySolveReport> {
    Ok(PySolveReport { inner: r.py_err()? })
}

#[pyfunction]
#[pyo3(signature = (record, lam = 0.0, max_iter = 500, tol = 1e-8))]
fn mls_solve(py: Python<'_>, record: &PySliceRecord, lam: f64, max_iter: usize, tol: f64) -> PyResult<PySolveReport> {
    let opts = MlsOptions {
        max_iter,
        tol,
        init: None,
    };
    report(py.detach(|| solvers::mls_solve(&record.inner, &ObjectiveParams::with_lambda(lam), &opts)))
}

#[pyfunction]
#[pyo3(signature = (record, steps = 2000, lr = 1e-3, lam = 0.0))]
fn adam_solve(py: Python<'_>, record: &PySliceRecord, steps: usize, lr: f64, lam: f64) -> PyResult<PySolveReport> {
    let opts = AdamOptions {
        steps,
        init: None,
        hyper: AdamHyper {
            lr,
            ..AdamHyper::default()
        },
    };
    report(py.detach(|| solvers::adam_solve(&record.inner, &ObjectiveParams::with_lambda(lam), &opts)))
}

#[pyfunction]
#[pyo3(signature = (record, n_restarts = 300, steps = 2000, seed = 0, lam = 0.0))]
fn restart_search(
    py: Python<'_>,
    record: &PySliceRecord,
    n_restarts: usize,
    steps: usize,
    seed: u64,
    lam: f64,
) -> PyResult<PySolveReport> {
    let opts = RestartOptions {
        n_restarts,
        steps,
        seed,
        ..RestartOptions::default()
    };
    report(py.detach(|| solvers::restart_search(&record.inner, &ObjectiveParams::with_lambda(lam), &opts)))
}

#[pyfunction]
#[pyo3(signature = (record, phase_steps = 360, lam = 0.0))]
fn brute_force_phase_search(py: Python<'_>, record: &PySliceRecord, phase_steps: usize, lam: f64) -> PyResult<PySolveReport> {
    report(py.detach(|| {
        solvers::brute_force_phase_search(&record.inner, &ObjectiveParams::with_lambda(lam), phase_steps)
    }))
}

#[pyfunction(name = "quadrature_weights")]
fn py_quadrature_weights(n_coils: usize) -> Vec<Complex64> {
    quadrature_weights(n_coils).values().to_vec()
}

/// `(epoch, train_loss, val_loss)`
type HistoryRow = (usize, f64, Option<f64>);

#[pyclass(name = "Predictor", module = "rfshim_py")]
struct PyPredictor {
    inner: PredictorModel,
}

#[pymethods]
impl PyPredictor {
    #[staticmethod]
    #[pyo3(signature = (n_coils, grid, width_base = 8, seed = 0))]
    fn build(n_coils: usize, grid: usize, width_base: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: build_predictor(2 * n_coils, grid, width_base, seed).py_err()?,
        })
    }

    /// Trains on the dataset's train split. Returns the model and a list of
    /// `(epoch, train_loss, val_loss)` tuples.
    #[staticmethod]
    #[pyo3(signature = (dataset, epochs = 200, width_base = 8, batch_size = 16, lr = 1e-3, seed = 0))]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        epochs: usize,
        width_base: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<(Self, Vec<HistoryRow>)> {
        let cfg = TrainConfig {
            epochs,
            width_base,
            batch_size,
            lr,
            seed,
            ..TrainConfig::default()
        };
        let (inner, history) = py.detach(|| train(&dataset.inner, &cfg)).py_err()?;
        let rows = history.epochs.iter().map(|e| (e.epoch, e.train_loss, e.val_loss)).collect();
        Ok((Self { inner }, rows))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(path).py_err()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).py_err()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn predict(&self, record: &PySliceRecord) -> PyResult<Vec<Complex64>> {
        Ok(predict(&self.inner, &record.inner).py_err()?.weights.values().to_vec())
    }
}

#[pyclass(name = "Detector", module = "rfshim_py")]
struct PyDetector {
    inner: NfdModel,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_nfd(path).py_err()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_nfd(&self.inner, path).py_err()
    }

    #[getter]
    fn grid(&self) -> usize {
        self.inner.grid()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    #[setter]
    fn set_threshold(&mut self, t: f64) {
        self.inner.threshold = t;
    }

    /// Label and uniform-class confidence of a row-major magnitude map.
    fn classify(&self, map: Vec<f64>) -> PyResult<(&'static str, f64)> {
        let (label, conf) = classify(&self.inner, &map).py_err()?;
        Ok((label_name(label), conf))
    }
}

/// `(min/mean, coefficient of variation)` of a magnitude map over the
/// record's mask.
#[pyfunction(name = "uniformity_stats")]
fn py_uniformity_stats(map: Vec<f64>, record: &PySliceRecord) -> PyResult<(f64, f64)> {
    let s = uniformity_stats(&map, &record.inner.mask).py_err()?;
    Ok((s.min_over_mean, s.cov))
}

#[pyfunction]
#[pyo3(signature = (map, record, min_ratio = 0.15, max_cov = 0.35))]
fn uniformity_label(map: Vec<f64>, record: &PySliceRecord, min_ratio: f64, max_cov: f64) -> PyResult<&'static str> {
    let crit = UniformityCriterion { min_ratio, max_cov };
    Ok(label_name(crit.label(&map, &record.inner.mask).py_err()?))
}

#[pymodule]
fn rfshim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add_class::<PySliceRecord>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySolveReport>()?;
    m.add_class::<PyPredictor>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(mls_solve, m)?)?;
    m.add_function(wrap_pyfunction!(adam_solve, m)?)?;
    m.add_function(wrap_pyfunction!(restart_search, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_phase_search, m)?)?;
    m.add_function(wrap_pyfunction!(py_quadrature_weights, m)?)?;
    m.add_function(wrap_pyfunction!(py_uniformity_stats, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity_label, m)?)?;
    Ok(())
}

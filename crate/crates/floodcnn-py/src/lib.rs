//! Python bindings over the training engine. Exposes model building,
//! checkpoint I/O, forward/predict, dataset loading (from disk or
//! synthetic), k-fold splitting, training, evaluation, metrics, and the
//! finite-difference gradient check.
//!
//! Images cross the boundary as flat row-major `list[float]` plus an
//! explicit NHWC shape; no numpy dependency.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use floodcnn::checkpoint::{load_checkpoint, save_checkpoint};
use floodcnn::cli::render_param_table;
use floodcnn::data::{kfold_split, load_dataset, synthetic_dataset, CLASS_NAMES};
use floodcnn::gradcheck::check_layers;
use floodcnn::model::{catalog_plan, describe};
use floodcnn::optim::Rng;
use floodcnn::trainer::{
    evaluate as evaluate_core, metrics as metrics_core, train as train_core, ConfusionMatrix,
    StopReason, TrainConfig,
};
use floodcnn::{ArchId, BuildFlags, Mode, Model as CoreModel, Shape, Tensor};

fn err(e: floodcnn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_from(data: Vec<f32>, dims: &[usize]) -> PyResult<Tensor<f32>> {
    let shape = Shape::new(dims).map_err(err)?;
    Tensor::from_vec(shape, data).map_err(err)
}

/// A convolutional classifier with its architecture plan, weights, and the
/// seed it was initialized from.
#[pyclass(name = "Model", module = "floodcnn_py")]
pub struct PyModel {
    inner: CoreModel<f32>,
}

#[pymethods]
impl PyModel {
    /// Build a freshly initialized model from the architecture catalog
    /// (`"vgg3block"`, `"vgg16"`, or `"alexnet"`).
    #[staticmethod]
    #[pyo3(signature = (arch, input_size = 128, seed = 0, batchnorm = false, dropout = false, dropout_rate = 0.5))]
    fn build(
        arch: &str,
        input_size: usize,
        seed: u64,
        batchnorm: bool,
        dropout: bool,
        dropout_rate: f64,
    ) -> PyResult<Self> {
        let arch = ArchId::from_str(arch).map_err(err)?;
        let flags = BuildFlags { batchnorm, dropout, dropout_rate };
        let mut rng = Rng::new(seed);
        let inner = CoreModel::build(arch, flags, [input_size, input_size, 3], 2, &mut rng)
            .map_err(err)?;
        Ok(PyModel { inner })
    }

    /// Load a checkpoint written by `save` or by the CLI.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: load_checkpoint(&path, None).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    /// Class probabilities for a batch. `data` is flat row-major NHWC,
    /// `shape` is `[n, h, w, 3]`. Returns `(probs, [n, 2])`.
    fn forward(&mut self, data: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let batch = tensor_from(data, &shape)?;
        let probs = self.inner.forward(&batch, Mode::Infer).map_err(err)?;
        Ok((probs.data().to_vec(), probs.dims().to_vec()))
    }

    /// Predicted class names for a batch, one per sample.
    fn predict(&mut self, data: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<&'static str>> {
        let batch = tensor_from(data, &shape)?;
        let labels = self.inner.predict(&batch).map_err(err)?;
        Ok(labels.into_iter().map(|l| CLASS_NAMES[l]).collect())
    }

    /// The per-layer parameter table for this model's plan and input size.
    fn param_table(&self) -> PyResult<String> {
        let rows = describe(self.inner.plan(), self.inner.input_shape()).map_err(err)?;
        Ok(render_param_table(&rows))
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch().to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let [h, w, c] = self.inner.input_shape();
        (h, w, c)
    }

    fn __repr__(&self) -> String {
        let [h, w, c] = self.inner.input_shape();
        format!(
            "Model(arch='{}', input_shape=({h}, {w}, {c}), seed={})",
            self.inner.arch(),
            self.inner.seed()
        )
    }
}

/// An in-memory labeled image collection. Subsets share pixel storage.
#[pyclass(name = "Dataset", module = "floodcnn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: floodcnn::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Load `root/damage` and `root/no_damage`. Returns the dataset and any
    /// warnings (empty class folders, skipped undecodable files).
    #[staticmethod]
    #[pyo3(signature = (root, input_size = 128, resize = false))]
    fn load(root: PathBuf, input_size: usize, resize: bool) -> PyResult<(Self, Vec<String>)> {
        let outcome =
            load_dataset(&root, "loaded", (input_size, input_size), resize).map_err(err)?;
        Ok((PyDataset { inner: outcome.dataset }, outcome.warnings))
    }

    /// Two-class ramp images for pipeline tests: `per_class` samples of each
    /// class, `side`x`side` pixels.
    #[staticmethod]
    fn synthetic(per_class: usize, side: usize, seed: u64) -> Self {
        PyDataset { inner: synthetic_dataset(per_class, side, seed) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Sample counts as `(damage, no_damage)`.
    fn class_counts(&self) -> (usize, usize) {
        let [a, b] = self.inner.class_counts();
        (a, b)
    }

    /// One sample as `(data, shape, label, path)`.
    fn sample(&self, index: usize) -> PyResult<(Vec<f32>, Vec<usize>, &'static str, String)> {
        let s = self
            .inner
            .samples()
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((
            s.image.data().to_vec(),
            s.image.dims().to_vec(),
            CLASS_NAMES[s.label],
            s.path.display().to_string(),
        ))
    }

    /// Stratified k-fold split: `k` pairs of `(train, val)` datasets.
    fn kfold(&self, k: usize, seed: u64) -> PyResult<Vec<(PyDataset, PyDataset)>> {
        let mut rng = Rng::new(seed);
        let pairs = kfold_split(&self.inner, k, &mut rng).map_err(err)?;
        Ok(pairs
            .into_iter()
            .map(|(tr, va)| (PyDataset { inner: tr }, PyDataset { inner: va }))
            .collect())
    }

    fn __repr__(&self) -> String {
        let [a, b] = self.inner.class_counts();
        format!("Dataset(len={}, damage={a}, no_damage={b})", self.inner.len())
    }
}

fn train_config(
    batch_size: usize,
    lr: f64,
    momentum: f64,
    lambda: f64,
    max_epochs: usize,
    patience: usize,
    seed: u64,
    augment: bool,
    weight_decay: bool,
) -> TrainConfig {
    TrainConfig {
        batch_size,
        lr,
        momentum,
        lambda,
        max_epochs,
        patience,
        seed,
        augment,
        weight_decay,
        ..TrainConfig::default()
    }
}

/// Train `model` in place; returns the history as a dict with `best_epoch`,
/// `stop_reason`, and per-epoch stats. The model ends up holding the best
/// epoch's weights.
#[pyfunction]
#[pyo3(signature = (model, train_ds, val_ds, *, batch_size = 64, lr = 0.001, momentum = 0.9, lambda_ = 0.001, max_epochs = 50, patience = 5, seed = 0, augment = false, weight_decay = false))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    mut model: PyRefMut<'_, PyModel>,
    train_ds: PyRef<'_, PyDataset>,
    val_ds: PyRef<'_, PyDataset>,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    lambda_: f64,
    max_epochs: usize,
    patience: usize,
    seed: u64,
    augment: bool,
    weight_decay: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let config = train_config(
        batch_size,
        lr,
        momentum,
        lambda_,
        max_epochs,
        patience,
        seed,
        augment,
        weight_decay,
    );
    let history =
        train_core(&mut model.inner, &train_ds.inner, &val_ds.inner, &config).map_err(err)?;

    let out = PyDict::new(py);
    out.set_item("best_epoch", history.best_epoch)?;
    out.set_item(
        "stop_reason",
        match history.stop_reason {
            StopReason::EarlyStopped => "early_stopped",
            StopReason::MaxEpochs => "max_epochs",
        },
    )?;
    let rows = PyList::empty(py);
    for e in &history.epochs {
        let row = PyDict::new(py);
        row.set_item("epoch", e.epoch)?;
        row.set_item("train_loss", e.train_loss)?;
        row.set_item("train_acc", e.train_acc)?;
        row.set_item("val_loss", e.val_loss)?;
        row.set_item("val_acc", e.val_acc)?;
        rows.append(row)?;
    }
    out.set_item("epochs", rows)?;
    Ok(out)
}

/// Confusion counts of `model` on `ds` as `{"tp", "fp", "fn", "tn"}`.
/// Positive class is damage.
#[pyfunction]
#[pyo3(signature = (model, ds, batch_size = 64))]
fn evaluate<'py>(
    py: Python<'py>,
    mut model: PyRefMut<'_, PyModel>,
    ds: PyRef<'_, PyDataset>,
    batch_size: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cm = evaluate_core(&mut model.inner, &ds.inner, batch_size).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("tp", cm.tp)?;
    out.set_item("fp", cm.fp)?;
    out.set_item("fn", cm.r#fn)?;
    out.set_item("tn", cm.tn)?;
    Ok(out)
}

/// Derived rates from confusion counts. Undefined rates (zero denominator)
/// come back as None.
#[pyfunction]
#[pyo3(signature = (tp, fp, r#fn, tn))]
fn metrics<'py>(
    py: Python<'py>,
    tp: usize,
    fp: usize,
    r#fn: usize,
    tn: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics_core(&ConfusionMatrix::new(tp, fp, r#fn, tn)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", report.accuracy)?;
    out.set_item("tpr", report.tpr)?;
    out.set_item("tnr", report.tnr)?;
    out.set_item("ppv", report.ppv)?;
    out.set_item("npv", report.npv)?;
    out.set_item("f1", report.f1)?;
    Ok(out)
}

/// Per-layer parameter table for a catalog architecture.
#[pyfunction]
#[pyo3(signature = (arch = "vgg3block", input_size = 128, batchnorm = false, dropout = false, dropout_rate = 0.5))]
fn param_table(
    arch: &str,
    input_size: usize,
    batchnorm: bool,
    dropout: bool,
    dropout_rate: f64,
) -> PyResult<String> {
    let arch = ArchId::from_str(arch).map_err(err)?;
    let flags = BuildFlags { batchnorm, dropout, dropout_rate };
    let plan = catalog_plan(arch, &flags, 2);
    let rows = describe(&plan, [input_size, input_size, 3]).map_err(err)?;
    Ok(render_param_table(&rows))
}

/// Finite-difference check of every layer's backward pass plus a small
/// end-to-end model. Returns one dict per check.
#[pyfunction]
#[pyo3(signature = (trials = 20, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyList>> {
    let checks = check_layers(trials, seed).map_err(err)?;
    let rows = PyList::empty(py);
    for c in &checks {
        let row = PyDict::new(py);
        row.set_item("layer", c.layer)?;
        row.set_item("trials", c.trials)?;
        row.set_item("max_rel_error", c.max_rel_error)?;
        row.set_item("passed", c.passed())?;
        rows.append(row)?;
    }
    Ok(rows)
}

#[pymodule]
fn floodcnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CLASS_NAMES", CLASS_NAMES.to_vec())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(param_table, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

//! Python bindings for the `crq` ternary quantization toolkit.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use crq_core::cluster::{self, Codes, SolverConfig};
use crq_core::data::{self, Dataset};
use crq_core::experiment::{ExperimentConfig, Override, Pipeline, Stage};
use crq_core::metrics;
use crq_core::nn::{self, Batch};
use crq_core::numeric::{DenseArray, Rng};
use crq_core::quantize::{self as q, ShadowState};
use crq_core::train::{self, TrainConfig, TrainLog};
use crq_core::{Architecture, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Invariant(_) | Error::Usage(_) | Error::MissingArtifact { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn codes(v: Vec<i8>) -> PyResult<Codes> {
    Codes::new(v).map_err(err)
}

fn solver(alpha_tolerance: f64, max_iterations: usize) -> PyResult<SolverConfig> {
    let config = SolverConfig {
        alpha_tolerance,
        max_iterations,
        ..SolverConfig::default()
    };
    config.validate().map_err(err)?;
    Ok(config)
}

fn exclusion(exclude: Option<Vec<usize>>) -> Option<BTreeSet<usize>> {
    exclude.map(|v| v.into_iter().collect())
}

#[pyclass(name = "ClusterSolution", get_all, frozen)]
struct PyClusterSolution {
    codes: Vec<i8>,
    alpha: f64,
    objective: f64,
    iterations: usize,
    trace: Vec<f64>,
}

impl From<cluster::ClusterSolution> for PyClusterSolution {
    fn from(s: cluster::ClusterSolution) -> Self {
        PyClusterSolution {
            codes: s.codes.as_slice().to_vec(),
            alpha: s.alpha,
            objective: s.objective,
            iterations: s.iterations,
            trace: s.trace,
        }
    }
}

#[pymethods]
impl PyClusterSolution {
    fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.alpha * f64::from(c)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "ClusterSolution(alpha={}, objective={}, iterations={})",
            self.alpha, self.objective, self.iterations
        )
    }
}

/// Ternary clustering of `w` by alternating minimization.
#[pyfunction]
#[pyo3(signature = (w, alpha_tolerance = 1e-8, max_iterations = 100))]
fn solve(w: Vec<f64>, alpha_tolerance: f64, max_iterations: usize) -> PyResult<PyClusterSolution> {
    let config = solver(alpha_tolerance, max_iterations)?;
    cluster::solve(&w, &config).map(Into::into).map_err(err)
}

#[pyfunction]
fn brute_force_solve(w: Vec<f64>) -> PyResult<PyClusterSolution> {
    cluster::brute_force_solve(&w).map(Into::into).map_err(err)
}

#[pyfunction]
fn assign_codes(w: Vec<f64>, alpha: f64) -> PyResult<Vec<i8>> {
    cluster::assign_codes(&w, alpha)
        .map(|c| c.as_slice().to_vec())
        .map_err(err)
}

/// Optimal scale for fixed codes; `None` when every code is zero.
#[pyfunction]
fn update_alpha(w: Vec<f64>, codes_: Vec<i8>) -> PyResult<Option<f64>> {
    cluster::update_alpha(&w, &codes(codes_)?).map_err(err)
}

#[pyfunction]
fn objective(w: Vec<f64>, codes_: Vec<i8>, alpha: f64) -> PyResult<f64> {
    cluster::objective(&w, &codes(codes_)?, alpha).map_err(err)
}

#[pyfunction]
fn pack_codes<'py>(py: Python<'py>, codes_: Vec<i8>) -> PyResult<Bound<'py, PyBytes>> {
    Ok(PyBytes::new(py, &q::pack_codes(&codes(codes_)?)))
}

#[pyfunction]
fn unpack_codes(packed: &[u8], n: usize) -> PyResult<Vec<i8>> {
    q::unpack_codes(packed, n)
        .map(|c| c.as_slice().to_vec())
        .map_err(err)
}

#[pyclass(name = "Network", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: nn::Network,
}

fn rows_to_array(rows: Vec<Vec<f64>>, sample_shape: &[usize]) -> PyResult<DenseArray> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(sample_shape);
    DenseArray::new(shape, rows.into_iter().flatten().collect()).map_err(err)
}

#[pymethods]
impl PyNetwork {
    /// Dense layers with ReLU between them, Glorot-uniform initialized.
    #[staticmethod]
    #[pyo3(signature = (dims, seed = 0))]
    fn mlp(dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        let arch = Architecture::mlp(&dims).map_err(err)?;
        let inner = nn::Network::init(arch, &mut Rng::new(seed)).map_err(err)?;
        Ok(PyNetwork { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (channels, side, filters, hidden, classes, seed = 0))]
    fn toy_cnn(
        channels: usize,
        side: usize,
        filters: [usize; 2],
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Architecture::toy_cnn(channels, side, filters, hidden, classes).map_err(err)?;
        let inner = nn::Network::init(arch, &mut Rng::new(seed)).map_err(err)?;
        Ok(PyNetwork { inner })
    }

    #[getter]
    fn num_param_layers(&self) -> usize {
        self.inner.num_param_layers()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.architecture().input_shape.clone()
    }

    fn weights(&self, ordinal: usize) -> PyResult<Vec<f64>> {
        self.check(ordinal)?;
        Ok(self.inner.weights(ordinal).to_vec())
    }

    fn weight_shape(&self, ordinal: usize) -> PyResult<Vec<usize>> {
        self.check(ordinal)?;
        Ok(self.inner.weight_shape(ordinal).to_vec())
    }

    fn set_weights(&mut self, ordinal: usize, values: Vec<f64>) -> PyResult<()> {
        self.check(ordinal)?;
        self.inner.set_weights(ordinal, &values).map_err(err)
    }

    /// Class scores; each row is one flattened sample.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_array(inputs, &self.inner.architecture().input_shape)?;
        let scores = nn::predict(&self.inner, &x).map_err(err)?;
        Ok(scores.data().chunks(scores.cols()).map(<[f64]>::to_vec).collect())
    }

    /// Mean cross-entropy on a batch.
    fn loss(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let x = rows_to_array(inputs, &self.inner.architecture().input_shape)?;
        let batch = Batch::new(x, labels).map_err(err)?;
        nn::forward(&self.inner, &batch).map(|(l, _)| l).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        crq_core::container::Checkpoint {
            network: self.inner.clone(),
            epoch: 0,
            rng: None,
            provenance: q::Provenance {
                seed: 0,
                config_hash: String::new(),
            },
        }
        .save(&path)
        .map_err(err)
    }

    /// Loads any container (checkpoint, float model or ternary model) as a float network.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = crq_core::container::read_file(&path).map_err(err)?;
        let inner = crq_core::container::load_network(&bytes).map_err(err)?;
        Ok(PyNetwork { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input_shape={:?}, param_layers={}, weights={})",
            self.inner.architecture().input_shape,
            self.inner.num_param_layers(),
            self.inner.total_weights()
        )
    }
}

impl PyNetwork {
    fn check(&self, ordinal: usize) -> PyResult<()> {
        if ordinal < self.inner.num_param_layers() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "layer {ordinal} out of range ({} parameterized layers)",
                self.inner.num_param_layers()
            )))
        }
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (classes, samples, spread = 0.6, radius = 1.5, seed = 0))]
    fn blobs(classes: usize, samples: usize, spread: f64, radius: f64, seed: u64) -> PyResult<Self> {
        let inner = data::blobs(classes, samples, spread, radius, &mut Rng::new(seed)).map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (classes, samples, noise = 0.1, seed = 0))]
    fn spirals(classes: usize, samples: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let inner = data::spirals(classes, samples, noise, &mut Rng::new(seed)).map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (classes, samples, side = 8, noise = 0.35, seed = 0))]
    fn patterns(classes: usize, samples: usize, side: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let inner = data::patterns(classes, samples, side, noise, &mut Rng::new(seed)).map_err(err)?;
        Ok(PyDataset { inner })
    }

    /// Numeric CSV whose last column is the integer label.
    #[staticmethod]
    #[pyo3(signature = (path, classes = None, header = false))]
    fn from_csv(path: PathBuf, classes: Option<usize>, header: bool) -> PyResult<Self> {
        let inner = data::read_csv(&path, classes, header).map_err(err)?;
        Ok(PyDataset { inner })
    }

    /// `(train, validation)` with `round(len * validation_fraction)` validation samples.
    #[pyo3(signature = (validation_fraction, seed = 0))]
    fn split(&self, validation_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = self
            .inner
            .split(validation_fraction, &mut Rng::new(seed))
            .map_err(err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// Flattened samples, one row each.
    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        let per: usize = self.inner.sample_shape().iter().product();
        self.inner.inputs().data().chunks(per).map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "QuantizedModel", from_py_object)]
#[derive(Clone)]
struct PyQuantizedModel {
    inner: q::QuantizedModel,
}

#[pymethods]
impl PyQuantizedModel {
    #[getter]
    fn compression_ratio(&self) -> f64 {
        q::compression_ratio(&self.inner)
    }

    /// Per-layer scale; `None` for full-precision layers.
    #[getter]
    fn alphas(&self) -> Vec<Option<f64>> {
        self.inner.layers.iter().map(q::QuantizedLayer::alpha).collect()
    }

    #[getter]
    fn excluded_layers(&self) -> Vec<usize> {
        self.inner.excluded_layers().into_iter().collect()
    }

    fn codes(&self, ordinal: usize) -> PyResult<Option<Vec<i8>>> {
        let layer = self
            .inner
            .layers
            .get(ordinal)
            .ok_or_else(|| PyValueError::new_err(format!("layer {ordinal} out of range")))?;
        Ok(layer.codes().map_err(err)?.map(|c| c.as_slice().to_vec()))
    }

    fn dequantize(&self) -> PyResult<PyNetwork> {
        Ok(PyNetwork {
            inner: self.inner.dequantize().map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyQuantizedModel {
            inner: q::QuantizedModel::from_bytes(bytes).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyQuantizedModel {
            inner: q::QuantizedModel::load(&path).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizedModel(layers={}, compression_ratio={:.3})",
            self.inner.layers.len(),
            q::compression_ratio(&self.inner)
        )
    }
}

#[pyclass(name = "EpochRecord", get_all, frozen)]
struct PyEpochRecord {
    epoch: usize,
    train_loss: f64,
    train_acc: f64,
    total_j: f64,
    alphas: Vec<f64>,
}

fn records(log: TrainLog) -> Vec<PyEpochRecord> {
    log.rows
        .into_iter()
        .map(|r| PyEpochRecord {
            epoch: r.epoch,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            total_j: r.total_j,
            alphas: r.alphas,
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    lambda_: f64,
    eta: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    exclude: Option<Vec<usize>>,
    per_epoch_refresh: bool,
    freeze_codes: bool,
) -> PyResult<TrainConfig> {
    let config = TrainConfig {
        lambda: lambda_,
        eta,
        epochs,
        batch_size,
        seed,
        exclude_layers: exclusion(exclude),
        refresh: if per_epoch_refresh {
            train::Refresh::PerEpoch
        } else {
            train::Refresh::PerBatch
        },
        freeze_codes,
        ..TrainConfig::default()
    };
    config.validate().map_err(err)?;
    Ok(config)
}

/// Cluster-regularized retraining; updates `net` in place and returns the per-epoch log.
#[pyfunction]
#[pyo3(signature = (net, data, lambda_ = 0.001, eta = 0.1, epochs = 100, batch_size = 16, seed = 0, exclude = None, per_epoch_refresh = false))]
#[allow(clippy::too_many_arguments)]
fn retrain(
    mut net: PyRefMut<'_, PyNetwork>,
    data: PyRef<'_, PyDataset>,
    lambda_: f64,
    eta: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    exclude: Option<Vec<usize>>,
    per_epoch_refresh: bool,
) -> PyResult<Vec<PyEpochRecord>> {
    let config = train_config(lambda_, eta, epochs, batch_size, seed, exclude, per_epoch_refresh, false)?;
    let log = train::retrain(&mut net.inner, &data.inner, &config).map_err(err)?;
    Ok(records(log))
}

/// Hard quantization; `exclude=None` keeps the first and last layers at full precision.
#[pyfunction]
#[pyo3(signature = (net, exclude = None))]
fn quantize(net: PyRef<'_, PyNetwork>, exclude: Option<Vec<usize>>) -> PyResult<PyQuantizedModel> {
    let exclude = train::resolve_exclusion(exclusion(exclude).as_ref(), net.inner.num_param_layers())
        .map_err(err)?;
    let inner = q::quantize(&net.inner, &SolverConfig::default(), &exclude).map_err(err)?;
    Ok(PyQuantizedModel { inner })
}

/// Straight-through fine-tuning from the full-precision `shadow` network.
/// Returns the fine-tuned model and its per-epoch log.
#[pyfunction]
#[pyo3(signature = (model, shadow, data, epochs = 20, eta = 0.1, batch_size = 16, seed = 0, freeze_codes = false))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    model: PyRef<'_, PyQuantizedModel>,
    shadow: PyRef<'_, PyNetwork>,
    data: PyRef<'_, PyDataset>,
    epochs: usize,
    eta: f64,
    batch_size: usize,
    seed: u64,
    freeze_codes: bool,
) -> PyResult<(PyQuantizedModel, Vec<PyEpochRecord>)> {
    let config = train_config(0.0, eta, epochs, batch_size, seed, None, false, freeze_codes)?;
    let outcome = q::finetune(
        &model.inner,
        ShadowState::from_network(&shadow.inner),
        &data.inner,
        &config,
    )
    .map_err(err)?;
    Ok((PyQuantizedModel { inner: outcome.model }, records(outcome.log)))
}

/// Per-layer `(1/2N)||W - W_Q||^2`.
#[pyfunction]
fn weight_mse(net: PyRef<'_, PyNetwork>, model: PyRef<'_, PyQuantizedModel>) -> PyResult<Vec<f64>> {
    metrics::weight_mse(&net.inner, &model.inner).map_err(err)
}

/// Per-layer `(1/2N)||XW - XW_Q||^2` with layer inputs from the full-precision forward pass.
#[pyfunction]
fn output_mse(
    net: PyRef<'_, PyNetwork>,
    model: PyRef<'_, PyQuantizedModel>,
    data: PyRef<'_, PyDataset>,
) -> PyResult<Vec<f64>> {
    metrics::output_mse(&net.inner, &model.inner, &data.inner.as_batch()).map_err(err)
}

/// Top-1 error rate in percent.
#[pyfunction]
fn evaluate(net: PyRef<'_, PyNetwork>, data: PyRef<'_, PyDataset>) -> PyResult<f64> {
    metrics::evaluate(&net.inner, &data.inner).map_err(err)
}

/// Runs pipeline stages (all of them by default) from a TOML config.
#[pyfunction]
#[pyo3(signature = (config, out_dir, stages = None, overrides = None))]
fn run_pipeline(
    config: PathBuf,
    out_dir: PathBuf,
    stages: Option<Vec<String>>,
    overrides: Option<Vec<String>>,
) -> PyResult<Vec<String>> {
    let overrides = overrides
        .unwrap_or_default()
        .iter()
        .map(|o| Override::parse(o))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let config = ExperimentConfig::load(&config, &overrides).map_err(err)?;
    let stages = match stages {
        None => Stage::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                Stage::ALL
                    .into_iter()
                    .find(|s| s.name() == n)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown stage {n:?}")))
            })
            .collect::<PyResult<_>>()?,
    };
    let outcomes = Pipeline::new(config, out_dir).run(&stages).map_err(err)?;
    Ok(outcomes
        .into_iter()
        .flat_map(|o| o.written)
        .map(|p| p.display().to_string())
        .collect())
}

#[pymodule]
fn crq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClusterSolution>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyQuantizedModel>()?;
    m.add_class::<PyEpochRecord>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_solve, m)?)?;
    m.add_function(wrap_pyfunction!(assign_codes, m)?)?;
    m.add_function(wrap_pyfunction!(update_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(pack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(retrain, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(weight_mse, m)?)?;
    m.add_function(wrap_pyfunction!(output_mse, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}

//! Python bindings: networks, masks, schedules, pruning, FLOPs and the sweep.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prwd_core::harness::sweep::{run_experiment as run_sweep, sweep_grid as grid, write_outputs};
use prwd_core::harness::ExperimentConfig;
use prwd_core::layer::{conv4, mlp2, LayerSpec};
use prwd_core::metrics::{count_flops as flops_of, search_cost as cost_of, PruningMode};
use prwd_core::pruner::{self, PrunePool, StructuredRates};
use prwd_core::retrain::{RetrainTechnique, Technique};
use prwd_core::{Batch, Error, Mask, Network, Schedule, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Network", module = "prwd")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// Builds a network from a JSON list of layer objects.
    #[new]
    #[pyo3(signature = (input_shape, layers_json, seed=0))]
    fn new(input_shape: Vec<usize>, layers_json: &str, seed: u64) -> PyResult<Self> {
        let layers: Vec<LayerSpec> =
            serde_json::from_str(layers_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: Network::init(input_shape, layers, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (in_features, hidden, classes, seed=0))]
    fn mlp2(in_features: usize, hidden: usize, classes: usize, seed: u64) -> PyResult<Self> {
        let layers = mlp2(in_features, hidden, classes);
        Ok(Self {
            inner: Network::init(vec![in_features], layers, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (input_shape, channels, hidden, classes, seed=0))]
    fn conv4(
        input_shape: (usize, usize, usize),
        channels: (usize, usize),
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let (c, h, w) = input_shape;
        let layers = conv4([c, h, w], channels, hidden, classes);
        Ok(Self {
            inner: Network::init(vec![c, h, w], layers, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Network::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn weights(&self) -> Vec<f32> {
        self.inner.weights.clone()
    }

    #[setter]
    fn set_weights(&mut self, weights: Vec<f32>) -> PyResult<()> {
        self.inner = self.inner.with_weights(weights).map_err(py_err)?;
        Ok(())
    }

    /// Logits (flattened, row-major) and mean cross-entropy of a batch.
    #[pyo3(signature = (inputs, labels, mask=None))]
    fn forward(&self, inputs: Vec<f32>, labels: Vec<usize>, mask: Option<&PyMask>) -> PyResult<(Vec<f32>, f32)> {
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(self.inner.input_shape());
        let batch = Tensor::new(shape, inputs)
            .and_then(|x| Batch::new(x, labels))
            .map_err(py_err)?;
        let ones = Mask::ones(self.inner.num_params());
        let mask = mask.map_or(&ones, |m| &m.inner);
        let (logits, loss) = prwd_core::model::forward(&self.inner, mask, &batch).map_err(py_err)?;
        Ok((logits.into_data(), loss))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input_shape={:?}, layers={}, params={})",
            self.inner.input_shape(),
            self.inner.layers().len(),
            self.inner.num_params()
        )
    }
}

#[pyclass(name = "Mask", module = "prwd")]
struct PyMask {
    inner: Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(bits: Vec<bool>) -> Self {
        Self {
            inner: Mask::from_bits(bits),
        }
    }

    #[staticmethod]
    fn ones(d: usize) -> Self {
        Self { inner: Mask::ones(d) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Mask::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    fn surviving(&self) -> usize {
        self.inner.surviving()
    }

    fn density(&self) -> f64 {
        self.inner.density()
    }

    fn compression_ratio(&self) -> PyResult<f64> {
        self.inner.compression_ratio().map_err(py_err)
    }

    fn is_subset_of(&self, other: &PyMask) -> bool {
        self.inner.is_subset_of(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Mask(len={}, surviving={})", self.inner.len(), self.inner.surviving())
    }
}

#[pyclass(name = "Schedule", module = "prwd")]
struct PySchedule {
    inner: Schedule,
}

#[pymethods]
impl PySchedule {
    /// Parses the `schedule` object of an experiment config.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let cfg: prwd_core::schedule::ScheduleConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: Schedule::try_from(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn constant(rate: f64, epochs: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Schedule::constant(rate, epochs).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn cifar_resnet() -> Self {
        Self {
            inner: Schedule::cifar_resnet(),
        }
    }

    #[staticmethod]
    fn imagenet_resnet() -> Self {
        Self {
            inner: Schedule::imagenet_resnet(),
        }
    }

    fn lr_at(&self, epoch: f64) -> PyResult<f64> {
        self.inner.lr_at(epoch).map_err(py_err)
    }

    #[getter]
    fn total_epochs(&self) -> f64 {
        self.inner.total_epochs()
    }

    fn rewound(&self, t: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.rewound_schedule(t).map_err(py_err)?,
        })
    }

    fn fine_tune(&self, t: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.fine_tune_schedule(t).map_err(py_err)?,
        })
    }
}

/// Removes `fraction` of the surviving candidates by global magnitude.
#[pyfunction]
#[pyo3(signature = (net, mask, fraction, prune_biases=true, prune_final_layer=true))]
fn global_magnitude_prune(
    net: &PyNetwork,
    mask: &PyMask,
    fraction: f64,
    prune_biases: bool,
    prune_final_layer: bool,
) -> PyResult<PyMask> {
    let pool = PrunePool {
        prune_biases,
        prune_final_layer,
    };
    Ok(PyMask {
        inner: pruner::global_magnitude_prune(&net.inner, &mask.inner, fraction, pool).map_err(py_err)?,
    })
}

/// Filter pruning of conv layers; `rates` maps layer index to density.
#[pyfunction]
#[pyo3(signature = (net, rates, exponent=1))]
fn structured_filter_prune(net: &PyNetwork, rates: BTreeMap<usize, f64>, exponent: u32) -> PyResult<PyMask> {
    let rates = StructuredRates {
        per_layer: rates,
        exponent,
    };
    Ok(PyMask {
        inner: pruner::structured_filter_prune(&net.inner, &rates).map_err(py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (net, mask=None))]
fn count_flops(net: &PyNetwork, mask: Option<&PyMask>) -> u64 {
    match mask {
        Some(m) => flops_of(&net.inner, &m.inner),
        None => flops_of(&net.inner, &Mask::ones(net.inner.num_params())),
    }
}

#[pyfunction]
fn sweep_grid(total_epochs: f64, n: usize) -> PyResult<Vec<f64>> {
    grid(total_epochs, n).map_err(py_err)
}

/// `(retrain_epochs, total_training_epochs)`; `iterations=None` is one-shot.
#[pyfunction]
#[pyo3(signature = (technique, t, total_epochs, iterations=None))]
fn search_cost(technique: &str, t: f64, total_epochs: f64, iterations: Option<usize>) -> PyResult<(f64, f64)> {
    let variant: Technique = technique.parse().map_err(py_err)?;
    let mode = iterations.map_or(PruningMode::OneShot, |k| PruningMode::Iterative { iterations: k });
    let c = cost_of(mode, RetrainTechnique::new(variant, t), total_epochs);
    Ok((c.retrain_epochs, c.total_training_epochs))
}

/// Runs a sweep from a JSON config file, writes its CSVs and returns the
/// raw rows as dicts.
#[pyfunction]
#[pyo3(signature = (config_path, jobs=1, out=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    jobs: usize,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = ExperimentConfig::load(&config_path).map_err(py_err)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let outcome = py
        .detach(|| run_sweep(&cfg, jobs))
        .map_err(py_err)?;
    write_outputs(&outcome, &cfg.output_dir).map_err(py_err)?;
    outcome
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("arch", &r.arch)?;
            d.set_item("technique", r.technique.name())?;
            d.set_item("t_epochs", r.t_epochs)?;
            d.set_item("compression_ratio", r.compression_ratio)?;
            d.set_item("seed", r.seed)?;
            d.set_item("val_accuracy", r.val_accuracy)?;
            d.set_item("test_accuracy", r.test_accuracy)?;
            d.set_item("flops", r.flops)?;
            d.set_item("retrain_epochs", r.retrain_epochs)?;
            d.set_item("total_epochs", r.total_epochs)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn prwd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(global_magnitude_prune, m)?)?;
    m.add_function(wrap_pyfunction!(structured_filter_prune, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_grid, m)?)?;
    m.add_function(wrap_pyfunction!(search_cost, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("TECHNIQUES", Technique::ALL.iter().map(|t| t.name()).collect::<Vec<_>>())?;
    Ok(())
}

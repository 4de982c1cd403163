//! Python bindings: datasets, label vectors, the model, training, inference
//! and mIoU scoring.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use coattn::classifier::{loss_total, single_scores, LossTerms, ModelConfig, ModelParams};
use coattn::data::{self, DatasetSpec};
use coattn::evaluation::{probe_pairs, probe_rate, ConfusionAccumulator};
use coattn::inference::{pseudo_masks, InferConfig, Strategy};
use coattn::seeding::{derive_rng, hash_str};
use coattn::training::{train as train_run, RunOptions, TrainConfig};
use coattn::{Error, Graph};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Divergence { .. } | Error::Checkpoint(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for coattn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "LabelVector", module = "coattn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyLabelVector {
    inner: coattn::LabelVector,
}

#[pymethods]
impl PyLabelVector {
    /// `classes` are 1-based indices in `1..=k`.
    #[new]
    fn new(k: usize, classes: Vec<usize>) -> PyResult<Self> {
        Ok(PyLabelVector {
            inner: coattn::LabelVector::from_classes(k, &classes).py()?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn classes(&self) -> Vec<usize> {
        self.inner.classes()
    }

    fn intersect(&self, other: &Self) -> PyResult<Self> {
        Ok(PyLabelVector {
            inner: self.inner.intersect(&other.inner).py()?,
        })
    }

    fn subtract(&self, other: &Self) -> PyResult<Self> {
        Ok(PyLabelVector {
            inner: self.inner.subtract(&other.inner).py()?,
        })
    }

    fn union(&self, other: &Self) -> PyResult<Self> {
        Ok(PyLabelVector {
            inner: self.inner.union(&other.inner).py()?,
        })
    }

    fn has_common(&self, other: &Self) -> PyResult<bool> {
        self.inner.has_common(&other.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.count()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("LabelVector(k={}, classes={:?})", self.inner.num_classes(), self.inner.classes())
    }
}

#[pyclass(name = "Dataset", module = "coattn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

impl PyDataset {
    fn sample(&self, index: usize) -> PyResult<&data::ImageSample> {
        self.inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range for {} images", self.inner.len())))
    }
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::read_dataset(&path).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, &path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    fn labels(&self, index: usize) -> PyResult<PyLabelVector> {
        Ok(PyLabelVector {
            inner: self.sample(index)?.labels.clone(),
        })
    }

    /// `(height, width)` of image `index`.
    fn size(&self, index: usize) -> PyResult<(usize, usize)> {
        let s = self.sample(index)?;
        Ok((s.height(), s.width()))
    }

    /// Channel-major `[3, H, W]` pixel values in `[0, 1]`.
    fn pixels(&self, index: usize) -> PyResult<Vec<f64>> {
        Ok(self.sample(index)?.pixels.data().to_vec())
    }

    /// Row-major ground-truth mask, or `None`.
    fn mask<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Option<Bound<'py, PyBytes>>> {
        Ok(self.sample(index)?.mask.as_ref().map(|m| PyBytes::new(py, m)))
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} images, classes={:?})", self.inner.len(), self.inner.classes)
    }
}

/// Returns the `(train, test)` splits of the synthetic generator.
#[pyfunction]
#[pyo3(signature = (classes=5, size=32, train=500, test=100, seed=0))]
fn generate(classes: usize, size: usize, train: usize, test: usize, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
    let spec = DatasetSpec {
        classes,
        size,
        train,
        test,
        seed,
        ..DatasetSpec::default()
    };
    let g = data::generate(&spec).py()?;
    Ok((PyDataset { inner: g.train }, PyDataset { inner: g.test }))
}

#[pyclass(name = "Model", module = "coattn_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ModelParams,
}

fn parse_terms(loss: &str) -> PyResult<LossTerms> {
    LossTerms::parse(loss).ok_or_else(|| PyValueError::new_err(format!("unknown loss `{loss}`")))
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model for one domain.
    #[staticmethod]
    #[pyo3(signature = (classes, seed=0))]
    fn init(classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(classes, vec![data::DEFAULT_DOMAIN.to_string()]);
        Ok(PyModel {
            inner: ModelParams::init(&cfg, &mut derive_rng(seed, &[])).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: ModelParams::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.classes()
    }

    /// Single-image class scores.
    fn scores(&self, dataset: &PyDataset, index: usize) -> PyResult<Vec<f64>> {
        let s = dataset.sample(index)?;
        Ok(single_scores(&self.inner, &s.pixels).py()?.data().to_vec())
    }

    /// Loss terms of the pair `(i, j)` as a dict.
    #[pyo3(signature = (dataset, i, j, loss="full"))]
    fn pair_loss(&self, dataset: &PyDataset, i: usize, j: usize, loss: &str) -> PyResult<std::collections::BTreeMap<String, f64>> {
        let terms = parse_terms(loss)?;
        let mut g = Graph::new();
        let fw = loss_total(&mut g, &self.inner, dataset.sample(i)?, dataset.sample(j)?, terms).py()?;
        let b = fw.breakdown;
        Ok([("basic", b.basic), ("coatt", b.coatt), ("contrast", b.contrast), ("total", b.total)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect())
    }

    /// Fraction of `pairs` random probe pairs whose shared classes outrank
    /// the unshared ones in the co-attentive scores.
    #[pyo3(signature = (dataset, pairs=200, seed=0))]
    fn probe_rate(&self, dataset: &PyDataset, pairs: usize, seed: u64) -> PyResult<f64> {
        let p = probe_pairs(&dataset.inner.samples, pairs, &mut derive_rng(seed, &[hash_str("probe")])).py()?;
        probe_rate(&self.inner, &dataset.inner.samples, &p).py()
    }
}

/// Trains a model; returns it with one metrics dict per epoch.
#[pyfunction]
#[pyo3(signature = (dataset, epochs=30, pairs_per_epoch=500, seed=0, loss="full", lr=0.01, out=None))]
fn train(
    dataset: &PyDataset,
    epochs: usize,
    pairs_per_epoch: usize,
    seed: u64,
    loss: &str,
    lr: f64,
    out: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<std::collections::BTreeMap<String, f64>>)> {
    let cfg = TrainConfig {
        epochs,
        pairs_per_epoch,
        seed,
        lr,
        terms: parse_terms(loss)?,
        ..TrainConfig::default()
    };
    let outcome = train_run(
        &dataset.inner,
        &cfg,
        RunOptions {
            out,
            ..RunOptions::default()
        },
    )
    .py()?;
    let metrics = outcome
        .metrics
        .iter()
        .map(|m| {
            [
                ("epoch", m.epoch as f64),
                ("loss_basic", m.loss_basic),
                ("loss_coatt", m.loss_coatt),
                ("loss_contrast", m.loss_contrast),
                ("loss_total", m.loss_total),
                ("f1", m.f1),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
        })
        .collect();
    Ok((PyModel { inner: outcome.state.params }, metrics))
}

/// Pseudo masks (row-major bytes) for every image of `dataset`.
#[pyfunction]
#[pyo3(signature = (model, dataset, reference=None, strategy="multi", related=3, theta=0.2, seed=0))]
fn infer<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    reference: Option<&PyDataset>,
    strategy: &str,
    related: usize,
    theta: f64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let cfg = InferConfig {
        strategy: strategy.parse::<Strategy>().map_err(PyValueError::new_err)?,
        related,
        theta,
        seed,
    };
    let reference = reference.unwrap_or(dataset);
    let masks = pseudo_masks(&model.inner, &dataset.inner.samples, &reference.inner.samples, &cfg).py()?;
    Ok(masks.iter().map(|m| PyBytes::new(py, m)).collect())
}

/// Mean IoU of predicted masks against the dataset's ground truth.
#[pyfunction]
fn miou(pred: Vec<Vec<u8>>, dataset: &PyDataset) -> PyResult<f64> {
    if pred.len() != dataset.inner.len() {
        return Err(PyValueError::new_err(format!(
            "{} predictions for {} images",
            pred.len(),
            dataset.inner.len()
        )));
    }
    let mut acc = ConfusionAccumulator::new(dataset.inner.num_classes());
    for (p, s) in pred.iter().zip(&dataset.inner.samples) {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| PyValueError::new_err(format!("{} has no ground-truth mask", s.id)))?;
        acc.add(p, gt).py()?;
    }
    Ok(acc.mean_iou())
}

/// `(op, max relative error, passed)` for every gradient check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(coattn::gradcheck::gradcheck_suite(seed)
        .py()?
        .into_iter()
        .map(|c| {
            let passed = c.passed();
            (c.name, c.max_rel_err, passed)
        })
        .collect())
}

#[pymodule]
fn coattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelVector>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

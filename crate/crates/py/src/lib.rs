//! Python bindings: datasets, training, evaluation, checkpoints and the
//! composition rule.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slate_embed::data::{generate_synthetic, DatasetSplit, PlantedConfig, Records, Split, SyntheticKind};
use slate_embed::eval::{export_features, rank_of, reciprocal_rank, single_item_ndcg};
use slate_embed::models::{softmax as softmax_probs, ModelParams, ModelVariant};
use slate_embed::optim::{train as train_model, TrainConfig};
use slate_embed::{Checkpoint, Dataset as CoreDataset, DatasetSchema, Metric, MetricReport};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_split(name: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| err(format!("unknown split `{name}` (expected train, validation or test)")))
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("metric", r.metric.name())?;
    d.set_item("value", r.value)?;
    d.set_item("std_error", r.std_error)?;
    d.set_item("count", r.count)?;
    d.set_item("fingerprint", &r.fingerprint)?;
    Ok(d)
}

/// Train / validation / test records with their schema.
#[pyclass(module = "pyslate", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Loads split files described by a TOML schema. `test` is optional.
    #[staticmethod]
    #[pyo3(signature = (schema, train, validation, test=None))]
    fn load(schema: PathBuf, train: PathBuf, validation: PathBuf, test: Option<PathBuf>) -> PyResult<Self> {
        let schema = DatasetSchema::load(schema).map_err(err)?;
        let load = |p: &PathBuf| Records::load(p, &schema).map_err(err);
        let (train, validation) = (load(&train)?, load(&validation)?);
        let test = test.as_ref().map(load).transpose()?;
        let inner = match (train, validation, test) {
            (Records::Ratings(train), Records::Ratings(validation), test) => CoreDataset::Ratings(DatasetSplit {
                schema,
                train,
                validation,
                test: match test {
                    Some(Records::Ratings(t)) => t,
                    _ => Vec::new(),
                },
            }),
            (Records::Sessions(train), Records::Sessions(validation), test) => CoreDataset::Sessions(DatasetSplit {
                schema,
                train,
                validation,
                test: match test {
                    Some(Records::Sessions(t)) => t,
                    _ => Vec::new(),
                },
            }),
            _ => unreachable!(),
        };
        Ok(Self { inner })
    }

    /// Planted synthetic data. Returns `(dataset, planted_model)`.
    #[staticmethod]
    #[pyo3(signature = (kind, records=1000, seed=0, dim=5, planted_std=None, noise_std=0.0, items_per_slate=10))]
    fn synthetic(
        kind: &str,
        records: usize,
        seed: u64,
        dim: usize,
        planted_std: Option<f64>,
        noise_std: f64,
        items_per_slate: usize,
    ) -> PyResult<(Self, Model)> {
        let kind: SyntheticKind = kind.parse().map_err(err)?;
        let config = PlantedConfig {
            records,
            dim,
            planted_std,
            noise_std,
            items_per_slate,
            ..PlantedConfig::default()
        };
        let (inner, planted) = generate_synthetic(kind, &config, seed).map_err(err)?;
        let schema = inner.schema().clone();
        Ok((Self { inner }, Model::new(planted, schema, None)))
    }

    #[getter]
    fn task(&self) -> &'static str {
        match self.inner.task() {
            slate_embed::Task::Regression => "regression",
            slate_embed::Task::Click => "click",
        }
    }

    /// `(train, validation, test)` record counts.
    #[getter]
    fn sizes(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.sizes();
        (a, b, c)
    }

    /// Writes `<split>.csv|jsonl` and `schema.toml` into `directory`.
    fn save(&self, directory: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&directory).map_err(err)?;
        let schema = self.inner.schema();
        let ext = match schema.task {
            slate_embed::Task::Regression => "csv",
            slate_embed::Task::Click => "jsonl",
        };
        for split in Split::ALL {
            let records = match self.inner.batch(split) {
                slate_embed::Batch::Ratings(r) => Records::Ratings(r.to_vec()),
                slate_embed::Batch::Sessions(s) => Records::Sessions(s.to_vec()),
            };
            records
                .save(directory.join(format!("{}.{ext}", split.name())), schema)
                .map_err(err)?;
        }
        schema.save(directory.join("schema.toml")).map_err(err)
    }

    fn __repr__(&self) -> String {
        let (a, b, c) = self.sizes();
        format!("Dataset(task={}, train={a}, validation={b}, test={c})", self.task())
    }
}

/// A trained or planted model together with its dataset schema.
#[pyclass(module = "pyslate", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    checkpoint: Checkpoint,
}

impl Model {
    fn new(model: ModelParams, schema: DatasetSchema, config: Option<TrainConfig>) -> Self {
        Self {
            checkpoint: Checkpoint::new(model, schema, config),
        }
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            checkpoint: Checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.checkpoint.variant.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.checkpoint.dim
    }

    #[getter]
    fn fingerprint(&self) -> &str {
        &self.checkpoint.fingerprint
    }

    /// SEMB-2 interaction weights `(w1, w2)`, or `None` for other variants.
    #[getter]
    fn weights(&self) -> Option<(f64, f64)> {
        match &self.checkpoint.model {
            ModelParams::Click(m) => Some((m.w1, m.w2)),
            _ => None,
        }
    }

    /// Metric report (dict) on one split of `dataset`.
    #[pyo3(signature = (dataset, metric, split="validation"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, metric: &str, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let metric: Metric = metric.parse().map_err(err)?;
        self.checkpoint.ensure_compatible(dataset.inner.schema()).map_err(err)?;
        let report = slate_embed::evaluate(&self.checkpoint.model, dataset.inner.batch(parse_split(split)?), metric)
            .map_err(err)?
            .with_fingerprint(self.checkpoint.fingerprint.clone());
        report_dict(py, &report)
    }

    /// Per-item feature CSV for a click model; returns the row count.
    #[pyo3(signature = (dataset, path, split="validation"))]
    fn export_features(&self, dataset: &Dataset, path: PathBuf, split: &str) -> PyResult<usize> {
        let ModelParams::Click(model) = &self.checkpoint.model else {
            return Err(err("feature export needs a SEMB-1 or SEMB-2 model"));
        };
        let slate_embed::Batch::Sessions(sessions) = dataset.inner.batch(parse_split(split)?) else {
            return Err(err("feature export needs a click dataset"));
        };
        export_features(model, sessions, path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={}, dim={})", self.variant(), self.dim())
    }
}

/// Outcome of `train`.
#[pyclass(module = "pyslate", get_all)]
struct TrainResult {
    model: Py<Model>,
    best_epoch: usize,
    stopped_early: bool,
    best: Py<PyDict>,
    history: Vec<Py<PyDict>>,
}

/// Trains a model; keyword arguments mirror the CLI training flags.
#[pyfunction]
#[pyo3(signature = (
    dataset, variant, dim=5, lambda_=1e-4, learning_rate=1e-3, epochs=50, batch_size=None,
    seed=0, patience=10, selection=None, lambda_linear=None
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    variant: &str,
    dim: usize,
    lambda_: f64,
    learning_rate: f64,
    epochs: usize,
    batch_size: Option<usize>,
    seed: u64,
    patience: usize,
    selection: Option<&str>,
    lambda_linear: Option<f64>,
) -> PyResult<TrainResult> {
    let variant: ModelVariant = variant.parse().map_err(err)?;
    let config = TrainConfig {
        dim,
        lambda: lambda_,
        lambda_linear,
        learning_rate,
        epochs,
        batch_size,
        seed,
        patience,
        selection: selection.map(str::parse).transpose().map_err(err)?,
        ..TrainConfig::new(variant)
    };
    let data = dataset.inner.clone();
    let outcome = py.detach(move || train_model(&config, &data)).map_err(err)?;
    let history = outcome
        .history
        .iter()
        .map(|h| {
            let d = report_dict(py, &h.validation)?;
            d.set_item("epoch", h.epoch)?;
            d.set_item("train_objective", h.train_objective)?;
            Ok(d.unbind())
        })
        .collect::<PyResult<_>>()?;
    Ok(TrainResult {
        best: report_dict(py, &outcome.best)?.unbind(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        history,
        model: Py::new(
            py,
            Model::new(outcome.model, dataset.inner.schema().clone(), Some(outcome.config)),
        )?,
    })
}

/// Composes child embeddings: mean plus mean pairwise elementwise product.
#[pyfunction]
fn compose(children: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(slate_embed::compose(&children).map_err(err)?.into_inner())
}

/// Softmax of a logit vector.
#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    softmax_probs(&logits)
}

/// `(rank, reciprocal_rank, ndcg)` of the clicked item; ties rank by index.
#[pyfunction]
fn rank_metrics(logits: Vec<f64>, clicked: usize) -> PyResult<(usize, f64, f64)> {
    if clicked >= logits.len() {
        return Err(err(format!("clicked index {clicked} out of range for {} items", logits.len())));
    }
    Ok((
        rank_of(&logits, clicked),
        reciprocal_rank(&logits, clicked),
        single_item_ndcg(&logits, clicked),
    ))
}

#[pymodule]
fn pyslate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<TrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(rank_metrics, m)?)?;
    Ok(())
}

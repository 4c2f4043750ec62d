//! Python bindings. Structured reports cross the boundary as plain dicts.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;
use visaff_core::datamodel::{Dataset, Split};
use visaff_core::fusion::complement_visual as core_complement_visual;
use visaff_core::providers::bundle::{
    generate_dataset, generate_features, write_bundle, MemoryStore, SyntheticBundleSpec,
};
use visaff_core::theory::{self, BoundCheckConfig, RiskSample};
use visaff_core::training::{self, BinSample, TrainConfig};
use visaff_core::{fusion::FusionModel, numcore};

create_exception!(visaff, VisaffError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    VisaffError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(err),
        None => Ok(T::default()),
    }
}

/// A generated dataset together with its in-memory features.
#[pyclass(unsendable)]
struct SyntheticBundle {
    dataset: Dataset,
    store: MemoryStore,
    num_labels: usize,
}

#[pymethods]
impl SyntheticBundle {
    /// `spec` is a JSON object; omitted fields take their defaults.
    #[new]
    #[pyo3(signature = (spec=None, seed=0))]
    fn new(spec: Option<&str>, seed: u64) -> PyResult<Self> {
        let spec: SyntheticBundleSpec = from_json(spec)?;
        let dataset = generate_dataset(&spec, seed).map_err(err)?;
        let store = generate_features(&dataset, &spec.features, seed).map_err(err)?;
        Ok(Self {
            dataset,
            store,
            num_labels: spec.features.num_labels,
        })
    }

    #[staticmethod]
    fn separable(seed: u64) -> PyResult<Self> {
        Self::from_spec(SyntheticBundleSpec::separable_benchmark(), seed)
    }

    #[staticmethod]
    fn corrupted(seed: u64) -> PyResult<Self> {
        Self::from_spec(SyntheticBundleSpec::corrupted_benchmark(), seed)
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn num_conversations(&self, split: &str) -> PyResult<usize> {
        let split: Split = split.parse().map_err(err)?;
        Ok(self.dataset.conversations.iter().filter(|c| c.split == split).count())
    }
}

impl SyntheticBundle {
    fn from_spec(spec: SyntheticBundleSpec, seed: u64) -> PyResult<Self> {
        Self::new(Some(&serde_json::to_string(&spec).map_err(err)?), seed)
    }
}

/// A trained fusion model.
#[pyclass(unsendable)]
struct Model {
    model: FusionModel,
    config: TrainConfig,
    log: Vec<training::EpochLog>,
}

#[pymethods]
impl Model {
    /// Trains on the bundle's train split and keeps the best validation epoch.
    #[staticmethod]
    #[pyo3(signature = (bundle, config=None))]
    fn train(bundle: &SyntheticBundle, config: Option<&str>) -> PyResult<Self> {
        let config: TrainConfig = from_json(config)?;
        let out = training::train(&config, &bundle.dataset, &bundle.store).map_err(err)?;
        Ok(Self {
            model: out.model,
            config,
            log: out.log,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, config) = training::load_checkpoint(path).map_err(err)?;
        Ok(Self {
            model,
            config,
            log: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(path, &self.model, &self.config).map_err(err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.config)
    }

    fn log<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.log)
    }

    /// Metrics report for one split.
    fn evaluate<'py>(&self, py: Python<'py>, bundle: &SyntheticBundle, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let ev = training::evaluate(&self.model, &bundle.dataset, split, &bundle.store).map_err(err)?;
        to_py(py, &ev.report)
    }

    /// Per-utterance trace records for one split.
    fn traces<'py>(&self, py: Python<'py>, bundle: &SyntheticBundle, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let ev = training::evaluate(&self.model, &bundle.dataset, split, &bundle.store).map_err(err)?;
        let records: Vec<_> = ev.traces.iter().map(|t| t.record()).collect();
        to_py(py, &records)
    }

    /// Visual-only vs full W-F1 per reliability bin on one split.
    #[pyo3(signature = (bundle, split, bins=5))]
    fn bins<'py>(
        &self,
        py: Python<'py>,
        bundle: &SyntheticBundle,
        split: &str,
        bins: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let ev = training::evaluate(&self.model, &bundle.dataset, split, &bundle.store).map_err(err)?;
        let samples: Vec<BinSample> = ev.traces.iter().filter_map(BinSample::from_trace).collect();
        let report =
            training::bin_by_confidence(&samples, &training::uniform_edges(bins), bundle.num_labels).map_err(err)?;
        to_py(py, &report)
    }

    /// Risk decomposition over the labelled utterances of one split.
    fn decomposition<'py>(
        &self,
        py: Python<'py>,
        bundle: &SyntheticBundle,
        split: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let ev = training::evaluate(&self.model, &bundle.dataset, split, &bundle.store).map_err(err)?;
        let records: Vec<_> = ev.traces.iter().map(|t| t.record()).collect();
        let samples = theory::risk_samples(&records).map_err(err)?;
        to_py(py, &theory::risk_decomposition(&samples).map_err(err)?)
    }
}

/// Writes a synthetic bundle to `out_dir` and returns the written paths.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None, seed=0))]
fn write_synthetic(out_dir: PathBuf, spec: Option<&str>, seed: u64) -> PyResult<Vec<PathBuf>> {
    let spec: SyntheticBundleSpec = from_json(spec)?;
    let (_, _, paths) = write_bundle(&out_dir, &spec, seed).map_err(err)?;
    let mut out = vec![paths.dataset, paths.spec];
    out.extend(paths.caches);
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (x, tau=1.0))]
fn softmax(x: Vec<f64>, tau: f64) -> Vec<f64> {
    numcore::softmax(&x, tau)
}

#[pyfunction]
fn complement_visual(h_v: Vec<f64>, delta: Vec<f64>, c: f64) -> PyResult<Vec<f64>> {
    core_complement_visual(&h_v, &delta, c).map_err(err)
}

#[pyfunction]
fn weighted_f1(preds: Vec<usize>, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    training::weighted_f1(&preds, &labels, k).map_err(err)
}

#[pyfunction]
fn per_class_f1(preds: Vec<usize>, labels: Vec<usize>, k: usize) -> PyResult<Vec<f64>> {
    training::per_class_f1(&preds, &labels, k).map_err(err)
}

#[pyfunction]
fn bounded_ce(p: Vec<f64>, y: usize) -> PyResult<f64> {
    theory::bounded_ce(&p, y).map_err(err)
}

#[pyfunction]
fn fuse_predictions(c: f64, p_v: Vec<f64>, p_aux: Vec<f64>) -> PyResult<Vec<f64>> {
    theory::fuse_predictions(c, &p_v, &p_aux).map_err(err)
}

/// Decomposition report from per-sample gate values, probability rows and labels.
#[pyfunction]
fn risk_decomposition<'py>(
    py: Python<'py>,
    c: Vec<f64>,
    p_v: Vec<Vec<f64>>,
    p_aux: Vec<Vec<f64>>,
    labels: Vec<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    if [p_v.len(), p_aux.len(), labels.len()].iter().any(|&n| n != c.len()) {
        return Err(err("c, p_v, p_aux and labels must have equal length"));
    }
    let samples = (0..c.len())
        .map(|i| RiskSample::from_distributions(c[i], &p_v[i], &p_aux[i], labels[i]))
        .collect::<visaff_core::Result<Vec<_>>>()
        .map_err(err)?;
    to_py(py, &theory::risk_decomposition(&samples).map_err(err)?)
}

/// Runs the generalization-bound check; `config` is a JSON object.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn bound_check<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: BoundCheckConfig = from_json(config)?;
    to_py(py, &theory::bound_check(&cfg).map_err(err)?)
}

#[pymodule]
fn visaff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VisaffError", m.py().get_type::<VisaffError>())?;
    m.add_class::<SyntheticBundle>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(complement_visual, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_f1, m)?)?;
    m.add_function(wrap_pyfunction!(bounded_ce, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(risk_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(bound_check, m)?)?;
    Ok(())
}

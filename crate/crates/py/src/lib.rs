//! Python bindings. Configuration objects cross the boundary as JSON text so
//! the Python side can build them with plain dicts and `json.dumps`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use leakaudit::dataset::{self, CorpusRole};
use leakaudit::embedding::{self, TsneConfig};
use leakaudit::error::Error;
use leakaudit::experiments::{self, ExperimentConfig, ExperimentResult, FileStore};
use leakaudit::folds::{self, FoldProtocol, FoldSpec};
use leakaudit::imaging::{self, PipelineConfig};
use leakaudit::learner::{self, HyperParams};
use leakaudit::metrics::{self, ScoreMode};
use leakaudit::{report, seed, synth};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_data_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn score_mode(s: &str) -> PyResult<ScoreMode> {
    match s {
        "renormalized" => Ok(ScoreMode::Renormalized),
        "raw" => Ok(ScoreMode::Raw),
        _ => Err(PyValueError::new_err(format!("unknown score mode `{s}`"))),
    }
}

fn role_str(r: CorpusRole) -> &'static str {
    match r {
        CorpusRole::LargeSource => "large-source",
        CorpusRole::CvTarget => "cv-target",
    }
}

#[pyclass(name = "Manifest", module = "leakaudit", frozen)]
struct PyManifest {
    inner: dataset::Manifest,
    path: Option<PathBuf>,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = dataset::load_manifest(&path).map_err(err)?;
        Ok(Self { inner, path: Some(path) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save_manifest(&self.inner, &path).map_err(err)
    }

    /// Returns `(violations, warnings)`.
    fn validate(&self) -> (Vec<String>, Vec<String>) {
        let r = dataset::validate_manifest(&self.inner);
        (r.violations, r.warnings)
    }

    /// `(name, role)` pairs.
    #[getter]
    fn corpora(&self) -> Vec<(String, &'static str)> {
        self.inner
            .corpora
            .iter()
            .map(|c| (c.name.clone(), role_str(c.role)))
            .collect()
    }

    #[getter]
    fn cv_target(&self) -> Option<String> {
        self.inner.cv_target().map(|c| c.name.clone())
    }

    /// `(sample_id, dataset, class, split)` rows.
    #[getter]
    fn samples(&self) -> Vec<(String, String, String, &'static str)> {
        self.inner
            .samples
            .iter()
            .map(|s| {
                (
                    s.sample_id.clone(),
                    s.dataset_label.clone(),
                    s.class_label.clone(),
                    s.split.as_str(),
                )
            })
            .collect()
    }

    fn digest(&self) -> String {
        experiments::manifest_digest(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Manifest({} samples, {} corpora)",
            self.inner.samples.len(),
            self.inner.corpora.len()
        )
    }
}

#[pyclass(name = "Image", module = "leakaudit", frozen)]
struct PyImage {
    inner: imaging::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: imaging::Image::new(width, height, pixels).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: imaging::Image::load(&path).map_err(err)?,
        })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Row-major 8-bit pixels.
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    fn mask_center(&self, size: usize) -> Self {
        Self {
            inner: imaging::mask_center_square(&self.inner, size),
        }
    }

    #[pyo3(signature = (tiles = (8, 8), clip = 0.01))]
    fn clahe(&self, tiles: (usize, usize), clip: f64) -> PyResult<Self> {
        Ok(Self {
            inner: imaging::clahe(&self.inner, tiles, clip).map_err(err)?,
        })
    }

    /// Run the preprocessing pipeline. `config` is a JSON pipeline config;
    /// the default pipeline is used when omitted.
    #[pyo3(signature = (config = None, seed = 0, training = false))]
    fn pipeline(&self, config: Option<&str>, seed: u64, training: bool) -> PyResult<Self> {
        let cfg: PipelineConfig = match config {
            Some(t) => serde_json::from_str(t).map_err(json_err)?,
            None => PipelineConfig::default(),
        };
        let out = imaging::run_pipeline(&self.inner, &cfg, &mut seed::rng(seed), training).map_err(err)?;
        Ok(Self { inner: out })
    }

    fn features(&self, side: usize) -> Vec<f64> {
        imaging::feature_vector(&self.inner, side)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Grouped folds over the manifest's cv-target corpus: `{sample_id: fold}`.
#[pyfunction]
#[pyo3(signature = (manifest, protocol = "pat-out", seed = 0))]
fn build_folds(manifest: &PyManifest, protocol: &str, seed: u64) -> PyResult<BTreeMap<String, usize>> {
    let protocol = match protocol {
        "pat-out" => FoldProtocol::PatOut,
        "doc-out" => FoldProtocol::DocOut,
        _ => return Err(PyValueError::new_err(format!("unknown protocol `{protocol}`"))),
    };
    let cv = manifest
        .inner
        .cv_target()
        .ok_or_else(|| PyValueError::new_err("manifest has no cv-target corpus"))?;
    let samples: Vec<_> = manifest.inner.samples_of(&cv.name).cloned().collect();
    let fa = folds::build_folds_grouped(&samples, &FoldSpec::for_protocol(protocol, seed)).map_err(err)?;
    Ok(fa.entries.into_iter().map(|e| (e.sample_id, e.fold)).collect())
}

#[pyclass(name = "Model", module = "leakaudit")]
struct PyModel {
    inner: learner::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dim, n_classes, seed = 0))]
    fn new(input_dim: usize, hidden_dim: usize, n_classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: learner::Model::init(input_dim, hidden_dim, n_classes, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: learner::Model::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Train in place; returns the per-epoch loss trace. `hyper` is JSON.
    #[pyo3(signature = (xs, labels, hyper = None))]
    fn train(&mut self, py: Python<'_>, xs: Vec<Vec<f64>>, labels: Vec<usize>, hyper: Option<&str>) -> PyResult<Vec<f64>> {
        let hp: HyperParams = match hyper {
            Some(t) => serde_json::from_str(t).map_err(json_err)?,
            None => HyperParams::desk_preset(),
        };
        let model = &mut self.inner;
        let r = py.detach(|| model.train(&xs, &labels, &hp)).map_err(err)?;
        Ok(r.loss_trace)
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(&x).map_err(err)
    }

    fn hidden_features(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.hidden_features(&x).map_err(err)
    }

    fn loss(&self, xs: Vec<Vec<f64>>, labels: Vec<usize>) -> f64 {
        self.inner.loss(&xs, &labels)
    }

    fn accuracy(&self, xs: Vec<Vec<f64>>, labels: Vec<usize>) -> f64 {
        self.inner.accuracy(&xs, &labels)
    }

    /// Worst relative error between analytic and central-difference gradients.
    #[pyo3(signature = (xs, labels, eps = 1e-4, seed = 0))]
    fn grad_check(&self, xs: Vec<Vec<f64>>, labels: Vec<usize>, eps: f64, seed: u64) -> f64 {
        learner::grad_check(&self.inner, &xs, &labels, eps, seed)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
}

#[pyclass(name = "PredictionPool", module = "leakaudit", frozen)]
struct PyPool {
    inner: metrics::PredictionPool,
}

#[pymethods]
impl PyPool {
    /// Read a pooled prediction CSV.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (names, runs) = experiments::import_external_predictions(&path).map_err(err)?;
        Ok(Self {
            inner: metrics::merge_predictions(&names, runs).map_err(err)?,
        })
    }

    /// Build from `(sample_id, fold, true_label, probs)` rows.
    #[staticmethod]
    fn from_records(class_names: Vec<String>, records: Vec<(String, usize, usize, Vec<f64>)>) -> PyResult<Self> {
        let mut by_fold: BTreeMap<usize, Vec<metrics::PredictionRecord>> = BTreeMap::new();
        for (sample_id, fold, true_label, probs) in records {
            by_fold.entry(fold).or_default().push(metrics::PredictionRecord {
                sample_id,
                fold,
                true_label,
                probs,
            });
        }
        let runs = by_fold.into_values().collect();
        Ok(Self {
            inner: metrics::merge_predictions(&class_names, runs).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        experiments::export_predictions(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[pyo3(signature = (a, b, mode = "renormalized"))]
    fn pairwise_auc(&self, a: usize, b: usize, mode: &str) -> PyResult<f64> {
        metrics::pairwise_auc(&self.inner, a, b, score_mode(mode)?).map_err(err)
    }

    /// Upper-triangular AUC table; undefined cells are `None`.
    #[pyo3(signature = (mode = "renormalized"))]
    fn auc_matrix(&self, mode: &str) -> PyResult<Vec<Vec<Option<f64>>>> {
        Ok(metrics::auc_matrix(&self.inner, score_mode(mode)?).values)
    }

    fn confusion(&self) -> Vec<Vec<u64>> {
        metrics::confusion_matrix(&self.inner).counts
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn auc_from_scores(pos: Vec<f64>, neg: Vec<f64>) -> f64 {
    metrics::auc_from_scores(&pos, &neg)
}

/// Returns `(coords, kl_trace)`.
#[pyfunction]
#[pyo3(signature = (features, perplexity = 30.0, iterations = 1000, seed = 0))]
fn fit_tsne(
    py: Python<'_>,
    features: Vec<Vec<f64>>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<(Vec<(f64, f64)>, Vec<f64>)> {
    let cfg = TsneConfig {
        perplexity,
        iterations,
        seed,
        ..TsneConfig::default()
    };
    let r = py.detach(|| embedding::fit_tsne(&features, &cfg)).map_err(err)?;
    Ok((r.coords.into_iter().map(|c| (c[0], c[1])).collect(), r.kl_trace))
}

/// Render a synthetic corpus described by a JSON spec; returns the manifest path.
#[pyfunction]
fn generate_corpus(py: Python<'_>, spec: &str, out_dir: PathBuf) -> PyResult<PathBuf> {
    let spec = synth::SynthCorpusSpec::from_json(spec).map_err(err)?;
    py.detach(|| synth::generate_corpus(&spec, &out_dir)).map_err(err)
}

#[pyclass(name = "AuditResult", module = "leakaudit", frozen)]
struct PyAuditResult {
    inner: ExperimentResult,
}

#[pymethods]
impl PyAuditResult {
    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.auc.class_names.clone()
    }

    #[getter]
    fn auc(&self) -> Vec<Vec<Option<f64>>> {
        self.inner.auc.values.clone()
    }

    #[getter]
    fn target_auc(&self) -> Option<f64> {
        self.inner.target_auc
    }

    #[getter]
    fn confusion(&self) -> Vec<Vec<u64>> {
        self.inner.confusion.counts.clone()
    }

    #[getter]
    fn pool(&self) -> PyPool {
        PyPool {
            inner: self.inner.pool.clone(),
        }
    }

    /// `(sample_id, x, y, dataset)` rows when the embedding was requested.
    #[getter]
    fn embedding(&self) -> Option<Vec<(String, f64, f64, String)>> {
        self.inner.embedding.as_ref().map(|pts| {
            pts.iter()
                .map(|p| (p.sample_id.clone(), p.x, p.y, p.dataset_label.clone()))
                .collect()
        })
    }

    fn auc_table(&self) -> String {
        report::format_auc_table(&self.inner.auc)
    }

    /// Write a result bundle that `render_report` can consume.
    #[pyo3(signature = (out_dir, manifest = None, force = false))]
    fn write_bundle(&self, out_dir: PathBuf, manifest: Option<&PyManifest>, force: bool) -> PyResult<()> {
        let mpath = manifest.and_then(|m| m.path.as_deref());
        experiments::write_bundle(&self.inner, mpath, &out_dir, force).map_err(err)
    }
}

/// Run dataset recognition, or target recognition when `leave_out` is given.
/// Images are read relative to the manifest's directory.
#[pyfunction]
#[pyo3(signature = (manifest, config = None, leave_out = None, seed = None))]
fn run_audit(
    py: Python<'_>,
    manifest: &PyManifest,
    config: Option<&str>,
    leave_out: Option<String>,
    seed: Option<u64>,
) -> PyResult<PyAuditResult> {
    let mut cfg = match config {
        Some(t) => ExperimentConfig::from_json(t).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(l) = leave_out {
        cfg.mode = experiments::ExperimentMode::TargetRecognition;
        cfg.leave_out = Some(l);
    }
    let path = manifest
        .path
        .as_deref()
        .ok_or_else(|| PyValueError::new_err("manifest was not loaded from a file"))?;
    let store = FileStore::for_manifest(path);
    let m = &manifest.inner;
    let inner = py.detach(|| experiments::run_experiment(m, &store, &cfg)).map_err(err)?;
    Ok(PyAuditResult { inner })
}

/// Render report.md and figures for a bundle; returns the written paths.
#[pyfunction]
fn render_report(dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    Ok(report::render_report(&dir).map_err(err)?.files)
}

#[pymodule]
#[pyo3(name = "leakaudit")]
fn leakaudit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPool>()?;
    m.add_class::<PyAuditResult>()?;
    m.add_function(wrap_pyfunction!(build_folds, m)?)?;
    m.add_function(wrap_pyfunction!(auc_from_scores, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tsne, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_audit, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

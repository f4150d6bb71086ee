//! Python bindings for the concept embedding search lab.

use std::sync::Arc;

use cones_core::data::{generate_scene, BBox, Domain, SceneConfig, Vocabulary};
use cones_core::eval::{coco_thresholds, compute_ap, Detection, GroundTruth};
use cones_core::experiments::{self, AblationAxis, PretrainScale, RunSpec, Session};
use cones_core::tuning::Method;
use cones_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::Serialize;

create_exception!(cones_lab, LabError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Schema { .. } | Error::InvalidArgument(_) | Error::UnknownClass(_) => PyValueError::new_err(e.to_string()),
        other => LabError::new_err(other.to_string()),
    }
}

/// Serializes through `json.loads` so callers get plain dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| LabError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_string());
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn domain(name: &str) -> PyResult<Domain> {
    [Domain::InDomain, Domain::OutDomain]
        .into_iter()
        .find(|d| d.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown domain `{name}`")))
}

fn method(name: &str) -> PyResult<Method> {
    name.parse().map_err(err)
}

/// Experiment configuration. Built from a JSON string or dict; missing
/// fields take their defaults.
#[pyclass(module = "cones_lab", frozen)]
struct Config {
    inner: experiments::ExperimentConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (source=None))]
    fn new(source: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let inner = match source {
            Some(s) => experiments::parse_config(&json_text(s)?).map_err(err)?,
            None => experiments::ExperimentConfig::default(),
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: experiments::load_config(path.as_ref()).map_err(err)?,
        })
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| LabError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={:?}, seed={})", self.inner.hash(), self.inner.seed)
    }
}

/// Outcome of one adaptation run.
#[pyclass(module = "cones_lab", frozen)]
struct Run {
    inner: Arc<experiments::RunResult>,
}

#[pymethods]
impl Run {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.record.spec.method.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.record.spec.seed
    }

    #[getter]
    fn key(&self) -> String {
        self.inner.record.key.clone()
    }

    #[getter]
    fn ap(&self) -> f64 {
        self.inner.record.test.ap_box
    }

    #[getter]
    fn ap50(&self) -> f64 {
        self.inner.record.test.ap50_box
    }

    #[getter]
    fn ap_mask(&self) -> f64 {
        self.inner.record.test.ap_mask
    }

    #[getter]
    fn unfrozen(&self) -> usize {
        self.inner.record.run.unfrozen_scalars
    }

    #[getter]
    fn total(&self) -> usize {
        self.inner.record.params.total
    }

    #[getter]
    fn text_calls(&self) -> u64 {
        self.inner.record.run.text_calls
    }

    #[getter]
    fn directory(&self) -> Option<String> {
        self.inner.dir.as_ref().map(|d| d.display().to_string())
    }

    /// Learned prompt vectors as nested lists, one row per token.
    fn embeddings(&self) -> Option<Vec<Vec<f64>>> {
        let t = self.inner.tuned.prompt.tensor.as_ref()?;
        let cols = t.cols();
        Some(t.data().chunks(cols).map(<[f64]>::to_vec).collect())
    }

    fn record<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.record)
    }

    fn __repr__(&self) -> String {
        format!("Run(method={:?}, seed={}, ap={:.4})", self.method(), self.seed(), self.ap())
    }
}

/// Artifact store. With a root directory runs are cached on disk and
/// recorded in its ledger; without one everything stays in memory.
#[pyclass(module = "cones_lab", frozen)]
struct Lab {
    inner: experiments::Lab,
}

impl Lab {
    fn session(&self, config: &Config) -> Session<'_> {
        Session::new(&self.inner, config.inner.clone())
    }
}

#[pymethods]
impl Lab {
    #[new]
    #[pyo3(signature = (root=None))]
    fn new(root: Option<&str>) -> PyResult<Self> {
        let inner = match root {
            Some(r) => experiments::Lab::open(r).map_err(err)?,
            None => experiments::Lab::in_memory(),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn root(&self) -> Option<String> {
        self.inner.persists().then(|| self.inner.root().display().to_string())
    }

    /// Runs (or loads) one method on the config's evaluation domain.
    #[pyo3(signature = (config, method, seed=None))]
    fn run(&self, py: Python<'_>, config: &Config, method: &str, seed: Option<u64>) -> PyResult<Run> {
        let m = self::method(method)?;
        let cfg = &config.inner;
        let spec = RunSpec {
            seed: seed.unwrap_or(cfg.seed),
            ..RunSpec::from_config(cfg, m)
        };
        let inner = py.detach(|| self.inner.run(cfg, &spec)).map_err(err)?;
        Ok(Run { inner })
    }

    /// Like `run`, and also appends a ledger entry when the lab persists.
    fn tune(&self, py: Python<'_>, config: &Config, method: &str) -> PyResult<Run> {
        let m = self::method(method)?;
        let inner = py.detach(|| self.session(config).tune(m)).map_err(err)?;
        Ok(Run { inner })
    }

    /// Validation score of the pretrained checkpoint for `seed`.
    #[pyo3(signature = (config, seed=None, fusion=true))]
    fn pretrain<'py>(&self, py: Python<'py>, config: &Config, seed: Option<u64>, fusion: bool) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &config.inner;
        let ck = py
            .detach(|| self.inner.pretrained(cfg, seed.unwrap_or(cfg.seed), fusion, PretrainScale::Full))
            .map_err(err)?;
        to_py(py, &ck.val)
    }

    fn ablate<'py>(&self, py: Python<'py>, config: &Config, axis: &str) -> PyResult<Bound<'py, PyAny>> {
        let axis: AblationAxis = axis.parse().map_err(err)?;
        let t = py.detach(|| experiments::ablate(&self.inner, &config.inner, axis)).map_err(err)?;
        to_py(py, &t)
    }

    #[pyo3(signature = (config, seed=None))]
    fn gap_analysis<'py>(&self, py: Python<'py>, config: &Config, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &config.inner;
        let g = py.detach(|| experiments::gap_analysis(&self.inner, cfg, seed.unwrap_or(cfg.seed))).map_err(err)?;
        to_py(py, &g)
    }

    /// Every stage end to end, writing tables under the lab root.
    fn pipeline(&self, py: Python<'_>, config: &Config) -> PyResult<String> {
        if !self.inner.persists() {
            return Err(PyValueError::new_err("the pipeline needs a lab with a root directory"));
        }
        let s = self.session(config);
        py.detach(|| s.pipeline()).map_err(err)?;
        Ok(s.output_dir().display().to_string())
    }

    fn __repr__(&self) -> String {
        match self.root() {
            Some(r) => format!("Lab(root={r:?})"),
            None => "Lab()".into(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn generation_study<'py>(py: Python<'py>, config: &Config, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let g = py.detach(|| experiments::generation_study(&cfg.generate, seed.unwrap_or(cfg.seed))).map_err(err)?;
    to_py(py, &g)
}

/// One synthetic scene as a dict of image, boxes, labels and masks.
#[pyfunction]
#[pyo3(signature = (seed, domain="in_domain"))]
fn scene<'py>(py: Python<'py>, seed: u64, domain: &str) -> PyResult<Bound<'py, PyAny>> {
    let vocab = Vocabulary::for_domain(self::domain(domain)?);
    let s = generate_scene(&SceneConfig::default(), &vocab, None, seed).map_err(err)?;
    to_py(py, &s)
}

#[pyfunction]
#[pyo3(signature = (domain="in_domain"))]
fn class_names(domain: &str) -> PyResult<Vec<String>> {
    Ok(Vocabulary::for_domain(self::domain(domain)?).names())
}

type BoxTuple = (f64, f64, f64, f64);

/// Box AP over IoU thresholds 0.50:0.95 for one image per list entry.
/// Detections are `(x_min, y_min, x_max, y_max, class, confidence)`,
/// ground truths `(x_min, y_min, x_max, y_max, class)`. Returns
/// `(ap, ap50)`.
#[pyfunction]
fn average_precision(
    detections: Vec<Vec<(f64, f64, f64, f64, usize, f64)>>,
    ground_truths: Vec<Vec<(f64, f64, f64, f64, usize)>>,
    num_classes: usize,
) -> PyResult<(f64, f64)> {
    if detections.len() != ground_truths.len() {
        return Err(PyValueError::new_err("detections and ground truths need one entry per image"));
    }
    let bbox = |(a, b, c, d): BoxTuple| BBox::new(a, b, c, d);
    let dets: Vec<Vec<Detection>> = detections
        .into_iter()
        .map(|img| {
            img.into_iter()
                .map(|(a, b, c, d, class, confidence)| Detection {
                    bbox: bbox((a, b, c, d)),
                    class,
                    confidence,
                    mask: None,
                })
                .collect()
        })
        .collect();
    let gts: Vec<Vec<GroundTruth>> = ground_truths
        .into_iter()
        .map(|img| {
            img.into_iter()
                .map(|(a, b, c, d, class)| GroundTruth {
                    bbox: bbox((a, b, c, d)),
                    class,
                    mask: None,
                })
                .collect()
        })
        .collect();
    let r = compute_ap(&dets, &gts, num_classes, &coco_thresholds());
    Ok((r.mean, r.ap50))
}

/// Runs the command-line interface and returns its exit code.
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> i32 {
    let mut argv = vec!["cones-lab".to_string()];
    argv.extend(args);
    py.detach(|| cones_core::cli::run(argv))
}

#[pymodule]
fn cones_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LabError", m.py().get_type::<LabError>())?;
    m.add_class::<Config>()?;
    m.add_class::<Lab>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(generation_study, m)?)?;
    m.add_function(wrap_pyfunction!(scene, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>())?;
    Ok(())
}

//! Python module `upsilon_py`: pseudo-labelers, the balanced extra-class
//! assignment, diagnostics, the synthetic benchmark and the training loop.
//!
//! Matrices cross the boundary as lists of rows; configs as keyword arguments
//! with the same field names as the TOML config sections.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

use upsilon::confidence::{confidence as confidence_of, ConfidenceMeasure};
use upsilon::datagen::{generate, BenchmarkSpec};
use upsilon::diagnostics::{kl_to_uniform as kl, majority_minority_ratio as ratio, LabelHistogram};
use upsilon::experiment::{self, ExperimentConfig};
use upsilon::pseudo_label::{compute_rpl_thresholds, rebalanced_pl as rpl, vanilla_pl as vpl};
use upsilon::sec::{sec as sec_assign, sinkhorn_assign as sinkhorn, SinkhornConfig, SinkhornReport};
use upsilon::trainer::{lambda_ramp as ramp, train_variant, TrainConfig, Variant};
use upsilon::{Error, LabelSpace as CoreLabelSpace, PredictionMatrix, PseudoLabelSet};

/// Class counts and the optional solver report of an assignment call.
type Assigned<'py> = (BTreeMap<usize, usize>, Option<Bound<'py, PyDict>>);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Cell { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn label_space(k_id: usize, k_extra: usize) -> PyResult<CoreLabelSpace> {
    CoreLabelSpace::new(k_id, k_extra).map_err(err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<PredictionMatrix> {
    PredictionMatrix::from_rows(&rows).map_err(err)
}

fn measure(name: &str) -> PyResult<ConfidenceMeasure> {
    from_json(&format!("\"{name}\""))
}

fn from_json<T: DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Deserializes keyword arguments through Python's `json`, so field names and
/// defaults match the TOML config sections.
fn from_kwargs<T: DeserializeOwned + Default>(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    match kwargs {
        None => Ok(T::default()),
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            from_json(&text)
        }
    }
}

fn labels_dict(set: &PseudoLabelSet) -> BTreeMap<usize, usize> {
    set.iter().collect()
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &SinkhornReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iterations", r.iterations)?;
    d.set_item("converged", r.converged)?;
    d.set_item("residual", r.residual)?;
    d.set_item("residual_l1", r.residual_l1)?;
    d.set_item("repair_l1", r.repair_l1)?;
    Ok(d)
}

/// `k_id` ID classes followed by `k_extra` extra classes.
#[pyclass(name = "LabelSpace", frozen)]
struct LabelSpace(CoreLabelSpace);

#[pymethods]
impl LabelSpace {
    #[new]
    #[pyo3(signature = (k_id, k_extra=0))]
    fn new(k_id: usize, k_extra: usize) -> PyResult<Self> {
        Ok(Self(label_space(k_id, k_extra)?))
    }

    #[getter]
    fn k_id(&self) -> usize {
        self.0.k_id()
    }

    #[getter]
    fn k_extra(&self) -> usize {
        self.0.k_extra()
    }

    #[getter]
    fn total(&self) -> usize {
        self.0.total()
    }

    fn is_id(&self, class: usize) -> bool {
        self.0.is_id(class)
    }

    fn __repr__(&self) -> String {
        format!("LabelSpace(k_id={}, k_extra={})", self.0.k_id(), self.0.k_extra())
    }
}

/// Pseudo-label weight after `iteration` steps of a ramp of length `horizon`.
#[pyfunction]
fn lambda_ramp(iteration: u64, horizon: u64) -> f64 {
    ramp(iteration, horizon)
}

/// Per-row confidence: `max_prob`, `neg_entropy` or `score_diff`.
#[pyfunction]
#[pyo3(signature = (probs, k_id, k_extra=0, measure_name="max_prob"))]
fn confidence(probs: Vec<Vec<f64>>, k_id: usize, k_extra: usize, measure_name: &str) -> PyResult<Vec<f64>> {
    let p = matrix(probs)?;
    let ls = label_space(k_id, k_extra)?;
    Ok(confidence_of(&p, &ls, measure(measure_name)?).map_err(err)?.values)
}

/// `{sample: class}` for rows whose ID confidence exceeds `tau`.
#[pyfunction]
#[pyo3(signature = (probs, k_id, k_extra=0, tau=0.95))]
fn vanilla_pl(probs: Vec<Vec<f64>>, k_id: usize, k_extra: usize, tau: f64) -> PyResult<BTreeMap<usize, usize>> {
    let set = vpl(&matrix(probs)?, &label_space(k_id, k_extra)?, tau).map_err(err)?;
    Ok(labels_dict(&set))
}

/// Class-balanced `{sample: class}` with the same count in every ID class.
#[pyfunction]
#[pyo3(signature = (probs, k_id, k_extra=0, tau=0.95))]
fn rebalanced_pl(probs: Vec<Vec<f64>>, k_id: usize, k_extra: usize, tau: f64) -> PyResult<BTreeMap<usize, usize>> {
    let set = rpl(&matrix(probs)?, &label_space(k_id, k_extra)?, tau).map_err(err)?;
    Ok(labels_dict(&set))
}

/// Per-class quota of [`rebalanced_pl`].
#[pyfunction]
#[pyo3(signature = (probs, k_id, k_extra=0, tau=0.95))]
fn rpl_quota(probs: Vec<Vec<f64>>, k_id: usize, k_extra: usize, tau: f64) -> PyResult<usize> {
    let t = compute_rpl_thresholds(&matrix(probs)?, &label_space(k_id, k_extra)?, tau).map_err(err)?;
    Ok(t.quota)
}

/// Balanced assignment of the columns of a `K x M` posterior to its rows.
/// Returns the plan (row sums `1/K`, column sums `1/M`) and a solver report.
#[pyfunction]
#[pyo3(signature = (posterior, reg=25.0, max_iters=32, marginal_tol=1e-6))]
fn sinkhorn_assign<'py>(
    py: Python<'py>,
    posterior: Vec<Vec<f64>>,
    reg: f64,
    max_iters: usize,
    marginal_tol: f64,
) -> PyResult<(Vec<Vec<f64>>, Bound<'py, PyDict>)> {
    let k = posterior.len();
    let m = posterior.first().map_or(0, Vec::len);
    if posterior.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("posterior rows differ in length"));
    }
    let p = Array2::from_shape_vec((k, m), posterior.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = SinkhornConfig {
        reg,
        max_iters,
        marginal_tol,
    };
    cfg.validate().map_err(err)?;
    let out = sinkhorn(p.view(), &cfg).map_err(err)?;
    Ok((rows(&out.assignment.view().to_owned()), report_dict(py, &out.report)?))
}

/// Clusters rows with confidence below `gamma` onto the extra classes.
#[pyfunction]
#[pyo3(signature = (probs, k_id, k_extra, gamma=0.3, measure_name="max_prob", reg=25.0, max_iters=32))]
#[allow(clippy::too_many_arguments)]
fn sec<'py>(
    py: Python<'py>,
    probs: Vec<Vec<f64>>,
    k_id: usize,
    k_extra: usize,
    gamma: f64,
    measure_name: &str,
    reg: f64,
    max_iters: usize,
) -> PyResult<Assigned<'py>> {
    let p = matrix(probs)?;
    let ls = label_space(k_id, k_extra)?;
    let conf = confidence_of(&p, &ls, measure(measure_name)?).map_err(err)?;
    let cfg = SinkhornConfig {
        reg,
        max_iters,
        ..SinkhornConfig::default()
    };
    cfg.validate().map_err(err)?;
    let out = sec_assign(&p, &ls, &conf, gamma, &cfg).map_err(err)?;
    let report = out.report.as_ref().map(|r| report_dict(py, r)).transpose()?;
    Ok((labels_dict(&out.labels), report))
}

/// KL divergence (natural log) from uniform of a label histogram.
#[pyfunction]
fn kl_to_uniform(counts: Vec<usize>) -> PyResult<f64> {
    kl(&LabelHistogram::new(counts)).map_err(err)
}

/// Largest over smallest class count; `inf` when some class is empty.
#[pyfunction]
fn majority_minority_ratio(counts: Vec<usize>) -> PyResult<f64> {
    Ok(ratio(&LabelHistogram::new(counts)).map_err(err)?.as_f64())
}

/// Draws a synthetic class-mismatched benchmark; keywords are `[benchmark]` fields.
#[pyfunction]
#[pyo3(signature = (**spec))]
fn generate_benchmark<'py>(py: Python<'py>, spec: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let spec: BenchmarkSpec = from_kwargs(py, spec)?;
    let ds = generate(&spec).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("k_id", ds.k_id)?;
    d.set_item("k_ood", ds.k_ood)?;
    d.set_item("labeled", rows(&ds.labeled))?;
    d.set_item("labeled_labels", ds.labeled_labels.clone())?;
    d.set_item("unlabeled", rows(&ds.unlabeled))?;
    d.set_item("unlabeled_truth", ds.unlabeled_truth.clone())?;
    d.set_item("ood_mask", ds.ood_mask.clone())?;
    d.set_item("test_id", rows(&ds.test_id))?;
    d.set_item("test_id_labels", ds.test_id_labels.clone())?;
    Ok(d)
}

/// Trains one variant on a generated benchmark and returns its metric log.
///
/// `variant` is `upsilon`, `vanilla_pl`, `rpl_only`, `sec_only`,
/// `open_set_k1` or `baseline`; `benchmark` and `train` hold config fields.
#[pyfunction]
#[pyo3(signature = (variant="upsilon", benchmark=None, train=None, final_fraction=0.05))]
fn train<'py>(
    py: Python<'py>,
    variant: &str,
    benchmark: Option<&Bound<'py, PyDict>>,
    train: Option<&Bound<'py, PyDict>>,
    final_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec: BenchmarkSpec = from_kwargs(py, benchmark)?;
    let cfg: TrainConfig = from_kwargs(py, train)?;
    let v = match variant {
        "upsilon" => Variant::Upsilon,
        "vanilla_pl" => Variant::VanillaPl,
        "rpl_only" => Variant::RplOnly,
        "sec_only" => Variant::SecOnly,
        "open_set_k1" => Variant::OpenSetK1,
        "baseline" => Variant::baseline(),
        other => return Err(PyValueError::new_err(format!("unknown variant `{other}`"))),
    };
    let ds = generate(&spec).map_err(err)?;
    let out = train_variant(&ds, &cfg, &v).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("final_accuracy", out.log.final_accuracy(final_fraction))?;
    d.set_item("accuracy", out.log.epochs.iter().map(|e| e.accuracy).collect::<Vec<_>>())?;
    d.set_item("loss", out.log.epochs.iter().map(|e| e.loss).collect::<Vec<_>>())?;
    d.set_item("round_epochs", out.log.rounds.iter().map(|r| r.epoch).collect::<Vec<_>>())?;
    d.set_item(
        "ood_as_id_prop",
        out.log.rounds.iter().map(|r| r.ood_as_id_prop).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "n_pseudo",
        out.log.rounds.iter().map(|r| r.n_primary + r.n_sec).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Runs an experiment config file and returns the path of its results CSV.
#[pyfunction]
#[pyo3(signature = (config_path, out, workers=None))]
fn run_experiment(config_path: PathBuf, out: PathBuf, workers: Option<usize>) -> PyResult<String> {
    let bytes = std::fs::read(&config_path).map_err(|e| err(e.into()))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| PyValueError::new_err("config is not UTF-8"))?;
    let cfg = ExperimentConfig::from_toml_str(&text).map_err(err)?;
    let summary = experiment::run(&cfg, Some(&bytes), &out, workers).map_err(err)?;
    Ok(summary.results.display().to_string())
}

#[pymodule]
fn upsilon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LabelSpace>()?;
    m.add_function(wrap_pyfunction!(lambda_ramp, m)?)?;
    m.add_function(wrap_pyfunction!(confidence, m)?)?;
    m.add_function(wrap_pyfunction!(vanilla_pl, m)?)?;
    m.add_function(wrap_pyfunction!(rebalanced_pl, m)?)?;
    m.add_function(wrap_pyfunction!(rpl_quota, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_assign, m)?)?;
    m.add_function(wrap_pyfunction!(sec, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(majority_minority_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(generate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

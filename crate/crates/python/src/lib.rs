//! Python bindings. Configuration is passed as keyword arguments using the
//! same keys as the `key=value` files read by the command-line tool.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use sgght_core::datagen::{
    generate_dataset, group_by_image, group_split, head_set, load_dataset_dir, save_dataset_dir,
};
use sgght_core::losses::{cross_entropy, effective_number_weights, kd_loss};
use sgght_core::metrics::{
    evaluate_predictions, mean_at_k, EvalReport, GroundTruthTriple, RankedPrediction,
};
use sgght_core::model::{read_checkpoint, write_checkpoint, DualBranchModel};
use sgght_core::schedules::{branch_alpha, predicate_lambda};
use sgght_core::trainer::{
    evaluate, generator_config_from_str, init_model, run_command, train, train_config_from_str,
    TrainConfig, DEFAULT_KS,
};
use sgght_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFiniteGradCheck { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Renders keyword arguments as `key=value` lines; booleans become `true`/`false`.
fn kwargs_text(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let mut out = String::new();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<bool>() {
                Ok(b) if v.is_instance_of::<pyo3::types::PyBool>() => b.to_string(),
                _ => v.str()?.to_string(),
            };
            out.push_str(&format!("{key}={value}\n"));
        }
    }
    Ok(out)
}

fn train_config(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    train_config_from_str(&kwargs_text(kwargs)?).map_err(to_py)
}

/// A generated or loaded dataset with its predicate vocabulary.
#[pyclass(module = "sgght", frozen)]
struct Dataset {
    inner: sgght_core::datagen::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset_dir(&dir).map_err(to_py)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_dataset_dir(&dir, &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn num_test(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn num_train_images(&self) -> usize {
        group_by_image(&self.inner.train).len()
    }

    #[getter]
    fn predicate_names(&self) -> Vec<String> {
        self.inner.vocab.names.clone()
    }

    #[getter]
    fn train_counts(&self) -> Vec<u64> {
        self.inner.vocab.train_counts.clone()
    }

    #[getter]
    fn parent_of(&self) -> Vec<Option<usize>> {
        self.inner.vocab.parent_of.clone()
    }

    /// Predicates with more than `threshold` training samples.
    fn head_set(&self, threshold: u64) -> Vec<usize> {
        head_set(&self.inner.vocab, threshold).into_iter().collect()
    }

    /// `(many, medium, few)` predicate index lists.
    fn group_split(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let g = group_split(&self.inner.vocab);
        (g.many, g.medium, g.few)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(train={}, test={}, predicates={})",
            self.inner.train.len(),
            self.inner.test.len(),
            self.inner.vocab.num_predicates()
        )
    }
}

/// Dual-branch relation classifier.
#[pyclass(module = "sgght", frozen)]
struct Model {
    inner: DualBranchModel,
}

#[pymethods]
impl Model {
    /// Untrained model for `dataset`, seeded by the `seed` keyword.
    #[new]
    #[pyo3(signature = (dataset, **kwargs))]
    fn new(dataset: &Dataset, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = train_config(kwargs)?;
        Ok(Self {
            inner: init_model(&cfg, &dataset.inner).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.inner).map_err(to_py)
    }

    #[pyo3(signature = (dataset, ks = DEFAULT_KS.to_vec()))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        ks: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let report = evaluate(&self.inner, &dataset.inner.test, &dataset.inner.vocab, &ks)
            .map_err(to_py)?;
        report_dict(py, &report)
    }

    /// Fine-branch (or coarse-branch, for baselines) logits of one image of
    /// the test split, one row per relation.
    fn predict_test_image(&self, dataset: &Dataset, image: usize) -> PyResult<Vec<Vec<f64>>> {
        let images = group_by_image(&dataset.inner.test);
        let rels = images
            .get(image)
            .ok_or_else(|| PyValueError::new_err(format!("no test image {image}")))?;
        let logits = self.inner.predict_image(rels).map_err(to_py)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).to_vec()).collect())
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().cloned().collect()
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .inner
            .params
            .try_value(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown parameter `{name}`")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

fn report_dict<'py>(py: Python<'py>, report: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    for kr in &report.per_k {
        let d = PyDict::new(py);
        d.set_item("R", kr.r_at_k)?;
        d.set_item("mR", kr.mr_at_k)?;
        d.set_item("M", kr.m_at_k)?;
        d.set_item("many", kr.groups.many)?;
        d.set_item("medium", kr.groups.medium)?;
        d.set_item("few", kr.groups.few)?;
        d.set_item("per_predicate", kr.per_predicate.clone())?;
        out.set_item(kr.k, d)?;
    }
    Ok(out)
}

/// Generates a synthetic long-tailed dataset; keywords override defaults.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn generate(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Dataset> {
    let cfg = generator_config_from_str(&kwargs_text(kwargs)?).map_err(to_py)?;
    let inner = py.detach(|| generate_dataset(&cfg)).map_err(to_py)?;
    Ok(Dataset { inner })
}

/// Trains a fresh model; returns it with the per-iteration loss records.
#[pyfunction(name = "train")]
#[pyo3(signature = (dataset, **kwargs))]
fn train_py<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Model, Bound<'py, PyList>)> {
    let cfg = train_config(kwargs)?;
    let ds = &dataset.inner;
    let (model, log) = py
        .detach(|| init_model(&cfg, ds).and_then(|m| train(&cfg, ds, m)))
        .map_err(to_py)?;
    let entries = PyList::empty(py);
    for e in &log.entries {
        let b = &e.breakdown;
        let d = PyDict::new(py);
        d.set_item("iteration", e.iteration)?;
        d.set_item("alpha", b.alpha_used)?;
        d.set_item("lambda_head", e.lambda_head)?;
        d.set_item("ce", b.l_ce)?;
        d.set_item("crm", b.l_crm)?;
        d.set_item("hybrid", b.l_hybrid)?;
        d.set_item("sc", b.l_sc)?;
        d.set_item("kd", b.l_kd)?;
        d.set_item("total", b.l_total)?;
        entries.append(d)?;
    }
    Ok((Model { inner: model }, entries))
}

/// Branch weight and head-predicate weight at iteration `k`.
#[pyfunction]
#[pyo3(signature = (k, **kwargs))]
fn schedule_weights(k: usize, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<(f64, f64)> {
    let cfg = train_config(kwargs)?;
    Ok((cfg.alpha(k), predicate_lambda(k, true, &cfg.schedule)))
}

/// Branch weight under the published schedule constants.
#[pyfunction]
fn published_branch_alpha(k: usize) -> f64 {
    branch_alpha(k, &sgght_core::schedules::ScheduleConfig::published())
}

#[pyfunction(name = "cross_entropy")]
fn cross_entropy_py(logits: Vec<f64>, target: usize) -> PyResult<(f64, Vec<f64>)> {
    cross_entropy(&logits, target).map_err(to_py)
}

#[pyfunction(name = "distillation_loss")]
fn kd_loss_py(
    teacher: Vec<f64>,
    student: Vec<f64>,
    tau: f64,
    head: Vec<usize>,
) -> PyResult<(f64, Vec<f64>)> {
    kd_loss(&teacher, &student, tau, &head).map_err(to_py)
}

#[pyfunction(name = "effective_number_weights")]
fn effective_number_weights_py(counts: Vec<u64>, beta: f64) -> PyResult<Vec<f64>> {
    Ok(effective_number_weights(&counts, beta).map_err(to_py)?.w)
}

/// Recall metrics over explicit predictions.
///
/// `predictions` are `(image, subject, object, predicate, score)` tuples and
/// `ground_truth` are `(image, subject, object, predicate)` tuples.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truth, ks, num_classes, dataset))]
fn score_predictions<'py>(
    py: Python<'py>,
    predictions: Vec<(usize, usize, usize, usize, f64)>,
    ground_truth: Vec<(usize, usize, usize, usize)>,
    ks: Vec<usize>,
    num_classes: usize,
    dataset: &Dataset,
) -> PyResult<Bound<'py, PyDict>> {
    let preds: Vec<RankedPrediction> = predictions
        .into_iter()
        .map(|(image_id, subject_class, object_class, predicate, score)| RankedPrediction {
            image_id,
            subject_class,
            object_class,
            predicate,
            score,
        })
        .collect();
    let gts: Vec<GroundTruthTriple> = ground_truth
        .into_iter()
        .map(|(image_id, subject_class, object_class, predicate)| GroundTruthTriple {
            image_id,
            subject_class,
            object_class,
            predicate,
        })
        .collect();
    let groups = group_split(&dataset.inner.vocab);
    let report = evaluate_predictions(&preds, &gts, &ks, num_classes, &groups).map_err(to_py)?;
    report_dict(py, &report)
}

#[pyfunction(name = "mean_at_k")]
fn mean_at_k_py(r: f64, mr: f64) -> f64 {
    mean_at_k(r, mr)
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit status.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("sgght".to_string()).chain(args).collect();
    py.detach(|| run_command(argv))
}

#[pymodule]
fn sgght(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_py, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_weights, m)?)?;
    m.add_function(wrap_pyfunction!(published_branch_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy_py, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss_py, m)?)?;
    m.add_function(wrap_pyfunction!(effective_number_weights_py, m)?)?;
    m.add_function(wrap_pyfunction!(score_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(mean_at_k_py, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("DEFAULT_KS", DEFAULT_KS.to_vec())?;
    Ok(())
}

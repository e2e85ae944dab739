//! Python bindings: the model, contrastive configuration, and the pure
//! operations (templates, shape law, attention, prototypes, losses,
//! metrics, schedule) plus the dataset/train/eval entry points.
//!
//! Matrices cross the boundary as lists of rows. Reports are returned as
//! plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cfcml::ccrm::{self, PrototypeBank};
use cfcml::dataio::{self, SynthConfig};
use cfcml::encoders::{SpatialMode, StageShapeLaw};
use cfcml::metrics;
use cfcml::mgcie::{CrossAttention, TokenSequence};
use cfcml::params::ParamStore;
use cfcml::trainer::{self, CfcmlModel, Checkpoint, RunConfig, TrainConfig};
use cfcml::{CfcmlError, Matrix};

type Rows = Vec<Vec<f64>>;

fn to_py(e: CfcmlError) -> PyErr {
    let shape_like = matches!(
        e,
        CfcmlError::Shape(_) | CfcmlError::UndefinedMetric(_) | CfcmlError::DegenerateBatch(_)
    );
    if e.is_validation() || shape_like {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(to_py)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_mode(mode: &str) -> PyResult<SpatialMode> {
    match mode {
        "volumetric" | "3d" => Ok(SpatialMode::Volumetric),
        "planar" | "2d" => Ok(SpatialMode::Planar),
        other => Err(PyValueError::new_err(format!("unknown spatial mode `{other}`"))),
    }
}

/// Temperature, loss weights and the reading flags of the contrastive terms.
#[pyclass(name = "ContrastConfig", from_py_object)]
#[derive(Clone)]
struct PyContrastConfig {
    inner: ccrm::ContrastConfig,
}

#[pymethods]
impl PyContrastConfig {
    #[new]
    #[pyo3(signature = (tau=None, alpha=None, beta=None, gamma=None, tau_outside_exp=false, up_negatives_same_modality_only=false, sample_positives_own_modality=false))]
    fn new(
        tau: Option<f64>,
        alpha: Option<f64>,
        beta: Option<f64>,
        gamma: Option<f64>,
        tau_outside_exp: bool,
        up_negatives_same_modality_only: bool,
        sample_positives_own_modality: bool,
    ) -> PyResult<Self> {
        let d = ccrm::ContrastConfig::default();
        let inner = ccrm::ContrastConfig {
            tau: tau.unwrap_or(d.tau),
            alpha: alpha.unwrap_or(d.alpha),
            beta: beta.unwrap_or(d.beta),
            gamma: gamma.unwrap_or(d.gamma),
            tau_outside_exp,
            up_negatives_same_modality_only,
            sample_positives_own_modality,
            ..d
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn weights(&self) -> (f64, f64, f64) {
        (self.inner.alpha, self.inner.beta, self.inner.gamma)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Unimodal (`up[l][j]`) and crossmodal (`cp[l]`) prototypes; absent
/// classes are `None`.
#[pyclass(name = "PrototypeBank")]
struct PyPrototypeBank {
    inner: PrototypeBank,
}

#[pymethods]
impl PyPrototypeBank {
    #[getter]
    fn cp(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.inner.n_classes()).map(|l| self.inner.cp(l).map(<[f64]>::to_vec)).collect()
    }

    #[getter]
    fn up(&self) -> Vec<Vec<Option<Vec<f64>>>> {
        (0..self.inner.n_classes())
            .map(|l| (0..self.inner.modalities).map(|j| self.inner.up(l, j).map(<[f64]>::to_vec)).collect())
            .collect()
    }

    #[getter]
    fn present(&self) -> Vec<bool> {
        self.inner.present.clone()
    }
}

/// A trained model restored from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: RunConfig,
    model: CfcmlModel,
    manifest: dataio::DatasetManifest,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_checkpoint(config: PathBuf, checkpoint: PathBuf) -> PyResult<Self> {
        let (cfg, _) = RunConfig::load(&config).map_err(to_py)?;
        let ckpt = Checkpoint::load(&checkpoint).map_err(to_py)?;
        let manifest = trainer::load_manifest(&cfg).map_err(to_py)?;
        let model = trainer::model_from_checkpoint(&cfg, &manifest, &ckpt).map_err(to_py)?;
        Ok(Self { cfg, model, manifest })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.store.scalar_count()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.model.schema.classes.clone()
    }

    /// Labels, predictions, class probabilities and pooled per-modality
    /// features of one split.
    fn predict<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let samples = trainer::prepare_split(&self.model, &self.manifest, split).map_err(to_py)?;
        let ev = trainer::evaluate(&self.model, &samples).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("labels", ev.labels)?;
        out.set_item("predicted", ev.predicted)?;
        out.set_item("probs", ev.probs.to_rows())?;
        out.set_item("pooled", ev.pooled.to_rows())?;
        Ok(out)
    }

    /// The evaluation report of one split.
    fn evaluate<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let samples = trainer::prepare_split(&self.model, &self.manifest, split).map_err(to_py)?;
        let ev = trainer::evaluate(&self.model, &samples).map_err(to_py)?;
        let report = metrics::EvalReport::build(split, &ev.labels, &ev.probs, &self.cfg.to_toml()).map_err(to_py)?;
        json_to_py(py, &report.to_json())
    }
}

/// Renders one attribute as a sentence with the built-in templates.
#[pyfunction]
fn render_template(attribute: &str, value: &str) -> PyResult<String> {
    dataio::render_template(attribute, value).map_err(to_py)
}

/// `(channels, spatial)` of encoder stage `stage` (1-based).
#[pyfunction]
#[pyo3(signature = (stage, dims, base_channels=4, mode="volumetric"))]
fn stage_shape(stage: usize, dims: Vec<usize>, base_channels: usize, mode: &str) -> PyResult<(usize, Vec<usize>)> {
    let law = StageShapeLaw::new(base_channels, parse_mode(mode)?);
    let s = law.stage_shape(stage, &dims).map_err(to_py)?;
    Ok((s.channels, s.spatial))
}

#[pyfunction]
#[pyo3(signature = (epoch, lr0=None, warmup_epochs=None, decay_factor=None, decay_period=None))]
fn lr_at(
    epoch: usize,
    lr0: Option<f64>,
    warmup_epochs: Option<usize>,
    decay_factor: Option<f64>,
    decay_period: Option<usize>,
) -> f64 {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr0: lr0.unwrap_or(d.lr0),
        warmup_epochs: warmup_epochs.unwrap_or(d.warmup_epochs),
        decay_factor: decay_factor.unwrap_or(d.decay_factor),
        decay_period: decay_period.unwrap_or(d.decay_period),
        ..d
    };
    trainer::lr_at(epoch, &cfg)
}

/// Supplement of `primary` attending over `auxiliary`, and the per-head
/// attention maps.
#[pyfunction]
fn multihead_cross_attention(
    primary: Rows,
    auxiliary: Rows,
    w_q: Rows,
    w_k: Rows,
    w_v: Rows,
    heads: usize,
) -> PyResult<(Rows, Vec<Rows>)> {
    let dim = w_q.len();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let attn = CrossAttention::new("attn", dim, heads, &mut store, &mut rng).map_err(to_py)?;
    for (id, w) in [(attn.w_q, &w_q), (attn.w_k, &w_k), (attn.w_v, &w_v)] {
        let m = matrix(w)?;
        if m.shape() != (dim, dim) {
            return Err(PyValueError::new_err(format!("projections must be {dim} × {dim}")));
        }
        *store.get_mut(id) = m;
    }
    let q = TokenSequence::new(matrix(&primary)?).map_err(to_py)?;
    let kv = TokenSequence::new(matrix(&auxiliary)?).map_err(to_py)?;
    let (sup, maps) = cfcml::mgcie::multihead_cross_attention(&q, &kv, &attn, &store).map_err(to_py)?;
    Ok((sup.matrix().to_rows(), maps.iter().map(Matrix::to_rows).collect()))
}

/// `features` has one row per (sample, modality), row `i·M + j`.
#[pyfunction]
fn compute_prototypes(features: Rows, labels: Vec<usize>, modalities: usize, n_classes: usize) -> PyResult<PyPrototypeBank> {
    let inner = ccrm::compute_prototypes(&matrix(&features)?, &labels, modalities, n_classes).map_err(to_py)?;
    Ok(PyPrototypeBank { inner })
}

/// The three contrastive losses `(sample, unimodal, crossmodal)`.
#[pyfunction]
#[pyo3(signature = (features, labels, modalities, n_classes, config=None))]
fn ccrm_losses(
    features: Rows,
    labels: Vec<usize>,
    modalities: usize,
    n_classes: usize,
    config: Option<PyContrastConfig>,
) -> PyResult<(f64, f64, f64)> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let z = matrix(&features)?;
    let bank = ccrm::compute_prototypes(&z, &labels, modalities, n_classes).map_err(to_py)?;
    Ok((
        ccrm::loss_sample_anchor(&z, &labels, &bank, &cfg).map_err(to_py)?,
        ccrm::loss_unimodal_proto_anchor(&bank, &cfg).map_err(to_py)?,
        ccrm::loss_crossmodal_proto_anchor(&bank, &cfg).map_err(to_py)?,
    ))
}

#[pyfunction]
fn compute_multiclass_metrics<'py>(
    py: Python<'py>,
    y_true: Vec<usize>,
    y_pred: Vec<usize>,
    probs: Rows,
) -> PyResult<Bound<'py, PyAny>> {
    let m = metrics::compute_multiclass_metrics(&y_true, &y_pred, &matrix(&probs)?).map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&m).expect("metrics serialize"))
}

#[pyfunction]
fn compute_binary_metrics<'py>(py: Python<'py>, y_true: Vec<usize>, scores: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let b = metrics::compute_binary_metrics(&y_true, &scores).map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&b).expect("metrics serialize"))
}

#[pyfunction]
fn compute_gap_report<'py>(
    py: Python<'py>,
    features: Rows,
    labels: Vec<usize>,
    modalities: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = metrics::compute_gap_report(&matrix(&features)?, &labels, modalities).map_err(to_py)?;
    json_to_py(py, &r.to_json())
}

/// Writes a synthetic dataset and returns its sample count.
#[pyfunction]
#[pyo3(signature = (out, classes=3, per_class=60, modalities=2, seed=7))]
fn synthesize(out: PathBuf, classes: usize, per_class: usize, modalities: usize, seed: u64) -> PyResult<usize> {
    let cfg = SynthConfig {
        n_classes: classes,
        train_per_class: per_class,
        val_per_class: (per_class / 2).max(1),
        modalities,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(to_py)?;
    let manifest = dataio::generate_synthetic_dataset(&cfg, &out).map_err(to_py)?;
    Ok(manifest.samples.len())
}

/// Trains from a config file; returns the per-epoch log.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, _) = RunConfig::load(&config).map_err(to_py)?;
    let (outcome, _) = trainer::run_training(&cfg, None).map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&outcome.log).expect("log serializes"))
}

/// Runs the command-line interface; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cfcml::cli::run(std::iter::once("cfcml".to_string()).chain(args))
}

#[pymodule]
pub fn cfcml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyContrastConfig>()?;
    m.add_class::<PyPrototypeBank>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(render_template, m)?)?;
    m.add_function(wrap_pyfunction!(stage_shape, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(multihead_cross_attention, m)?)?;
    m.add_function(wrap_pyfunction!(compute_prototypes, m)?)?;
    m.add_function(wrap_pyfunction!(ccrm_losses, m)?)?;
    m.add_function(wrap_pyfunction!(compute_multiclass_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compute_binary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gap_report, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

//! Python bindings: phantom generation, training, sampling, and metrics over
//! plain lists and file paths (no array-protocol dependency).

use std::path::PathBuf;

use fgsb_core::config;
use fgsb_core::dataset::{self, LoadedDataset};
use fgsb_core::inference::{self, InferenceConfig};
use fgsb_core::metrics;
use fgsb_core::models::{count_parameters, Models};
use fgsb_core::phantom::{self, PhantomConfig, LESION_THRESHOLD};
use fgsb_core::slice_io;
use fgsb_core::trainer::{self, TrainState};
use fgsb_core::{Error, SeedRng};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image(_) => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn array2_from<T: Clone>(values: Vec<T>, height: usize, width: usize) -> PyResult<Array2<T>> {
    if values.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "expected {height}x{width} = {} values, got {}",
            height * width,
            values.len()
        )));
    }
    Ok(Array2::from_shape_vec((height, width), values).expect("row-major reshape"))
}

// ── dataset and config ─────────────────────────────────────────────────────

/// Generate the synthetic paired phantom dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (dir, subjects = 2, slices_per_subject = 100, canvas = 64, lesion_rate = 0.7, seed = 17))]
fn write_phantom_dataset(
    dir: PathBuf,
    subjects: usize,
    slices_per_subject: usize,
    canvas: usize,
    lesion_rate: f64,
    seed: u64,
) -> PyResult<String> {
    let cfg = PhantomConfig { subjects, slices_per_subject, canvas, lesion_rate, seed };
    Ok(phantom::write_phantom_dataset(&dir, &cfg).map_err(to_py)?.display().to_string())
}

/// Read a raw slice file; returns (height, width, row-major values).
#[pyfunction]
fn load_slice(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let img = slice_io::read_slice(&path).map_err(to_py)?;
    let (h, w) = img.dim();
    Ok((h, w, img.iter().copied().collect()))
}

/// Write a row-major slice to the raw slice format.
#[pyfunction]
fn save_slice(path: PathBuf, height: usize, width: usize, values: Vec<f32>) -> PyResult<()> {
    slice_io::write_slice(&path, &array2_from(values, height, width)?).map_err(to_py)
}

/// Parse a TOML run config (environment overrides included) and return the
/// fully resolved settings as pretty JSON.
#[pyfunction]
fn resolved_config(path: PathBuf) -> PyResult<String> {
    let cfg = config::load_run_config(&path).map_err(to_py)?;
    let json = config::resolved_json(&cfg).map_err(to_py)?;
    serde_json::to_string_pretty(&json).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// SHA-256 digest of the resolved run config.
#[pyfunction]
fn config_digest(path: PathBuf) -> PyResult<String> {
    let cfg = config::load_run_config(&path).map_err(to_py)?;
    Ok(config::config_digest(&config::resolved_json(&cfg).map_err(to_py)?))
}

/// Checkpoint header summary: progress counters, digest, parameter table.
#[pyfunction]
fn checkpoint_info(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyDict>> {
    let header = trainer::read_checkpoint_header(&path).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("version", header.version)?;
    d.set_item("dtype", &header.dtype)?;
    d.set_item("next_epoch", header.next_epoch)?;
    d.set_item("global_step", header.global_step)?;
    d.set_item("config_digest", &header.config_digest)?;
    let params: Vec<(String, Vec<usize>)> =
        header.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    d.set_item(
        "parameter_count",
        params.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>(),
    )?;
    d.set_item("params", params)?;
    d.set_item(
        "optimizers",
        header.optimizers.iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

// ── metrics ────────────────────────────────────────────────────────────────

/// Peak signal-to-noise ratio in dB between two row-major images.
#[pyfunction]
#[pyo3(signature = (x_hat, x_ref, height, width, data_range = 1.0))]
fn psnr(x_hat: Vec<f64>, x_ref: Vec<f64>, height: usize, width: usize, data_range: f64) -> PyResult<f64> {
    metrics::psnr(&array2_from(x_hat, height, width)?, &array2_from(x_ref, height, width)?, data_range)
        .map_err(to_py)
}

/// Mean structural similarity between two row-major images.
#[pyfunction]
#[pyo3(signature = (x_hat, x_ref, height, width, data_range = 1.0))]
fn ssim(x_hat: Vec<f64>, x_ref: Vec<f64>, height: usize, width: usize, data_range: f64) -> PyResult<f64> {
    metrics::ssim(&array2_from(x_hat, height, width)?, &array2_from(x_ref, height, width)?, data_range)
        .map_err(to_py)
}

/// Normalized root-mean-square error between two row-major images.
#[pyfunction]
fn nrmse(x_hat: Vec<f64>, x_ref: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::nrmse(&array2_from(x_hat, height, width)?, &array2_from(x_ref, height, width)?)
        .map_err(to_py)
}

/// (Dice, recall) between two binary masks given as 0/1 values.
#[pyfunction]
fn dice_recall(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize) -> PyResult<(f64, f64)> {
    metrics::dice_recall(&array2_from(pred, height, width)?, &array2_from(truth, height, width)?)
        .map_err(to_py)
}

/// Standard slice scoring for a ([-1, 1]-ranged) prediction/reference pair:
/// intensity metrics on the [0, 1] rescale plus thresholded lesion overlap.
#[pyfunction]
#[pyo3(signature = (pred, reference, height, width, threshold = LESION_THRESHOLD as f64))]
fn evaluate_pair<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    reference: Vec<f64>,
    height: usize,
    width: usize,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = array2_from(pred, height, width)?;
    let r = array2_from(reference, height, width)?;
    let pu = metrics::to_unit_range(&p);
    let ru = metrics::to_unit_range(&r);
    let pm = p.mapv(|v| u8::from(v >= threshold));
    let rm = r.mapv(|v| u8::from(v >= threshold));
    let (dice, recall) = metrics::dice_recall(&pm, &rm).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("psnr", metrics::psnr(&pu, &ru, 1.0).map_err(to_py)?)?;
    d.set_item("ssim", metrics::ssim(&pu, &ru, 1.0).map_err(to_py)?)?;
    d.set_item("nrmse", metrics::nrmse(&pu, &ru).map_err(to_py)?)?;
    d.set_item("dice", dice)?;
    d.set_item("recall", recall)?;
    Ok(d)
}

// ── training ───────────────────────────────────────────────────────────────

/// One training run driven epoch by epoch from Python.
#[pyclass]
struct Trainer {
    state: TrainState,
    dataset: LoadedDataset,
    digest: String,
    json: serde_json::Value,
}

impl Trainer {
    fn from_config(config_path: &PathBuf) -> PyResult<(config::RunConfig, serde_json::Value, String, LoadedDataset)> {
        let cfg = config::load_run_config(config_path).map_err(to_py)?;
        let json = config::resolved_json(&cfg).map_err(to_py)?;
        let digest = config::config_digest(&json);
        let dataset = dataset::load_dataset(&cfg.data.manifest).map_err(to_py)?;
        Ok((cfg, json, digest, dataset))
    }
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config_path: PathBuf) -> PyResult<Self> {
        let (cfg, json, digest, dataset) = Trainer::from_config(&config_path)?;
        let state = TrainState::new(&cfg.model, &cfg.bridge, &cfg.train).map_err(to_py)?;
        Ok(Trainer { state, dataset, digest, json })
    }

    /// Rebuild a trainer from a checkpoint written under the same resolved
    /// config.
    #[staticmethod]
    fn resume(config_path: PathBuf, checkpoint: PathBuf) -> PyResult<Self> {
        let (_, json, digest, dataset) = Trainer::from_config(&config_path)?;
        let (header, state) = trainer::load_checkpoint(&checkpoint).map_err(to_py)?;
        if header.config_digest != digest {
            return Err(PyValueError::new_err(format!(
                "checkpoint was produced by config digest {}, this config resolves to {digest}",
                header.config_digest
            )));
        }
        Ok(Trainer { state, dataset, digest, json })
    }

    /// Run the next epoch over the training split; returns the mean combined
    /// loss.
    fn run_epoch(&mut self) -> PyResult<f64> {
        let epoch = self.state.next_epoch;
        if epoch >= self.state.cfg.epochs {
            return Err(PyValueError::new_err(format!(
                "training already complete after {} epochs",
                self.state.cfg.epochs
            )));
        }
        let (mut sum, mut n) = (0.0f64, 0usize);
        trainer::train_epoch(&mut self.state, &self.dataset.train, epoch, |rec| {
            sum += rec.total;
            n += 1;
            Ok(())
        })
        .map_err(to_py)?;
        Ok(sum / n.max(1) as f64)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&path, &self.state, &self.digest, &self.json).map_err(to_py)
    }

    /// Trainable scalars under a parameter-name prefix ("" = all networks).
    #[pyo3(signature = (prefix = ""))]
    fn parameter_count(&self, prefix: &str) -> usize {
        count_parameters(&self.state.store, prefix)
    }

    #[getter]
    fn next_epoch(&self) -> usize {
        self.state.next_epoch
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.state.cfg.epochs
    }

    #[getter]
    fn global_step(&self) -> u64 {
        self.state.global_step
    }

    #[getter]
    fn config_digest(&self) -> String {
        self.digest.clone()
    }

    #[getter]
    fn train_slices(&self) -> usize {
        self.dataset.train.len()
    }

    #[getter]
    fn test_slices(&self) -> usize {
        self.dataset.test.len()
    }
}

// ── sampling ───────────────────────────────────────────────────────────────

/// Multi-step sampler wrapping a trained checkpoint.
#[pyclass]
struct Sampler {
    models: Models,
    store: fgsb_core::autodiff::ParamStore<f32>,
    cfg: InferenceConfig,
}

#[pymethods]
impl Sampler {
    #[new]
    #[pyo3(signature = (checkpoint, nfe = None, tau = None, seed = None))]
    fn new(
        checkpoint: PathBuf,
        nfe: Option<usize>,
        tau: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let (header, state) = trainer::load_checkpoint(&checkpoint).map_err(to_py)?;
        let mut cfg = InferenceConfig::from_run_json(&header.config_json).map_err(to_py)?;
        if let Some(nfe) = nfe {
            cfg.nfe = nfe;
        }
        if let Some(tau) = tau {
            cfg.tau = tau;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(to_py)?;
        Ok(Sampler { models: state.models, store: state.store, cfg })
    }

    /// Translate one flat row-major square slice; `index` selects the
    /// per-slice noise stream (matching position-in-stack semantics).
    #[pyo3(signature = (source, height, width, index = 0))]
    fn translate(
        &self,
        source: Vec<f32>,
        height: usize,
        width: usize,
        index: usize,
    ) -> PyResult<Vec<f32>> {
        let img = array2_from(source, height, width)?;
        let mut rng: SeedRng = inference::slice_rng(self.cfg.seed, index);
        let out = inference::synthesize(&img, &self.models, &self.store, height, &self.cfg, &mut rng)
            .map_err(to_py)?;
        Ok(out.iter().copied().collect())
    }

    #[getter]
    fn nfe(&self) -> usize {
        self.cfg.nfe
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.cfg.tau
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }
}

#[pymodule]
fn fgsb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trainer>()?;
    m.add_class::<Sampler>()?;
    m.add_function(wrap_pyfunction!(write_phantom_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_slice, m)?)?;
    m.add_function(wrap_pyfunction!(save_slice, m)?)?;
    m.add_function(wrap_pyfunction!(resolved_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_digest, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    m.add_function(wrap_pyfunction!(dice_recall, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_pair, m)?)?;
    m.add("LESION_THRESHOLD", LESION_THRESHOLD)?;
    Ok(())
}

//! Python bindings. Tensors cross the boundary as flat lists plus a shape.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tssam_core::data::{self, Difficulty, SegSample};
use tssam_core::metrics::{self, ImageMetrics, Plane};
use tssam_core::model::{load_model, ModelConfig, TsSam};
use tssam_core::params::{CountFilter, ParamStore};
use tssam_core::trainer::{self, TrainConfig};
use tssam_core::{Error, Tensor};

create_exception!(tssam, TsSamError, PyException);
create_exception!(tssam, CheckpointError, TsSamError);
create_exception!(tssam, NumericError, TsSamError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Checkpoint(_) => CheckpointError::new_err(e.to_string()),
        Error::Numeric(_) => NumericError::new_err(e.to_string()),
        Error::Config(_) | Error::Json(_) | Error::Shape(_) | Error::Validation(_) => PyValueError::new_err(e.to_string()),
        _ => TsSamError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn tensor(data: Vec<f32>, shape: &[usize]) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(shape, data).map_err(err)
}

/// An RGB image `(3, H, W)` in `[0, 1]` with a binary mask `(1, H, W)`.
#[pyclass(name = "Sample", module = "tssam", frozen, from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: SegSample,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(id: String, image: Vec<f32>, mask: Vec<f32>, height: usize, width: usize) -> PyResult<Self> {
        let image = tensor(image, &[3, height, width])?;
        let mask = tensor(mask, &[1, height, width])?;
        Ok(Self {
            inner: SegSample::new(id, image, mask).map_err(err)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.hw()
    }

    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.data().to_vec()
    }

    #[getter]
    fn mask(&self) -> Vec<f32> {
        self.inner.mask.data().to_vec()
    }

    fn foreground_fraction(&self) -> f64 {
        self.inner.foreground_fraction()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.hw();
        format!("Sample(id={:?}, {h}x{w})", self.inner.id)
    }
}

fn unwrap_samples(samples: Vec<PySample>) -> Vec<SegSample> {
    samples.into_iter().map(|s| s.inner).collect()
}

/// TS-SAM with an f32 parameter store.
#[pyclass(name = "Model", module = "tssam")]
struct PyModel {
    model: TsSam,
    store: ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model from a JSON model config.
    #[new]
    #[pyo3(signature = (config = "{}"))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = ModelConfig::from_json(config).map_err(err)?;
        let (model, store) = TsSam::build::<f32>(cfg).map_err(err)?;
        Ok(Self { model, store })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config = "{}"))]
    fn load(path: &str, config: &str) -> PyResult<Self> {
        let cfg = ModelConfig::from_json(config).map_err(err)?;
        let (model, store) = load_model::<f32>(cfg, path).map_err(err)?;
        Ok(Self { model, store })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.store.save_checkpoint(path).map_err(err)
    }

    #[getter]
    fn config(&self) -> String {
        self.model.config.to_json()
    }

    #[pyo3(signature = (filter = "trainable"))]
    fn count_params(&self, filter: &str) -> PyResult<usize> {
        Ok(self.store.count(parse::<CountFilter>(filter)?))
    }

    /// Closed-form trainable count per module.
    fn breakdown<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let b = self.model.count_breakdown();
        let d = PyDict::new(py);
        for (k, v) in [("backbone", b.backbone), ("csa", b.csa), ("mrm", b.mrm), ("ffd", b.ffd), ("fallback", b.fallback)] {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn param_names(&self) -> Vec<String> {
        self.store.names().map(String::from).collect()
    }

    fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Eval-mode logits for a `(B, 3, H, W)` batch; returns `(data, shape)`.
    fn logits(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = tensor(images, &shape)?;
        let y = self.model.predict(&self.store, &x).map_err(err)?;
        Ok((y.data().to_vec(), y.shape().to_vec()))
    }

    /// Sigmoid maps, one flat `H*W` list per sample.
    #[pyo3(signature = (samples, task = "cod", hf_mask_ratio = 0.25))]
    fn predict(&self, samples: Vec<PySample>, task: &str, hf_mask_ratio: f64) -> PyResult<Vec<Vec<f32>>> {
        let preds = trainer::predict(&self.model, &self.store, &unwrap_samples(samples), parse(task)?, hf_mask_ratio)
            .map_err(err)?;
        Ok(preds.into_iter().map(Tensor::into_vec).collect())
    }

    /// Dataset report as a dict with the five metrics and `n_images`.
    #[pyo3(signature = (samples, task = "cod", hf_mask_ratio = 0.25))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<PySample>,
        task: &str,
        hf_mask_ratio: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ev = trainer::evaluate(&self.model, &self.store, &unwrap_samples(samples), parse(task)?, hf_mask_ratio)
            .map_err(err)?;
        let r = ev.report;
        let d = PyDict::new(py);
        d.set_item("s_alpha", r.s_alpha)?;
        d.set_item("e_phi", r.e_phi)?;
        d.set_item("f_beta_w", r.f_beta_w)?;
        d.set_item("mae", r.mae)?;
        d.set_item("ber", r.ber)?;
        d.set_item("n_images", r.n_images)?;
        Ok(d)
    }

    /// Trains in place from a JSON train config; returns per-step losses.
    #[pyo3(signature = (samples, config = "{}", checkpoint_dir = None))]
    fn fit(&mut self, samples: Vec<PySample>, config: &str, checkpoint_dir: Option<&str>) -> PyResult<Vec<f64>> {
        let cfg: TrainConfig = serde_json::from_str(config).map_err(|e| err(e.into()))?;
        let out = trainer::train(
            &self.model,
            self.store.clone(),
            &unwrap_samples(samples),
            &cfg,
            checkpoint_dir.map(std::path::Path::new),
        )
        .map_err(err)?;
        let losses = out.log.steps().map(|(_, _, l)| l.total).collect();
        self.store = out.store;
        Ok(losses)
    }

    fn __repr__(&self) -> String {
        let b = self.model.count_breakdown();
        format!("Model(trainable={}, total={})", b.trainable(), b.all())
    }
}

#[pyfunction]
#[pyo3(signature = (n, height, width, seed = 0, difficulty = "low"))]
fn synthetic(n: usize, height: usize, width: usize, seed: u64, difficulty: &str) -> PyResult<Vec<PySample>> {
    let d: Difficulty = parse(difficulty)?;
    let samples = data::generate_synthetic(n, (height, width), seed, d).map_err(err)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

/// Pairs images and masks by file stem.
#[pyfunction]
fn load_folder(images: &str, masks: &str) -> PyResult<Vec<PySample>> {
    let load = data::load_folder(images.as_ref(), masks.as_ref()).map_err(err)?;
    Ok(load.samples.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
#[pyo3(signature = (image, height, width, tau = 0.25))]
fn high_freq_component(image: Vec<f32>, height: usize, width: usize, tau: f64) -> PyResult<Vec<f32>> {
    let t = tensor(image, &[3, height, width])?;
    Ok(data::high_freq_component(&t, tau).map_err(err)?.into_vec())
}

/// All per-image metrics for one prediction against a binary mask.
#[pyfunction]
fn image_metrics<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    gt: Vec<f64>,
    height: usize,
    width: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let p = Plane::new(height, width, pred).map_err(err)?;
    let g = Plane::new(height, width, gt).map_err(err)?;
    let m = ImageMetrics::compute("", &p, &g).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("s_alpha", m.s_alpha)?;
    d.set_item("e_phi", m.e_phi)?;
    d.set_item("f_beta_w", m.f_beta_w)?;
    d.set_item("mae", m.mae)?;
    d.set_item("ber", m.confusion.ber())?;
    Ok(d)
}

#[pyfunction]
fn multiset_mean(values: Vec<f64>) -> f64 {
    metrics::multiset_mean(&values)
}

#[pymodule]
fn tssam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TsSamError", m.py().get_type::<TsSamError>())?;
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_folder, m)?)?;
    m.add_function(wrap_pyfunction!(high_freq_component, m)?)?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(multiset_mean, m)?)?;
    Ok(())
}

//! Python bindings. Images cross the boundary as nested lists shaped
//! `[channel][row][column]` with values in `[0, 1]`.

use std::path::PathBuf;

use candle_core::{DType, Device};
use ndarray::Array3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use semguide::config::ExperimentConfig;
use semguide::data::{self, DatasetManifest, Split};
use semguide::srnet::{ModelConfig, SrModel, Variant};
use semguide::trainer::{self, EvalOptions, Schedule};
use semguide::{metrics, Error};

type Nested = Vec<Vec<Vec<f32>>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_array(img: Nested) -> PyResult<Array3<f32>> {
    let c = img.len();
    let h = img.first().map_or(0, Vec::len);
    let w = img.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if c == 0 || h == 0 || w == 0 {
        return Err(PyValueError::new_err("image must be a non-empty [channel][row][column] list"));
    }
    let flat: Vec<f32> = img
        .into_iter()
        .flat_map(|plane| plane.into_iter().flatten())
        .collect();
    Array3::from_shape_vec((c, h, w), flat).map_err(|_| PyValueError::new_err("ragged image list"))
}

fn to_nested(img: &Array3<f32>) -> Nested {
    img.outer_iter()
        .map(|plane| plane.outer_iter().map(|row| row.to_vec()).collect())
        .collect()
}

#[pyfunction]
fn bicubic_resize(image: Nested, height: usize, width: usize) -> PyResult<Nested> {
    let img = to_array(image)?;
    Ok(to_nested(&data::bicubic_resize(&img.view(), height, width).map_err(py_err)?))
}

#[pyfunction]
fn degrade(image: Nested, scale: usize) -> PyResult<Nested> {
    let img = to_array(image)?;
    Ok(to_nested(&data::degrade(&img.view(), scale).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (pred, target, max_val = 1.0))]
fn psnr(pred: Nested, target: Nested, max_val: f64) -> PyResult<f64> {
    metrics::psnr(&to_array(pred)?.view(), &to_array(target)?.view(), max_val).map_err(py_err)
}

#[pyfunction]
fn ssim(pred: Nested, target: Nested) -> PyResult<f64> {
    metrics::ssim(&to_array(pred)?.view(), &to_array(target)?.view()).map_err(py_err)
}

#[pyfunction]
fn lr_at(base_lr: f64, milestones: Vec<usize>, factor: f64, total_iters: usize, iteration: usize) -> PyResult<f64> {
    let s = Schedule::new(base_lr, milestones, factor, total_iters).map_err(py_err)?;
    trainer::lr_at(&s, iteration).map_err(py_err)
}

/// Writes a class-stratified manifest and returns its per-class `(train, test)` counts.
#[pyfunction]
#[pyo3(signature = (root, out, train = 3, test = 1, seed = 0))]
fn split_dataset(root: PathBuf, out: PathBuf, train: u32, test: u32, seed: u64) -> PyResult<Vec<(String, usize, usize)>> {
    let m = data::split_dataset(&root, (train, test), seed).map_err(py_err)?;
    m.save(&out).map_err(py_err)?;
    Ok(m.classes.iter().map(|c| (c.name.clone(), c.train.len(), c.test.len())).collect())
}

/// Trains from a TOML config and returns the last checkpoint path.
#[pyfunction]
fn train(config: PathBuf) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    let out = trainer::train(&cfg, None).map_err(py_err)?;
    Ok(out.last_checkpoint.display().to_string())
}

/// Evaluates a checkpoint and returns the summary report as JSON.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, split = "test"))]
fn evaluate(checkpoint: PathBuf, manifest: PathBuf, split: &str) -> PyResult<String> {
    let split: Split = split.parse().map_err(py_err)?;
    let m = DatasetManifest::load(&manifest).map_err(py_err)?;
    let ck = trainer::load_checkpoint(&checkpoint).map_err(py_err)?;
    let opts = EvalOptions::from_config(&ck.config, split);
    let report = trainer::evaluate_model(&ck.upscaler(), &ck.config, &m, &opts).map_err(py_err)?;
    report.summary_json().map_err(py_err)
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: SrModel,
}

#[pymethods]
impl PyModel {
    /// Small freshly initialised model with a stub semantic encoder.
    #[new]
    #[pyo3(signature = (scale = 2, channels = 16, units = 2, variant = "full"))]
    fn new(scale: usize, channels: usize, units: usize, variant: &str) -> PyResult<Self> {
        let mut cfg = ModelConfig::smoke(scale, channels, units);
        cfg.variant = Variant::ALL
            .into_iter()
            .find(|v| v.name() == variant)
            .ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}")))?;
        Ok(Self {
            inner: SrModel::new(&cfg, DType::F32).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = trainer::load_checkpoint(&checkpoint).map_err(py_err)?;
        let inner = ck
            .model
            .ok_or_else(|| PyValueError::new_err("checkpoint holds a bicubic reference, not a network"))?;
        Ok(Self { inner })
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale()
    }

    #[getter]
    fn units(&self) -> usize {
        self.inner.units()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant.name()
    }

    #[getter]
    fn num_trainable(&self) -> usize {
        self.inner.num_trainable()
    }

    #[getter]
    fn num_total(&self) -> usize {
        self.inner.num_total()
    }

    fn upscale(&self, image: Nested) -> PyResult<Nested> {
        let img = to_array(image)?;
        let x = data::to_batch(&[&img], &Device::Cpu).map_err(py_err)?;
        let y = self.inner.forward(&x).map_err(py_err)?;
        Ok(to_nested(&data::from_batch(&y).map_err(py_err)?.remove(0)))
    }

    /// One `[row][column]` map in `[-1, 1]` per SR unit; empty for variants without localization.
    fn guidance_maps(&self, image: Nested) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let img = to_array(image)?;
        let x = data::to_batch(&[&img], &Device::Cpu).map_err(py_err)?;
        let Some(maps) = self.inner.guidance(&x).map_err(py_err)? else {
            return Ok(Vec::new());
        };
        (0..maps.len())
            .map(|i| {
                let m = data::from_batch(&maps.unit(i).map_err(py_err)?).map_err(py_err)?.remove(0);
                Ok(to_nested(&m).remove(0))
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(scale={}, units={}, variant={:?}, trainable={})",
            self.scale(),
            self.units(),
            self.variant(),
            self.num_trainable()
        )
    }
}

#[pymodule]
fn semguide_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bicubic_resize, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}

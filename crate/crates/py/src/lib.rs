//! Python bindings: samples, the network, the least-squares solver, the
//! synthetic generator and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pst_core::classic;
use pst_core::diffarray::Mode;
use pst_core::model::{self, Checkpoint, ModelConfig, NormalMap, PsTransformer};
use pst_core::{gradsuite, objective, synthdata, trainer, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Images of one scene under calibrated lights.
#[pyclass(name = "PhotoSample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: model::PhotoSample,
}

#[pymethods]
impl PySample {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        synthdata::read_sample(&path).map(|inner| PySample { inner }).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        synthdata::write_sample(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn lights(&self) -> Vec<[f32; 3]> {
        self.inner.lights.clone()
    }

    /// Flat `[m, h, w, c]` intensities.
    #[getter]
    fn images(&self) -> Vec<f32> {
        self.inner.images.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        (0..self.inner.pixels()).map(|p| self.inner.is_masked(p)).collect()
    }

    /// Ground-truth normals per pixel, or `None`.
    #[getter]
    fn normals(&self) -> Option<Vec<[f32; 3]>> {
        self.inner.ground_truth().map(|g| g.normals)
    }

    fn select_lights(&self, indices: Vec<usize>) -> PyResult<Self> {
        self.inner.select_lights(&indices).map(|inner| PySample { inner }).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.light_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "PhotoSample(height={}, width={}, channels={}, lights={})",
            self.inner.height,
            self.inner.width,
            self.inner.channels,
            self.inner.light_count()
        )
    }
}

/// The dual-branch network in single precision.
#[pyclass(name = "Model")]
struct PyModel {
    inner: PsTransformer<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (channels=3, d=256, heads=8, blocks=3, feat=64, dropout=0.1, seed=0))]
    fn new(channels: usize, d: usize, heads: usize, blocks: usize, feat: usize, dropout: f64, seed: u64) -> PyResult<Self> {
        let config = ModelConfig { channels, d, heads, blocks, feat, dropout };
        PsTransformer::new(config, seed).map(|inner| PyModel { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        model::read_checkpoint::<f32>(&path)
            .map(|ck| PyModel { inner: ck.model })
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint { model: self.inner.clone(), optimizer: None };
        model::write_checkpoint(&path, &ck).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// Per-pixel unit normals from every light of `sample`, or the listed subset.
    #[pyo3(signature = (sample, lights=None))]
    fn predict(&self, sample: &PySample, lights: Option<Vec<usize>>) -> PyResult<Vec<[f32; 3]>> {
        let lights = lights.unwrap_or_else(|| (0..sample.inner.light_count()).collect());
        trainer::predict(&self.inner, &sample.inner, &lights)
            .map(|m| m.normals)
            .map_err(py_err)
    }

    /// Eval-mode pooled features of both branches, each `h*w` rows of width `d`.
    fn pooled_features(&self, sample: &PySample) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.inner.forward(&sample.inner, Mode::Eval, &mut rng).map_err(py_err)?;
        Ok((out.pooled1.into_data(), out.pooled2.into_data()))
    }

    /// Returns `(per_trial, mean, light_sets)`.
    #[pyo3(signature = (samples, m, trials=10, seed=0))]
    fn evaluate(&self, samples: Vec<PySample>, m: usize, trials: usize, seed: u64) -> PyResult<(Vec<f64>, f64, Vec<Vec<usize>>)> {
        let samples: Vec<_> = samples.into_iter().map(|s| s.inner).collect();
        let r = trainer::evaluate(&self.inner, &samples, m, trials, seed).map_err(py_err)?;
        Ok((r.per_trial, r.mean, r.light_sets))
    }
}

/// Unit light directions uniform on the cap `z >= min_z`.
#[pyfunction]
#[pyo3(signature = (m, min_z=0.2, seed=0))]
fn sample_lights(m: usize, min_z: f64, seed: u64) -> PyResult<Vec<[f32; 3]>> {
    synthdata::sample_lights(m, min_z, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)
}

/// Renders a sphere or blob under `lights`.
#[pyfunction]
#[pyo3(signature = (lights, kind="sphere", size=32, channels=1, albedo=None, specular=0.0, shininess=32.0, noise=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn render(
    lights: Vec<[f32; 3]>,
    kind: &str,
    size: usize,
    channels: usize,
    albedo: Option<f64>,
    specular: f64,
    shininess: f64,
    noise: f64,
    seed: u64,
) -> PyResult<PySample> {
    let spec = synthdata::SceneSpec {
        kind: kind.parse().map_err(py_err)?,
        height: size,
        width: size,
        channels,
        albedo,
        specular,
        shininess,
        noise,
        seed,
    };
    synthdata::render_sample(&spec, &lights).map(|inner| PySample { inner }).map_err(py_err)
}

/// Least-squares Lambertian normals and albedo; returns `(normals, albedo, condition)`.
#[pyfunction]
fn woodham(sample: &PySample) -> PyResult<(Vec<[f32; 3]>, Vec<f64>, f64)> {
    let s = classic::solve_map(&sample.inner).map_err(py_err)?;
    Ok((s.normals.normals, s.albedo, s.condition))
}

/// Mean angle in degrees between two normal lists over `mask`.
#[pyfunction]
fn mean_angular_error(pred: Vec<[f32; 3]>, gt: Vec<[f32; 3]>, mask: Vec<bool>) -> PyResult<f64> {
    let wrap = |normals: Vec<[f32; 3]>| NormalMap { height: 1, width: normals.len(), mask: mask.clone(), normals };
    objective::mean_angular_error(&wrap(pred), &wrap(gt), &mask).map_err(py_err)
}

/// Writes a dataset directory and returns the sample count.
#[pyfunction]
#[pyo3(signature = (out, count=4, kind=None, size=32, channels=1, lights=10, seed=0))]
fn generate_dataset(
    out: PathBuf,
    count: usize,
    kind: Option<&str>,
    size: usize,
    channels: usize,
    lights: usize,
    seed: u64,
) -> PyResult<usize> {
    let cfg = synthdata::GenConfig {
        count,
        kind: kind.map(str::parse).transpose().map_err(py_err)?,
        size,
        channels,
        lights,
        seed,
        ..Default::default()
    };
    synthdata::generate_dataset(&cfg, &out).map(|m| m.len()).map_err(py_err)
}

#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<Vec<PySample>> {
    let (_, samples) = synthdata::load_dataset(&dir).map_err(py_err)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

/// Finite-difference checks; returns `(name, max_rel_err, tolerance)` rows.
#[pyfunction]
fn gradient_suite() -> PyResult<Vec<(String, f64, f64)>> {
    let rows = gradsuite::run_gradient_suite().map_err(py_err)?;
    Ok(rows.into_iter().map(|o| (o.name, o.error, o.tolerance)).collect())
}

#[pymodule]
fn pst(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_lights, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(woodham, m)?)?;
    m.add_function(wrap_pyfunction!(mean_angular_error, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    Ok(())
}

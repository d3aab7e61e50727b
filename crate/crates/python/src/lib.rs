//! Python bindings: point-cloud conversion, sampling, coordinate masks,
//! synthetic data, training and the built-in checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use simnet_core::harness::{self, TrainConfig};
use simnet_core::imaging::{self, CcmImage, MaskImage, RgbImage};
use simnet_core::numgrad::{step_lr as core_step_lr, GradCheckOptions};
use simnet_core::pixel2point::{self as p2p, ConversionConfig, FpsStart};
use simnet_core::selfcheck;
use simnet_core::synthdata::{self, Manifest, Split, SynthConfig};
use simnet_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Path { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_data_error() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn rgb(data: &[u8], width: usize, height: usize) -> PyResult<RgbImage> {
    RgbImage::new(width, height, data.to_vec()).map_err(to_py)
}

/// An `m × d` point cloud (`d` is 3 or 6).
#[pyclass(name = "PointCloud", module = "simnet", skip_from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: p2p::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, normalized = false))]
    fn new(points: Vec<Vec<f32>>, normalized: bool) -> PyResult<Self> {
        let dims = points.first().map_or(3, Vec::len);
        if points.iter().any(|p| p.len() != dims) {
            return Err(PyValueError::new_err("every point needs the same number of coordinates"));
        }
        let coords = points.into_iter().flatten().collect();
        Ok(Self { inner: p2p::PointCloud::new(dims, coords, normalized).map_err(to_py)? })
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.is_normalized()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(points={}, dims={}, normalized={})", self.inner.len(), self.inner.dims(), self.inner.is_normalized())
    }

    /// Compares the stored content (dims, normalized flag and coordinates).
    fn __eq__(&self, other: &Self) -> bool {
        self.inner.to_bytes() == other.inner.to_bytes()
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner.points().map(<[f32]>::to_vec).collect()
    }

    /// SIMPC1 encoding.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: p2p::PointCloud::from_bytes(data).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        p2p::write_cloud(&self.inner, path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: p2p::read_cloud(path).map_err(to_py)? })
    }

    fn zero_z(&self) -> Self {
        Self { inner: p2p::zero_z(&self.inner) }
    }

    /// Keeps a seeded random `keep` fraction of the points.
    #[pyo3(signature = (keep, seed = 0))]
    fn ablate(&self, keep: f64, seed: u64) -> PyResult<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { inner: p2p::ablate_points(&self.inner, keep, &mut rng).map_err(to_py)? })
    }
}

/// Masks an RGB image (row-major `width × height × 3` bytes) and lifts it to a point cloud.
#[pyfunction]
#[pyo3(signature = (rgb_bytes, width, height, mask = None, points = 1024, dims = 3, normalize = true, seed = None))]
#[allow(clippy::too_many_arguments)]
fn image_to_cloud(
    rgb_bytes: &[u8],
    width: usize,
    height: usize,
    mask: Option<Vec<bool>>,
    points: usize,
    dims: usize,
    normalize: bool,
    seed: Option<u64>,
) -> PyResult<PyPointCloud> {
    let mut image = rgb(rgb_bytes, width, height)?;
    if let Some(mask) = mask {
        let mask = MaskImage::new(width, height, mask).map_err(to_py)?;
        image = imaging::apply_mask(&image, &mask).map_err(to_py)?;
    }
    let start = seed.map_or(FpsStart::NearestCentroid, FpsStart::Seeded);
    let cfg = ConversionConfig { points, dims, normalize, start };
    Ok(PyPointCloud { inner: p2p::image_to_cloud(&image, &cfg, "python").map_err(to_py)? })
}

/// Farthest point sampling over 2-D points; returns `m` indices.
#[pyfunction]
#[pyo3(signature = (points, m, seed = None))]
fn fps(points: Vec<(f64, f64)>, m: usize, seed: Option<u64>) -> PyResult<Vec<usize>> {
    let pts: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
    let start = seed.map_or(FpsStart::NearestCentroid, FpsStart::Seeded);
    Ok(p2p::fps(&pts, m, start).map_err(to_py)?.indices)
}

/// Color-coded coordinate mask of a masked RGB image, as RGB bytes.
#[pyfunction]
fn encode_ccm<'py>(py: Python<'py>, rgb_bytes: &[u8], width: usize, height: usize) -> PyResult<Bound<'py, PyBytes>> {
    let ccm = imaging::encode_ccm(&rgb(rgb_bytes, width, height)?).map_err(to_py)?;
    Ok(PyBytes::new(py, ccm.as_rgb().data()))
}

/// `(x, y, intensity)` for every non-black pixel of a coordinate mask.
#[pyfunction]
fn decode_ccm(ccm_bytes: &[u8], width: usize, height: usize) -> PyResult<Vec<(usize, usize, f64)>> {
    let ccm = CcmImage::from_rgb(rgb(ccm_bytes, width, height)?);
    Ok(imaging::decode_ccm(&ccm, width, height).into_iter().map(|p| (p.x, p.y, p.intensity)).collect())
}

/// Generates a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (task, out, seed = 0, size = 64, train_per_class = 400, val_per_class = 100, points = 256, dims = 6))]
#[allow(clippy::too_many_arguments)]
fn synth(
    task: &str,
    out: PathBuf,
    seed: u64,
    size: usize,
    train_per_class: usize,
    val_per_class: usize,
    points: usize,
    dims: usize,
) -> PyResult<PathBuf> {
    let cfg = SynthConfig {
        task: task.parse().map_err(to_py)?,
        seed,
        size,
        train_per_class,
        val_per_class,
        points,
        cloud_dims: dims,
        ..SynthConfig::default()
    };
    Ok(synthdata::generate(&cfg, out).map_err(to_py)?.manifest_path)
}

/// Training configuration; keys left out of the TOML text take the preset's values.
#[pyclass(name = "TrainConfig", module = "simnet", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (toml = "", preset = "full"))]
    fn new(toml: &str, preset: &str) -> PyResult<Self> {
        let base = match preset {
            "full" => TrainConfig::default(),
            "desk" => TrainConfig::desk_scale(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}; expected full or desk"))),
        };
        Ok(Self { inner: TrainConfig::from_toml_over(&base, toml).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// SHA-256 of the canonical TOML form.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.name().to_owned()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(variant={}, epochs={}, seed={})", self.inner.variant, self.inner.epochs, self.inner.seed)
    }
}

/// Trains on a manifest and returns the metrics report as a dict.
#[pyfunction]
#[pyo3(signature = (config, manifest, checkpoint = None))]
fn train<'py>(py: Python<'py>, config: &PyTrainConfig, manifest: PathBuf, checkpoint: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let text = py
        .detach(move || -> simnet_core::Result<String> {
            let m = Manifest::load(&manifest)?;
            let out = harness::train(&cfg, &m, checkpoint.as_deref())?;
            Ok(serde_json::to_string(&out.report).expect("serializable report"))
        })
        .map_err(to_py)?;
    json_to_py(py, &text)
}

/// `(accuracy, f1)` of a checkpoint on one split.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, manifest, split = "val"))]
fn evaluate(py: Python<'_>, config: &PyTrainConfig, checkpoint: PathBuf, manifest: PathBuf, split: &str) -> PyResult<(f64, f64)> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let cfg = config.inner.clone();
    py.detach(move || {
        let m = Manifest::load(&manifest)?;
        harness::evaluate(&cfg, &checkpoint, &m, split)
    })
    .map_err(to_py)
}

/// Worst relative finite-difference error per block of the gradient suite.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let reports = py
        .detach(|| selfcheck::gradient_suite(GradCheckOptions { seed, ..GradCheckOptions::default() }))
        .map_err(to_py)?;
    Ok(reports.into_iter().map(|r| (r.block, r.report.max_rel_error)).collect())
}

/// `(matched, instances)` of the FPS oracle comparison.
#[pyfunction]
#[pyo3(signature = (n = 200, seed = 0))]
fn fps_check(n: usize, seed: u64) -> PyResult<(usize, usize)> {
    let r = selfcheck::fps_check(n, seed).map_err(to_py)?;
    Ok((r.matched, r.instances))
}

#[pyfunction]
#[pyo3(signature = (epoch, base_lr = 0.001))]
fn step_lr(epoch: usize, base_lr: f64) -> f64 {
    core_step_lr(epoch, base_lr)
}

#[pyfunction]
fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    harness::f1_score(tp, fp, fn_)
}

#[pymodule]
fn simnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_function(wrap_pyfunction!(image_to_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(encode_ccm, m)?)?;
    m.add_function(wrap_pyfunction!(decode_ccm, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(fps_check, m)?)?;
    m.add_function(wrap_pyfunction!(step_lr, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    Ok(())
}

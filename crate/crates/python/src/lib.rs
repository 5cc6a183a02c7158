//! Python module `sweepvox`: scenes, the depth/volume pipeline and a few of
//! the geometric building blocks. Arrays cross the boundary as flat lists
//! with an explicit shape.

use std::path::PathBuf;

use nalgebra::Matrix3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sweepvox::boxes::{iou3d, Box3D};
use sweepvox::camera;
use sweepvox::config::PipelineConfig;
use sweepvox::costvol::{DepthPlanes, ProbabilityVolume};
use sweepvox::pipeline::{self, Artifacts, SceneData};
use sweepvox::sampling;
use sweepvox::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Row-major `rows x cols x channels` array of floats.
#[pyclass(name = "Raster", frozen)]
#[derive(Clone)]
pub struct PyRaster(sweepvox::Raster);

#[pymethods]
impl PyRaster {
    #[new]
    fn new(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        sweepvox::Raster::from_vec(rows, cols, channels, data).map(Self).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    fn get(&self, row: usize, col: usize, channel: usize) -> PyResult<f64> {
        let (r, c, ch) = self.0.shape();
        if row >= r || col >= c || channel >= ch {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.get(row, col, channel))
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Raster{:?}", self.0.shape())
    }
}

/// Pipeline settings in `key = value` form.
#[pyclass(name = "Config")]
#[derive(Clone)]
pub struct PyConfig(PipelineConfig);

#[pymethods]
impl PyConfig {
    /// Defaults overridden by `text`; unknown keys raise.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        PipelineConfig::parse(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PipelineConfig::load(&path).map(Self).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.0.temperature
    }

    #[setter]
    fn set_temperature(&mut self, v: f64) -> PyResult<()> {
        let mut c = self.0.clone();
        c.temperature = v;
        c.validate().map_err(to_py)?;
        self.0 = c;
        Ok(())
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.0.top_k
    }

    #[setter]
    fn set_top_k(&mut self, v: usize) -> PyResult<()> {
        let mut c = self.0.clone();
        c.top_k = v;
        c.validate().map_err(to_py)?;
        self.0 = c;
        Ok(())
    }

    #[getter]
    fn refine(&self) -> bool {
        self.0.refine
    }

    #[setter]
    fn set_refine(&mut self, v: bool) {
        self.0.refine = v;
    }

    #[getter]
    fn planes(&self) -> Vec<f64> {
        self.0.depth_planes().map(|p| p.depths().to_vec()).unwrap_or_default()
    }
}

/// Cameras, images and (for generated scenes) ground truth.
#[pyclass(name = "Scene", frozen)]
pub struct PyScene(SceneData);

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (seed, boxes = 2, views = 10))]
    fn generate(seed: u64, boxes: usize, views: usize) -> PyResult<Self> {
        pipeline::synthesize(seed, boxes, views).map(|(_, d)| Self(d)).map_err(to_py)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        pipeline::load_scene_dir(&dir).map(Self).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.views.len()
    }

    fn image(&self, view: usize) -> PyResult<PyRaster> {
        self.0
            .images
            .get(view)
            .map(|r| PyRaster(r.clone()))
            .ok_or_else(|| PyValueError::new_err("view out of range"))
    }

    /// Quarter-resolution true depth, 0 where the ray misses.
    fn true_depth(&self, view: usize) -> Option<PyRaster> {
        self.0.truth.as_ref()?.get(view).map(|t| PyRaster(t.depth.clone()))
    }

    fn camera_center(&self, view: usize) -> PyResult<(f64, f64, f64)> {
        let v = self.0.views.get(view).ok_or_else(|| PyValueError::new_err("view out of range"))?;
        let c = v.center();
        Ok((c.x, c.y, c.z))
    }

    /// Ground-truth boxes as `(cx, cy, cz, w, h, l)`.
    fn true_boxes(&self) -> Vec<(f64, f64, f64, f64, f64, f64)> {
        self.0.boxes.iter().flatten().map(box_tuple).collect()
    }
}

fn box_tuple(b: &Box3D) -> (f64, f64, f64, f64, f64, f64) {
    (b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z)
}

/// Everything one pipeline run produced.
#[pyclass(name = "Result", frozen)]
pub struct PyArtifacts(Artifacts);

#[pymethods]
impl PyArtifacts {
    fn depth(&self, view: usize) -> PyResult<PyRaster> {
        self.0
            .depths
            .get(view)
            .map(|r| PyRaster(r.clone()))
            .ok_or_else(|| PyValueError::new_err("view out of range"))
    }

    fn probability(&self, view: usize) -> PyResult<PyRaster> {
        self.0
            .probabilities
            .get(view)
            .map(|p| PyRaster(p.raster().clone()))
            .ok_or_else(|| PyValueError::new_err("view out of range"))
    }

    /// Extracted boxes as `(cx, cy, cz, w, h, l, score)`, best first.
    fn boxes(&self) -> Vec<(f64, f64, f64, f64, f64, f64, f64)> {
        self.0
            .boxes
            .iter()
            .map(|b| {
                let t = box_tuple(b);
                (t.0, t.1, t.2, t.3, t.4, t.5, b.score)
            })
            .collect()
    }

    /// Surface score of every voxel, x fastest.
    fn surface_scores(&self) -> Vec<f64> {
        self.0.volume.scores().to_vec()
    }

    #[getter]
    fn grid_dims(&self) -> [usize; 3] {
        self.0.volume.config().dims
    }

    /// Per-view `(view, rmse, abs_rel)` where truth exists.
    fn depth_metrics(&self) -> Vec<(usize, f64, f64)> {
        self.0.metrics.depth.iter().map(|d| (d.view, d.rmse, d.abs_rel)).collect()
    }

    /// Best IoU reached for each ground-truth box.
    fn box_ious(&self) -> Vec<f64> {
        self.0.metrics.boxes.iter().map(|b| b.best_iou).collect()
    }

    fn loss_trace(&self) -> Vec<f64> {
        self.0.metrics.loss_trace.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (scene, config = None))]
fn run(py: Python<'_>, scene: &PyScene, config: Option<PyConfig>) -> PyResult<PyArtifacts> {
    let cfg = config.map(|c| c.0).unwrap_or_default();
    py.allow_threads(|| pipeline::run_pipeline(&scene.0, &cfg))
        .map(PyArtifacts)
        .map_err(to_py)
}

/// Runs a scene directory and writes every artifact to `out`.
#[pyfunction]
#[pyo3(signature = (scene_dir, out, config = None))]
fn run_dir(py: Python<'_>, scene_dir: PathBuf, out: PathBuf, config: Option<PyConfig>) -> PyResult<PyArtifacts> {
    let cfg = config.map(|c| c.0).unwrap_or_default();
    py.allow_threads(|| pipeline::run_pipeline_dir(&scene_dir, &out, &cfg))
        .map(PyArtifacts)
        .map_err(to_py)
}

/// Writes a generated scene directory.
#[pyfunction]
#[pyo3(signature = (dir, seed, boxes = 2, views = 10))]
fn write_scene(dir: PathBuf, seed: u64, boxes: usize, views: usize) -> PyResult<()> {
    let (spec, data) = pipeline::synthesize(seed, boxes, views).map_err(to_py)?;
    pipeline::write_scene_dir(&dir, &spec, &data).map_err(to_py)
}

/// Top-`k` planes of a probability raster as `(depth, score)` per pixel.
#[pyfunction]
fn sample_topk(prob: &PyRaster, depth_min: f64, depth_max: f64, k: usize) -> PyResult<Vec<Vec<(f64, f64)>>> {
    let planes = DepthPlanes::uniform(depth_min, depth_max, prob.0.channels()).map_err(to_py)?;
    let vol = ProbabilityVolume::new(prob.0.clone()).map_err(to_py)?;
    let set = sampling::sample_topk(&vol, &planes, k).map_err(to_py)?;
    Ok(set
        .proposals()
        .chunks_exact(k)
        .map(|px| px.iter().map(|p| (p.depth, p.score)).collect())
        .collect())
}

/// Pixel of reference pixel `q` on the plane at `depth` seen by a source
/// camera offset by `rotation` (row-major 3x3) and `translation`. Both
/// cameras share `(fx, fy, cx, cy)`. Returns `None` behind the camera.
#[pyfunction]
fn warp(
    q: (f64, f64),
    depth: f64,
    intrinsics: (f64, f64, f64, f64),
    rotation: [f64; 9],
    translation: [f64; 3],
) -> PyResult<Option<(f64, f64)>> {
    let k = camera::Intrinsics::new(intrinsics.0, intrinsics.1, intrinsics.2, intrinsics.3).map_err(to_py)?;
    let r = Matrix3::from_row_slice(&rotation);
    let pose = camera::Pose::new_nearest(r, translation.into(), 1e-6).map_err(to_py)?;
    let w = camera::homography_warp(q, depth, &k, &k, &pose, (usize::MAX / 2, usize::MAX / 2));
    Ok(w.u.is_finite().then_some((w.u, w.v)))
}

/// Axis-aligned IoU of two `(cx, cy, cz, w, h, l)` boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64, f64, f64), b: (f64, f64, f64, f64, f64, f64)) -> f64 {
    let mk = |t: (f64, f64, f64, f64, f64, f64)| Box3D {
        center: [t.0, t.1, t.2].into(),
        size: [t.3, t.4, t.5].into(),
        yaw: 0.0,
        score: 0.0,
    };
    iou3d(&mk(a), &mk(b))
}

#[pymodule]
#[pyo3(name = "sweepvox")]
fn sweepvox_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRaster>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyArtifacts>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_dir, m)?)?;
    m.add_function(wrap_pyfunction!(write_scene, m)?)?;
    m.add_function(wrap_pyfunction!(sample_topk, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    Ok(())
}

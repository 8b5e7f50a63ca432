//! Python bindings for gsedit.
//!
//! Images cross the boundary as nested lists (`H×W×3`, maps `H×W`); latents
//! and noise predictions as flat lists.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor as CTensor};
use clap::Parser;
use gsedit::attention::{self as attn, AlignmentConfig, AttentionWeights};
use gsedit::diffusion::{self, GuidanceConfig, NoiseSchedule};
use gsedit::pipeline::{self, evaluate, load_job, prepare_views, starting_latents};
use gsedit::scene::{self, io, Camera, Gaussian3D, OptimizeConfig, ParamGroups, View};
use gsedit::{Error, Tensor};
use nalgebra::Vector3;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

create_exception!(gsedit_py, GsEditError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::UnknownCondition(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => GsEditError::new_err(e.to_string()),
    }
}

type Image = Vec<Vec<Vec<f32>>>;
type Map = Vec<Vec<f32>>;

fn image_from(img: &Image) -> PyResult<Tensor> {
    let h = img.len();
    let w = img.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(h * w * 3);
    for row in img {
        if row.len() != w {
            return Err(PyValueError::new_err("ragged image rows"));
        }
        for px in row {
            if px.len() != 3 {
                return Err(PyValueError::new_err("pixels must have three channels"));
            }
            data.extend_from_slice(px);
        }
    }
    Tensor::new(vec![h, w, 3], data).map_err(to_py)
}

fn image_to(t: &Tensor) -> Image {
    let w = t.shape()[1];
    t.data()
        .chunks(w * 3)
        .map(|row| row.chunks(3).map(|p| p.to_vec()).collect())
        .collect()
}

fn map_to(t: &Tensor) -> Map {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn matrix(m: &Map) -> PyResult<CTensor> {
    let cols = m.first().map_or(0, |r| r.len());
    if m.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    let flat: Vec<f32> = m.iter().flatten().copied().collect();
    CTensor::from_vec(flat, (m.len(), cols), &Device::Cpu).map_err(|e| to_py(e.into()))
}

fn matrix_to(t: &CTensor) -> PyResult<Map> {
    t.to_vec2::<f32>().map_err(|e| to_py(e.into()))
}

fn flat(v: Vec<f32>) -> PyResult<Tensor> {
    Tensor::new(vec![v.len()], v).map_err(to_py)
}

#[pyclass(name = "Gaussian", module = "gsedit_py", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PyGaussian {
    mean: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    color: [f64; 3],
}

impl From<&Gaussian3D> for PyGaussian {
    fn from(g: &Gaussian3D) -> Self {
        Self {
            mean: g.mean,
            rotation: g.rotation,
            log_scale: g.log_scale,
            opacity_logit: g.opacity_logit,
            color: g.color,
        }
    }
}

impl PyGaussian {
    fn inner(&self) -> Gaussian3D {
        Gaussian3D {
            mean: self.mean,
            rotation: self.rotation,
            log_scale: self.log_scale,
            opacity_logit: self.opacity_logit,
            color: self.color,
        }
    }
}

#[pymethods]
impl PyGaussian {
    #[new]
    #[pyo3(signature = (mean, rotation, log_scale, opacity_logit, color))]
    fn new(mean: [f64; 3], rotation: [f64; 4], log_scale: [f64; 3], opacity_logit: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            rotation,
            log_scale,
            opacity_logit,
            color,
        }
    }

    /// Round Gaussian with standard deviation `std` and opacity in `(0, 1)`.
    #[staticmethod]
    fn isotropic(mean: [f64; 3], std: f64, opacity: f64, color: [f64; 3]) -> Self {
        (&Gaussian3D::isotropic(mean, std, opacity, color)).into()
    }

    #[getter]
    fn opacity(&self) -> f64 {
        self.inner().opacity()
    }

    fn __repr__(&self) -> String {
        format!(
            "Gaussian(mean={:?}, opacity={:.4}, color={:?})",
            self.mean,
            self.opacity(),
            self.color
        )
    }
}

#[pyclass(name = "Scene", module = "gsedit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: scene::Scene,
}

#[pymethods]
impl PyScene {
    #[new]
    #[pyo3(signature = (gaussians, background_color = [0.0, 0.0, 0.0]))]
    fn new(gaussians: Vec<PyRef<'_, PyGaussian>>, background_color: [f64; 3]) -> PyResult<Self> {
        let gs = gaussians.iter().map(|g| g.inner()).collect();
        Ok(Self {
            inner: scene::Scene::new(gs, background_color).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = io::scene_from_json(text).map_err(PyValueError::new_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        io::scene_to_json(&self.inner)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_scene(path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_scene(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn gaussians(&self) -> Vec<PyGaussian> {
        self.inner.gaussians.iter().map(Into::into).collect()
    }

    #[getter]
    fn background_color(&self) -> [f64; 3] {
        self.inner.background_color
    }

    /// Radius of the bounding sphere of the means.
    fn extent(&self) -> f64 {
        self.inner.extent()
    }

    /// Flat parameter vector, 14 entries per Gaussian.
    fn params(&self) -> Vec<f64> {
        self.inner.to_params()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        if params.len() != self.inner.to_params().len() {
            return Err(PyValueError::new_err("parameter vector has the wrong length"));
        }
        self.inner.set_params(&params);
        self.inner.validate().map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Scene({} gaussians)", self.inner.len())
    }
}

#[pyclass(name = "Camera", module = "gsedit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: Camera,
}

#[pymethods]
impl PyCamera {
    #[staticmethod]
    #[pyo3(signature = (eye, target, up, focal, width, height))]
    fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> PyResult<Self> {
        let inner = Camera::look_at(eye.into(), target.into(), up.into(), focal, width, height).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Cameras evenly spaced on a horizontal ring around the origin.
    #[staticmethod]
    #[pyo3(signature = (count, radius, elevation_deg, focal, size, phase_deg = 0.0))]
    fn ring(
        count: usize,
        radius: f64,
        elevation_deg: f64,
        focal: f64,
        size: usize,
        phase_deg: f64,
    ) -> PyResult<Vec<Self>> {
        let cams =
            Camera::ring(count, radius, elevation_deg, phase_deg, Vector3::zeros(), focal, size).map_err(to_py)?;
        Ok(cams.into_iter().map(|inner| Self { inner }).collect())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = io::camera_from_json(text).map_err(PyValueError::new_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        io::camera_to_json(&self.inner)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_camera(path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_camera(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center().into()
    }
}

#[pyclass(name = "RenderedView", module = "gsedit_py")]
struct PyRenderedView {
    inner: scene::RenderedView,
}

#[pymethods]
impl PyRenderedView {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// `H×W×3` RGB on the stored image grid.
    #[getter]
    fn color(&self) -> Image {
        image_to(&self.inner.color_tensor())
    }

    #[getter]
    fn depth(&self) -> Map {
        map_to(&self.inner.depth_tensor())
    }

    #[getter]
    fn alpha(&self) -> Map {
        map_to(&self.inner.alpha_tensor())
    }
}

#[pyfunction]
fn render(scene: &PyScene, camera: &PyCamera) -> PyRenderedView {
    PyRenderedView {
        inner: scene::render(&scene.inner, &camera.inner),
    }
}

/// Mean squared color error against `target` and its gradient with respect to
/// `Scene.params()`.
#[pyfunction]
fn render_gradients(scene: &PyScene, camera: &PyCamera, target: Image) -> PyResult<(f64, Vec<f64>)> {
    let t = image_from(&target)?;
    let (loss, g) = scene::render_gradients(&scene.inner, &camera.inner, &t, None).map_err(to_py)?;
    Ok((loss, g.to_flat()))
}

/// Fit the scene to one target image per camera. Returns the fitted scene and
/// the initial and final loss.
#[pyfunction]
#[pyo3(signature = (scene, cameras, targets, steps = 1000, color_only = false))]
fn optimize_scene(
    py: Python<'_>,
    scene: &PyScene,
    cameras: Vec<PyRef<'_, PyCamera>>,
    targets: Vec<Image>,
    steps: usize,
    color_only: bool,
) -> PyResult<(PyScene, f64, f64)> {
    if cameras.len() != targets.len() {
        return Err(PyValueError::new_err("one target per camera"));
    }
    let views = cameras
        .iter()
        .zip(&targets)
        .map(|(c, t)| {
            Ok(View {
                camera: c.inner.clone(),
                target: image_from(t)?,
                mask: None,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = OptimizeConfig {
        steps,
        groups: if color_only {
            ParamGroups::COLOR_ONLY
        } else {
            ParamGroups::ALL
        },
        ..Default::default()
    };
    let start = scene.inner.clone();
    let (fitted, report) = py
        .detach(move || scene::optimize_scene(&start, &views, &cfg))
        .map_err(to_py)?;
    Ok((PyScene { inner: fitted }, report.initial_loss, report.final_loss))
}

#[pyfunction]
fn psnr(a: Image, b: Image) -> PyResult<f64> {
    scene::psnr(&image_from(&a)?, &image_from(&b)?).map_err(to_py)
}

fn weights(w_q: &Map, w_k: &Map, w_v: &Map, num_heads: usize) -> PyResult<AttentionWeights> {
    AttentionWeights::new(matrix(w_q)?, matrix(w_k)?, matrix(w_v)?, num_heads).map_err(to_py)
}

/// Multi-head attention of the tokens `z_i` over `z_j` (rows are tokens).
#[pyfunction]
#[pyo3(signature = (z_i, z_j, w_q, w_k, w_v, num_heads = 1))]
fn attention(z_i: Map, z_j: Map, w_q: Map, w_k: Map, w_v: Map, num_heads: usize) -> PyResult<Map> {
    let w = weights(&w_q, &w_k, &w_v, num_heads)?;
    matrix_to(&attn::attention(&matrix(&z_i)?, &matrix(&z_j)?, &w).map_err(to_py)?)
}

/// `λ` times self-attention plus `1 − λ` times the mean cross-attention to
/// the reference token sets.
#[pyfunction]
#[pyo3(signature = (z_e, refs, w_q, w_k, w_v, num_heads = 1, lam = 0.6))]
fn attn_align(z_e: Map, refs: Vec<Map>, w_q: Map, w_k: Map, w_v: Map, num_heads: usize, lam: f64) -> PyResult<Map> {
    let w = weights(&w_q, &w_k, &w_v, num_heads)?;
    let refs = refs.iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let cfg = AlignmentConfig::new(lam, (0..refs.len()).collect()).map_err(to_py)?;
    let out = attn::attn_align(&matrix(&z_e)?, &refs.iter().collect::<Vec<_>>(), &w, &cfg).map_err(to_py)?;
    matrix_to(&out)
}

#[pyclass(name = "NoiseSchedule", module = "gsedit_py")]
struct PyNoiseSchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (num_train_steps = 1000, num_ddim_steps = 50))]
    fn new(num_train_steps: usize, num_ddim_steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: diffusion::build_schedule(num_train_steps, num_ddim_steps).map_err(to_py)?,
        })
    }

    #[getter]
    fn timestep_grid(&self) -> Vec<usize> {
        self.inner.timestep_grid.clone()
    }

    #[getter]
    fn alpha_bar(&self) -> Vec<f64> {
        self.inner.alpha_bar.clone()
    }

    /// Cumulative signal level at grid position `k`.
    fn alpha_bar_at(&self, k: usize) -> PyResult<f64> {
        if k >= self.inner.timestep_grid.len() {
            return Err(PyValueError::new_err("grid position out of range"));
        }
        Ok(self.inner.alpha_bar_at(k))
    }
}

/// Classifier-free guidance: `uncond + ω (cond − uncond)`.
#[pyfunction]
#[pyo3(signature = (eps_cond, eps_uncond, omega = 7.5))]
fn guided_noise(eps_cond: Vec<f32>, eps_uncond: Vec<f32>, omega: f64) -> PyResult<Vec<f32>> {
    let out = diffusion::guided_noise(&flat(eps_cond)?, &flat(eps_uncond)?, GuidanceConfig { omega }).map_err(to_py)?;
    Ok(out.into_data())
}

/// Deterministic DDIM move of `z` between two signal levels given `eps`.
#[pyfunction]
fn ddim_transfer(z: Vec<f32>, eps: Vec<f32>, alpha_bar_from: f64, alpha_bar_to: f64) -> PyResult<Vec<f32>> {
    let out = diffusion::ddim_transfer(&flat(z)?, &flat(eps)?, alpha_bar_from, alpha_bar_to).map_err(to_py)?;
    Ok(out.into_data())
}

#[pyclass(name = "EditResult", module = "gsedit_py", get_all)]
struct PyEditResult {
    /// Consistency statistics by name.
    report: HashMap<String, f64>,
    references: Vec<usize>,
    originals: Vec<Image>,
    edited: Vec<Image>,
    rerendered: Vec<Image>,
    scene: PyScene,
    optimize_initial_loss: f64,
    optimize_final_loss: f64,
}

/// Run the job file end to end. `denoiser` is `"oracle"` or a checkpoint
/// directory. Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (job, denoiser = "oracle"))]
fn edit(py: Python<'_>, job: PathBuf, denoiser: &str) -> PyResult<PyEditResult> {
    let denoiser = denoiser.to_string();
    py.detach(move || -> gsedit::Result<PyEditResult> {
        let mut loaded = load_job(&job)?;
        let backend = gsedit::cli::load_backend(&denoiser, &mut loaded)?;
        let job = &loaded.job;
        let prepared = prepare_views(job)?;
        let start = starting_latents(job, &prepared, backend.denoiser.as_ref(), &backend.sched)?;
        let out = pipeline::edit_from(job, &prepared, &start, backend.denoiser.as_ref(), &backend.sched)?;
        let target = job.target_condition.0;
        let r = evaluate(
            &prepared.views,
            &out.edited,
            loaded.classifier.as_ref().map(|c| (c, target)),
        )?;
        let rerendered: Vec<Tensor> = job
            .cameras
            .iter()
            .map(|c| scene::render(&out.scene, c).color_tensor())
            .collect();
        let mut report = HashMap::from([
            ("reprojection_error".to_string(), r.reprojection_error),
            ("reprojection_floor".to_string(), r.reprojection_floor),
            ("dispersion".to_string(), r.dispersion),
            ("original_dispersion".to_string(), r.original_dispersion),
            ("edit_magnitude".to_string(), r.edit_magnitude),
            (
                "rerender_reprojection_error".to_string(),
                pipeline::reprojection_error(&prepared.views, &rerendered)?,
            ),
        ]);
        if let Some(rate) = r.target_class_rate {
            report.insert("target_class_rate".to_string(), rate);
        }
        Ok(PyEditResult {
            report,
            references: out.references,
            originals: prepared.views.iter().map(|v| image_to(&v.image)).collect(),
            edited: out.edited.iter().map(image_to).collect(),
            rerendered: rerendered.iter().map(image_to).collect(),
            scene: PyScene { inner: out.scene },
            optimize_initial_loss: out.optimize.initial_loss,
            optimize_final_loss: out.optimize.final_loss,
        })
    })
    .map_err(to_py)
}

/// Run the command-line tool in-process and return its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let cli = match gsedit::cli::Cli::try_parse_from(std::iter::once("gsedit".to_string()).chain(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    py.detach(move || match gsedit::cli::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            gsedit::cli::exit_code(&e)
        }
    })
}

#[pymodule]
fn gsedit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GsEditError", m.py().get_type::<GsEditError>())?;
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyRenderedView>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyEditResult>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(render_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_scene, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(attn_align, m)?)?;
    m.add_function(wrap_pyfunction!(guided_noise, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(edit, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

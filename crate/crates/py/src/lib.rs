//! Python bindings. Images cross the boundary as flat row-major RGB
//! f64 lists plus explicit width/height, so no array dependency is
//! needed on either side.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hdrsplat::datagen::{
    build_procedural_scene, generate, load_dataset, load_manifest, ExposurePolicy, RigSpec,
};
use hdrsplat::image::ImageBuf;
use hdrsplat::img_io;
use hdrsplat::metrics::{self, HisNorm};
use hdrsplat::optimizer::{self, neutral_color_init, TrainConfig, TrainMode};
use hdrsplat::photometric;
use hdrsplat::rasterizer::{self, RenderOptions};
use hdrsplat::scene;

fn io_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn val_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn buf_from_flat(width: usize, height: usize, data: &[f64]) -> PyResult<ImageBuf> {
    if data.len() != width * height * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} floats for {width}x{height} RGB, got {}",
            width * height * 3,
            data.len()
        )));
    }
    let mut buf = ImageBuf::new(width, height);
    for (i, px) in buf.data.iter_mut().enumerate() {
        *px = [data[3 * i], data[3 * i + 1], data[3 * i + 2]];
    }
    Ok(buf)
}

fn buf_to_flat(buf: &ImageBuf) -> Vec<f64> {
    let mut out = Vec::with_capacity(buf.data.len() * 3);
    for px in &buf.data {
        out.extend_from_slice(px);
    }
    out
}

fn parse_norm(norm: &str) -> PyResult<HisNorm> {
    match norm {
        "rms" => Ok(HisNorm::Rms),
        "raw" => Ok(HisNorm::Raw),
        other => Err(PyValueError::new_err(format!(
            "norm must be 'rms' or 'raw', got '{other}'"
        ))),
    }
}

/// A Gaussian scene with its camera views.
#[pyclass]
struct Scene {
    inner: scene::Scene,
}

#[pymethods]
impl Scene {
    /// Load from the text scene format.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Scene {
            inner: scene::load_scene(&path).map_err(io_err)?,
        })
    }

    /// Build the seeded procedural scene used by the dataset generator.
    #[staticmethod]
    fn procedural(seed: u64, n_gaussians: usize) -> Self {
        Scene {
            inner: build_procedural_scene(seed, n_gaussians),
        }
    }

    /// Load a generated dataset: scene plus observations attached to views.
    #[staticmethod]
    fn from_dataset(manifest_path: PathBuf) -> PyResult<Self> {
        let manifest = load_manifest(&manifest_path).map_err(io_err)?;
        Ok(Scene {
            inner: load_dataset(&manifest).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        scene::save_scene(&self.inner, &path).map_err(io_err)
    }

    #[getter]
    fn n_gaussians(&self) -> usize {
        self.inner.gaussians.len()
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.views.len()
    }

    fn view_ids(&self) -> Vec<u32> {
        self.inner.views.iter().map(|v| v.id).collect()
    }

    fn view_exposure(&self, view_id: u32) -> PyResult<f64> {
        self.view(view_id).map(|v| v.exposure)
    }

    fn view_gamma(&self, view_id: u32) -> PyResult<f64> {
        self.view(view_id).map(|v| v.gamma)
    }

    /// Linear radiance render of one view: (width, height, flat RGB floats).
    #[pyo3(signature = (view_id, background = None))]
    fn render_hdr(
        &self,
        view_id: u32,
        background: Option<[f64; 3]>,
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let view = self.view(view_id)?;
        let opts = RenderOptions {
            background: background.unwrap_or([0.0; 3]),
        };
        let img = rasterizer::render_hdr(&self.inner, view, &opts);
        Ok((img.width, img.height, buf_to_flat(&img)))
    }

    /// Exposed, tone-mapped LDR render of one view.
    #[pyo3(signature = (view_id, e, gamma, background = None))]
    fn render_ldr(
        &self,
        view_id: u32,
        e: f64,
        gamma: f64,
        background: Option<[f64; 3]>,
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let view = self.view(view_id)?;
        let opts = RenderOptions {
            background: background.unwrap_or([0.0; 3]),
        };
        let hdr = rasterizer::render_hdr(&self.inner, view, &opts);
        let ldr = photometric::form_ldr(&hdr, e, gamma);
        Ok((ldr.width, ldr.height, buf_to_flat(&ldr)))
    }

    /// Fraction of pixels in the view whose accumulated opacity clears the
    /// threshold.
    fn coverage(&self, view_id: u32, threshold: f64) -> PyResult<f64> {
        let view = self.view(view_id)?;
        Ok(rasterizer::coverage(&self.inner, view, threshold))
    }

    /// The observation attached by the dataset loader, if any.
    fn observation(&self, view_id: u32) -> PyResult<Option<(usize, usize, Vec<f64>)>> {
        let view = self.view(view_id)?;
        Ok(view
            .observation
            .as_ref()
            .map(|img| (img.width, img.height, buf_to_flat(img))))
    }
}

impl Scene {
    fn view(&self, view_id: u32) -> PyResult<&scene::CameraView> {
        self.inner
            .view_by_id(view_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown view id {view_id}")))
    }
}

/// clamp01(clamp(e * hdr, 1e-6, 10)^(1/gamma)) per channel.
#[pyfunction]
fn form_ldr(width: usize, height: usize, hdr: Vec<f64>, e: f64, gamma: f64) -> PyResult<Vec<f64>> {
    let buf = buf_from_flat(width, height, &hdr)?;
    Ok(buf_to_flat(&photometric::form_ldr(&buf, e, gamma)))
}

#[pyfunction]
fn psnr(width: usize, height: usize, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let ba = buf_from_flat(width, height, &a)?;
    let bb = buf_from_flat(width, height, &b)?;
    Ok(metrics::psnr(&ba, &bb))
}

#[pyfunction]
fn ssim(width: usize, height: usize, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if width < 11 || height < 11 {
        return Err(PyValueError::new_err("ssim needs frames of at least 11x11"));
    }
    let ba = buf_from_flat(width, height, &a)?;
    let bb = buf_from_flat(width, height, &b)?;
    Ok(metrics::ssim(&ba, &bb))
}

/// Exposure-compensated inconsistency over a time-ordered frame sequence.
/// `exposures[t]` multiplies the tone-inverted frame t onto the common scale.
#[pyfunction]
#[pyo3(signature = (width, height, frames, exposures, norm = "rms"))]
fn his(
    width: usize,
    height: usize,
    frames: Vec<Vec<f64>>,
    exposures: Vec<f64>,
    norm: &str,
) -> PyResult<f64> {
    if frames.len() < 2 {
        return Err(PyValueError::new_err("his needs at least two frames"));
    }
    if frames.len() != exposures.len() {
        return Err(PyValueError::new_err(
            "frames and exposures differ in length",
        ));
    }
    let bufs = frames
        .iter()
        .map(|f| buf_from_flat(width, height, f))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::his(&bufs, &exposures, parse_norm(norm)?))
}

/// Population standard deviation of per-frame mean BT.601 luminance.
#[pyfunction]
fn std_luminance(width: usize, height: usize, frames: Vec<Vec<f64>>) -> PyResult<f64> {
    let bufs = frames
        .iter()
        .map(|f| buf_from_flat(width, height, f))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::std_luminance(&bufs))
}

#[pyfunction]
fn delta_psnr(psnr_hard: f64, psnr_easy: f64) -> f64 {
    metrics::delta_psnr(psnr_hard, psnr_easy)
}

/// Pinhole intrinsics from a horizontal field of view: (fx, fy, cx, cy).
#[pyfunction]
fn intrinsics_from_fov(width: usize, height: usize, hfov_deg: f64) -> (f64, f64, f64, f64) {
    let i = scene::intrinsics_from_fov(width, height, hfov_deg);
    (i.fx, i.fy, i.cx, i.cy)
}

/// Generate a synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, gaussians = 500, policy = "const", iso_std = 2.0, frames = None, width = None, height = None))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    out_dir: PathBuf,
    seed: u64,
    gaussians: usize,
    policy: &str,
    iso_std: f64,
    frames: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
) -> PyResult<String> {
    let scene = build_procedural_scene(seed, gaussians);
    let mut rig = RigSpec::desk();
    if let Some(f) = frames {
        rig.frame_count = f;
    }
    if let Some(w) = width {
        rig.width = w;
    }
    if let Some(h) = height {
        rig.height = h;
    }
    let policy = match policy {
        "const" => ExposurePolicy::iso_const(seed),
        "var" => ExposurePolicy::iso_var(seed, iso_std),
        other => {
            return Err(PyValueError::new_err(format!(
                "policy must be 'const' or 'var', got '{other}'"
            )))
        }
    };
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    generate(&scene, &rig, &policy, &out_dir).map_err(io_err)?;
    Ok(out_dir.join("manifest.txt").display().to_string())
}

/// Train on a generated dataset; returns the final total loss.
#[pyfunction]
#[pyo3(signature = (manifest_path, out_dir, mode = "p2gs", iterations = 100, seed = 0, views_per_step = 0))]
fn train(
    manifest_path: PathBuf,
    out_dir: PathBuf,
    mode: &str,
    iterations: u64,
    seed: u64,
    views_per_step: usize,
) -> PyResult<f64> {
    let manifest = load_manifest(&manifest_path).map_err(io_err)?;
    let mut scene = load_dataset(&manifest).map_err(io_err)?;
    neutral_color_init(&mut scene, 0.5);
    let cfg = TrainConfig {
        iterations,
        seed,
        mode: TrainMode::parse(mode).ok_or_else(|| {
            PyValueError::new_err(format!("mode must be p2gs or ldr-baseline, got '{mode}'"))
        })?,
        views_per_step,
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    let mut last = f64::NAN;
    optimizer::train(scene, &cfg, &out_dir, None, |_, report| {
        last = report.total;
    })
    .map_err(val_err)?;
    Ok(last)
}

#[pyfunction]
fn read_ppm(path: PathBuf) -> PyResult<(usize, usize, Vec<f64>)> {
    let img = img_io::read_ppm(Path::new(&path)).map_err(io_err)?;
    Ok((img.width, img.height, buf_to_flat(&img)))
}

#[pyfunction]
fn write_ppm(path: PathBuf, width: usize, height: usize, data: Vec<f64>) -> PyResult<()> {
    let img = buf_from_flat(width, height, &data)?;
    img_io::write_ppm(&img, Path::new(&path)).map_err(io_err)
}

#[pymodule]
fn hdrsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_function(wrap_pyfunction!(form_ldr, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(his, m)?)?;
    m.add_function(wrap_pyfunction!(std_luminance, m)?)?;
    m.add_function(wrap_pyfunction!(delta_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(intrinsics_from_fov, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(read_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(write_ppm, m)?)?;
    Ok(())
}

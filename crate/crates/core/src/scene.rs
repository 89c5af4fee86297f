//! Scene model: anisotropic Gaussians, per-view cameras with photometric
//! state, and the versioned scene file formats (text and binary).

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::image::ImageBuf;

pub const SCENE_HEADER: &str = "hdrsplat-scene v1";
pub const SCENE_BIN_MAGIC: &[u8; 8] = b"HSSBIN1\0";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene binary format error: {0}")]
    Binary(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// One anisotropic 3D Gaussian. Geometry (mean, rotation, scale) is fixed
/// after construction; color and opacity are the learnable appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Near-unit quaternion (w, x, y, z). Stored as parsed so persistence
    /// round-trips bit-exactly; normalized when a rotation matrix is built.
    pub rotation: Quaternion<f64>,
    /// Positive axis lengths in meters.
    pub scale: Vector3<f64>,
    /// Blend weight in (0, 1).
    pub opacity: f64,
    /// Linear radiance, view-independent. Clamped non-negative at blend time.
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
            .to_rotation_matrix()
            .into_inner()
    }

    /// World-space covariance R S S^T R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&self.scale);
        let rs = r * s;
        rs * rs.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole intrinsics from a horizontal field of view, square pixels,
/// principal point at the image center with pixel indices 0..W-1.
pub fn intrinsics_from_fov(width: usize, height: usize, hfov_deg: f64) -> CameraIntrinsics {
    assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
    assert!(
        hfov_deg > 0.0 && hfov_deg < 180.0,
        "horizontal fov must be in (0, 180) degrees"
    );
    let f = width as f64 / (2.0 * (hfov_deg.to_radians() / 2.0).tan());
    CameraIntrinsics {
        width,
        height,
        fx: f,
        fy: f,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
    }
}

/// World-to-camera rigid transform. Camera frame: +x right, +y down,
/// +z forward (depth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Quaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
            .to_rotation_matrix()
            .into_inner()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }
}

/// One training/eval view: camera geometry plus the photometric state
/// (exposure gain e, tone exponent gamma) that produced its observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: u32,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub exposure: f64,
    pub gamma: f64,
    pub iso: Option<f64>,
    /// LDR observation in [0,1]; absent for scenes loaded without a dataset.
    pub observation: Option<ImageBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub views: Vec<CameraView>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, g) in self.gaussians.iter().enumerate() {
            let finite = g.mean.iter().all(|v| v.is_finite())
                && g.rotation.coords.iter().all(|v| v.is_finite())
                && g.scale.iter().all(|v| v.is_finite())
                && g.opacity.is_finite()
                && g.color.iter().all(|v| v.is_finite());
            if !finite {
                return Err(SceneError::Invalid(format!(
                    "gaussian {i}: non-finite field"
                )));
            }
            if g.scale.iter().any(|&s| s <= 0.0) {
                return Err(SceneError::Invalid(format!(
                    "gaussian {i}: non-positive scale"
                )));
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(SceneError::Invalid(format!(
                    "gaussian {i}: opacity outside [0,1]"
                )));
            }
            let qn = g.rotation.norm();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(SceneError::Invalid(format!(
                    "gaussian {i}: quaternion norm {qn} deviates from 1 by more than 1e-9"
                )));
            }
        }
        for v in &self.views {
            let it = v.intrinsics;
            if it.fx <= 0.0 || it.fy <= 0.0 || it.width < 1 || it.height < 1 {
                return Err(SceneError::Invalid(format!(
                    "view {}: bad intrinsics",
                    v.id
                )));
            }
            if !(v.exposure.is_finite() && v.exposure > 0.0) {
                return Err(SceneError::Invalid(format!(
                    "view {}: exposure must be finite and > 0",
                    v.id
                )));
            }
            if !(v.gamma.is_finite() && v.gamma > 0.0) {
                return Err(SceneError::Invalid(format!(
                    "view {}: gamma must be finite and > 0",
                    v.id
                )));
            }
            let qn = v.pose.rotation.norm();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(SceneError::Invalid(format!(
                    "view {}: pose quaternion norm deviates from 1 by more than 1e-9",
                    v.id
                )));
            }
            if let Some(obs) = &v.observation {
                if obs.width != it.width || obs.height != it.height {
                    return Err(SceneError::Invalid(format!(
                        "view {}: observation {}x{} does not match intrinsics {}x{}",
                        v.id, obs.width, obs.height, it.width, it.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn view_by_id(&self, id: u32) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }
}

/// 9 significant digits; enough to reproduce every value the text format is
/// expected to carry, and stable for golden-file diffs.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{:.8e}", x)
}

/// Shortest decimal that parses back to the identical f64. Used by formats
/// that must reload computed values bit for bit (manifests, sidecars).
pub fn fmt_f64_exact(x: f64) -> String {
    format!("{x}")
}

fn scene_to_text(scene: &Scene) -> String {
    let mut out = String::new();
    out.push_str(SCENE_HEADER);
    out.push('\n');
    for g in &scene.gaussians {
        let _ = write!(
            out,
            "G {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            fmt_f64(g.mean.x),
            fmt_f64(g.mean.y),
            fmt_f64(g.mean.z),
            fmt_f64(g.rotation.w),
            fmt_f64(g.rotation.i),
            fmt_f64(g.rotation.j),
            fmt_f64(g.rotation.k),
            fmt_f64(g.scale.x),
            fmt_f64(g.scale.y),
            fmt_f64(g.scale.z),
            fmt_f64(g.opacity),
            fmt_f64(g.color.x),
            fmt_f64(g.color.y),
            fmt_f64(g.color.z),
        );
    }
    for v in &scene.views {
        let _ = write!(
            out,
            "V {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            v.id,
            fmt_f64(v.pose.rotation.w),
            fmt_f64(v.pose.rotation.i),
            fmt_f64(v.pose.rotation.j),
            fmt_f64(v.pose.rotation.k),
            fmt_f64(v.pose.translation.x),
            fmt_f64(v.pose.translation.y),
            fmt_f64(v.pose.translation.z),
            v.intrinsics.width,
            v.intrinsics.height,
            fmt_f64(v.intrinsics.fx),
            fmt_f64(v.intrinsics.fy),
            fmt_f64(v.intrinsics.cx),
            fmt_f64(v.intrinsics.cy),
            fmt_f64(v.exposure),
            fmt_f64(v.gamma),
        );
        if let Some(iso) = v.iso {
            let _ = write!(out, " {}", fmt_f64(iso));
        }
        out.push('\n');
    }
    out
}

struct LineParser<'a> {
    fields: Vec<&'a str>,
    line_no: usize,
    cursor: usize,
}

impl<'a> LineParser<'a> {
    fn new(line: &'a str, line_no: usize) -> Self {
        LineParser {
            fields: line.split_whitespace().collect(),
            line_no,
            cursor: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> SceneError {
        SceneError::Parse {
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn next_f64(&mut self) -> Result<f64, SceneError> {
        let raw = self
            .fields
            .get(self.cursor)
            .ok_or_else(|| self.err("missing field"))?;
        self.cursor += 1;
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(format!("bad float '{raw}'")))?;
        if !v.is_finite() {
            return Err(self.err(format!("non-finite value '{raw}'")));
        }
        Ok(v)
    }

    fn next_usize(&mut self) -> Result<usize, SceneError> {
        let raw = self
            .fields
            .get(self.cursor)
            .ok_or_else(|| self.err("missing field"))?;
        self.cursor += 1;
        raw.parse()
            .map_err(|_| self.err(format!("bad integer '{raw}'")))
    }

    fn remaining(&self) -> usize {
        self.fields.len() - self.cursor
    }
}

fn scene_from_text(text: &str) -> Result<Scene, SceneError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SceneError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    if header.trim() != SCENE_HEADER {
        return Err(SceneError::Parse {
            line: 1,
            msg: format!(
                "bad header '{}', expected '{}'",
                header.trim(),
                SCENE_HEADER
            ),
        });
    }
    let mut scene = Scene {
        gaussians: Vec::new(),
        views: Vec::new(),
    };
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut p = LineParser::new(trimmed, line_no);
        let tag = p.fields[0];
        p.cursor = 1;
        match tag {
            "G" => {
                let mean = Vector3::new(p.next_f64()?, p.next_f64()?, p.next_f64()?);
                let rotation =
                    Quaternion::new(p.next_f64()?, p.next_f64()?, p.next_f64()?, p.next_f64()?);
                let scale = Vector3::new(p.next_f64()?, p.next_f64()?, p.next_f64()?);
                let opacity = p.next_f64()?;
                let color = Vector3::new(p.next_f64()?, p.next_f64()?, p.next_f64()?);
                if p.remaining() != 0 {
                    return Err(p.err("trailing fields on G record"));
                }
                if scale.iter().any(|&s| s <= 0.0) {
                    return Err(p.err("scale must be positive"));
                }
                if !(0.0..=1.0).contains(&opacity) {
                    return Err(p.err("opacity must be in [0,1]"));
                }
                scene.gaussians.push(Gaussian {
                    mean,
                    rotation,
                    scale,
                    opacity,
                    color,
                });
            }
            "V" => {
                let id = p.next_usize()? as u32;
                let rotation =
                    Quaternion::new(p.next_f64()?, p.next_f64()?, p.next_f64()?, p.next_f64()?);
                let translation = Vector3::new(p.next_f64()?, p.next_f64()?, p.next_f64()?);
                let width = p.next_usize()?;
                let height = p.next_usize()?;
                let fx = p.next_f64()?;
                let fy = p.next_f64()?;
                let cx = p.next_f64()?;
                let cy = p.next_f64()?;
                let exposure = p.next_f64()?;
                let gamma = p.next_f64()?;
                let iso = match p.remaining() {
                    0 => None,
                    1 => Some(p.next_f64()?),
                    _ => return Err(p.err("trailing fields on V record")),
                };
                scene.views.push(CameraView {
                    id,
                    pose: CameraPose {
                        rotation,
                        translation,
                    },
                    intrinsics: CameraIntrinsics {
                        width,
                        height,
                        fx,
                        fy,
                        cx,
                        cy,
                    },
                    exposure,
                    gamma,
                    iso,
                    observation: None,
                });
            }
            other => {
                return Err(p.err(format!("unknown record tag '{other}'")));
            }
        }
    }
    scene.validate()?;
    Ok(scene)
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        if self.pos + n > self.buf.len() {
            return Err(SceneError::Binary("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Binary form carries exactly the same fields as the text form, full f64.
pub fn scene_to_binary(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SCENE_BIN_MAGIC);
    put_u64(&mut buf, scene.gaussians.len() as u64);
    put_u64(&mut buf, scene.views.len() as u64);
    for g in &scene.gaussians {
        for v in [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.rotation.w,
            g.rotation.i,
            g.rotation.j,
            g.rotation.k,
            g.scale.x,
            g.scale.y,
            g.scale.z,
            g.opacity,
            g.color.x,
            g.color.y,
            g.color.z,
        ] {
            put_f64(&mut buf, v);
        }
    }
    for v in &scene.views {
        put_u64(&mut buf, v.id as u64);
        put_u64(&mut buf, v.intrinsics.width as u64);
        put_u64(&mut buf, v.intrinsics.height as u64);
        for x in [
            v.pose.rotation.w,
            v.pose.rotation.i,
            v.pose.rotation.j,
            v.pose.rotation.k,
            v.pose.translation.x,
            v.pose.translation.y,
            v.pose.translation.z,
            v.intrinsics.fx,
            v.intrinsics.fy,
            v.intrinsics.cx,
            v.intrinsics.cy,
            v.exposure,
            v.gamma,
        ] {
            put_f64(&mut buf, x);
        }
        match v.iso {
            Some(iso) => {
                buf.push(1);
                put_f64(&mut buf, iso);
            }
            None => buf.push(0),
        }
    }
    buf
}

pub fn scene_from_binary(bytes: &[u8]) -> Result<Scene, SceneError> {
    if bytes.len() < 8 || &bytes[..8] != SCENE_BIN_MAGIC {
        return Err(SceneError::Binary("bad magic".into()));
    }
    let mut r = BinReader { buf: bytes, pos: 8 };
    let n_g = r.u64()? as usize;
    let n_v = r.u64()? as usize;
    let mut scene = Scene {
        gaussians: Vec::with_capacity(n_g),
        views: Vec::with_capacity(n_v),
    };
    for _ in 0..n_g {
        let mean = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let rotation = Quaternion::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let scale = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let opacity = r.f64()?;
        let color = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        scene.gaussians.push(Gaussian {
            mean,
            rotation,
            scale,
            opacity,
            color,
        });
    }
    for _ in 0..n_v {
        let id = r.u64()? as u32;
        let width = r.u64()? as usize;
        let height = r.u64()? as usize;
        let rotation = Quaternion::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let translation = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let fx = r.f64()?;
        let fy = r.f64()?;
        let cx = r.f64()?;
        let cy = r.f64()?;
        let exposure = r.f64()?;
        let gamma = r.f64()?;
        let has_iso = r.take(1)?[0];
        let iso = if has_iso == 1 { Some(r.f64()?) } else { None };
        scene.views.push(CameraView {
            id,
            pose: CameraPose {
                rotation,
                translation,
            },
            intrinsics: CameraIntrinsics {
                width,
                height,
                fx,
                fy,
                cx,
                cy,
            },
            exposure,
            gamma,
            iso,
            observation: None,
        });
    }
    if r.pos != bytes.len() {
        return Err(SceneError::Binary("trailing bytes".into()));
    }
    scene.validate()?;
    Ok(scene)
}

/// Saves text when `path` ends in `.txt`, binary otherwise.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    scene.validate()?;
    let mut f = std::fs::File::create(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("txt") {
        f.write_all(scene_to_text(scene).as_bytes())?;
    } else {
        f.write_all(&scene_to_binary(scene))?;
    }
    Ok(())
}

/// Loads either format, sniffing the leading bytes.
pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.starts_with(SCENE_BIN_MAGIC) {
        scene_from_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| SceneError::Binary("not valid utf-8 text or known binary".into()))?;
        scene_from_text(&text)
    }
}

pub fn scene_text(scene: &Scene) -> String {
    scene_to_text(scene)
}

pub fn scene_from_str(text: &str) -> Result<Scene, SceneError> {
    scene_from_text(text)
}

//! Synthetic multi-exposure dataset generator: a procedural static scene
//! rendered through a vehicle-mounted tri-camera rig, with per-frame ISO as
//! the only varying factor between subsets.
//!
//! Mount poses are given in simulator convention (x forward, y right, z up,
//! left-handed; rotation applied yaw, then pitch, then roll). Internally
//! everything lives in a right-handed world with x forward, y left, z up,
//! so mount y, yaw and pitch flip sign on import.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::image::ImageBuf;
use crate::img_io::{read_ppm, write_ppm, ImgIoError};
use crate::photometric::form_ldr;
use crate::rasterizer::{coverage, render_hdr, RenderOptions};
use crate::scene::{
    fmt_f64, fmt_f64_exact, intrinsics_from_fov, load_scene, save_scene, CameraIntrinsics,
    CameraPose, CameraView, Gaussian, Scene, SceneError,
};

pub const MANIFEST_HEADER: &str = "hdrsplat-manifest v1";
pub const GAMMA_GEN: f64 = 2.2;
pub const ISO_REF: f64 = 8.0;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImgIoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("manifest line {0}: {1}")]
    Manifest(usize, String),
}

#[derive(Debug, Clone)]
pub struct CameraMount {
    pub name: String,
    /// Simulator-convention location in meters (x fwd, y right, z up).
    pub location: [f64; 3],
    /// Simulator-convention rotation in degrees (roll, pitch, yaw).
    pub rotation_rpy_deg: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct RigSpec {
    pub cameras: Vec<CameraMount>,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub frame_rate_hz: f64,
    pub frame_count: usize,
    /// Straight-line ego speed along world forward, meters per second.
    pub speed_mps: f64,
}

fn table_mounts() -> Vec<CameraMount> {
    [
        ("front", [1.539, 0.025, 3.845], [0.696, 0.420, 0.338]),
        (
            "front_left",
            [1.494, -0.091, 3.845],
            [0.003, 1.387, -44.205],
        ),
        ("front_right", [1.489, 0.095, 3.846], [0.189, 0.111, 44.756]),
    ]
    .into_iter()
    .map(|(name, location, rotation_rpy_deg)| CameraMount {
        name: name.to_string(),
        location,
        rotation_rpy_deg,
    })
    .collect()
}

impl RigSpec {
    /// Desk-scale default: tenth-resolution images, short clip.
    pub fn desk() -> Self {
        RigSpec {
            cameras: table_mounts(),
            width: 192,
            height: 130,
            hfov_deg: 60.0,
            frame_rate_hz: 10.0,
            frame_count: 8,
            speed_mps: 2.0,
        }
    }

    /// Full-resolution variant of the same rig.
    pub fn full() -> Self {
        RigSpec {
            width: 1920,
            height: 1300,
            frame_count: 100,
            ..RigSpec::desk()
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        intrinsics_from_fov(self.width, self.height, self.hfov_deg)
    }

    pub fn ego_translation(&self, frame: usize) -> Vector3<f64> {
        Vector3::new(self.speed_mps * frame as f64 / self.frame_rate_hz, 0.0, 0.0)
    }
}

/// World-to-camera pose for a mount on the ego vehicle at a given position.
pub fn rig_camera_pose(mount: &CameraMount, ego_translation: &Vector3<f64>) -> CameraPose {
    let [roll, pitch, yaw] = mount.rotation_rpy_deg.map(f64::to_radians);
    // import into the right-handed forward/left/up world
    let r_vc = Rotation3::from_euler_angles(roll, -pitch, -yaw);
    let center =
        Vector3::new(mount.location[0], -mount.location[1], mount.location[2]) + ego_translation;
    // camera housing (fwd/left/up) to optical (right/down/forward)
    let housing_to_optical = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let r_wc = housing_to_optical * r_vc.matrix().transpose();
    let rotation = UnitQuaternion::from_matrix(&r_wc);
    CameraPose {
        rotation: *rotation.quaternion(),
        translation: -(r_wc * center),
    }
}

fn unit_z_yaw(yaw: f64) -> Quaternion<f64> {
    *UnitQuaternion::from_euler_angles(0.0, 0.0, yaw).quaternion()
}

fn clamp_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    let mut sample = || rng.gen_range(lo..hi).clamp(0.01, 2.0);
    Vector3::new(sample(), sample(), sample())
}

/// Deterministic stand-in for a static town: a ground plane, a backdrop
/// arc that closes the horizon for all three cameras, box clusters, and
/// scattered clutter. Radiance stays below 0.5 so the brightest ISO draw
/// keeps the tone curve out of its upper clamp on every view.
pub fn build_procedural_scene(seed: u64, n_gaussians: usize) -> Scene {
    assert!(n_gaussians >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::with_capacity(n_gaussians);

    // anchor blob so even a single-Gaussian scene is visible up front
    gaussians.push(Gaussian {
        mean: Vector3::new(15.0, 0.0, 5.0),
        rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        scale: Vector3::new(2.0, 3.0, 2.5),
        opacity: 0.8,
        color: Vector3::new(0.48, 0.42, 0.36),
    });

    let remaining = n_gaussians - 1;
    let n_back = remaining / 5;
    let n_ground = 3 * remaining / 10;
    let n_box = 3 * remaining / 10;
    let n_clutter = remaining - n_back - n_ground - n_box;

    // backdrop: cylindrical arc of radius 50 spanning all camera frusta
    if n_back > 0 {
        let cols = ((n_back as f64).sqrt() * 1.6).ceil() as usize;
        let rows = n_back.div_ceil(cols);
        let mut placed = 0;
        'back: for r in 0..rows {
            for c in 0..cols {
                if placed == n_back {
                    break 'back;
                }
                let az = (-75.0 + 150.0 * (c as f64 + 0.5) / cols as f64).to_radians();
                let z = 26.0 * (r as f64 + 0.5) / rows as f64;
                let radius = 50.0 + rng.gen_range(-1.5..1.5);
                gaussians.push(Gaussian {
                    mean: Vector3::new(radius * az.cos(), radius * az.sin(), z),
                    rotation: unit_z_yaw(az),
                    scale: Vector3::new(2.0, 75.0 / cols as f64, 20.0 / rows as f64),
                    opacity: 0.85,
                    color: clamp_color(&mut rng, 0.06, 0.42),
                });
                placed += 1;
            }
        }
    }

    // ground plane sector in front of the rig
    if n_ground > 0 {
        let cols = ((n_ground as f64).sqrt() * 1.3).ceil() as usize;
        let rows = n_ground.div_ceil(cols);
        let mut placed = 0;
        'ground: for r in 0..rows {
            for c in 0..cols {
                if placed == n_ground {
                    break 'ground;
                }
                let x = 2.0 + 46.0 * (r as f64 + 0.5) / rows as f64;
                let y = -36.0 + 72.0 * (c as f64 + 0.5) / cols as f64;
                gaussians.push(Gaussian {
                    mean: Vector3::new(
                        x + rng.gen_range(-0.5..0.5),
                        y + rng.gen_range(-0.5..0.5),
                        0.0,
                    ),
                    rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
                    scale: Vector3::new(30.0 / rows as f64, 48.0 / cols as f64, 0.07),
                    opacity: 0.8,
                    color: clamp_color(&mut rng, 0.08, 0.45),
                });
                placed += 1;
            }
        }
    }

    // box-like structures in the mid field
    if n_box > 0 {
        let clusters = 8.min(n_box);
        for i in 0..n_box {
            let cluster = i % clusters;
            let az = (-55.0 + 110.0 * (cluster as f64 + 0.5) / clusters as f64).to_radians();
            let radius = 12.0 + 23.0 * ((cluster * 7 % clusters) as f64 / clusters as f64);
            let base = Vector3::new(radius * az.cos(), radius * az.sin(), 0.0);
            let h = rng.gen_range(0.5..6.0);
            gaussians.push(Gaussian {
                mean: base + Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), h),
                rotation: unit_z_yaw(rng.gen_range(-1.2..1.2)),
                scale: Vector3::new(
                    rng.gen_range(0.5..1.4),
                    rng.gen_range(0.5..1.4),
                    rng.gen_range(0.6..2.2),
                ),
                opacity: rng.gen_range(0.6..0.9),
                color: clamp_color(&mut rng, 0.08, 0.5),
            });
        }
    }

    for _ in 0..n_clutter {
        let az = rng.gen_range(-60.0f64..60.0).to_radians();
        let radius = rng.gen_range(5.0..45.0);
        gaussians.push(Gaussian {
            mean: Vector3::new(
                radius * az.cos(),
                radius * az.sin(),
                rng.gen_range(0.15..2.5),
            ),
            rotation: unit_z_yaw(rng.gen_range(-1.5..1.5)),
            scale: Vector3::new(
                rng.gen_range(0.2..0.7),
                rng.gen_range(0.2..0.7),
                rng.gen_range(0.2..0.7),
            ),
            opacity: rng.gen_range(0.55..0.9),
            color: clamp_color(&mut rng, 0.03, 0.5),
        });
    }

    Scene {
        gaussians,
        views: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposureMode {
    Const,
    Var,
}

#[derive(Debug, Clone)]
pub struct ExposurePolicy {
    pub mode: ExposureMode,
    pub iso_mean: f64,
    pub iso_std: f64,
    pub iso_floor: u32,
    pub seed: u64,
}

impl ExposurePolicy {
    pub fn iso_const(seed: u64) -> Self {
        ExposurePolicy {
            mode: ExposureMode::Const,
            iso_mean: ISO_REF,
            iso_std: 0.0,
            iso_floor: 1,
            seed,
        }
    }

    pub fn iso_var(seed: u64, std: f64) -> Self {
        ExposurePolicy {
            mode: ExposureMode::Var,
            iso_mean: ISO_REF,
            iso_std: std,
            iso_floor: 1,
            seed,
        }
    }
}

/// Per-frame, per-camera ISO draw. Var subsets with different sigma but the
/// same seed scale the same unit-normal draw, so they differ only in
/// exposure spread.
pub fn sample_iso(policy: &ExposurePolicy, frame: usize, camera: usize) -> u32 {
    match policy.mode {
        ExposureMode::Const => (policy.iso_mean.round() as i64).max(policy.iso_floor as i64) as u32,
        ExposureMode::Var => {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            rng.set_stream(1 + (frame as u64) * 4099 + camera as u64);
            let z: f64 = rng.sample(StandardNormal);
            let iso = (policy.iso_mean + policy.iso_std * z).round() as i64;
            iso.max(policy.iso_floor as i64) as u32
        }
    }
}

/// Linear gain model anchored at the constant-subset ISO.
pub fn iso_to_exposure(iso: f64, iso_ref: f64) -> f64 {
    assert!(iso >= 1.0 && iso_ref >= 1.0);
    iso / iso_ref
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera: usize,
    pub iso: u32,
    pub exposure: f64,
    pub image: PathBuf,
    pub gt: PathBuf,
    pub mask: PathBuf,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub scene_path: PathBuf,
    pub calib_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub gamma_gen: f64,
    pub n_cameras: usize,
    pub records: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn view_id(&self, frame: usize, camera: usize) -> u32 {
        (frame * self.n_cameras + camera) as u32
    }

    /// Every referenced file must exist and every image must have the
    /// declared dimensions.
    pub fn check_integrity(&self) -> Result<(), DatagenError> {
        for rel in [&self.scene_path, &self.calib_path] {
            let p = self.root.join(rel);
            if !p.exists() {
                return Err(DatagenError::Manifest(
                    0,
                    format!("missing {}", p.display()),
                ));
            }
        }
        for r in &self.records {
            for rel in [&r.image, &r.gt, &r.mask] {
                let p = self.root.join(rel);
                let img = read_ppm(&p)?;
                if img.width != self.width || img.height != self.height {
                    return Err(DatagenError::Manifest(
                        0,
                        format!(
                            "{} is {}x{}, manifest says {}x{}",
                            p.display(),
                            img.width,
                            img.height,
                            self.width,
                            self.height
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Pre-quantization LDR formation for one view; exposed so tests can check
/// the exposure-ratio invariant without the 8-bit floor.
pub fn render_observation_f64(scene: &Scene, view: &CameraView, exposure: f64) -> ImageBuf {
    let hdr = render_hdr(scene, view, &RenderOptions::default());
    form_ldr(&hdr, exposure, GAMMA_GEN)
}

pub struct GenerateOutput {
    pub manifest: DatasetManifest,
    /// Front-camera coverage of frame 0; low values are a warning upstream.
    pub front_coverage: f64,
}

/// Render the dataset: for every (frame, camera) an exposed, tone-mapped,
/// 8-bit LDR image under the policy's ISO, the constant-ISO rendering of
/// the same frame as the GT split, an all-zero sky mask, the ground-truth
/// scene file, KITTI projection matrices, and the manifest.
pub fn generate(
    scene: &Scene,
    rig: &RigSpec,
    policy: &ExposurePolicy,
    out_dir: &Path,
) -> Result<GenerateOutput, DatagenError> {
    for sub in ["images", "gt", "masks"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let intr = rig.intrinsics();
    let gt_iso = (ISO_REF.round() as i64).max(policy.iso_floor as i64) as u32;
    let mut records = Vec::new();
    let mut views = Vec::new();
    let mask = ImageBuf::new(rig.width, rig.height);
    for frame in 0..rig.frame_count {
        let ego = rig.ego_translation(frame);
        for (cam, mount) in rig.cameras.iter().enumerate() {
            let pose = rig_camera_pose(mount, &ego);
            let iso = sample_iso(policy, frame, cam);
            let e = iso_to_exposure(iso as f64, ISO_REF);
            let view = CameraView {
                id: (frame * rig.cameras.len() + cam) as u32,
                pose,
                intrinsics: intr,
                exposure: e,
                gamma: GAMMA_GEN,
                iso: Some(iso as f64),
                observation: None,
            };
            let hdr = render_hdr(scene, &view, &RenderOptions::default());
            let stem = format!("f{frame:03}_c{cam}.ppm");
            let image = PathBuf::from("images").join(&stem);
            let gt = PathBuf::from("gt").join(&stem);
            let mask_path = PathBuf::from("masks").join(&stem);
            write_ppm(&form_ldr(&hdr, e, GAMMA_GEN), &out_dir.join(&image))?;
            let e_gt = iso_to_exposure(gt_iso as f64, ISO_REF);
            write_ppm(&form_ldr(&hdr, e_gt, GAMMA_GEN), &out_dir.join(&gt))?;
            write_ppm(&mask, &out_dir.join(&mask_path))?;
            records.push(FrameRecord {
                frame,
                camera: cam,
                iso,
                exposure: e,
                image,
                gt,
                mask: mask_path,
                pose,
            });
            views.push(view);
        }
    }

    let mut gt_scene = scene.clone();
    gt_scene.views = views;
    let scene_path = PathBuf::from("scene.txt");
    save_scene(&gt_scene, &out_dir.join(&scene_path))?;
    let calib_path = PathBuf::from("calib.txt");
    export_kitti_calib(&vec![intr; rig.cameras.len()], &out_dir.join(&calib_path))?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        scene_path,
        calib_path,
        width: rig.width,
        height: rig.height,
        hfov_deg: rig.hfov_deg,
        gamma_gen: GAMMA_GEN,
        n_cameras: rig.cameras.len(),
        records,
    };
    write_manifest(&manifest, &out_dir.join("manifest.txt"))?;

    let front_coverage = coverage(&gt_scene, &gt_scene.views[0], 0.5);
    Ok(GenerateOutput {
        manifest,
        front_coverage,
    })
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DatagenError> {
    let mut out = String::new();
    writeln!(out, "{MANIFEST_HEADER}").unwrap();
    writeln!(out, "scene {}", m.scene_path.display()).unwrap();
    writeln!(out, "calib {}", m.calib_path.display()).unwrap();
    writeln!(out, "size {} {}", m.width, m.height).unwrap();
    writeln!(out, "hfov {}", fmt_f64_exact(m.hfov_deg)).unwrap();
    writeln!(out, "gamma {}", fmt_f64_exact(m.gamma_gen)).unwrap();
    writeln!(out, "cameras {}", m.n_cameras).unwrap();
    for r in &m.records {
        let q = r.pose.rotation;
        let t = r.pose.translation;
        writeln!(
            out,
            "F {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            r.frame,
            r.camera,
            r.iso,
            fmt_f64_exact(r.exposure),
            r.image.display(),
            fmt_f64_exact(q.w),
            fmt_f64_exact(q.i),
            fmt_f64_exact(q.j),
            fmt_f64_exact(q.k),
            fmt_f64_exact(t.x),
            fmt_f64_exact(t.y),
            fmt_f64_exact(t.z),
            r.gt.display(),
            r.mask.display(),
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatagenError> {
    let text = fs::read_to_string(path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = text.lines().enumerate();
    let bad = |n: usize, msg: &str| DatagenError::Manifest(n + 1, msg.to_string());
    match lines.next() {
        Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
        _ => return Err(bad(0, "missing manifest header")),
    }
    let mut scene_path = None;
    let mut calib_path = None;
    let mut size = None;
    let mut hfov = None;
    let mut gamma = None;
    let mut cameras = None;
    let mut records = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let tag = it.next().unwrap();
        let rest: Vec<&str> = it.collect();
        let f = |s: &str| -> Result<f64, DatagenError> {
            s.parse().map_err(|_| bad(n, &format!("bad number '{s}'")))
        };
        match tag {
            "scene" => scene_path = Some(PathBuf::from(rest.join(" "))),
            "calib" => calib_path = Some(PathBuf::from(rest.join(" "))),
            "size" => {
                if rest.len() != 2 {
                    return Err(bad(n, "size needs width and height"));
                }
                size = Some((
                    rest[0].parse().map_err(|_| bad(n, "bad width"))?,
                    rest[1].parse().map_err(|_| bad(n, "bad height"))?,
                ));
            }
            "hfov" => hfov = Some(f(rest[0])?),
            "gamma" => gamma = Some(f(rest[0])?),
            "cameras" => cameras = Some(rest[0].parse().map_err(|_| bad(n, "bad camera count"))?),
            "F" => {
                if rest.len() != 14 {
                    return Err(bad(n, "frame record needs 14 fields"));
                }
                records.push(FrameRecord {
                    frame: rest[0].parse().map_err(|_| bad(n, "bad frame index"))?,
                    camera: rest[1].parse().map_err(|_| bad(n, "bad camera index"))?,
                    iso: rest[2].parse().map_err(|_| bad(n, "bad iso"))?,
                    exposure: f(rest[3])?,
                    image: PathBuf::from(rest[4]),
                    pose: CameraPose {
                        rotation: Quaternion::new(
                            f(rest[5])?,
                            f(rest[6])?,
                            f(rest[7])?,
                            f(rest[8])?,
                        ),
                        translation: Vector3::new(f(rest[9])?, f(rest[10])?, f(rest[11])?),
                    },
                    gt: PathBuf::from(rest[12]),
                    mask: PathBuf::from(rest[13]),
                });
            }
            other => return Err(bad(n, &format!("unknown tag '{other}'"))),
        }
    }
    let (width, height) = size.ok_or_else(|| bad(0, "missing size"))?;
    Ok(DatasetManifest {
        root,
        scene_path: scene_path.ok_or_else(|| bad(0, "missing scene path"))?,
        calib_path: calib_path.ok_or_else(|| bad(0, "missing calib path"))?,
        width,
        height,
        hfov_deg: hfov.ok_or_else(|| bad(0, "missing hfov"))?,
        gamma_gen: gamma.ok_or_else(|| bad(0, "missing gamma"))?,
        n_cameras: cameras.ok_or_else(|| bad(0, "missing camera count"))?,
        records,
    })
}

/// Load the dataset scene and attach each record's LDR image as the
/// matching view's observation.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Scene, DatagenError> {
    let mut scene = load_scene(&manifest.root.join(&manifest.scene_path))?;
    for r in &manifest.records {
        let id = manifest.view_id(r.frame, r.camera);
        let idx = scene
            .views
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| DatagenError::Manifest(0, format!("view {id} not in scene")))?;
        scene.views[idx].observation = Some(read_ppm(&manifest.root.join(&r.image))?);
    }
    Ok(scene)
}

/// KITTI-style 3x4 projection matrices, one `Pk:` row per camera, row-major,
/// zero translation column.
pub fn export_kitti_calib(cams: &[CameraIntrinsics], path: &Path) -> Result<(), DatagenError> {
    let mut out = String::new();
    for (k, c) in cams.iter().enumerate() {
        let row = [
            c.fx, 0.0, c.cx, 0.0, //
            0.0, c.fy, c.cy, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        ];
        let nums: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "P{k}: {}", nums.join(" ")).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

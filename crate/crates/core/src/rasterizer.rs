//! Differentiable tile rasterizer for 3D Gaussians.
//!
//! Forward: project to screen space, sort front to back, alpha-composite
//! per pixel in linear radiance. Backward: replay the forward walk and
//! accumulate gradients for colors and opacities only; geometry is frozen.

use nalgebra::Matrix2x3;
use rayon::prelude::*;

use crate::image::ImageBuf;
use crate::scene::{CameraView, Scene};

pub const TILE: usize = 16;
/// Screen-space low-pass: added to the 2D covariance diagonal (px^2).
pub const LOWPASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Front-to-back accumulation stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;
pub const NEAR_PLANE: f64 = 0.01;
/// Footprint radius in standard deviations of the projected covariance.
pub const FOOTPRINT_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub source_index: usize,
    /// Footprint center in pixel coordinates (pixel i centered at i).
    pub px: f64,
    pub py: f64,
    pub depth: f64,
    /// Inverse 2D covariance (a, b, c) for [[a, b], [b, c]].
    pub inv_cov: [f64; 3],
    /// 3 sigma of the largest 2D eigenvalue, pixels.
    pub radius: f64,
    pub opacity: f64,
    /// Radiance clamped non-negative for blending; raw sign kept for the
    /// gradient gate.
    pub color: [f64; 3],
    pub color_positive: [bool; 3],
}

/// Projects every Gaussian into the view, culls against the near plane and
/// the padded frustum, and returns the survivors sorted by depth (ties by
/// source index).
pub fn project(scene: &Scene, view: &CameraView) -> Vec<ProjectedGaussian> {
    let rot = view.pose.rotation_matrix();
    let it = &view.intrinsics;
    let w = it.width as f64;
    let h = it.height as f64;
    let mut out = Vec::with_capacity(scene.gaussians.len());
    for (idx, g) in scene.gaussians.iter().enumerate() {
        let p_cam = rot * g.mean + view.pose.translation;
        let z = p_cam.z;
        if z <= NEAR_PLANE {
            continue;
        }
        let px = it.fx * p_cam.x / z + it.cx;
        let py = it.fy * p_cam.y / z + it.cy;

        let cov_cam = rot * g.covariance() * rot.transpose();
        let j = Matrix2x3::new(
            it.fx / z,
            0.0,
            -it.fx * p_cam.x / (z * z),
            0.0,
            it.fy / z,
            -it.fy * p_cam.y / (z * z),
        );
        let cov2 = j * cov_cam * j.transpose();
        let a = cov2[(0, 0)] + LOWPASS;
        let b = cov2[(0, 1)];
        let c = cov2[(1, 1)] + LOWPASS;
        let det = a * c - b * b;
        if !(det > 1e-12) || !det.is_finite() {
            continue;
        }
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let lambda_max = mid + disc;
        let radius = FOOTPRINT_SIGMA * lambda_max.sqrt();
        if px < -radius || px > w - 1.0 + radius || py < -radius || py > h - 1.0 + radius {
            continue;
        }
        out.push(ProjectedGaussian {
            source_index: idx,
            px,
            py,
            depth: z,
            inv_cov: [c / det, -b / det, a / det],
            radius,
            opacity: g.opacity,
            color: [g.color.x.max(0.0), g.color.y.max(0.0), g.color.z.max(0.0)],
            color_positive: [g.color.x > 0.0, g.color.y > 0.0, g.color.z > 0.0],
        });
    }
    out.sort_by(|l, r| {
        l.depth
            .partial_cmp(&r.depth)
            .unwrap()
            .then(l.source_index.cmp(&r.source_index))
    });
    out
}

struct TileGrid {
    tiles_x: usize,
    /// Indices into the projected list, depth order preserved per tile.
    lists: Vec<Vec<u32>>,
}

fn build_tile_lists(projected: &[ProjectedGaussian], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, pg) in projected.iter().enumerate() {
        let x0 = ((pg.px - pg.radius).floor().max(0.0)) as usize;
        let y0 = ((pg.py - pg.radius).floor().max(0.0)) as usize;
        let x1 = (pg.px + pg.radius).ceil().min(width as f64 - 1.0);
        let y1 = (pg.py + pg.radius).ceil().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                lists[ty * tiles_x + tx].push(pi as u32);
            }
        }
    }
    TileGrid { tiles_x, lists }
}

#[inline]
fn gaussian_weight(pg: &ProjectedGaussian, x: f64, y: f64) -> f64 {
    let dx = x - pg.px;
    let dy = y - pg.py;
    let q = pg.inv_cov[0] * dx * dx + 2.0 * pg.inv_cov[1] * dx * dy + pg.inv_cov[2] * dy * dy;
    (-0.5 * q).exp()
}

/// Forward render in linear radiance. Deterministic for any thread count:
/// each pixel is owned by exactly one tile.
pub fn render_hdr(scene: &Scene, view: &CameraView, opts: &RenderOptions) -> ImageBuf {
    let projected = project(scene, view);
    let width = view.intrinsics.width;
    let height = view.intrinsics.height;
    let grid = build_tile_lists(&projected, width, height);
    let bg = opts.background;

    let tile_results: Vec<Vec<[f64; 3]>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tidx| {
            let tx = tidx % grid.tiles_x;
            let ty = tidx / grid.tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(width);
            let y1 = (y0 + TILE).min(height);
            let list = &grid.lists[tidx];
            let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (fx, fy) = (x as f64, y as f64);
                    let mut acc = [0.0f64; 3];
                    let mut t = 1.0f64;
                    for &pi in list {
                        let pg = &projected[pi as usize];
                        let dx = fx - pg.px;
                        let dy = fy - pg.py;
                        if dx.abs() > pg.radius || dy.abs() > pg.radius {
                            continue;
                        }
                        let alpha = (pg.opacity * gaussian_weight(pg, fx, fy)).min(ALPHA_MAX);
                        acc[0] += t * alpha * pg.color[0];
                        acc[1] += t * alpha * pg.color[1];
                        acc[2] += t * alpha * pg.color[2];
                        t *= 1.0 - alpha;
                        if t < T_MIN {
                            break;
                        }
                    }
                    acc[0] += t * bg[0];
                    acc[1] += t * bg[1];
                    acc[2] += t * bg[2];
                    pixels.push(acc);
                }
            }
            pixels
        })
        .collect();

    let mut img = ImageBuf::new(width, height);
    for (tidx, pixels) in tile_results.iter().enumerate() {
        let tx = tidx % grid.tiles_x;
        let ty = tidx / grid.tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let x1 = (x0 + TILE).min(width);
        let mut it = pixels.iter();
        for y in y0..(y0 + TILE).min(height) {
            for x in x0..x1 {
                img.set(x, y, *it.next().unwrap());
            }
        }
    }
    img
}

/// Per-Gaussian gradients, indexed like `scene.gaussians`.
#[derive(Debug, Clone)]
pub struct RasterGrads {
    pub d_color: Vec<[f64; 3]>,
    /// With respect to the activated opacity in (0, 1). Zero where the
    /// alpha clamp was engaged.
    pub d_opacity: Vec<f64>,
}

impl RasterGrads {
    pub fn zeros(n: usize) -> Self {
        RasterGrads {
            d_color: vec![[0.0; 3]; n],
            d_opacity: vec![0.0; n],
        }
    }

    pub fn add_assign(&mut self, other: &RasterGrads) {
        for (a, b) in self.d_color.iter_mut().zip(&other.d_color) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.d_opacity.iter_mut().zip(&other.d_opacity) {
            *a += b;
        }
    }
}

struct Contribution {
    list_pos: u32,
    alpha: f64,
    weight: f64,
    t_before: f64,
}

/// Replays the forward walk and backpropagates `upstream` (dLoss/dpixel in
/// linear radiance) into per-Gaussian color and opacity gradients.
/// Gaussians past the early-termination point get exactly zero.
pub fn render_hdr_backward(
    scene: &Scene,
    view: &CameraView,
    opts: &RenderOptions,
    upstream: &ImageBuf,
) -> RasterGrads {
    let width = view.intrinsics.width;
    let height = view.intrinsics.height;
    assert!(
        upstream.width == width && upstream.height == height,
        "upstream gradient dimensions must match the view"
    );
    let projected = project(scene, view);
    let grid = build_tile_lists(&projected, width, height);
    let bg = opts.background;

    // Per-tile accumulation keyed by position in the tile list, merged in
    // tile order so the reduction is deterministic under parallelism.
    let tile_grads: Vec<(usize, Vec<[f64; 4]>)> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tidx| {
            let list = &grid.lists[tidx];
            let mut local = vec![[0.0f64; 4]; list.len()];
            let tx = tidx % grid.tiles_x;
            let ty = tidx / grid.tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(width);
            let y1 = (y0 + TILE).min(height);
            let mut stack: Vec<Contribution> = Vec::with_capacity(list.len());
            for y in y0..y1 {
                for x in x0..x1 {
                    let up = upstream.get(x, y);
                    if up == [0.0, 0.0, 0.0] {
                        continue;
                    }
                    let (fx, fy) = (x as f64, y as f64);
                    stack.clear();
                    let mut t = 1.0f64;
                    for (lpos, &pi) in list.iter().enumerate() {
                        let pg = &projected[pi as usize];
                        let dx = fx - pg.px;
                        let dy = fy - pg.py;
                        if dx.abs() > pg.radius || dy.abs() > pg.radius {
                            continue;
                        }
                        let weight = gaussian_weight(pg, fx, fy);
                        let raw = pg.opacity * weight;
                        let alpha = raw.min(ALPHA_MAX);
                        stack.push(Contribution {
                            list_pos: lpos as u32,
                            alpha,
                            weight: if raw < ALPHA_MAX { weight } else { 0.0 },
                            t_before: t,
                        });
                        t *= 1.0 - alpha;
                        if t < T_MIN {
                            break;
                        }
                    }
                    // Suffix radiance behind each contribution, including
                    // the background term.
                    let mut suffix = [t * bg[0], t * bg[1], t * bg[2]];
                    for contrib in stack.iter().rev() {
                        let pg = &projected[list[contrib.list_pos as usize] as usize];
                        let acc = &mut local[contrib.list_pos as usize];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            let through = contrib.t_before * contrib.alpha;
                            if pg.color_positive[c] {
                                acc[c] += up[c] * through;
                            }
                            d_alpha += up[c]
                                * (pg.color[c] * contrib.t_before
                                    - suffix[c] / (1.0 - contrib.alpha));
                            suffix[c] += pg.color[c] * through;
                        }
                        acc[3] += d_alpha * contrib.weight;
                    }
                }
            }
            (tidx, local)
        })
        .collect();

    let mut grads = RasterGrads::zeros(scene.gaussians.len());
    for (tidx, local) in &tile_grads {
        let list = &grid.lists[*tidx];
        for (lpos, acc) in local.iter().enumerate() {
            let src = projected[list[lpos] as usize].source_index;
            grads.d_color[src][0] += acc[0];
            grads.d_color[src][1] += acc[1];
            grads.d_color[src][2] += acc[2];
            grads.d_opacity[src] += acc[3];
        }
    }
    grads
}

/// Fraction of pixels whose final transmittance fell below `threshold`;
/// the coverage measure used by dataset layout checks.
pub fn coverage(scene: &Scene, view: &CameraView, threshold: f64) -> f64 {
    let projected = project(scene, view);
    let width = view.intrinsics.width;
    let height = view.intrinsics.height;
    let grid = build_tile_lists(&projected, width, height);
    let mut covered = 0usize;
    for tidx in 0..grid.lists.len() {
        let tx = tidx % grid.tiles_x;
        let ty = tidx / grid.tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        for y in y0..(y0 + TILE).min(height) {
            for x in x0..(x0 + TILE).min(width) {
                let (fx, fy) = (x as f64, y as f64);
                let mut t = 1.0f64;
                for &pi in &grid.lists[tidx] {
                    let pg = &projected[pi as usize];
                    let dx = fx - pg.px;
                    let dy = fy - pg.py;
                    if dx.abs() > pg.radius || dy.abs() > pg.radius {
                        continue;
                    }
                    let alpha = (pg.opacity * gaussian_weight(pg, fx, fy)).min(ALPHA_MAX);
                    t *= 1.0 - alpha;
                    if t < threshold {
                        break;
                    }
                }
                if t < threshold {
                    covered += 1;
                }
            }
        }
    }
    covered as f64 / (width * height) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{CameraIntrinsics, CameraPose, CameraView, Gaussian};
    use nalgebra::{Quaternion, Vector3};

    fn test_view(width: usize, height: usize, fx: f64) -> CameraView {
        CameraView {
            id: 0,
            pose: CameraPose::identity(),
            intrinsics: CameraIntrinsics {
                width,
                height,
                fx,
                fy: fx,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
            },
            exposure: 1.0,
            gamma: 2.2,
            iso: None,
            observation: None,
        }
    }

    fn iso_gaussian(mean: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian {
            mean,
            rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::new(scale, scale, scale),
            opacity,
            color: Vector3::new(color[0], color[1], color[2]),
        }
    }

    fn scene_of(gaussians: Vec<Gaussian>) -> Scene {
        Scene {
            gaussians,
            views: vec![],
        }
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, 2.0),
            0.05,
            0.5,
            [1.0, 1.0, 1.0],
        )]);
        let view = test_view(64, 64, 100.0);
        let proj = project(&scene, &view);
        assert_eq!(proj.len(), 1);
        assert!((proj[0].px - view.intrinsics.cx).abs() < 1e-12);
        assert!((proj[0].py - view.intrinsics.cy).abs() < 1e-12);
        assert!((proj[0].depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projected_covariance_matches_hand_value() {
        // Isotropic 0.1 m at depth 2, f=100: J Sigma J^T = (100/2)^2 * 0.01
        // = 25 on the diagonal, plus the 0.3 low-pass.
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, 2.0),
            0.1,
            0.5,
            [1.0, 1.0, 1.0],
        )]);
        let view = test_view(64, 64, 100.0);
        let proj = project(&scene, &view);
        let a = 25.0 + LOWPASS;
        let expect_inv = 1.0 / a;
        assert!((proj[0].inv_cov[0] - expect_inv).abs() < 1e-9);
        assert!(proj[0].inv_cov[1].abs() < 1e-12);
        assert!((proj[0].inv_cov[2] - expect_inv).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, -1.0),
            0.1,
            0.5,
            [1.0, 1.0, 1.0],
        )]);
        let view = test_view(16, 16, 20.0);
        assert!(project(&scene, &view).is_empty());
    }

    #[test]
    fn far_off_frustum_is_culled() {
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(100.0, 0.0, 2.0),
            0.01,
            0.5,
            [1.0, 1.0, 1.0],
        )]);
        let view = test_view(16, 16, 20.0);
        assert!(project(&scene, &view).is_empty());
    }

    #[test]
    fn two_term_compositing_hand_value() {
        // Front alpha 0.5 red over back alpha ~0.99 green at the footprint
        // center: out = (0.5, 0.495, 0) when weights are exactly 1 there.
        // Huge flat footprints make the center weight 1 to double precision.
        let front = iso_gaussian(Vector3::new(0.0, 0.0, 1.0), 50.0, 0.5, [1.0, 0.0, 0.0]);
        let back = iso_gaussian(Vector3::new(0.0, 0.0, 2.0), 50.0, 0.99, [0.0, 1.0, 0.0]);
        let scene = scene_of(vec![front, back]);
        let view = test_view(17, 17, 8.0);
        let img = render_hdr(&scene, &view, &RenderOptions::default());
        let center = img.get(8, 8);
        assert!((center[0] - 0.5).abs() < 1e-9, "{center:?}");
        assert!((center[1] - 0.495).abs() < 1e-9, "{center:?}");
        assert_eq!(center[2], 0.0);
    }

    #[test]
    fn uncovered_pixels_take_background() {
        let scene = scene_of(vec![]);
        let view = test_view(8, 8, 10.0);
        let img = render_hdr(
            &scene,
            &view,
            &RenderOptions {
                background: [0.25, 0.5, 0.75],
            },
        );
        assert_eq!(img.get(3, 3), [0.25, 0.5, 0.75]);
    }

    #[test]
    fn output_linear_in_colors() {
        let scene = scene_of(vec![
            iso_gaussian(Vector3::new(0.1, -0.05, 1.5), 0.3, 0.7, [0.8, 0.2, 0.1]),
            iso_gaussian(Vector3::new(-0.2, 0.1, 2.5), 0.4, 0.5, [0.1, 0.9, 0.4]),
            iso_gaussian(Vector3::new(0.0, 0.2, 3.0), 0.5, 0.9, [0.3, 0.3, 1.2]),
        ]);
        let view = test_view(32, 24, 30.0);
        let base = render_hdr(&scene, &view, &RenderOptions::default());
        let mut scaled = scene.clone();
        for g in &mut scaled.gaussians {
            g.color *= 3.0;
        }
        let tripled = render_hdr(&scaled, &view, &RenderOptions::default());
        for (a, b) in base.data.iter().zip(&tripled.data) {
            for c in 0..3 {
                let want = 3.0 * a[c];
                if want == 0.0 {
                    assert_eq!(b[c], 0.0);
                } else {
                    assert!(((b[c] - want) / want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn energy_bounded_by_max_color() {
        let scene = scene_of(vec![
            iso_gaussian(Vector3::new(0.0, 0.0, 1.0), 0.5, 0.9, [2.0, 0.5, 0.1]),
            iso_gaussian(Vector3::new(0.1, 0.0, 1.5), 0.5, 0.9, [1.5, 1.9, 0.2]),
        ]);
        let view = test_view(32, 32, 30.0);
        let img = render_hdr(&scene, &view, &RenderOptions::default());
        for px in &img.data {
            assert!(px[0] <= 2.0 + 1e-12 && px[1] <= 1.9 + 1e-12 && px[2] <= 0.2 + 1e-12);
            assert!(px.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn equal_depth_orders_by_source_index() {
        let a = iso_gaussian(Vector3::new(0.0, 0.0, 2.0), 50.0, 0.5, [1.0, 0.0, 0.0]);
        let b = iso_gaussian(Vector3::new(0.0, 0.0, 2.0), 50.0, 0.5, [0.0, 1.0, 0.0]);
        let scene = scene_of(vec![a, b]);
        let view = test_view(9, 9, 8.0);
        let img = render_hdr(&scene, &view, &RenderOptions::default());
        let center = img.get(4, 4);
        // a first: 0.5 red, then 0.5*0.5 green
        assert!((center[0] - 0.5).abs() < 1e-9);
        assert!((center[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn render_deterministic_across_thread_counts() {
        let scene = scene_of(
            (0..40)
                .map(|i| {
                    let f = i as f64;
                    iso_gaussian(
                        Vector3::new((f * 0.37).sin(), (f * 0.21).cos() * 0.5, 1.5 + f * 0.1),
                        0.1 + 0.05 * (f * 0.5).sin().abs(),
                        0.3 + 0.6 * ((f * 0.77).sin() * 0.5 + 0.5),
                        [f / 40.0, 1.0 - f / 40.0, 0.5],
                    )
                })
                .collect(),
        );
        let view = test_view(48, 40, 40.0);
        let opts = RenderOptions::default();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let img1 = pool1.install(|| render_hdr(&scene, &view, &opts));
        let img4 = pool4.install(|| render_hdr(&scene, &view, &opts));
        assert_eq!(img1.data, img4.data);

        let upstream = ImageBuf::filled(48, 40, [1.0, -0.5, 0.25]);
        let g1 = pool1.install(|| render_hdr_backward(&scene, &view, &opts, &upstream));
        let g4 = pool4.install(|| render_hdr_backward(&scene, &view, &opts, &upstream));
        assert_eq!(g1.d_color, g4.d_color);
        assert_eq!(g1.d_opacity, g4.d_opacity);
    }

    #[test]
    fn repeated_render_bit_identical() {
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, 2.0),
            0.3,
            0.8,
            [0.9, 0.4, 0.2],
        )]);
        let view = test_view(32, 32, 30.0);
        let a = render_hdr(&scene, &view, &RenderOptions::default());
        let b = render_hdr(&scene, &view, &RenderOptions::default());
        assert_eq!(a.data, b.data);
    }

    /// Scalar loss sum(render * upstream-pattern); its gradient via the
    /// backward pass must match central finite differences.
    #[test]
    fn backward_matches_finite_differences() {
        let base = scene_of(vec![
            iso_gaussian(Vector3::new(0.05, -0.08, 1.4), 0.25, 0.62, [0.7, 0.3, 0.45]),
            iso_gaussian(Vector3::new(-0.15, 0.1, 2.0), 0.35, 0.41, [0.2, 0.8, 0.3]),
            iso_gaussian(Vector3::new(0.1, 0.15, 2.6), 0.4, 0.77, [0.5, 0.1, 0.9]),
        ]);
        let view = test_view(24, 20, 25.0);
        let opts = RenderOptions {
            background: [0.05, 0.05, 0.05],
        };
        let mut upstream = ImageBuf::new(24, 20);
        for (i, px) in upstream.data.iter_mut().enumerate() {
            let f = i as f64;
            *px = [(f * 0.1).sin(), (f * 0.07).cos(), 0.3];
        }
        let loss = |scene: &Scene| -> f64 {
            let img = render_hdr(scene, &view, &opts);
            img.data
                .iter()
                .zip(&upstream.data)
                .map(|(p, u)| p[0] * u[0] + p[1] * u[1] + p[2] * u[2])
                .sum()
        };
        let grads = render_hdr_backward(&base, &view, &opts, &upstream);
        let h = 1e-5;
        for gi in 0..base.gaussians.len() {
            for c in 0..3 {
                let mut plus = base.clone();
                plus.gaussians[gi].color[c] += h;
                let mut minus = base.clone();
                minus.gaussians[gi].color[c] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.d_color[gi][c];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "color g{gi} c{c}: fd={fd} analytic={an}"
                );
            }
            let mut plus = base.clone();
            plus.gaussians[gi].opacity += h;
            let mut minus = base.clone();
            minus.gaussians[gi].opacity -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.d_opacity[gi];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "opacity g{gi}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn clamped_alpha_blocks_opacity_gradient() {
        // weight 1 at center and opacity near 1 clamps alpha at 0.99;
        // the opacity gradient there must vanish.
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, 1.0),
            80.0,
            0.995,
            [1.0, 1.0, 1.0],
        )]);
        let view = test_view(9, 9, 8.0);
        let upstream = ImageBuf::filled(9, 9, [1.0, 1.0, 1.0]);
        let grads = render_hdr_backward(&scene, &view, &RenderOptions::default(), &upstream);
        assert_eq!(grads.d_opacity[0], 0.0);
        assert!(grads.d_color[0][0] > 0.0);
    }

    #[test]
    fn negative_color_channel_blocked_and_clamped() {
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, 1.0),
            1.0,
            0.8,
            [-0.5, 0.5, 0.0],
        )]);
        let view = test_view(9, 9, 8.0);
        let img = render_hdr(&scene, &view, &RenderOptions::default());
        // negative radiance is clamped out of the blend
        assert_eq!(img.get(4, 4)[0], 0.0);
        assert!(img.get(4, 4)[1] > 0.0);
        let upstream = ImageBuf::filled(9, 9, [1.0, 1.0, 1.0]);
        let grads = render_hdr_backward(&scene, &view, &RenderOptions::default(), &upstream);
        assert_eq!(grads.d_color[0][0], 0.0);
        assert!(grads.d_color[0][1] > 0.0);
    }

    #[test]
    fn coverage_counts_opaque_fraction() {
        let scene = scene_of(vec![iso_gaussian(
            Vector3::new(0.0, 0.0, 1.0),
            60.0,
            0.95,
            [1.0, 1.0, 1.0],
        )]);
        let view = test_view(16, 16, 10.0);
        assert!(coverage(&scene, &view, 0.5) > 0.99);
        let empty = scene_of(vec![]);
        assert_eq!(coverage(&empty, &view, 0.5), 0.0);
    }
}

//! Forward splatting renderer.
//!
//! Gaussians are projected with the local affine (EWA) approximation, sorted
//! once by camera-space depth (ties broken by source index), binned into
//! 16×16 tiles and alpha-composited front to back per pixel. A naive
//! renderer that sorts fragments independently for every pixel is kept as
//! the reference the tiled path is checked against.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::image::{Image, Plane};
use crate::scene::{CameraView, Gaussian, Scene, SceneError};

pub const NEAR_PLANE: f64 = 0.2;
/// Added to both diagonal entries of every screen-space covariance, px².
pub const COV_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const TILE_SIZE: usize = 16;
/// Guard band for projected centers relative to the frustum half-angle
/// tangents.
pub const FRUSTUM_SLACK: f64 = 1.3;
/// Default splat size for point maps, meters: about half the spacing of a
/// dense scan, so neighbouring splats just overlap.
pub const DEFAULT_POINT_SIGMA: f64 = 0.25;
/// Culling bound in standard deviations of the screen footprint.
pub const CULL_SIGMA: f64 = 3.0;
const DEPTH_WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Stop compositing once transmittance drops below this; 0 disables.
    pub termination: f64,
    /// A fragment only touches pixels within this many standard deviations
    /// (Mahalanobis radius). `None` evaluates every Gaussian everywhere.
    pub footprint_sigma: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            termination: 1e-4,
            footprint_sigma: Some(3.0),
        }
    }
}

impl RenderOptions {
    /// Smooth configuration for gradient checks: no early termination and
    /// no footprint cutoff.
    pub fn exact() -> Self {
        Self {
            termination: 0.0,
            footprint_sigma: None,
        }
    }

    fn cutoff_power(&self) -> f64 {
        self.footprint_sigma.map_or(f64::INFINITY, |s| s * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mu2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Upper triangle `(a, b, c)` of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub source_index: usize,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Mean in camera coordinates.
    pub cam_point: Vector3<f64>,
    /// Axis-aligned half extents of the 3σ footprint, px.
    pub half_extent: [f64; 2],
}

/// Whether the image-plane slopes of camera-space point `t` lie within
/// 1.3× the frustum. Centers outside this guard band are culled: close to
/// the near plane their linearized footprints become unboundedly large.
pub(crate) fn in_guard_band(cam: &CameraView, t: &Vector3<f64>) -> bool {
    let k = &cam.intrinsics;
    let (u, v) = (t.x / t.z, t.y / t.z);
    u >= -FRUSTUM_SLACK * k.cx / k.fx
        && u <= FRUSTUM_SLACK * (cam.width as f64 - k.cx) / k.fx
        && v >= -FRUSTUM_SLACK * k.cy / k.fy
        && v <= FRUSTUM_SLACK * (cam.height as f64 - k.cy) / k.fy
}

/// Projection Jacobian of the pinhole model at camera-space point `t`.
pub(crate) fn projection_jacobian(cam: &CameraView, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &cam.intrinsics;
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * t.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * t.y * iz * iz,
    )
}

/// Projects one Gaussian. Returns `None` when it is behind the near plane,
/// its center is outside the guard band, or its 3σ footprint misses the
/// image.
pub fn project(g: &Gaussian, cam: &CameraView, source_index: usize) -> Option<ProjectedGaussian> {
    let w = cam.camera_from_world_rotation();
    project_with(g, cam, &w, source_index)
}

fn project_with(g: &Gaussian, cam: &CameraView, w: &Matrix3<f64>, source_index: usize) -> Option<ProjectedGaussian> {
    let t = w * (g.mu - cam.center());
    if !(t.z > NEAR_PLANE) || !in_guard_band(cam, &t) {
        return None;
    }
    let k = &cam.intrinsics;
    let mu2d = Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
    let j = projection_jacobian(cam, &t);
    let sigma_cam = w * g.covariance() * w.transpose();
    let mut cov2d = j * sigma_cam * j.transpose();
    cov2d[(0, 0)] += COV_DILATION;
    cov2d[(1, 1)] += COV_DILATION;
    // Keep the matrix exactly symmetric.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) || !mu2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    let half_extent = [
        CULL_SIGMA * cov2d[(0, 0)].sqrt(),
        CULL_SIGMA * cov2d[(1, 1)].sqrt(),
    ];
    let (wd, ht) = (cam.width as f64, cam.height as f64);
    if mu2d.x + half_extent[0] < 0.0
        || mu2d.x - half_extent[0] > wd
        || mu2d.y + half_extent[1] < 0.0
        || mu2d.y - half_extent[1] > ht
    {
        return None;
    }
    Some(ProjectedGaussian {
        mu2d,
        cov2d,
        conic: [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det],
        depth: t.z,
        source_index,
        opacity: g.opacity,
        color: [g.color.x, g.color.y, g.color.z],
        cam_point: t,
        half_extent,
    })
}

/// Projects all Gaussians and returns the visible ones in canonical
/// compositing order (depth, then source index).
pub fn project_all(gaussians: &[Gaussian], cam: &CameraView) -> Vec<ProjectedGaussian> {
    let w = cam.camera_from_world_rotation();
    let mut out: Vec<ProjectedGaussian> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_with(g, cam, &w, i))
        .collect();
    out.sort_by(fragment_order);
    out
}

fn fragment_order(a: &ProjectedGaussian, b: &ProjectedGaussian) -> std::cmp::Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.source_index.cmp(&b.source_index))
}

/// One composited fragment at a pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Fragment {
    /// Index into the projected list.
    pub proj: u32,
    pub alpha: f64,
    /// Unweighted Gaussian falloff `exp(-q/2)`.
    pub falloff: f64,
    pub clamped: bool,
    /// Transmittance in front of this fragment.
    pub transmittance: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Walks the depth-ordered candidates at pixel `(px, py)` and records every
/// fragment that gets composited, honoring the cutoff and early termination.
pub(crate) fn collect_fragments(
    px: usize,
    py: usize,
    candidates: impl Iterator<Item = u32>,
    projected: &[ProjectedGaussian],
    opts: &RenderOptions,
    out: &mut Vec<Fragment>,
) {
    out.clear();
    let cx = px as f64 + 0.5;
    let cy = py as f64 + 0.5;
    let cutoff = opts.cutoff_power();
    let mut t = 1.0;
    for idx in candidates {
        let p = &projected[idx as usize];
        let dx = cx - p.mu2d.x;
        let dy = cy - p.mu2d.y;
        let [a, b, c] = p.conic;
        let power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if power > cutoff {
            continue;
        }
        let falloff = (-0.5 * power).exp();
        let raw = p.opacity * falloff;
        let clamped = raw > ALPHA_MAX;
        let alpha = if clamped { ALPHA_MAX } else { raw };
        out.push(Fragment {
            proj: idx,
            alpha,
            falloff,
            clamped,
            transmittance: t,
            dx,
            dy,
        });
        t *= 1.0 - alpha;
        if t < opts.termination {
            break;
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelValue {
    rgb: [f64; 3],
    alpha: f64,
    depth: f64,
}

fn shade(frags: &[Fragment], projected: &[ProjectedGaussian], mut contrib: impl FnMut(u32, f64)) -> PixelValue {
    let mut v = PixelValue::default();
    let mut depth_sum = 0.0;
    for f in frags {
        let p = &projected[f.proj as usize];
        let w = f.alpha * f.transmittance;
        for k in 0..3 {
            v.rgb[k] += w * p.color[k];
        }
        v.alpha += w;
        depth_sum += w * p.depth;
        contrib(f.proj, w);
    }
    v.depth = depth_sum / v.alpha.max(DEPTH_WEIGHT_FLOOR);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-normalized expected depth, meters.
    pub depth: Plane,
    pub alpha: Plane,
    /// Per input Gaussian: total compositing weight summed over pixels.
    pub contrib: Vec<f64>,
}

impl RenderOutput {
    fn empty(cam: &CameraView, n: usize) -> Self {
        let (w, h) = (cam.width as usize, cam.height as usize);
        Self {
            color: Image::new(w, h),
            depth: Plane::new(w, h),
            alpha: Plane::new(w, h),
            contrib: vec![0.0; n],
        }
    }

    fn write(&mut self, x: usize, y: usize, v: &PixelValue) {
        let i = y * self.color.width + x;
        self.color.data[3 * i..3 * i + 3].copy_from_slice(&v.rgb);
        self.alpha.data[i] = v.alpha;
        self.depth.data[i] = v.depth;
    }
}

/// Tile binning of a sorted projected list.
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn build(projected: &[ProjectedGaussian], cam: &CameraView, opts: &RenderOptions) -> Self {
        let (w, h) = (cam.width as usize, cam.height as usize);
        let tiles_x = w.div_ceil(TILE_SIZE);
        let tiles_y = h.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        let ts = TILE_SIZE as f64;
        for (i, p) in projected.iter().enumerate() {
            let (x0, x1, y0, y1) = match opts.footprint_sigma {
                Some(s) => {
                    let ex = s * p.cov2d[(0, 0)].sqrt();
                    let ey = s * p.cov2d[(1, 1)].sqrt();
                    let clampt = |v: f64, n: usize| (v / ts).floor().clamp(0.0, (n - 1) as f64) as usize;
                    if p.mu2d.x + ex < 0.0 || p.mu2d.x - ex > w as f64 || p.mu2d.y + ey < 0.0 || p.mu2d.y - ey > h as f64 {
                        continue;
                    }
                    (
                        clampt(p.mu2d.x - ex, tiles_x),
                        clampt(p.mu2d.x + ex, tiles_x),
                        clampt(p.mu2d.y - ey, tiles_y),
                        clampt(p.mu2d.y + ey, tiles_y),
                    )
                }
                None => (0, tiles_x - 1, 0, tiles_y - 1),
            };
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Self { tiles_x, lists }
    }

    pub fn tile_rect(&self, tile: usize, cam: &CameraView) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (
            x0..(x0 + TILE_SIZE).min(cam.width as usize),
            y0..(y0 + TILE_SIZE).min(cam.height as usize),
        )
    }
}

/// Renders world-frame Gaussians with the tiled renderer.
pub fn render_gaussians(gaussians: &[Gaussian], cam: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let projected = project_all(gaussians, cam);
    let bins = TileBins::build(&projected, cam, opts);

    struct TileResult {
        pixels: Vec<(usize, usize, PixelValue)>,
        contrib: Vec<(u32, f64)>,
    }

    let results: Vec<TileResult> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let (xs, ys) = bins.tile_rect(tile, cam);
            let mut local = vec![0.0; list.len()];
            let mut frags = Vec::new();
            let mut pixels = Vec::with_capacity(xs.len() * ys.len());
            // Position of each projected index inside this tile's list.
            for y in ys.clone() {
                for x in xs.clone() {
                    collect_fragments(x, y, list.iter().copied(), &projected, opts, &mut frags);
                    let v = shade(&frags, &projected, |_, _| {});
                    pixels.push((x, y, v));
                    accumulate_local(&frags, list, &mut local);
                }
            }
            let contrib = list
                .iter()
                .zip(local)
                .filter(|(_, c)| *c != 0.0)
                .map(|(&i, c)| (i, c))
                .collect();
            TileResult { pixels, contrib }
        })
        .collect();

    let mut out = RenderOutput::empty(cam, gaussians.len());
    for r in &results {
        for (x, y, v) in &r.pixels {
            out.write(*x, *y, v);
        }
        for &(i, c) in &r.contrib {
            out.contrib[projected[i as usize].source_index] += c;
        }
    }
    out
}

/// Adds fragment weights into a tile-local accumulator indexed by list
/// position. Fragments appear in list order, so a forward scan suffices.
fn accumulate_local(frags: &[Fragment], list: &[u32], local: &mut [f64]) {
    let mut pos = 0;
    for f in frags {
        while list[pos] != f.proj {
            pos += 1;
        }
        local[pos] += f.alpha * f.transmittance;
    }
}

/// Reference renderer: for every pixel, gathers all projected Gaussians,
/// sorts them by (depth, source index) and composites. Slow; used as the
/// oracle for the tiled path.
pub fn render_naive(gaussians: &[Gaussian], cam: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let w = cam.camera_from_world_rotation();
    let projected: Vec<ProjectedGaussian> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_with(g, cam, &w, i))
        .collect();
    let mut out = RenderOutput::empty(cam, gaussians.len());
    let mut frags = Vec::new();
    let mut order: Vec<u32> = Vec::new();
    for y in 0..cam.height as usize {
        for x in 0..cam.width as usize {
            order.clear();
            order.extend(0..projected.len() as u32);
            order.sort_by(|&a, &b| fragment_order(&projected[a as usize], &projected[b as usize]));
            collect_fragments(x, y, order.iter().copied(), &projected, opts, &mut frags);
            let v = shade(&frags, &projected, |i, wgt| {
                out.contrib[projected[i as usize].source_index] += wgt;
            });
            out.write(x, y, &v);
        }
    }
    out
}

/// One composited fragment as seen from outside the renderer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub source_index: usize,
    pub alpha: f64,
    /// Transmittance in front of the fragment.
    pub transmittance: f64,
    /// Compositing weight `alpha * transmittance`.
    pub weight: f64,
}

/// Front-to-back fragment lists for every pixel, row major. Uses the same
/// ordering and cutoffs as the renderers.
pub fn pixel_traces(gaussians: &[Gaussian], cam: &CameraView, opts: &RenderOptions) -> Vec<Vec<TraceEntry>> {
    let projected = project_all(gaussians, cam);
    let mut frags = Vec::new();
    let mut out = Vec::with_capacity(cam.pixel_count());
    for y in 0..cam.height as usize {
        for x in 0..cam.width as usize {
            collect_fragments(x, y, 0..projected.len() as u32, &projected, opts, &mut frags);
            out.push(
                frags
                    .iter()
                    .map(|f| TraceEntry {
                        source_index: projected[f.proj as usize].source_index,
                        alpha: f.alpha,
                        transmittance: f.transmittance,
                        weight: f.alpha * f.transmittance,
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Renders a scene at the camera's frame index.
pub fn render(scene: &Scene, cam: &CameraView) -> Result<RenderOutput, SceneError> {
    render_with(scene, cam, &RenderOptions::default())
}

pub fn render_with(scene: &Scene, cam: &CameraView, opts: &RenderOptions) -> Result<RenderOutput, SceneError> {
    let flat = scene.flatten_at_frame(cam.frame_index)?;
    Ok(render_gaussians(&flat, cam, opts))
}

/// A colored 3D point, optionally tagged with the frame it was captured at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub frame: Option<u32>,
}

impl ColoredPoint {
    pub fn color_f64(&self) -> Vector3<f64> {
        Vector3::new(
            self.color[0] as f64 / 255.0,
            self.color[1] as f64 / 255.0,
            self.color[2] as f64 / 255.0,
        )
    }
}

/// Splats a point set as opaque isotropic Gaussians of size `point_sigma`.
/// Points tagged with a frame are only drawn in views of that frame.
pub fn render_points(points: &[ColoredPoint], cam: &CameraView, point_sigma: f64) -> RenderOutput {
    let gaussians: Vec<Gaussian> = points
        .iter()
        .filter(|p| p.frame.is_none_or(|f| f == cam.frame_index))
        .map(|p| Gaussian::isotropic(p.position, point_sigma, 1.0, p.color_f64()))
        .collect();
    render_gaussians(&gaussians, cam, &RenderOptions::default())
}

//! Analytic reverse-mode gradients of the splatting renderer, plus a
//! central-difference oracle used to verify them.
//!
//! Gradients flow through alpha, projected mean, projected covariance and
//! the expected-depth estimator. The depth sort and culling decisions are
//! treated as constants.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::image::{Image, Plane, ShapeError};
use crate::raster::{
    collect_fragments, project_all, projection_jacobian, render_gaussians, ProjectedGaussian, RenderOptions,
    RenderOutput, TileBins,
};
use crate::scene::{CameraView, Gaussian, LatentGaussian, Pose, Scene, SceneError, PARAMS_PER_GAUSSIAN};

pub type ParamVec = [f64; PARAMS_PER_GAUSSIAN];

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Upstream gradient of a scalar loss with respect to the rendered color and
/// depth images.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrad {
    pub color: Image,
    pub depth: Plane,
}

impl PixelGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::new(width, height),
            depth: Plane::new(width, height),
        }
    }

    fn check(&self, cam: &CameraView) -> Result<(), ShapeError> {
        let expected = (cam.width as usize, cam.height as usize);
        for got in [self.color.shape(), self.depth.shape()] {
            if got != expected {
                return Err(ShapeError { expected, got });
            }
        }
        Ok(())
    }
}

/// Per-Gaussian partial derivatives in the natural parameterization
/// (mean, scale, quaternion, opacity, color) and in latent coordinates
/// (mean, log-scale, raw quaternion, opacity logit, color logit). Each entry
/// uses the [`Gaussian::to_array`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub natural: Vec<ParamVec>,
    pub latent: Vec<ParamVec>,
}

impl GradientSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            natural: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            latent: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.natural.len()
    }

    pub fn is_empty(&self) -> bool {
        self.natural.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.natural.iter_mut().zip(&other.natural) {
            add_param(a, b);
        }
        for (a, b) in self.latent.iter_mut().zip(&other.latent) {
            add_param(a, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.natural.iter_mut().chain(self.latent.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.natural.iter().chain(&self.latent).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Builds the latent half from natural gradients of `gaussians`.
    pub fn from_natural(natural: Vec<ParamVec>, gaussians: &[Gaussian]) -> Self {
        let latent = natural
            .iter()
            .zip(gaussians)
            .map(|(n, g)| latent_from_natural(g, n))
            .collect();
        Self { natural, latent }
    }
}

fn add_param(a: &mut ParamVec, b: &ParamVec) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Chain rule from natural to latent coordinates, evaluated at `g` (whose
/// latent quaternion has unit norm). The quaternion part is projected onto
/// the tangent space of the unit sphere.
pub fn latent_from_natural(g: &Gaussian, n: &ParamVec) -> ParamVec {
    let mut l = *n;
    for k in 0..3 {
        l[3 + k] = n[3 + k] * g.scale[k];
        l[11 + k] = n[11 + k] * g.color[k] * (1.0 - g.color[k]);
    }
    l[10] = n[10] * g.opacity * (1.0 - g.opacity);
    let r = g.rot;
    let dot: f64 = (0..4).map(|k| r[k] * n[6 + k]).sum();
    for k in 0..4 {
        l[6 + k] = n[6 + k] - dot * r[k];
    }
    l
}

/// Per projected Gaussian accumulator of screen-space gradients.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mu2d: [f64; 2],
    /// dL/dK for the symmetric inverse covariance K, as (K00, K01, K11); the
    /// off-diagonal value applies to each of the two symmetric entries.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mu2d[0] += o.mu2d[0];
        self.mu2d[1] += o.mu2d[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }

    fn is_zero(&self) -> bool {
        self.mu2d == [0.0; 2] && self.conic == [0.0; 3] && self.opacity == 0.0 && self.color == [0.0; 3] && self.depth == 0.0
    }
}

/// Gradients for world-frame Gaussians, aligned with `gaussians`.
///
/// Tiles are processed in parallel with tile-local accumulators that are
/// merged in fixed tile order, so the result does not depend on the thread
/// count.
pub fn backward_gaussians(
    gaussians: &[Gaussian],
    cam: &CameraView,
    pixel_grad: &PixelGrad,
    opts: &RenderOptions,
) -> Result<GradientSet, GradError> {
    pixel_grad.check(cam)?;
    let projected = project_all(gaussians, cam);
    let bins = TileBins::build(&projected, cam, opts);
    let width = cam.width as usize;

    let tile_grads: Vec<Vec<(u32, ScreenGrad)>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let (xs, ys) = bins.tile_rect(tile, cam);
            let mut local = vec![ScreenGrad::default(); list.len()];
            let mut frags = Vec::new();
            let mut positions = Vec::new();
            let mut dl_dw = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let i = y * width + x;
                    let gc = [
                        pixel_grad.color.data[3 * i],
                        pixel_grad.color.data[3 * i + 1],
                        pixel_grad.color.data[3 * i + 2],
                    ];
                    let gd = pixel_grad.depth.data[i];
                    if gc == [0.0; 3] && gd == 0.0 {
                        continue;
                    }
                    collect_fragments(x, y, list.iter().copied(), &projected, opts, &mut frags);
                    if frags.is_empty() {
                        continue;
                    }
                    positions.clear();
                    let mut pos = 0;
                    for f in &frags {
                        while list[pos] != f.proj {
                            pos += 1;
                        }
                        positions.push(pos);
                    }
                    pixel_backward(&frags, &positions, &projected, gc, gd, &mut dl_dw, &mut local);
                }
            }
            list.iter()
                .zip(local)
                .filter(|(_, g)| !g.is_zero())
                .map(|(&i, g)| (i, g))
                .collect()
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); projected.len()];
    for tile in &tile_grads {
        for (i, g) in tile {
            screen[*i as usize].add(g);
        }
    }

    let mut natural = vec![[0.0; PARAMS_PER_GAUSSIAN]; gaussians.len()];
    let w = cam.camera_from_world_rotation();
    for (p, sg) in projected.iter().zip(&screen) {
        if sg.is_zero() {
            continue;
        }
        natural[p.source_index] = project_backward(&gaussians[p.source_index], p, sg, cam, &w);
    }
    Ok(GradientSet::from_natural(natural, gaussians))
}

fn pixel_backward(
    frags: &[crate::raster::Fragment],
    positions: &[usize],
    projected: &[ProjectedGaussian],
    gc: [f64; 3],
    gd: f64,
    dl_dw: &mut Vec<f64>,
    local: &mut [ScreenGrad],
) {
    // Forward quantities of the depth estimator.
    let mut acc = 0.0;
    let mut depth_sum = 0.0;
    for f in frags {
        let w = f.alpha * f.transmittance;
        acc += w;
        depth_sum += w * projected[f.proj as usize].depth;
    }
    let floor = 1e-8;
    let depth = depth_sum / acc.max(floor);

    dl_dw.clear();
    for f in frags {
        let p = &projected[f.proj as usize];
        let mut g = gc[0] * p.color[0] + gc[1] * p.color[1] + gc[2] * p.color[2];
        if gd != 0.0 {
            g += gd * if acc > floor { (p.depth - depth) / acc } else { p.depth / floor };
        }
        dl_dw.push(g);
    }

    // Reverse sweep: suffix = Σ_{k>i} w_k dL/dw_k.
    let mut suffix = 0.0;
    for (n, f) in frags.iter().enumerate().rev() {
        let p = &projected[f.proj as usize];
        let w = f.alpha * f.transmittance;
        let acc_g = &mut local[positions[n]];
        for k in 0..3 {
            acc_g.color[k] += gc[k] * w;
        }
        if gd != 0.0 {
            acc_g.depth += gd * w / acc.max(floor);
        }
        let dl_dalpha = f.transmittance * dl_dw[n] - suffix / (1.0 - f.alpha);
        suffix += w * dl_dw[n];
        if f.clamped {
            continue;
        }
        acc_g.opacity += dl_dalpha * f.falloff;
        let dl_dpower = dl_dalpha * p.opacity * (-0.5 * f.falloff);
        let [a, b, c] = p.conic;
        // power = dᵀ K d with d = pixel - mu2d.
        acc_g.mu2d[0] += dl_dpower * (-2.0 * (a * f.dx + b * f.dy));
        acc_g.mu2d[1] += dl_dpower * (-2.0 * (b * f.dx + c * f.dy));
        acc_g.conic[0] += dl_dpower * f.dx * f.dx;
        acc_g.conic[1] += dl_dpower * f.dx * f.dy;
        acc_g.conic[2] += dl_dpower * f.dy * f.dy;
    }
}

/// Chains screen-space gradients through projection and covariance
/// construction back to the natural parameters of `g`.
fn project_backward(g: &Gaussian, p: &ProjectedGaussian, sg: &ScreenGrad, cam: &CameraView, w: &Matrix3<f64>) -> ParamVec {
    let k = &cam.intrinsics;
    let t = p.cam_point;
    let (iz, iz2) = (1.0 / t.z, 1.0 / (t.z * t.z));

    let mut dt = Vector3::zeros();
    // Projected mean.
    let (du, dv) = (sg.mu2d[0], sg.mu2d[1]);
    dt.x += du * k.fx * iz;
    dt.y += dv * k.fy * iz;
    dt.z += -du * k.fx * t.x * iz2 - dv * k.fy * t.y * iz2;
    // Expected depth uses camera z directly.
    dt.z += sg.depth;

    // Inverse covariance -> covariance: dL/dΣ2 = -K G K.
    let kmat = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let gk = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let g2 = -(kmat * gk * kmat);

    let j = projection_jacobian(cam, &t);
    let sigma = g.covariance();
    let sigma_cam = w * sigma * w.transpose();
    let g_cam = j.transpose() * g2 * j;
    let g_j = 2.0 * g2 * j * sigma_cam;
    dt.x += g_j[(0, 2)] * (-k.fx * iz2);
    dt.y += g_j[(1, 2)] * (-k.fy * iz2);
    dt.z += g_j[(0, 0)] * (-k.fx * iz2)
        + g_j[(0, 2)] * (2.0 * k.fx * t.x * iz2 * iz)
        + g_j[(1, 1)] * (-k.fy * iz2)
        + g_j[(1, 2)] * (2.0 * k.fy * t.y * iz2 * iz);

    let d_mu = w.transpose() * dt;
    let g_sigma = w.transpose() * g_cam * w;

    // Σ = M Mᵀ with M = R diag(s).
    let r = g.rotation_matrix();
    let m = r * Matrix3::from_diagonal(&g.scale);
    let g_m = 2.0 * g_sigma * m;
    let mut d_scale = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            d_scale[b] += g_m[(a, b)] * r[(a, b)];
            g_r[(a, b)] = g_m[(a, b)] * g.scale[b];
        }
    }
    let d_rot = rotation_matrix_backward(&g.rot, &g_r);

    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    out[0..3].copy_from_slice(d_mu.as_slice());
    out[3..6].copy_from_slice(d_scale.as_slice());
    out[6..10].copy_from_slice(&d_rot);
    out[10] = sg.opacity;
    out[11..14].copy_from_slice(&sg.color);
    out
}

/// Gradient of [`crate::scene::quat_to_matrix`] with respect to `(w, x, y, z)`.
fn rotation_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let r = |i: usize, j: usize| g[(i, j)];
    let gw = 2.0 * (-z * r(0, 1) + y * r(0, 2) + z * r(1, 0) - x * r(1, 2) - y * r(2, 0) + x * r(2, 1));
    let gx = 2.0
        * (y * r(0, 1) + z * r(0, 2) + y * r(1, 0) - 2.0 * x * r(1, 1) - w * r(1, 2) + z * r(2, 0) + w * r(2, 1)
            - 2.0 * x * r(2, 2));
    let gy = 2.0
        * (-2.0 * y * r(0, 0) + x * r(0, 1) + w * r(0, 2) + x * r(1, 0) + z * r(1, 2) - w * r(2, 0) + z * r(2, 1)
            - 2.0 * y * r(2, 2));
    let gz = 2.0
        * (-2.0 * z * r(0, 0) - w * r(0, 1) + x * r(0, 2) + w * r(1, 0) - 2.0 * z * r(1, 1) + y * r(1, 2)
            + x * r(2, 0)
            + y * r(2, 1));
    [gw, gx, gy, gz]
}

/// Maps world-frame natural gradients of a flattened frame back onto the
/// scene's own parameters (actor Gaussians live in their actor frame).
pub fn pull_back(natural: &mut [ParamVec], transforms: &[Option<Pose>]) {
    for (n, t) in natural.iter_mut().zip(transforms) {
        let Some(pose) = t else { continue };
        let r = pose.rotation.to_rotation_matrix().into_inner();
        let d_mu = r.transpose() * Vector3::new(n[0], n[1], n[2]);
        n[0..3].copy_from_slice(d_mu.as_slice());
        // rot_world = L(p) rot_local with L the left-multiplication matrix.
        let q = pose.rotation.quaternion();
        let (pw, px, py, pz) = (q.w, q.i, q.j, q.k);
        let g = [n[6], n[7], n[8], n[9]];
        n[6] = pw * g[0] + px * g[1] + py * g[2] + pz * g[3];
        n[7] = -px * g[0] + pw * g[1] + pz * g[2] - py * g[3];
        n[8] = -py * g[0] - pz * g[1] + pw * g[2] + px * g[3];
        n[9] = -pz * g[0] + py * g[1] - px * g[2] + pw * g[3];
    }
}

/// Gradients of a scalar loss with respect to the scene's parameters (in
/// canonical order, actor Gaussians in actor frame) for one view.
pub fn backward(scene: &Scene, cam: &CameraView, pixel_grad: &PixelGrad) -> Result<GradientSet, GradError> {
    backward_with(scene, cam, pixel_grad, &RenderOptions::default())
}

pub fn backward_with(scene: &Scene, cam: &CameraView, pixel_grad: &PixelGrad, opts: &RenderOptions) -> Result<GradientSet, GradError> {
    let flat = scene.flatten_at_frame(cam.frame_index)?;
    let world = backward_gaussians(&flat, cam, pixel_grad, opts)?;
    let transforms = scene.frame_transforms(cam.frame_index)?;
    let mut natural = world.natural;
    pull_back(&mut natural, &transforms);
    Ok(GradientSet::from_natural(natural, &scene.params()))
}

/// Sum of per-view gradients. Views are evaluated in parallel and reduced in
/// input order.
pub fn backward_views(scene: &Scene, views: &[(CameraView, PixelGrad)], opts: &RenderOptions) -> Result<GradientSet, GradError> {
    let per_view: Vec<Result<GradientSet, GradError>> = views
        .par_iter()
        .map(|(cam, pg)| backward_with(scene, cam, pg, opts))
        .collect();
    let mut total = GradientSet::zeros(scene.len());
    for g in per_view {
        total.add_assign(&g?);
    }
    Ok(total)
}

/// Central-difference gradients of `loss_fn(render(scene, cam))` with
/// respect to every scene parameter, in both parameterizations. Natural
/// partials perturb raw fields (quaternion without renormalization, matching
/// the analytic convention); latent partials perturb [`LatentGaussian`]
/// coordinates. Cost is 56 renders per Gaussian: small scenes only.
pub fn fd_oracle(
    scene: &Scene,
    cam: &CameraView,
    loss_fn: &dyn Fn(&RenderOutput) -> f64,
    epsilon: f64,
    opts: &RenderOptions,
) -> Result<GradientSet, SceneError> {
    let params = scene.params();
    let transforms = scene.frame_transforms(cam.frame_index)?;
    let eval = |params: &[Gaussian]| -> f64 {
        let flat: Vec<Gaussian> = params
            .iter()
            .zip(&transforms)
            .map(|(g, t)| match t {
                Some(p) => g.transformed(p),
                None => *g,
            })
            .collect();
        loss_fn(&render_gaussians(&flat, cam, opts))
    };
    let n = params.len();
    let mut out = GradientSet::zeros(n);
    let mut work = params.clone();
    for i in 0..n {
        let base_nat = params[i].to_array();
        let base_lat = params[i].to_latent().to_array();
        for k in 0..PARAMS_PER_GAUSSIAN {
            let mut diff = |f: &dyn Fn(f64) -> Gaussian| {
                work[i] = f(epsilon);
                let plus = eval(&work);
                work[i] = f(-epsilon);
                let minus = eval(&work);
                work[i] = params[i];
                (plus - minus) / (2.0 * epsilon)
            };
            out.natural[i][k] = diff(&|e| {
                let mut a = base_nat;
                a[k] += e;
                Gaussian::from_array_unchecked(&a)
            });
            out.latent[i][k] = diff(&|e| {
                let mut a = base_lat;
                a[k] += e;
                LatentGaussian::from_array(&a).to_gaussian().expect("finite latent")
            });
        }
    }
    Ok(out)
}

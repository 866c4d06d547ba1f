#![allow(dead_code)]

use gsfix::image::{Image, Plane};
use gsfix::raster::RenderOutput;
use gsfix::scene::{normalize_quat, Actor, ActorTrack, CameraView, Gaussian, Intrinsics, Pose, Scene};
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, depth: (f64, f64), spread: f64) -> Gaussian {
    let z = rng.random_range(depth.0..depth.1);
    Gaussian {
        mu: Vector3::new(rng.random_range(-spread..spread) * z, rng.random_range(-spread..spread) * z, z),
        scale: Vector3::new(rng.random_range(0.08..0.5), rng.random_range(0.08..0.5), rng.random_range(0.08..0.5)),
        rot: normalize_quat(&[
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]),
        opacity: rng.random_range(0.05..0.95),
        color: Vector3::new(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)),
    }
}

/// Camera at the origin looking down +z with a small random rotation.
pub fn random_camera(rng: &mut ChaCha8Rng, size: u32, focal: f64) -> CameraView {
    let rot = UnitQuaternion::from_euler_angles(
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.3..0.3),
    );
    CameraView::new(
        Intrinsics::centered(focal, size, size),
        Isometry3::from_parts(Translation3::identity(), rot),
        size,
        size,
        0,
    )
    .unwrap()
}

/// Small scene in front of an axis camera. With `with_actor` one actor with
/// a rotated, translated pose holds a few of the Gaussians.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, with_actor: bool) -> Scene {
    let mut scene = Scene::default();
    let n_actor = if with_actor { n.min(4) } else { 0 };
    for _ in 0..n - n_actor {
        scene.background.push(random_gaussian(rng, (2.5, 6.0), 0.35));
    }
    if n_actor > 0 {
        let pose: Pose = Isometry3::from_parts(
            Translation3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 4.0),
            UnitQuaternion::from_euler_angles(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        );
        let mut gaussians = Vec::new();
        for _ in 0..n_actor {
            let mut g = random_gaussian(rng, (-0.5, 0.5), 1.0);
            g.mu = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            gaussians.push(g);
        }
        scene.actors.push(Actor {
            track: ActorTrack {
                id: 3,
                size: Vector3::new(1.2, 1.2, 1.2),
                first_frame: 0,
                poses: vec![pose],
            },
            gaussians,
        });
    }
    scene
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

pub fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Plane {
    Plane {
        width: w,
        height: h,
        data: (0..w * h).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

/// Sum of squared color errors plus a down-weighted depth term.
pub fn squared_error(out: &RenderOutput, target: &Image, target_depth: &Plane, depth_weight: f64) -> f64 {
    let c: f64 = out.color.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    let d: f64 = out.depth.data.iter().zip(&target_depth.data).map(|(a, b)| (a - b) * (a - b)).sum();
    c + depth_weight * d
}

/// Mixed relative/absolute comparison: relative error ≤ `rel` unless the
/// analytic value is below `floor`, in which case absolute error ≤ `floor`.
pub fn grad_close(analytic: f64, fd: f64, rel: f64, floor: f64) -> bool {
    if analytic.abs() < floor {
        (analytic - fd).abs() <= floor
    } else {
        (analytic - fd).abs() <= rel * analytic.abs()
    }
}

/// Minimum gap between camera depths of any two Gaussians. Central
/// differences must not flip the (non-differentiable) depth order.
pub fn depths_well_separated(scene: &Scene, cam: &CameraView, min_gap: f64) -> bool {
    let flat = scene.flatten_at_frame(cam.frame_index).unwrap();
    let w = cam.camera_from_world_rotation();
    let mut depths: Vec<f64> = flat.iter().map(|g| (w * (g.mu - cam.center())).z).collect();
    depths.sort_by(f64::total_cmp);
    depths.windows(2).all(|p| p[1] - p[0] >= min_gap)
}

pub struct GradCase {
    pub scene: Scene,
    pub cam: CameraView,
    pub target: Image,
    pub target_depth: Plane,
    /// Depth residuals only count where the unperturbed render is clearly
    /// covered; the estimator's 1e-8 weight floor is a kink.
    pub depth_mask: Vec<bool>,
}

pub fn grad_case(seed: u64, max_gaussians: usize, size: u32) -> GradCase {
    let mut r = rng(seed);
    loop {
        let n = r.random_range(1..=max_gaussians);
        let scene = random_scene(&mut r, n, seed % 2 == 1);
        let cam = random_camera(&mut r, size, 14.0 * size as f64 / 16.0);
        if !depths_well_separated(&scene, &cam, 2e-3) {
            continue;
        }
        let (w, h) = (size as usize, size as usize);
        let target = random_image(&mut r, w, h);
        let target_depth = random_plane(&mut r, w, h, 3.0, 5.0);
        let out = gsfix::raster::render_with(&scene, &cam, &gsfix::raster::RenderOptions::exact()).unwrap();
        let depth_mask = out.alpha.data.iter().map(|&a| a > 1e-3).collect();
        return GradCase { scene, cam, target, target_depth, depth_mask };
    }
}

impl GradCase {
    pub const DEPTH_WEIGHT: f64 = 0.1;

    pub fn loss(&self, out: &RenderOutput) -> f64 {
        let c: f64 = out.color.data.iter().zip(&self.target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let d: f64 = out
            .depth
            .data
            .iter()
            .zip(&self.target_depth.data)
            .zip(&self.depth_mask)
            .filter(|(_, m)| **m)
            .map(|((a, b), _)| (a - b) * (a - b))
            .sum();
        c + Self::DEPTH_WEIGHT * d
    }

    pub fn pixel_grad(&self, out: &RenderOutput) -> gsfix::grad::PixelGrad {
        let mut pg = gsfix::grad::PixelGrad::zeros(out.color.width, out.color.height);
        for (i, g) in pg.color.data.iter_mut().enumerate() {
            *g = 2.0 * (out.color.data[i] - self.target.data[i]);
        }
        for (i, g) in pg.depth.data.iter_mut().enumerate() {
            if self.depth_mask[i] {
                *g = 2.0 * Self::DEPTH_WEIGHT * (out.depth.data[i] - self.target_depth.data[i]);
            }
        }
        pg
    }
}

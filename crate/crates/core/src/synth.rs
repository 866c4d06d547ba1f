//! Procedural street scenes with ground truth at any viewpoint.
//!
//! World frame: z up, the road runs along +x, the ego camera drives along
//! the road center at constant speed. Ground truth is itself a Gaussian
//! scene, so any camera can be rendered exactly.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::raster::{render, ColoredPoint};
use crate::scene::{
    bounding_sphere, distant_shell, pose_from_matrix, Actor, ActorTrack, CameraView, Gaussian, Intrinsics, Pose, Scene,
    SceneError, SceneMeta, ACTOR_BOX_MARGIN, DISTANT_RADIUS_FACTOR,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error("synth spec parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionProfile {
    Constant,
    LaneChange,
    /// Alternates constant velocity and lane change across actors.
    Mixed,
}

/// Scene recipe. Stored as flat TOML key-value files; every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: u32,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Ego speed in meters per frame.
    pub speed: f64,
    pub camera_height: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub ground_half_width: f64,
    /// Ground continues this far past the last camera.
    pub ground_lookahead: f64,
    pub building_count: u32,
    pub building_width: [f64; 2],
    pub building_height: [f64; 2],
    pub building_setback: f64,
    pub actor_count: u32,
    pub actor_motion: MotionProfile,
    /// Spacing of ground-truth Gaussians on static surfaces.
    pub spacing: f64,
    pub actor_spacing: f64,
    /// Fraction of surface samples kept in the simulated point cloud.
    pub point_keep: f64,
    /// Standard deviation of point position noise in meters.
    pub point_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 20,
            width: 128,
            height: 128,
            focal: 100.0,
            speed: 1.0,
            camera_height: 1.6,
            road_half_width: 4.0,
            sidewalk_width: 3.0,
            ground_half_width: 16.0,
            ground_lookahead: 40.0,
            building_count: 8,
            building_width: [6.0, 12.0],
            building_height: [5.0, 12.0],
            building_setback: 9.0,
            actor_count: 2,
            actor_motion: MotionProfile::Mixed,
            spacing: 0.5,
            actor_spacing: 0.35,
            point_keep: 0.9,
            point_noise: 0.01,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if self.width < 16 || self.height < 16 {
            return bad("image size must be at least 16x16");
        }
        let positive = [
            ("focal", self.focal),
            ("camera_height", self.camera_height),
            ("road_half_width", self.road_half_width),
            ("spacing", self.spacing),
            ("actor_spacing", self.actor_spacing),
            ("ground_half_width", self.ground_half_width),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SynthError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("speed", self.speed),
            ("sidewalk_width", self.sidewalk_width),
            ("ground_lookahead", self.ground_lookahead),
            ("building_setback", self.building_setback),
            ("point_noise", self.point_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SynthError::Invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.point_keep) {
            return bad("point_keep must lie in [0, 1]");
        }
        for (name, r) in [("building_width", self.building_width), ("building_height", self.building_height)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(SynthError::Invalid(format!("{name} must be an increasing positive range")));
            }
        }
        Ok(())
    }
}

/// Ego camera orientation: looking along +x with image x to the right
/// (world −y) and image y down (world −z).
pub fn forward_rotation() -> Matrix3<f64> {
    Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ])
}

/// Generated ground truth for one spec.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub scene: Scene,
    pub cameras: Vec<CameraView>,
    pub points: Vec<ColoredPoint>,
}

impl SynthScene {
    /// Ground-truth image at an arbitrary camera. Actor poses follow
    /// `cam.frame_index`.
    pub fn gt_image(&self, cam: &CameraView) -> Result<Image, SceneError> {
        Ok(render(&self.scene, cam)?.color)
    }

    pub fn camera(&self, frame: u32) -> Option<&CameraView> {
        self.cameras.get(frame as usize)
    }
}

/// Normal extent of a surface splat relative to its in-plane spacing.
pub const SPLAT_THICKNESS: f64 = 0.1;

/// In-plane jitter of splat centers, fraction of the spacing. A regular grid
/// seen head-on puts whole rows at one depth, and the compositing order of
/// exact ties flips under any nudge.
pub const TIE_JITTER: f64 = 0.25;

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> Vector3<f64> {
    let n = rng.random_range(-amount..=amount);
    Vector3::new((c[0] + n).clamp(0.0, 1.0), (c[1] + n).clamp(0.0, 1.0), (c[2] + n).clamp(0.0, 1.0))
}

/// Places surface-aligned splats on a rectangle spanned from `origin` by
/// orthonormal axes `u`, `v`. `color` receives local coordinates of the cell
/// center.
#[allow(clippy::too_many_arguments)]
fn face(
    out: &mut Vec<Gaussian>,
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    len_u: f64,
    len_v: f64,
    spacing: f64,
    mut color: impl FnMut(f64, f64) -> Vector3<f64>,
) {
    let nu = (len_u / spacing).ceil().max(1.0) as usize;
    let nv = (len_v / spacing).ceil().max(1.0) as usize;
    let (su, sv) = (len_u / nu as f64, len_v / nv as f64);
    let r = Matrix3::from_columns(&[u, v, u.cross(&v)]);
    let q = UnitQuaternion::from_matrix(&r);
    let rot = [q.w, q.i, q.j, q.k];
    let scale = Vector3::new(0.8 * su, 0.8 * sv, SPLAT_THICKNESS * su.min(sv));
    let mut tie = ChaCha8Rng::seed_from_u64(origin.x.to_bits() ^ origin.y.to_bits().rotate_left(21) ^ origin.z.to_bits().rotate_left(42));
    for j in 0..nv {
        for i in 0..nu {
            let a = (i as f64 + 0.5 + tie.random_range(-TIE_JITTER..TIE_JITTER)) * su;
            let b = (j as f64 + 0.5 + tie.random_range(-TIE_JITTER..TIE_JITTER)) * sv;
            out.push(Gaussian {
                mu: origin + u * a + v * b,
                scale,
                rot,
                opacity: 0.9,
                color: color(a, b),
            });
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

const ACTOR_SIZE: [f64; 3] = [4.2, 1.9, 1.6];

fn build_ground(spec: &SynthSpec, rng: &mut ChaCha8Rng, out: &mut Vec<Gaussian>) {
    let x0 = -10.0;
    let x1 = spec.speed * spec.frames as f64 + spec.ground_lookahead;
    let hw = spec.ground_half_width;
    let road = spec.road_half_width;
    let walk = road + spec.sidewalk_width;
    let grass = [0.3 + rng.random_range(-0.05..0.05), 0.45, 0.22];
    face(
        out,
        Vector3::new(x0, -hw, 0.0),
        Vector3::x(),
        Vector3::y(),
        x1 - x0,
        2.0 * hw,
        spec.spacing,
        |a, b| {
            let (x, y) = (x0 + a, b - hw);
            let base = if y.abs() < 0.3 && x.rem_euclid(6.0) < 3.0 {
                [0.92, 0.9, 0.8]
            } else if (y.abs() - (road - 0.3)).abs() < 0.25 {
                [0.85, 0.85, 0.85]
            } else if y.abs() < road {
                [0.25, 0.25, 0.28]
            } else if y.abs() < walk {
                [0.62, 0.58, 0.54]
            } else {
                grass
            };
            jitter(rng, base, 0.02)
        },
    );
}

fn build_buildings(spec: &SynthSpec, rng: &mut ChaCha8Rng, out: &mut Vec<Gaussian>) {
    let x_end = spec.speed * spec.frames as f64 + spec.ground_lookahead - 5.0;
    let mut cursor = [-8.0, -8.0];
    for k in 0..spec.building_count {
        let side = (k % 2) as usize;
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let width = rng.random_range(spec.building_width[0]..=spec.building_width[1]);
        let height = rng.random_range(spec.building_height[0]..=spec.building_height[1]);
        let gap = rng.random_range(1.0..4.0);
        let xa = cursor[side] + gap;
        let xb = xa + width;
        cursor[side] = xb;
        if xb > x_end {
            continue;
        }
        let front = sign * (spec.building_setback + rng.random_range(0.0..2.0));
        let depth = 6.0;
        let wall = [
            rng.random_range(0.35..0.85),
            rng.random_range(0.3..0.75),
            rng.random_range(0.25..0.7),
        ];
        let window = [0.15, 0.2, 0.3];
        let windowed = move |a: f64, b: f64| {
            let in_window = b > 1.0 && (b - 1.0).rem_euclid(3.0) < 1.4 && a.rem_euclid(2.5) > 0.8 && a.rem_euclid(2.5) < 2.0;
            if in_window {
                window
            } else {
                wall
            }
        };
        // Street-facing wall.
        face(
            out,
            Vector3::new(xa, front, 0.0),
            Vector3::x(),
            Vector3::z(),
            width,
            height,
            spec.spacing,
            |a, b| jitter(rng, windowed(a, b), 0.02),
        );
        // Side walls, receding away from the road.
        for x in [xa, xb] {
            face(
                out,
                Vector3::new(x, front, 0.0),
                Vector3::y() * sign,
                Vector3::z(),
                depth,
                height,
                spec.spacing,
                |_, _| jitter(rng, [wall[0] * 0.8, wall[1] * 0.8, wall[2] * 0.8], 0.02),
            );
        }
    }
}

fn actor_gaussians(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let [l, w, h] = ACTOR_SIZE;
    let body = [
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
    ];
    let glass = [0.1, 0.12, 0.15];
    let s = spec.actor_spacing;
    let mut out = Vec::new();
    let half = Vector3::new(l / 2.0, w / 2.0, h / 2.0);
    let glassy = move |b: f64| if b > h * 0.55 { glass } else { body };
    // Top.
    face(&mut out, Vector3::new(-half.x, -half.y, half.z), Vector3::x(), Vector3::y(), l, w, s, |_, _| {
        jitter(rng, body, 0.02)
    });
    // Long sides.
    for y in [-half.y, half.y] {
        face(&mut out, Vector3::new(-half.x, y, -half.z), Vector3::x(), Vector3::z(), l, h, s, |_, b| {
            jitter(rng, glassy(b), 0.02)
        });
    }
    // Front and back.
    for x in [-half.x, half.x] {
        face(&mut out, Vector3::new(x, -half.y, -half.z), Vector3::y(), Vector3::z(), w, h, s, |_, b| {
            jitter(rng, glassy(b), 0.02)
        });
    }
    out
}

fn actor_track(spec: &SynthSpec, rng: &mut ChaCha8Rng, id: u32, lane_change: bool, x_start: f64, lane: f64) -> ActorTrack {
    // Never slower than the ego, so no actor is ever beside or behind a
    // (possibly laterally shifted) camera.
    let speed = rng.random_range(1.0..1.3) * spec.speed;
    let n = spec.frames;
    let dur = 8.0f64.min(n as f64);
    let start = if n as f64 > dur + 2.0 {
        rng.random_range(1.0..(n as f64 - dur))
    } else {
        0.0
    };
    let lateral = |f: f64| {
        if lane_change {
            lane - 2.0 * lane * smoothstep((f - start) / dur)
        } else {
            lane
        }
    };
    let poses = (0..n)
        .map(|f| {
            let t = f as f64;
            let y = lateral(t);
            let dy = (lateral(t + 0.01) - lateral(t - 0.01)) / 0.02;
            let yaw = dy.atan2(speed);
            let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
            Pose::from_parts(Vector3::new(x_start + speed * t, y, ACTOR_SIZE[2] / 2.0).into(), rot)
        })
        .collect();
    ActorTrack {
        id,
        size: Vector3::from(ACTOR_SIZE),
        first_frame: 0,
        poses,
    }
}

/// Builds the scene, cameras and point cloud for `spec`. Deterministic.
pub fn generate(spec: &SynthSpec) -> Result<SynthScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut background = Vec::new();
    build_ground(spec, &mut rng, &mut background);
    build_buildings(spec, &mut rng, &mut background);

    let mut actors = Vec::new();
    let mut placed: Vec<(f64, f64)> = Vec::new();
    for k in 0..spec.actor_count {
        let lane_change = match spec.actor_motion {
            MotionProfile::Constant => false,
            MotionProfile::LaneChange => true,
            MotionProfile::Mixed => k % 2 == 1,
        };
        let lane = if rng.random_bool(0.5) { 2.0 } else { -2.0 };
        let mut x_start = rng.random_range(6.0..16.0);
        while placed.iter().any(|(x, _)| (x - x_start).abs() < 7.0) {
            x_start += 7.0;
        }
        placed.push((x_start, lane));
        let track = actor_track(spec, &mut rng, k + 1, lane_change, x_start, lane);
        actors.push(Actor {
            track,
            gaussians: actor_gaussians(spec, &mut rng),
        });
    }

    // Bounds over everything the shell must enclose, actors at every frame.
    let mut extent_points: Vec<Vector3<f64>> = background.iter().map(|g| g.mu).collect();
    for a in &actors {
        for p in &a.track.poses {
            extent_points.push(p.translation.vector);
        }
    }
    let (center, radius) = bounding_sphere(&extent_points);
    let sky = Vector3::new(
        rng.random_range(0.55..0.7),
        rng.random_range(0.7..0.8),
        rng.random_range(0.85..0.95),
    );
    let scene = Scene {
        distant: distant_shell(center, radius * DISTANT_RADIUS_FACTOR, sky),
        background,
        actors,
        meta: SceneMeta {
            extent: radius,
            seed: spec.seed,
        },
    };
    scene.validate()?;

    let intr = Intrinsics::centered(spec.focal, spec.width, spec.height);
    let cameras = (0..spec.frames)
        .map(|f| {
            let center = Vector3::new(spec.speed * f as f64, 0.0, spec.camera_height);
            CameraView::new(intr, pose_from_matrix(forward_rotation(), center)?, spec.width, spec.height, f)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let points = sample_points(spec, &scene, &mut rng);
    Ok(SynthScene {
        spec: spec.clone(),
        scene,
        cameras,
        points,
    })
}

fn to_rgb8(c: &Vector3<f64>) -> [u8; 3] {
    [
        crate::image::quantize(c.x),
        crate::image::quantize(c.y),
        crate::image::quantize(c.z),
    ]
}

/// Surface samples at the ground-truth centers with dropout and noise.
/// Actor samples are taken at a random frame of the track and tagged with it.
fn sample_points(spec: &SynthSpec, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<ColoredPoint> {
    let noise = Normal::new(0.0, spec.point_noise).expect("finite noise");
    let mut points = Vec::new();
    let offset = |rng: &mut ChaCha8Rng| Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
    for g in &scene.background {
        if rng.random::<f64>() < spec.point_keep {
            let position = g.mu + offset(rng);
            points.push(ColoredPoint {
                position,
                color: to_rgb8(&g.color),
                frame: None,
            });
        }
    }
    for a in &scene.actors {
        let frames = a.track.poses.len();
        for g in &a.gaussians {
            if rng.random::<f64>() < spec.point_keep {
                let f = rng.random_range(0..frames);
                let local = g.mu + offset(rng);
                points.push(ColoredPoint {
                    position: (a.track.poses[f] * nalgebra::Point3::from(local)).coords,
                    color: to_rgb8(&g.color),
                    frame: Some(a.track.first_frame + f as u32),
                });
            }
        }
    }
    points
}

/// Seeded corruption of a clean scene. The distant shell is left intact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeProfile {
    pub seed: u64,
    /// Fraction of Gaussians removed.
    pub drop: f64,
    /// Standard deviation of additive noise on the opacity logit.
    pub opacity_sigma: f64,
    /// Standard deviation of position noise in meters.
    pub position_sigma: f64,
    /// Standard deviation of additive noise on the color logits.
    pub color_sigma: f64,
}

impl Default for DegradeProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            drop: 0.3,
            opacity_sigma: 0.5,
            position_sigma: 0.0,
            color_sigma: 0.0,
        }
    }
}

impl DegradeProfile {
    pub fn none() -> Self {
        Self {
            seed: 0,
            drop: 0.0,
            opacity_sigma: 0.0,
            position_sigma: 0.0,
            color_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.drop) {
            return Err(SynthError::Invalid(format!("drop fraction {} outside [0, 1]", self.drop)));
        }
        for (name, v) in [
            ("opacity_sigma", self.opacity_sigma),
            ("position_sigma", self.position_sigma),
            ("color_sigma", self.color_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SynthError::Invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn degrade_gaussians(gs: &mut Vec<Gaussian>, p: &DegradeProfile, rng: &mut ChaCha8Rng) -> Result<(), SceneError> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut kept = Vec::with_capacity(gs.len());
    for g in gs.drain(..) {
        if p.drop > 0.0 && rng.random::<f64>() < p.drop {
            continue;
        }
        if p.opacity_sigma == 0.0 && p.position_sigma == 0.0 && p.color_sigma == 0.0 {
            kept.push(g);
            continue;
        }
        let mut l = g.to_latent();
        for k in 0..3 {
            l.mu[k] += p.position_sigma * unit.sample(rng);
        }
        l.opacity_logit += p.opacity_sigma * unit.sample(rng);
        for k in 0..3 {
            l.color_logit[k] += p.color_sigma * unit.sample(rng);
        }
        kept.push(l.to_gaussian()?);
    }
    *gs = kept;
    Ok(())
}

/// Drops and jitters background and actor Gaussians. Jitter is applied in
/// latent space so the result always satisfies the Gaussian invariants.
pub fn degrade(scene: &Scene, profile: &DegradeProfile) -> Result<Scene, SynthError> {
    profile.validate()?;
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ scene.meta.seed.rotate_left(17));
    degrade_gaussians(&mut out.background, profile, &mut rng)?;
    for a in &mut out.actors {
        degrade_gaussians(&mut a.gaussians, profile, &mut rng)?;
        for g in &mut a.gaussians {
            g.mu = a.track.clamp_local(&g.mu, ACTOR_BOX_MARGIN);
        }
    }
    Ok(out)
}

const SUITE_SPECS: [&str; 6] = [
    include_str!("../suite/scene_0.toml"),
    include_str!("../suite/scene_1.toml"),
    include_str!("../suite/scene_2.toml"),
    include_str!("../suite/scene_3.toml"),
    include_str!("../suite/scene_4.toml"),
    include_str!("../suite/scene_5.toml"),
];

/// The bundled six-scene suite (seeds 0 to 5).
pub fn default_suite() -> Vec<SynthSpec> {
    SUITE_SPECS
        .iter()
        .map(|t| SynthSpec::from_toml(t).expect("bundled spec is valid"))
        .collect()
}

//! Scene representation: Gaussian primitives, their unconstrained latent
//! parameterization, cameras, and the partitioned scene container.

use std::fmt;

use nalgebra::{Isometry3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

/// Rigid transform. For cameras and actor tracks this is always
/// `world_from_local`.
pub type Pose = Isometry3<f64>;

/// Length of the flat parameter vector of one Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

const PROB_EPS: f64 = 1e-9;
const LOG_SCALE_LIMIT: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("actor {actor} has no pose at frame {frame}")]
    MissingPose { actor: u32, frame: u32 },
    #[error("gaussian {index}: {reason}")]
    Invariant { index: usize, reason: String },
    #[error("non-finite latent component `{field}`")]
    NonFinite { field: &'static str },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid actor track {actor}: {reason}")]
    InvalidTrack { actor: u32, reason: String },
}

/// One anisotropic 3D Gaussian.
///
/// `rot` is a unit quaternion stored as `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rot: [f64; 4],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn isotropic(mu: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mu,
            scale: Vector3::repeat(scale),
            rot: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
        }
    }

    /// Checks every range invariant; `index` only labels the error.
    pub fn validate(&self, index: usize) -> Result<(), SceneError> {
        let fail = |reason: String| Err(SceneError::Invariant { index, reason });
        if !self.mu.iter().all(|v| v.is_finite()) {
            return fail("non-finite mean".into());
        }
        if !self.scale.iter().all(|&s| s.is_finite() && s > 0.0) {
            return fail(format!("scale must be positive, got {:?}", self.scale.as_slice()));
        }
        let norm = quat_norm(&self.rot);
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return fail(format!("rotation quaternion norm {norm} is not 1"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return fail(format!("opacity {} outside [0,1]", self.opacity));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return fail(format!("color {:?} outside [0,1]", self.color.as_slice()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rot)
    }

    /// World-space covariance `R S² Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    pub fn to_latent(&self) -> LatentGaussian {
        LatentGaussian {
            mu: self.mu,
            log_scale: self.scale.map(f64::ln),
            rot: self.rot,
            opacity_logit: logit(self.opacity),
            color_logit: self.color.map(logit),
        }
    }

    /// Applies a rigid transform (actor frame to world frame).
    pub fn transformed(&self, pose: &Pose) -> Self {
        let q = pose.rotation.quaternion();
        let pq = [q.w, q.i, q.j, q.k];
        Self {
            mu: pose.transform_point(&self.mu.into()).coords,
            rot: quat_mul(&pq, &self.rot),
            ..*self
        }
    }

    pub fn to_array(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].copy_from_slice(self.mu.as_slice());
        out[3..6].copy_from_slice(self.scale.as_slice());
        out[6..10].copy_from_slice(&self.rot);
        out[10] = self.opacity;
        out[11..14].copy_from_slice(self.color.as_slice());
        out
    }

    /// Inverse of [`Gaussian::to_array`]; performs no validation.
    pub fn from_array_unchecked(a: &[f64; PARAMS_PER_GAUSSIAN]) -> Self {
        Self {
            mu: Vector3::new(a[0], a[1], a[2]),
            scale: Vector3::new(a[3], a[4], a[5]),
            rot: [a[6], a[7], a[8], a[9]],
            opacity: a[10],
            color: Vector3::new(a[11], a[12], a[13]),
        }
    }
}

/// Unconstrained reparameterization of a [`Gaussian`]. Any finite value maps
/// back to a valid Gaussian, so additive residual updates are always safe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Raw quaternion `(w, x, y, z)`, renormalized on read.
    pub rot: [f64; 4],
    pub opacity_logit: f64,
    pub color_logit: Vector3<f64>,
}

impl LatentGaussian {
    pub fn to_gaussian(&self) -> Result<Gaussian, SceneError> {
        let checks: [(&'static str, bool); 5] = [
            ("mu", self.mu.iter().all(|v| v.is_finite())),
            ("log_scale", self.log_scale.iter().all(|v| v.is_finite())),
            ("rot", self.rot.iter().all(|v| v.is_finite())),
            ("opacity_logit", self.opacity_logit.is_finite()),
            ("color_logit", self.color_logit.iter().all(|v| v.is_finite())),
        ];
        if let Some((field, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(SceneError::NonFinite { field });
        }
        Ok(Gaussian {
            mu: self.mu,
            scale: self
                .log_scale
                .map(|l| l.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp()),
            rot: normalize_quat(&self.rot),
            opacity: sigmoid(self.opacity_logit),
            color: self.color_logit.map(sigmoid),
        })
    }

    pub fn to_array(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].copy_from_slice(self.mu.as_slice());
        out[3..6].copy_from_slice(self.log_scale.as_slice());
        out[6..10].copy_from_slice(&self.rot);
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(self.color_logit.as_slice());
        out
    }

    pub fn from_array(a: &[f64; PARAMS_PER_GAUSSIAN]) -> Self {
        Self {
            mu: Vector3::new(a[0], a[1], a[2]),
            log_scale: Vector3::new(a[3], a[4], a[5]),
            rot: [a[6], a[7], a[8], a[9]],
            opacity_logit: a[10],
            color_logit: Vector3::new(a[11], a[12], a[13]),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit with the argument pulled just inside (0, 1) so the result is finite.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    let m = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * q.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

/// Normalizes without overflow; the zero quaternion maps to identity.
pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let m = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let s = [q[0] / m, q[1] / m, q[2] / m, q[3] / m];
    let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    [s[0] / n, s[1] / n, s[2] / n, s[3] / n]
}

/// Hamilton product `a ⊗ b`, both `(w, x, y, z)`.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`. The formula assumes
/// unit norm; gradients are taken through this exact expression.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn pose_quat(pose: &Pose) -> [f64; 4] {
    let q = pose.rotation.quaternion();
    [q.w, q.i, q.j, q.k]
}

pub fn pose_from_parts(quat_wxyz: [f64; 4], translation: Vector3<f64>) -> Pose {
    let [w, x, y, z] = quat_wxyz;
    Isometry3::from_parts(
        translation.into(),
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
    )
}

/// Builds a pose from a rotation matrix, rejecting matrices that are not
/// orthonormal within 1e-6.
pub fn pose_from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Pose, SceneError> {
    let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
    if !err.is_finite() || err > 1e-6 || rotation.determinant() < 0.0 {
        return Err(SceneError::InvalidCamera(format!(
            "rotation not orthonormal (deviation {err:e})"
        )));
    }
    let rot = nalgebra::Rotation3::from_matrix_unchecked(rotation);
    Ok(Isometry3::from_parts(
        translation.into(),
        UnitQuaternion::from_rotation_matrix(&rot),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Pinhole intrinsics with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }
}

/// A pinhole camera. Camera axes follow the usual vision convention: x right,
/// y down, z forward. Pixel `(x, y)` covers `[x, x+1) × [y, y+1)` so its center
/// sits at `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    /// `world_from_camera`.
    pub pose: Pose,
    pub width: u32,
    pub height: u32,
    pub frame_index: u32,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, width: u32, height: u32, frame_index: u32) -> Result<Self, SceneError> {
        let cam = Self {
            intrinsics,
            pose,
            width,
            height,
            frame_index,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.fx.is_finite() && k.fy.is_finite()) {
            return Err(SceneError::InvalidCamera(format!("focal lengths must be positive, got ({}, {})", k.fx, k.fy)));
        }
        if !(k.cx.is_finite() && k.cy.is_finite()) {
            return Err(SceneError::InvalidCamera("non-finite principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("empty image".into()));
        }
        let r = self.pose.rotation.to_rotation_matrix().into_inner();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || !self.pose.translation.vector.iter().all(|v| v.is_finite()) {
            return Err(SceneError::InvalidCamera(format!("pose not rigid (deviation {err:e})")));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation.vector
    }

    /// Rotation taking world vectors into the camera frame.
    pub fn camera_from_world_rotation(&self) -> Matrix3<f64> {
        self.pose.rotation.to_rotation_matrix().into_inner().transpose()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Box track of a dynamic actor: box extent and one pose per frame starting
/// at `first_frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorTrack {
    pub id: u32,
    /// Full box extent along the actor's local axes, meters.
    pub size: Vector3<f64>,
    pub first_frame: u32,
    pub poses: Vec<Pose>,
}

impl ActorTrack {
    pub fn pose_at(&self, frame: u32) -> Option<&Pose> {
        frame
            .checked_sub(self.first_frame)
            .and_then(|i| self.poses.get(i as usize))
    }

    /// Whether a point in the actor frame lies inside the box grown by
    /// `margin` (a fraction of each half-extent).
    pub fn contains_local(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|k| p[k].abs() <= 0.5 * self.size[k] * (1.0 + margin))
    }

    /// Projects a local point into the box grown by `margin`.
    pub fn clamp_local(&self, p: &Vector3<f64>, margin: f64) -> Vector3<f64> {
        let half = self.size * (0.5 * (1.0 + margin));
        Vector3::new(
            p.x.clamp(-half.x, half.x),
            p.y.clamp(-half.y, half.y),
            p.z.clamp(-half.z, half.z),
        )
    }

    pub fn frames(&self) -> std::ops::Range<u32> {
        self.first_frame..self.first_frame + self.poses.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub track: ActorTrack,
    /// Gaussians in the actor's local frame.
    pub gaussians: Vec<Gaussian>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneMeta {
    /// Characteristic scene radius in meters; scales position step sizes.
    pub extent: f64,
    pub seed: u64,
}

/// Actor containment margin as a fraction of the box half-extent.
pub const ACTOR_BOX_MARGIN: f64 = 0.1;

/// Partitioned scene: static background, tracked actors and the distant
/// shell. The canonical parameter order used everywhere (flattening, gradient
/// sets, optimizer state) is background, actors by ascending id, distant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub background: Vec<Gaussian>,
    pub actors: Vec<Actor>,
    pub distant: Vec<Gaussian>,
    pub meta: SceneMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Background,
    Actor(usize),
    Distant,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Background => write!(f, "background"),
            Partition::Actor(i) => write!(f, "actor[{i}]"),
            Partition::Distant => write!(f, "distant"),
        }
    }
}

impl Scene {
    pub fn len(&self) -> usize {
        self.background.len() + self.actors.iter().map(|a| a.gaussians.len()).sum::<usize>() + self.distant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Puts actors in ascending id order.
    pub fn sort_actors(&mut self) {
        self.actors.sort_by_key(|a| a.track.id);
    }

    /// Validates every Gaussian and the actor containment rule. Indices in
    /// errors refer to the canonical parameter order.
    pub fn validate(&self) -> Result<(), SceneError> {
        for w in self.actors.windows(2) {
            if w[0].track.id >= w[1].track.id {
                return Err(SceneError::InvalidTrack {
                    actor: w[1].track.id,
                    reason: "actors must have unique ids in ascending order".into(),
                });
            }
        }
        for actor in &self.actors {
            if !actor.track.size.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(SceneError::InvalidTrack {
                    actor: actor.track.id,
                    reason: "box size must be positive".into(),
                });
            }
        }
        let mut index = 0;
        for (g, part) in self.iter_params() {
            g.validate(index)?;
            if let Partition::Actor(a) = part {
                let track = &self.actors[a].track;
                if !track.contains_local(&g.mu, ACTOR_BOX_MARGIN) {
                    return Err(SceneError::Invariant {
                        index,
                        reason: format!("outside box of actor {}", track.id),
                    });
                }
            }
            index += 1;
        }
        Ok(())
    }

    /// All Gaussians in canonical order, in their local frames.
    pub fn iter_params(&self) -> impl Iterator<Item = (&Gaussian, Partition)> + '_ {
        self.background
            .iter()
            .map(|g| (g, Partition::Background))
            .chain(
                self.actors
                    .iter()
                    .enumerate()
                    .flat_map(|(i, a)| a.gaussians.iter().map(move |g| (g, Partition::Actor(i)))),
            )
            .chain(self.distant.iter().map(|g| (g, Partition::Distant)))
    }

    pub fn params(&self) -> Vec<Gaussian> {
        self.iter_params().map(|(g, _)| *g).collect()
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.iter_params().map(|(_, p)| p).collect()
    }

    /// Replaces all Gaussians, keeping partition sizes. `params` must be in
    /// canonical order with exactly [`Scene::len`] entries.
    pub fn set_params(&mut self, params: &[Gaussian]) {
        assert_eq!(params.len(), self.len(), "parameter count mismatch");
        let mut it = params.iter().copied();
        for g in self.background.iter_mut() {
            *g = it.next().unwrap();
        }
        for a in self.actors.iter_mut() {
            for g in a.gaussians.iter_mut() {
                *g = it.next().unwrap();
            }
        }
        for g in self.distant.iter_mut() {
            *g = it.next().unwrap();
        }
    }

    /// Per canonical index: the actor pose at `frame`, or `None` for static
    /// Gaussians.
    pub fn frame_transforms(&self, frame: u32) -> Result<Vec<Option<Pose>>, SceneError> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(std::iter::repeat_n(None, self.background.len()));
        for a in &self.actors {
            let pose = a.track.pose_at(frame).ok_or(SceneError::MissingPose {
                actor: a.track.id,
                frame,
            })?;
            out.extend(std::iter::repeat_n(Some(*pose), a.gaussians.len()));
        }
        out.extend(std::iter::repeat_n(None, self.distant.len()));
        Ok(out)
    }

    /// World-frame Gaussians at `frame` in canonical order: background,
    /// actors by id, distant.
    pub fn flatten_at_frame(&self, frame: u32) -> Result<Vec<Gaussian>, SceneError> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.background);
        for a in &self.actors {
            let pose = a.track.pose_at(frame).ok_or(SceneError::MissingPose {
                actor: a.track.id,
                frame,
            })?;
            out.extend(a.gaussians.iter().map(|g| g.transformed(pose)));
        }
        out.extend_from_slice(&self.distant);
        Ok(out)
    }

    pub fn latents(&self) -> Vec<LatentGaussian> {
        self.iter_params().map(|(g, _)| g.to_latent()).collect()
    }
}

/// Axis-aligned bounding sphere: box midpoint and half-diagonal. Returns a
/// unit sphere at the origin for an empty input.
pub fn bounding_sphere<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> (Vector3<f64>, f64) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if !lo.x.is_finite() {
        return (Vector3::zeros(), 1.0);
    }
    ((lo + hi) * 0.5, ((hi - lo) * 0.5).norm().max(1e-3))
}

/// Number of Gaussians in the far-field shell.
pub const DISTANT_COUNT: usize = 2048;
/// Shell radius as a multiple of the scene's bounding radius.
pub const DISTANT_RADIUS_FACTOR: f64 = 10.0;
pub const DISTANT_OPACITY: f64 = 0.95;

/// Fibonacci-sphere shell of isotropic Gaussians standing in for sky and
/// far geometry. Neighbouring Gaussians overlap so the shell is opaque.
pub fn distant_shell(center: Vector3<f64>, radius: f64, color: Vector3<f64>) -> Vec<Gaussian> {
    let n = DISTANT_COUNT;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spacing = radius * (4.0 * std::f64::consts::PI / n as f64).sqrt();
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let dir = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            Gaussian::isotropic(center + dir * radius, spacing, DISTANT_OPACITY, color)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Translation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(x: f64) -> Gaussian {
        Gaussian::isotropic(Vector3::new(x, 0.0, 0.0), 0.5, 0.5, Vector3::new(0.2, 0.4, 0.6))
    }

    fn track(id: u32, poses: Vec<Pose>) -> ActorTrack {
        ActorTrack {
            id,
            size: Vector3::new(4.0, 2.0, 1.5),
            first_frame: 0,
            poses,
        }
    }

    #[test]
    fn flatten_without_actors_is_identity() {
        let scene = Scene {
            background: vec![g(1.0), g(2.0)],
            distant: vec![g(100.0)],
            ..Default::default()
        };
        let flat = scene.flatten_at_frame(0).unwrap();
        assert_eq!(flat, vec![g(1.0), g(2.0), g(100.0)]);
    }

    #[test]
    fn flatten_identity_and_translated_actor() {
        let mut poses = vec![Pose::identity(); 4];
        poses[3] = Isometry3::from_parts(Translation3::new(1.0, 0.0, 0.0), UnitQuaternion::identity());
        let scene = Scene {
            background: vec![g(5.0)],
            actors: vec![Actor {
                track: track(7, poses),
                gaussians: vec![g(0.3)],
            }],
            ..Default::default()
        };
        let f0 = scene.flatten_at_frame(0).unwrap();
        assert_eq!(f0[1].mu, Vector3::new(0.3, 0.0, 0.0));
        let f3 = scene.flatten_at_frame(3).unwrap();
        assert_eq!(f3[1].mu - f0[1].mu, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(f3[0], f0[0]);
    }

    #[test]
    fn flatten_missing_pose_names_actor() {
        let scene = Scene {
            actors: vec![Actor {
                track: track(42, vec![Pose::identity(); 2]),
                gaussians: vec![g(0.0)],
            }],
            ..Default::default()
        };
        let err = scene.flatten_at_frame(5).unwrap_err();
        assert_eq!(err, SceneError::MissingPose { actor: 42, frame: 5 });
        assert!(err.to_string().contains("42"));
    }

    #[test]
    fn logit_symmetry_and_log_scale() {
        let g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::repeat(0.5));
        let l = g.to_latent();
        assert_eq!(l.opacity_logit, 0.0);
        assert_eq!(l.log_scale, Vector3::zeros());
        assert_eq!(l.to_gaussian().unwrap().opacity, 0.5);
    }

    #[test]
    fn latent_round_trip_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut max_err = 0.0f64;
        for _ in 0..1000 {
            let q = normalize_quat(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let g = Gaussian {
                mu: Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0)),
                scale: Vector3::new(rng.random_range(0.01..3.0), rng.random_range(0.01..3.0), rng.random_range(0.01..3.0)),
                rot: q,
                opacity: rng.random_range(0.01..0.99),
                color: Vector3::new(rng.random_range(0.001..0.999), rng.random_range(0.001..0.999), rng.random_range(0.001..0.999)),
            };
            let back = g.to_latent().to_gaussian().unwrap();
            for (a, b) in g.to_array().iter().zip(back.to_array()) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-6, "max round-trip error {max_err}");
    }

    #[test]
    fn non_finite_latent_rejected() {
        let mut l = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::repeat(0.5)).to_latent();
        l.color_logit.y = f64::NAN;
        assert_eq!(l.to_gaussian().unwrap_err(), SceneError::NonFinite { field: "color_logit" });
        l.color_logit.y = 0.0;
        l.log_scale.x = f64::INFINITY;
        assert!(l.to_gaussian().is_err());
    }

    #[test]
    fn zero_quaternion_latent_reads_as_identity() {
        let mut l = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::repeat(0.5)).to_latent();
        l.rot = [0.0; 4];
        assert_eq!(l.to_gaussian().unwrap().rot, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn transformed_rotation_matches_matrix_product() {
        let pose = Isometry3::from_parts(
            Translation3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
        );
        let mut g = g(0.5);
        g.rot = normalize_quat(&[0.9, 0.1, -0.3, 0.2]);
        let t = g.transformed(&pose);
        let expect = pose.rotation.to_rotation_matrix().into_inner() * g.rotation_matrix();
        assert!((t.rotation_matrix() - expect).abs().max() < 1e-12);
    }

    #[test]
    fn pose_from_matrix_rejects_skew() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 0.01;
        assert!(pose_from_matrix(m, Vector3::zeros()).is_err());
        assert!(pose_from_matrix(Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn finite() -> impl Strategy<Value = f64> {
            prop_oneof![
                -1e300..1e300f64,
                -50.0..50.0f64,
                Just(0.0),
                Just(f64::MAX),
                Just(f64::MIN),
                Just(f64::MIN_POSITIVE),
            ]
        }

        proptest! {
            #[test]
            fn from_latent_is_total(a in proptest::array::uniform14(finite())) {
                let g = LatentGaussian::from_array(&a).to_gaussian().unwrap();
                prop_assert!(g.validate(0).is_ok(), "{:?} -> {:?}", a, g);
            }

            #[test]
            fn flatten_is_pure(xs in proptest::collection::vec(-10.0..10.0f64, 0..8), frame in 0u32..3) {
                let scene = Scene {
                    background: xs.iter().map(|&x| g(x)).collect(),
                    actors: vec![Actor { track: track(1, vec![Pose::translation(0.5, 0.0, 0.0); 3]), gaussians: vec![g(0.1)] }],
                    distant: vec![g(500.0)],
                    meta: SceneMeta::default(),
                };
                prop_assert_eq!(scene.flatten_at_frame(frame).unwrap(), scene.flatten_at_frame(frame).unwrap());
            }
        }
    }
}

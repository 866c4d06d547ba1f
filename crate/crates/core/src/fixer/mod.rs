//! Fixer boundary: conditioning inputs for novel views, builtin image
//! fixers, and the client/server sides of the wire protocol.

pub mod client;
pub mod conformance;
pub mod serve;
pub mod wire;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::enhance::SourceView;
use crate::evalx::GroundTruth;
use crate::image::Image;
use crate::raster::{render, render_points, ColoredPoint};
use crate::scene::{CameraView, Scene, SceneError};

pub use client::{ClientConfig, Endpoint, RemoteFixer};

/// Meters of pose distance charged per radian of rotation.
pub const ROTATION_WEIGHT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum FixError {
    #[error("no source views to select a reference from")]
    NoSourceViews,
    #[error("request `{view_id}`: {reason}")]
    InvalidRequest { view_id: String, reason: String },
    #[error("duplicate view id `{0}` in batch")]
    DuplicateViewId(String),
    #[error(transparent)]
    Render(#[from] SceneError),
    #[error("backend `{backend}` failed on `{view_id}`: {message}")]
    Backend {
        backend: String,
        view_id: String,
        message: String,
    },
    #[error("`{view_id}` got no response within the timeout after {attempts} attempt(s)")]
    Timeout { view_id: String, attempts: u32 },
    #[error("protocol error in field `{field}`: {reason}")]
    Protocol { field: &'static str, reason: String },
    #[error("cannot reach fixer at {endpoint}: {reason}")]
    Connect { endpoint: String, reason: String },
    #[error("unknown builtin backend `{0}` (expected identity or median-denoise)")]
    UnknownBackend(String),
    #[error("oracle has no ground truth for view `{0}`")]
    NoGroundTruth(String),
}

/// Conditioning bundle for one novel view.
#[derive(Clone, Debug, PartialEq)]
pub struct FixRequest {
    pub view_id: String,
    pub render: Image,
    pub reference: Image,
    pub point_map: Image,
}

impl FixRequest {
    pub fn new(view_id: impl Into<String>, render: Image, reference: Image, point_map: Image) -> Result<Self, FixError> {
        let view_id = view_id.into();
        let bad = |reason: String| FixError::InvalidRequest {
            view_id: view_id.clone(),
            reason,
        };
        if render.width == 0 || render.height == 0 {
            return Err(bad("empty render".into()));
        }
        for (name, img) in [("reference", &reference), ("point_map", &point_map)] {
            if img.shape() != render.shape() {
                return Err(bad(format!("{name} is {:?}, render is {:?}", img.shape(), render.shape())));
            }
        }
        Ok(Self {
            view_id,
            render,
            reference,
            point_map,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.render.shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixResponse {
    pub view_id: String,
    pub fixed: Image,
    pub backend_name: String,
}

/// Pose distance: translation plus weighted geodesic rotation angle.
pub fn pose_distance(a: &CameraView, b: &CameraView) -> f64 {
    (a.center() - b.center()).norm() + ROTATION_WEIGHT * a.pose.rotation.angle_to(&b.pose.rotation)
}

/// Source view closest in pose to `novel`; ties go to the lowest frame.
pub fn select_reference<'a>(novel: &CameraView, src: &'a [SourceView]) -> Result<&'a SourceView, FixError> {
    src.iter()
        .map(|v| (pose_distance(novel, &v.cam), v))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then(a.cam.frame_index.cmp(&b.cam.frame_index)))
        .map(|(_, v)| v)
        .ok_or(FixError::NoSourceViews)
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<(), FixError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(FixError::DuplicateViewId(id.to_string()));
        }
    }
    Ok(())
}

/// Renders each novel camera, picks its reference view and renders the
/// point map, packaging all three as a request.
pub fn build_requests(
    scene: &Scene,
    novel: &[(String, CameraView)],
    src: &[SourceView],
    points: &[ColoredPoint],
    point_sigma: f64,
) -> Result<Vec<FixRequest>, FixError> {
    if novel.is_empty() {
        return Ok(Vec::new());
    }
    check_unique(novel.iter().map(|(id, _)| id.as_str()))?;
    if src.is_empty() {
        return Err(FixError::NoSourceViews);
    }
    novel
        .par_iter()
        .map(|(id, cam)| {
            let rendered = render(scene, cam)?.color;
            let reference = select_reference(cam, src)?.image.clone();
            let point_map = render_points(points, cam, point_sigma).color;
            FixRequest::new(id.clone(), rendered, reference, point_map)
        })
        .collect()
}

/// Anything that turns requests into fixed images.
pub trait Fixer {
    fn name(&self) -> &str;

    /// Announces the cameras behind the view ids of upcoming requests.
    fn prepare(&mut self, _views: &[(String, CameraView)]) {}

    /// One result per request, in request order.
    fn fix_batch(&mut self, requests: &[FixRequest]) -> Vec<Result<FixResponse, FixError>>;
}

/// A pure per-image fixer.
pub trait FixerBackend: Send + Sync {
    fn name(&self) -> &str;

    fn prepare(&mut self, _views: &[(String, CameraView)]) {}

    fn fix_one(&self, request: &FixRequest) -> Result<Image, FixError>;
}

fn check_output(backend: &str, req: &FixRequest, img: &Image) -> Result<(), FixError> {
    let fail = |message: String| FixError::Backend {
        backend: backend.to_string(),
        view_id: req.view_id.clone(),
        message,
    };
    if img.shape() != req.shape() {
        return Err(fail(format!("output is {:?}, request is {:?}", img.shape(), req.shape())));
    }
    if !img.data.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(fail("output pixel outside [0, 1]".into()));
    }
    Ok(())
}

/// Runs a [`FixerBackend`] in process, requests in parallel.
pub struct Builtin(pub Box<dyn FixerBackend>);

impl Builtin {
    pub fn new(backend: impl FixerBackend + 'static) -> Self {
        Self(Box::new(backend))
    }
}

impl Fixer for Builtin {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn prepare(&mut self, views: &[(String, CameraView)]) {
        self.0.prepare(views);
    }

    fn fix_batch(&mut self, requests: &[FixRequest]) -> Vec<Result<FixResponse, FixError>> {
        let backend = &*self.0;
        requests
            .par_iter()
            .map(|req| {
                let fixed = backend.fix_one(req)?;
                check_output(backend.name(), req, &fixed)?;
                Ok(FixResponse {
                    view_id: req.view_id.clone(),
                    fixed,
                    backend_name: backend.name().to_string(),
                })
            })
            .collect()
    }
}

/// Sends a batch through `fixer`. Duplicate view ids fail the whole batch.
pub fn fix(requests: &[FixRequest], fixer: &mut dyn Fixer) -> Result<Vec<Result<FixResponse, FixError>>, FixError> {
    check_unique(requests.iter().map(|r| r.view_id.as_str()))?;
    Ok(fixer.fix_batch(requests))
}

/// Returns the render unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFixer;

impl FixerBackend for IdentityFixer {
    fn name(&self) -> &str {
        "identity"
    }

    fn fix_one(&self, request: &FixRequest) -> Result<Image, FixError> {
        Ok(request.render.clone())
    }
}

/// Per-channel median over a square window, clamped at the borders.
#[derive(Clone, Copy, Debug)]
pub struct MedianDenoise {
    pub radius: usize,
}

impl Default for MedianDenoise {
    fn default() -> Self {
        Self { radius: 1 }
    }
}

impl FixerBackend for MedianDenoise {
    fn name(&self) -> &str {
        "median-denoise"
    }

    fn fix_one(&self, request: &FixRequest) -> Result<Image, FixError> {
        Ok(median_filter(&request.render, self.radius))
    }
}

pub fn median_filter(img: &Image, radius: usize) -> Image {
    let (w, h) = img.shape();
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        window.push(img.data[(sy * w + sx) * 3 + c]);
                    }
                }
                window.sort_by(f64::total_cmp);
                *v = window[window.len() / 2];
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Answers with ground truth at the camera registered for each view id.
pub struct OracleFixer {
    gt: Arc<dyn GroundTruth + Send + Sync>,
    cams: HashMap<String, CameraView>,
}

impl OracleFixer {
    pub fn new(gt: Arc<dyn GroundTruth + Send + Sync>) -> Self {
        Self {
            gt,
            cams: HashMap::new(),
        }
    }
}

impl FixerBackend for OracleFixer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn prepare(&mut self, views: &[(String, CameraView)]) {
        self.cams.extend(views.iter().cloned());
    }

    fn fix_one(&self, request: &FixRequest) -> Result<Image, FixError> {
        self.cams
            .get(&request.view_id)
            .and_then(|cam| self.gt.image(cam))
            .ok_or_else(|| FixError::NoGroundTruth(request.view_id.clone()))
    }
}

/// Builtin backends constructible by name alone.
pub fn builtin_backend(name: &str) -> Result<Box<dyn FixerBackend>, FixError> {
    match name {
        "identity" => Ok(Box::new(IdentityFixer)),
        "median-denoise" => Ok(Box::new(MedianDenoise::default())),
        other => Err(FixError::UnknownBackend(other.to_string())),
    }
}

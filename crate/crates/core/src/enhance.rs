//! Unrolled scene enhancement: per-Gaussian residuals predicted from
//! gradients and applied in latent space, plus the reconstructor mode that
//! starts from a point cloud.

use std::io::Write;

use kiddo::{KdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Point3, SymmetricEigen, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalx::{lateral_shift, EvalError};
use crate::grad::{backward_views, GradError, GradientSet, ParamVec};
use crate::image::{Image, ShapeError};
use crate::loss::{CombinedLoss, LossError, LossReport, LossView, LossWeights, SparseDepth};
use crate::raster::{render_points, render_with, ColoredPoint, RenderOptions, RenderOutput, DEFAULT_POINT_SIGMA};
use crate::scene::{
    bounding_sphere, distant_shell, Actor, ActorTrack, CameraView, Gaussian, LatentGaussian, Partition, Scene,
    SceneError, SceneMeta, ACTOR_BOX_MARGIN, DISTANT_RADIUS_FACTOR, PARAMS_PER_GAUSSIAN,
};

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("at least one source view is required")]
    NoSourceViews,
    #[error("point cloud is empty")]
    NoPoints,
    #[error("invalid enhance config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration} (view {view})")]
    NonFiniteLoss { iteration: u32, view: String },
    #[error("non-finite update at iteration {iteration}")]
    NonFiniteUpdate { iteration: u32 },
    #[error("view {view}: {source}")]
    ViewShape { view: String, source: ShapeError },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Recorded view with its captured image.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView {
    pub cam: CameraView,
    pub image: Image,
    pub depth: Option<SparseDepth>,
}

impl SourceView {
    pub fn new(cam: CameraView, image: Image) -> Self {
        Self { cam, image, depth: None }
    }

    /// Attaches sparse depth supervision from a point cloud.
    pub fn with_point_depth(mut self, points: &[ColoredPoint]) -> Self {
        self.depth = Some(SparseDepth::from_points(points, &self.cam));
        self
    }

    pub fn id(&self) -> String {
        format!("src_f{:04}", self.cam.frame_index)
    }
}

/// Synthesized view with its fixer target.
#[derive(Clone, Debug, PartialEq)]
pub struct NovelView {
    pub id: String,
    pub cam: CameraView,
    pub target: Image,
}

/// Default lateral offsets of the synthesized supervision views, meters.
pub const DEFAULT_NOVEL_OFFSETS: [f64; 4] = [-3.0, -2.0, 2.0, 3.0];
/// Novel views are placed at every `DEFAULT_NOVEL_STRIDE`-th frame.
pub const DEFAULT_NOVEL_STRIDE: u32 = 4;
pub const CHUNK_FRAMES: u32 = 20;

/// Stable identifier of a shifted view.
pub fn novel_view_id(frame: u32, offset: f64) -> String {
    format!("novel_f{frame:04}_{offset:+.1}m")
}

/// Cameras laterally shifted by each offset from every source camera whose
/// frame index is a multiple of `stride`. Returned with their identifiers.
pub fn novel_cameras(src: &[CameraView], offsets: &[f64], stride: u32) -> Result<Vec<(String, CameraView)>, EnhanceError> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for cam in src.iter().filter(|c| c.frame_index % stride == 0) {
        for &d in offsets {
            out.push((novel_view_id(cam.frame_index, d), lateral_shift(cam, d)?));
        }
    }
    Ok(out)
}

/// Non-overlapping frame ranges of at most `CHUNK_FRAMES` frames.
pub fn chunks(frames: u32) -> Vec<std::ops::Range<u32>> {
    (0..frames.div_ceil(CHUNK_FRAMES))
        .map(|k| k * CHUNK_FRAMES..((k + 1) * CHUNK_FRAMES).min(frames))
        .collect()
}

/// Step sizes per latent parameter group. The position step is relative to
/// the scene extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizes {
    pub mu: f64,
    pub rot: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl StepSizes {
    /// Step sizes for correcting an existing scene.
    pub fn enhancer() -> Self {
        Self {
            mu: 1.6e-4,
            rot: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 1e-2,
        }
    }

    /// Step sizes for building a scene from its point initialization, where
    /// appearance starts far from the target and 24 steps must cover it.
    pub fn reconstructor() -> Self {
        Self {
            scale: 3e-2,
            opacity: 0.15,
            color: 2e-2,
            ..Self::enhancer()
        }
    }

    fn group(&self, k: usize, extent: f64) -> f64 {
        match k {
            0..=2 => self.mu * extent,
            3..=5 => self.scale,
            6..=9 => self.rot,
            10 => self.opacity,
            _ => self.color,
        }
    }
}

impl Default for StepSizes {
    fn default() -> Self {
        Self::enhancer()
    }
}

/// Diagonal adaptive-moment predictor settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub steps: StepSizes,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            steps: StepSizes::enhancer(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Maps latent gradients to latent residuals. Implementations may keep
/// state across the unrolled iterations of one run.
pub trait ResidualPredictor {
    /// Clears state for a scene of `n` Gaussians.
    fn reset(&mut self, n: usize);
    /// Residuals for the current latents and their gradients. Must return
    /// one finite vector per Gaussian.
    fn predict(&mut self, latents: &[LatentGaussian], grad: &GradientSet, extent: f64) -> Vec<ParamVec>;
}

/// Adam in latent space with state shared across iterations.
#[derive(Clone, Debug)]
pub struct AdamPredictor {
    pub config: AdamConfig,
    m: Vec<ParamVec>,
    v: Vec<ParamVec>,
    t: i32,
}

impl AdamPredictor {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl ResidualPredictor for AdamPredictor {
    fn reset(&mut self, n: usize) {
        self.m = vec![[0.0; PARAMS_PER_GAUSSIAN]; n];
        self.v = vec![[0.0; PARAMS_PER_GAUSSIAN]; n];
        self.t = 0;
    }

    fn predict(&mut self, _latents: &[LatentGaussian], grad: &GradientSet, extent: f64) -> Vec<ParamVec> {
        if self.m.len() != grad.len() {
            self.reset(grad.len());
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let lr: ParamVec = std::array::from_fn(|k| c.steps.group(k, extent));
        let mut out = vec![[0.0; PARAMS_PER_GAUSSIAN]; grad.len()];
        for (i, g) in grad.latent.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..PARAMS_PER_GAUSSIAN {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                out[i][k] = if mh == 0.0 { 0.0 } else { -lr[k] * mh / (vh.sqrt() + c.eps) };
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Enhancer,
    Reconstructor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub iterations: u32,
    pub weights: LossWeights,
    pub predictor: AdamConfig,
    pub mode: Mode,
}

impl EnhanceConfig {
    pub fn enhancer() -> Self {
        Self {
            iterations: 12,
            weights: LossWeights::default(),
            predictor: AdamConfig::default(),
            mode: Mode::Enhancer,
        }
    }

    pub fn reconstructor() -> Self {
        Self {
            iterations: 24,
            weights: LossWeights {
                novel: 0.1,
                ..LossWeights::default()
            },
            predictor: AdamConfig {
                steps: StepSizes::reconstructor(),
                ..AdamConfig::default()
            },
            mode: Mode::Reconstructor,
        }
    }

    pub fn validate(&self) -> Result<(), EnhanceError> {
        if self.iterations == 0 {
            return Err(EnhanceError::InvalidConfig("iterations must be at least 1".into()));
        }
        self.weights.validate()?;
        let p = &self.predictor;
        let s = &p.steps;
        for (name, v) in [
            ("mu", s.mu),
            ("rot", s.rot),
            ("scale", s.scale),
            ("opacity", s.opacity),
            ("color", s.color),
            ("eps", p.eps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EnhanceError::InvalidConfig(format!("step size {name} = {v}")));
            }
        }
        if !((0.0..1.0).contains(&p.beta1) && (0.0..1.0).contains(&p.beta2)) {
            return Err(EnhanceError::InvalidConfig("moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self::enhancer()
    }
}

/// Per-iteration view of the loop handed to observers.
pub struct IterationRecord<'a> {
    pub iteration: u32,
    /// Scene and latents before this iteration's update.
    pub scene: &'a Scene,
    pub latents: &'a [LatentGaussian],
    pub report: &'a LossReport,
    pub residual: &'a [ParamVec],
}

pub struct EnhanceOutput {
    pub scene: Scene,
    /// One report per iteration, evaluated before that iteration's update.
    pub trace: Vec<LossReport>,
}

/// Writes a loss trace as `iteration,term,value` lines.
pub fn write_trace(mut w: impl Write, trace: &[LossReport]) -> std::io::Result<()> {
    writeln!(w, "iteration,term,value")?;
    for (i, r) in trace.iter().enumerate() {
        writeln!(w, "{i},total,{:e}", r.total)?;
        for (name, v) in &r.terms {
            writeln!(w, "{i},{name},{v:e}")?;
        }
    }
    Ok(())
}

fn check_views(src: &[SourceView], novel: &[NovelView]) -> Result<(), EnhanceError> {
    if src.is_empty() {
        return Err(EnhanceError::NoSourceViews);
    }
    let shape = |cam: &CameraView| (cam.width as usize, cam.height as usize);
    for v in src {
        if v.image.shape() != shape(&v.cam) {
            return Err(EnhanceError::ViewShape {
                view: v.id(),
                source: ShapeError {
                    expected: shape(&v.cam),
                    got: v.image.shape(),
                },
            });
        }
    }
    for v in novel {
        if v.target.shape() != shape(&v.cam) {
            return Err(EnhanceError::ViewShape {
                view: v.id.clone(),
                source: ShapeError {
                    expected: shape(&v.cam),
                    got: v.target.shape(),
                },
            });
        }
    }
    Ok(())
}

/// Runs `cfg.iterations` unrolled steps with the default predictor.
pub fn enhance(scene: &Scene, src: &[SourceView], novel: &[NovelView], cfg: &EnhanceConfig) -> Result<EnhanceOutput, EnhanceError> {
    let mut predictor = AdamPredictor::new(cfg.predictor);
    enhance_with(scene, src, novel, cfg, &mut predictor, &mut |_| {})
}

/// The unrolled loop: render, score, backpropagate, predict residuals and
/// add them to the latents. Actor means are kept inside their boxes.
pub fn enhance_with(
    scene: &Scene,
    src: &[SourceView],
    novel: &[NovelView],
    cfg: &EnhanceConfig,
    predictor: &mut dyn ResidualPredictor,
    observer: &mut dyn FnMut(&IterationRecord<'_>),
) -> Result<EnhanceOutput, EnhanceError> {
    cfg.validate()?;
    check_views(src, novel)?;
    scene.validate()?;
    let opts = RenderOptions::default();
    let loss = CombinedLoss::new(cfg.weights);
    let partitions = scene.partitions();
    let mut current = scene.clone();
    let mut latents = current.latents();
    predictor.reset(latents.len());
    let mut trace = Vec::with_capacity(cfg.iterations as usize);

    let src_ids: Vec<String> = src.iter().map(SourceView::id).collect();
    let cams: Vec<CameraView> = src.iter().map(|v| v.cam).chain(novel.iter().map(|v| v.cam)).collect();

    for it in 0..cfg.iterations {
        let renders: Vec<RenderOutput> = cams
            .par_iter()
            .map(|cam| render_with(&current, cam, &opts))
            .collect::<Result<_, _>>()?;
        let (src_r, novel_r) = renders.split_at(src.len());
        let src_views: Vec<LossView<'_>> = src
            .iter()
            .zip(src_r)
            .zip(&src_ids)
            .map(|((v, r), id)| LossView {
                id,
                render: r,
                target: &v.image,
                depth: v.depth.as_ref(),
            })
            .collect();
        let novel_views: Vec<LossView<'_>> = novel
            .iter()
            .zip(novel_r)
            .map(|(v, r)| LossView {
                id: &v.id,
                render: r,
                target: &v.target,
                depth: None,
            })
            .collect();
        let out = loss.evaluate(&src_views, &novel_views)?;
        if let Some(bad) = out.report.views.iter().find(|v| !v.value.is_finite()) {
            return Err(EnhanceError::NonFiniteLoss {
                iteration: it,
                view: bad.id.clone(),
            });
        }
        if !out.report.total.is_finite() {
            return Err(EnhanceError::NonFiniteLoss {
                iteration: it,
                view: "total".into(),
            });
        }

        let pairs: Vec<(CameraView, crate::grad::PixelGrad)> =
            cams.iter().copied().zip(out.src_grads.into_iter().chain(out.novel_grads)).collect();
        let grad = backward_views(&current, &pairs, &opts)?;
        let residual = predictor.predict(&latents, &grad, current.meta.extent);
        if residual.len() != latents.len() || residual.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(EnhanceError::NonFiniteUpdate { iteration: it });
        }
        observer(&IterationRecord {
            iteration: it,
            scene: &current,
            latents: &latents,
            report: &out.report,
            residual: &residual,
        });
        trace.push(out.report);

        let prev = current.params();
        let mut next = Vec::with_capacity(latents.len());
        let mut gaussians = Vec::with_capacity(latents.len());
        for (((l, r), part), g) in latents.iter().zip(&residual).zip(&partitions).zip(prev) {
            // Untouched Gaussians skip the latent round trip so exact
            // fixpoints stay exact.
            if r.iter().all(|v| *v == 0.0) {
                next.push(*l);
                gaussians.push(g);
                continue;
            }
            let mut a = l.to_array();
            for k in 0..PARAMS_PER_GAUSSIAN {
                a[k] += r[k];
            }
            let mut nl = LatentGaussian::from_array(&a);
            if let Partition::Actor(i) = part {
                nl.mu = current.actors[*i].track.clamp_local(&nl.mu, ACTOR_BOX_MARGIN);
            }
            gaussians.push(nl.to_gaussian()?);
            next.push(nl);
        }
        current.set_params(&gaussians);
        latents = next;
    }
    Ok(EnhanceOutput { scene: current, trace })
}

/// Point-initialization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub neighbors: usize,
    pub opacity: f64,
    /// Normal-axis scale relative to the in-plane scale for points whose
    /// neighbourhood is planar. 1 keeps every Gaussian isotropic.
    pub flatten: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            neighbors: 8,
            opacity: 0.5,
            flatten: 0.1,
            seed: 0,
        }
    }
}

/// Mean distance from each point to its `k` nearest neighbours.
#[cfg(test)]
fn knn_scales(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    knn_neighbourhoods(points, k).into_iter().map(|(s, _)| s).collect()
}

/// Per point: mean neighbour distance and the unit normal of the local
/// neighbourhood when it is planar.
fn knn_neighbourhoods(points: &[Vector3<f64>], k: usize) -> Vec<(f64, Option<Matrix3<f64>>)> {
    if points.len() < 2 {
        return vec![(0.1, None); points.len()];
    }
    let mut tree: KdTree<f64, 3> = KdTree::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        tree.add(&[p.x, p.y, p.z], i as u64);
    }
    let k = k.min(points.len() - 1).max(1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let found = tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], k + 1);
            let mut sum = 0.0;
            let mut n = 0;
            let mut skipped = false;
            let mut nbrs = Vec::with_capacity(k);
            for nb in found {
                if !skipped && nb.item == i as u64 {
                    skipped = true;
                    continue;
                }
                if n < k {
                    sum += nb.distance.sqrt();
                    nbrs.push(points[nb.item as usize]);
                    n += 1;
                }
            }
            ((sum / n.max(1) as f64).max(1e-4), planar_frame(p, &nbrs))
        })
        .collect()
}

/// Rotation whose third column is the neighbourhood normal, if the smallest
/// covariance eigenvalue is clearly separated from the other two.
fn planar_frame(p: &Vector3<f64>, nbrs: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if nbrs.len() < 3 {
        return None;
    }
    let mut cov = Matrix3::zeros();
    for q in nbrs {
        let d = q - p;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(l2 < 0.1 * l1) {
        return None;
    }
    let u: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let v: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    Some(Matrix3::from_columns(&[u, v, u.cross(&v)]))
}

/// Builds an initial scene from colored points. Frame-tagged points that
/// fall inside an actor's box at that frame become actor Gaussians in the
/// actor's frame; everything else is background. A distant shell colored
/// `sky` is added around the point bounds.
pub fn init_from_points(
    points: &[ColoredPoint],
    tracks: &[ActorTrack],
    sky: Vector3<f64>,
    cfg: &InitConfig,
) -> Result<Scene, EnhanceError> {
    if points.is_empty() {
        return Err(EnhanceError::NoPoints);
    }
    if !(cfg.opacity > 0.0 && cfg.opacity < 1.0) || cfg.neighbors == 0 || !(cfg.flatten > 0.0 && cfg.flatten <= 1.0) {
        return Err(EnhanceError::InvalidConfig(
            "init opacity must lie in (0, 1), flatten in (0, 1], neighbors ≥ 1".into(),
        ));
    }
    let mut tracks: Vec<ActorTrack> = tracks.to_vec();
    tracks.sort_by_key(|t| t.id);
    let mut bg: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    let mut actor_pts: Vec<Vec<(Vector3<f64>, Vector3<f64>)>> = vec![Vec::new(); tracks.len()];
    for p in points {
        let owner = p.frame.and_then(|f| {
            tracks.iter().enumerate().find_map(|(i, t)| {
                let pose = t.pose_at(f)?;
                let local = pose.inverse_transform_point(&Point3::from(p.position)).coords;
                t.contains_local(&local, ACTOR_BOX_MARGIN).then_some((i, local))
            })
        });
        match owner {
            Some((i, local)) => actor_pts[i].push((local, p.color_f64())),
            None => bg.push((p.position, p.color_f64())),
        }
    }
    let make = |pts: &[(Vector3<f64>, Vector3<f64>)]| -> Vec<Gaussian> {
        let pos: Vec<Vector3<f64>> = pts.iter().map(|(p, _)| *p).collect();
        pts.iter()
            .zip(knn_neighbourhoods(&pos, cfg.neighbors))
            .map(|((p, c), (s, frame))| match frame {
                Some(r) if cfg.flatten < 1.0 => {
                    let q = UnitQuaternion::from_matrix(&r);
                    Gaussian {
                        mu: *p,
                        scale: Vector3::new(s, s, s * cfg.flatten),
                        rot: [q.w, q.i, q.j, q.k],
                        opacity: cfg.opacity,
                        color: *c,
                    }
                }
                _ => Gaussian::isotropic(*p, s, cfg.opacity, *c),
            })
            .collect()
    };
    let (center, radius) = bounding_sphere(points.iter().map(|p| &p.position));
    let actors = tracks
        .into_iter()
        .zip(&actor_pts)
        .map(|(track, pts)| Actor {
            gaussians: make(pts),
            track,
        })
        .collect();
    let scene = Scene {
        background: make(&bg),
        actors,
        distant: distant_shell(center, radius * DISTANT_RADIUS_FACTOR, sky),
        meta: SceneMeta {
            extent: radius,
            seed: cfg.seed,
        },
    };
    scene.validate()?;
    Ok(scene)
}

/// Sky color estimate: mean of upper-half source pixels the point map does
/// not cover, falling back to the whole upper half.
pub fn estimate_sky(src: &[SourceView], points: &[ColoredPoint]) -> Vector3<f64> {
    let mut uncovered = (Vector3::zeros(), 0usize);
    let mut upper = (Vector3::zeros(), 0usize);
    for v in src {
        let cover = render_points(points, &v.cam, DEFAULT_POINT_SIGMA).alpha;
        let (w, h) = v.image.shape();
        for y in 0..h / 2 {
            for x in 0..w {
                let c = Vector3::from(v.image.pixel(x, y));
                upper.0 += c;
                upper.1 += 1;
                if cover.get(x, y) < 0.05 {
                    uncovered.0 += c;
                    uncovered.1 += 1;
                }
            }
        }
    }
    if uncovered.1 > 0 {
        uncovered.0 / uncovered.1 as f64
    } else if upper.1 > 0 {
        upper.0 / upper.1 as f64
    } else {
        Vector3::repeat(0.5)
    }
}

/// Reconstructor mode: initialize from points, then run the unrolled loop.
pub fn reconstruct(
    src: &[SourceView],
    novel: &[NovelView],
    points: &[ColoredPoint],
    tracks: &[ActorTrack],
    cfg: &EnhanceConfig,
    init: &InitConfig,
) -> Result<EnhanceOutput, EnhanceError> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(EnhanceError::NoSourceViews);
    }
    let sky = estimate_sky(src, points);
    let scene = init_from_points(points, tracks, sky, init)?;
    enhance(&scene, src, novel, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges() {
        assert_eq!(chunks(20), vec![0..20]);
        assert_eq!(chunks(45), vec![0..20, 20..40, 40..45]);
        assert!(chunks(0).is_empty());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = EnhanceConfig {
            iterations: 0,
            ..EnhanceConfig::reconstructor()
        };
        assert!(matches!(cfg.validate(), Err(EnhanceError::InvalidConfig(_))));
    }

    #[test]
    fn adam_zero_gradient_gives_zero_step() {
        let mut p = AdamPredictor::new(AdamConfig::default());
        p.reset(3);
        let g = GradientSet::zeros(3);
        for _ in 0..3 {
            let r = p.predict(&[], &g, 10.0);
            assert!(r.iter().all(|v| v.iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn knn_scale_on_cubic_grid() {
        let h = 0.5;
        let mut pts = Vec::new();
        for i in 0..12 {
            for j in 0..12 {
                for k in 0..12 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64) * h);
                }
            }
        }
        let s = knn_scales(&pts, 8);
        // Interior point: 6 neighbours at h, 2 at h·√2.
        let idx = 6 * 144 + 6 * 12 + 6;
        let expect = (6.0 + 2.0 * 2f64.sqrt()) / 8.0 * h;
        assert!((s[idx] - expect).abs() < 1e-12);
    }
}

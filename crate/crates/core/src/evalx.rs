//! Image metrics, camera perturbations and the interpolation/extrapolation
//! evaluation protocol.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ShapeError};
use crate::loss::{self, LossError};
use crate::raster::render;
use crate::scene::{CameraView, Pose, Scene, SceneError};
use crate::synth::SynthScene;

pub const PSNR_CAP: f64 = 99.0;
pub const MAX_LATERAL_SHIFT: f64 = 10.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("lateral shift {0} m exceeds the ±{MAX_LATERAL_SHIFT} m range")]
    ShiftOutOfRange(f64),
    #[error("unknown behavior '{0}' (expected brake, accelerate, lane-change or swerve)")]
    UnknownBehavior(String),
    #[error("behavior trajectories need at least 2 base frames, got {0}")]
    ShortTrajectory(usize),
    #[error("frame {0} is both a reconstruction input and an interpolation target")]
    FrameLeak(u32),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
}

/// `10·log10(1/MSE)` over all channels, capped at 99 dB.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64, ShapeError> {
    target.check_same_shape(pred)?;
    let n = pred.data.len().max(1) as f64;
    let mse = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub use loss::ssim;

/// Unit right axis of `cam` projected onto the world ground plane (z = 0
/// normal). Falls back to the raw right axis for a camera rolled onto its
/// side.
fn ground_right(cam: &CameraView) -> Vector3<f64> {
    let right = cam.pose.rotation * Vector3::x();
    let flat = Vector3::new(right.x, right.y, 0.0);
    let n = flat.norm();
    if n > 1e-9 {
        flat / n
    } else {
        right
    }
}

/// Moves the camera center `d` meters along its ground-projected right
/// axis. Orientation, intrinsics and frame index are unchanged.
pub fn lateral_shift(cam: &CameraView, d: f64) -> Result<CameraView, EvalError> {
    if !(d.abs() <= MAX_LATERAL_SHIFT) {
        return Err(EvalError::ShiftOutOfRange(d));
    }
    let mut out = *cam;
    out.pose.translation.vector += ground_right(cam) * d;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Brake,
    Accelerate,
    LaneChange,
    Swerve,
}

impl FromStr for Behavior {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "brake" => Ok(Self::Brake),
            "accelerate" => Ok(Self::Accelerate),
            "lane-change" | "lane_change" => Ok(Self::LaneChange),
            "swerve" => Ok(Self::Swerve),
            other => Err(EvalError::UnknownBehavior(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorParams {
    /// Arc-length progress multiplier for brake and accelerate.
    pub factor: f64,
    /// Lateral offset reached by lane change and swerve, meters.
    pub offset: f64,
    /// Lane-change ramp length in frames.
    pub ramp_frames: u32,
    /// Frame at which the lane change starts.
    pub start_frame: u32,
}

impl BehaviorParams {
    pub fn defaults(kind: Behavior) -> Self {
        Self {
            factor: match kind {
                Behavior::Brake => 0.5,
                Behavior::Accelerate => 1.5,
                _ => 1.0,
            },
            offset: 3.0,
            ramp_frames: 10,
            start_frame: 0,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Pose at arc length `s` along the base trajectory, extrapolating along
/// the last segment past the end.
fn pose_at_arc(base: &[CameraView], arc: &[f64], s: f64) -> Pose {
    let n = base.len();
    let mut j = 0;
    while j + 2 < n && arc[j + 1] <= s {
        j += 1;
    }
    let (a, b) = (&base[j].pose, &base[j + 1].pose);
    let len = arc[j + 1] - arc[j];
    let t = if len > 0.0 { (s - arc[j]) / len } else { 0.0 };
    if t == 0.0 {
        return *a;
    }
    let pa = a.translation.vector;
    let pb = b.translation.vector;
    let rot = if t <= 1.0 {
        a.rotation.slerp(&b.rotation, t)
    } else {
        b.rotation
    };
    Pose::from_parts((pa + (pb - pa) * t).into(), rot)
}

/// Behavior rollouts derived from a recorded trajectory.
pub fn behavior_trajectory(kind: Behavior, base: &[CameraView], params: &BehaviorParams) -> Result<Vec<CameraView>, EvalError> {
    let n = base.len();
    if n < 2 {
        return Err(EvalError::ShortTrajectory(n));
    }
    match kind {
        Behavior::Brake | Behavior::Accelerate => {
            let mut arc = vec![0.0; n];
            for i in 1..n {
                arc[i] = arc[i - 1] + (base[i].center() - base[i - 1].center()).norm();
            }
            Ok(base
                .iter()
                .enumerate()
                .map(|(i, cam)| {
                    let mut out = *cam;
                    out.pose = pose_at_arc(base, &arc, arc[i] * params.factor);
                    out
                })
                .collect())
        }
        Behavior::LaneChange => {
            let ramp = params.ramp_frames.clamp(1, (n - 1) as u32) as f64;
            let start = params.start_frame.min((n - 1) as u32 - ramp as u32) as f64;
            base.iter()
                .enumerate()
                .map(|(i, cam)| lateral_shift(cam, params.offset * smoothstep((i as f64 - start) / ramp)))
                .collect()
        }
        Behavior::Swerve => base
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                let u = i as f64 / (n - 1) as f64;
                let ramp = if u <= 0.5 { smoothstep(2.0 * u) } else { smoothstep(2.0 - 2.0 * u) };
                lateral_shift(cam, params.offset * ramp)
            })
            .collect(),
    }
}

/// Source of reference images for evaluation.
pub trait GroundTruth: Sync {
    /// Reference at `cam`, or `None` when no reference exists there.
    fn image(&self, cam: &CameraView) -> Option<Image>;
}

impl GroundTruth for SynthScene {
    fn image(&self, cam: &CameraView) -> Option<Image> {
        self.gt_image(cam).ok()
    }
}

/// Real-data mode: references exist only at the recorded cameras.
pub struct RecordedFrames {
    pub cameras: Vec<CameraView>,
    pub images: Vec<Image>,
}

impl GroundTruth for RecordedFrames {
    fn image(&self, cam: &CameraView) -> Option<Image> {
        self.cameras
            .iter()
            .position(|c| c == cam)
            .map(|i| self.images[i].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Interpolation,
    Moderate,
    Hard,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Interpolation => "interpolation",
            Phase::Moderate => "extrapolation_moderate",
            Phase::Hard => "extrapolation_hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    fn eval(&self, pred: &Image, target: &Image) -> Result<f64, EvalError> {
        Ok(match self {
            Metric::Psnr => psnr(pred, target)?,
            Metric::Ssim => ssim(pred, target)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Every `input_stride`-th frame is a reconstruction input.
    pub input_stride: u32,
    pub shifts: Vec<f64>,
    /// Shifts up to this value are moderate, larger ones hard.
    pub moderate_max: f64,
    pub metrics: Vec<Metric>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            input_stride: 4,
            shifts: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            moderate_max: 3.0,
            metrics: vec![Metric::Psnr, Metric::Ssim],
        }
    }
}

impl EvalProtocol {
    pub fn input_frames(&self, frames: impl IntoIterator<Item = u32>) -> Vec<u32> {
        frames.into_iter().filter(|f| f % self.input_stride == 0).collect()
    }

    pub fn interpolation_frames(&self, frames: impl IntoIterator<Item = u32>) -> Vec<u32> {
        frames.into_iter().filter(|f| f % self.input_stride != 0).collect()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.input_stride < 2 {
            return Err(EvalError::InvalidProtocol("input stride must be at least 2".into()));
        }
        if self.shifts.iter().any(|s| !(*s > 0.0 && *s <= MAX_LATERAL_SHIFT)) {
            return Err(EvalError::InvalidProtocol(format!(
                "shifts must lie in (0, {MAX_LATERAL_SHIFT}]"
            )));
        }
        if self.metrics.is_empty() {
            return Err(EvalError::InvalidProtocol("no metrics selected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scene_id: String,
    pub phase: Phase,
    /// 0 for interpolation rows.
    pub shift_m: f64,
    pub metric: Metric,
    /// `None` when no reference exists (real-data extrapolation).
    pub value: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Checks that no reconstruction input is also an interpolation target.
pub fn audit_frames(protocol: &EvalProtocol, all_frames: &[u32], inputs: &[u32]) -> Result<(), EvalError> {
    let interp: BTreeSet<u32> = protocol.interpolation_frames(all_frames.iter().copied()).into_iter().collect();
    for f in inputs {
        if interp.contains(f) {
            return Err(EvalError::FrameLeak(*f));
        }
    }
    Ok(())
}

fn mean_metric(
    scene: &Scene,
    cams: &[CameraView],
    gt: &dyn GroundTruth,
    metrics: &[Metric],
) -> Result<Vec<Option<f64>>, EvalError> {
    let per_view: Vec<Result<Option<Vec<f64>>, EvalError>> = cams
        .par_iter()
        .map(|cam| {
            let Some(reference) = gt.image(cam) else {
                return Ok(None);
            };
            let pred = render(scene, cam)?.color;
            metrics.iter().map(|m| m.eval(&pred, &reference)).collect::<Result<Vec<_>, _>>().map(Some)
        })
        .collect();
    let mut sums = vec![0.0; metrics.len()];
    let mut count = 0usize;
    for v in per_view {
        match v? {
            // One missing reference invalidates the whole aggregate.
            None => return Ok(vec![None; metrics.len()]),
            Some(vals) => {
                for (s, v) in sums.iter_mut().zip(vals) {
                    *s += v;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(vec![None; metrics.len()]);
    }
    Ok(sums.into_iter().map(|s| Some(s / count as f64)).collect())
}

/// Renders `scene` at the held-out frames and at laterally shifted copies
/// of every frame (both directions), scoring each against `gt`.
/// `inputs` are the frames the scene was reconstructed from; they are
/// audited against the interpolation split.
pub fn run_protocol(
    scene_id: &str,
    scene: &Scene,
    cameras: &[CameraView],
    inputs: &[u32],
    gt: &dyn GroundTruth,
    protocol: &EvalProtocol,
) -> Result<Report, EvalError> {
    protocol.validate()?;
    let frames: Vec<u32> = cameras.iter().map(|c| c.frame_index).collect();
    audit_frames(protocol, &frames, inputs)?;
    let interp: Vec<CameraView> = cameras
        .iter()
        .filter(|c| c.frame_index % protocol.input_stride != 0)
        .copied()
        .collect();
    let mut rows = Vec::new();
    let vals = mean_metric(scene, &interp, gt, &protocol.metrics)?;
    for (m, v) in protocol.metrics.iter().zip(vals) {
        rows.push(ReportRow {
            scene_id: scene_id.to_string(),
            phase: Phase::Interpolation,
            shift_m: 0.0,
            metric: *m,
            value: v,
        });
    }
    for &d in &protocol.shifts {
        let mut shifted = Vec::with_capacity(cameras.len() * 2);
        for c in cameras {
            shifted.push(lateral_shift(c, d)?);
            shifted.push(lateral_shift(c, -d)?);
        }
        let phase = if d <= protocol.moderate_max { Phase::Moderate } else { Phase::Hard };
        let vals = mean_metric(scene, &shifted, gt, &protocol.metrics)?;
        for (m, v) in protocol.metrics.iter().zip(vals) {
            rows.push(ReportRow {
                scene_id: scene_id.to_string(),
                phase,
                shift_m: d,
                metric: *m,
                value: v,
            });
        }
    }
    Ok(Report { rows })
}

/// Mean metric value over `cams` for a scene, all references required.
pub fn mean_psnr(scene: &Scene, cams: &[CameraView], gt: &dyn GroundTruth) -> Result<Option<f64>, EvalError> {
    Ok(mean_metric(scene, cams, gt, &[Metric::Psnr])?[0])
}

impl Report {
    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,protocol_phase,shift_m,metric,value\n");
        for r in &self.rows {
            let value = r.value.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{},{},{:.1},{},{}", r.scene_id, r.phase.as_str(), r.shift_m, r.metric.as_str(), value);
        }
        out
    }

    fn scenes(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.scene_id) {
                seen.push(r.scene_id.clone());
            }
        }
        seen
    }

    /// Mean over rows of one scene matching `phase` and `metric`. `None`
    /// when any contributing value is missing.
    pub fn phase_mean(&self, scene_id: Option<&str>, phase: Phase, metric: Metric) -> Option<f64> {
        let vals: Vec<Option<f64>> = self
            .rows
            .iter()
            .filter(|r| scene_id.is_none_or(|s| r.scene_id == s) && r.phase == phase && r.metric == metric)
            .map(|r| r.value)
            .collect();
        if vals.is_empty() || vals.iter().any(|v| v.is_none()) {
            return None;
        }
        Some(vals.iter().flatten().sum::<f64>() / vals.len() as f64)
    }

    /// Human-readable summary: one row per scene plus the mean, columns
    /// grouped by interpolation, moderate and hard extrapolation.
    pub fn to_markdown(&self) -> String {
        let metrics: Vec<Metric> = {
            let mut m = Vec::new();
            for r in &self.rows {
                if !m.contains(&r.metric) {
                    m.push(r.metric);
                }
            }
            m
        };
        let phases = [Phase::Interpolation, Phase::Moderate, Phase::Hard];
        let mut out = String::from("| Scene |");
        for p in phases {
            for m in &metrics {
                let _ = write!(out, " {} {} |", p.as_str(), m.as_str().to_uppercase());
            }
        }
        out.push_str("\n|---|");
        for _ in 0..phases.len() * metrics.len() {
            out.push_str("---|");
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.3}"));
        let mut ids: Vec<Option<String>> = self.scenes().into_iter().map(Some).collect();
        ids.push(None);
        for id in ids {
            let _ = write!(out, "| {} |", id.as_deref().unwrap_or("mean"));
            for p in phases {
                for m in &metrics {
                    let _ = write!(out, " {} |", fmt(self.phase_mean(id.as_deref(), p, *m)));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_formula_and_cap() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn behavior_names() {
        assert_eq!("lane-change".parse::<Behavior>().unwrap(), Behavior::LaneChange);
        assert!("moonwalk".parse::<Behavior>().is_err());
    }
}

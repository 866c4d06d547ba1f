//! End-to-end runs: enhancing a given scene through a fixer, and the full
//! reconstruct, fix, enhance chain over 20-frame chunks.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enhance::{
    chunks, enhance, estimate_sky, init_from_points, novel_cameras, EnhanceConfig, EnhanceError, InitConfig, NovelView,
    SourceView, DEFAULT_NOVEL_STRIDE,
};
use crate::fixer::{build_requests, fix, FixError, FixRequest, Fixer};
use crate::image::Image;
use crate::loss::LossReport;
use crate::raster::{ColoredPoint, DEFAULT_POINT_SIGMA};
use crate::scene::{ActorTrack, CameraView, Scene};
use crate::sceneio::{write_png, SceneIoError};

/// Lateral offsets of the views sent to the fixer, meters.
pub const PIPELINE_NOVEL_OFFSETS: [f64; 2] = [-3.0, 3.0];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error(transparent)]
    Fix(#[from] FixError),
    #[error("fixer failed on {failed} of {total} views (first: {first})")]
    FixerFailed { failed: usize, total: usize, first: String },
    #[error("chunk {chunk:?} has no source views")]
    EmptyChunk { chunk: Range<u32> },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] SceneIoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub novel_offsets: Vec<f64>,
    pub novel_stride: u32,
    pub point_sigma: f64,
    /// Abort when more than this fraction of fix requests fail.
    pub max_fix_failure: f64,
    pub enhance: EnhanceConfig,
    pub reconstruct: EnhanceConfig,
    pub init: InitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            novel_offsets: PIPELINE_NOVEL_OFFSETS.to_vec(),
            novel_stride: DEFAULT_NOVEL_STRIDE,
            point_sigma: DEFAULT_POINT_SIGMA,
            max_fix_failure: 0.5,
            enhance: EnhanceConfig::enhancer(),
            reconstruct: EnhanceConfig::reconstructor(),
            init: InitConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if let Some(d) = self.novel_offsets.iter().find(|d| !d.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!("novel offset {d}")));
        }
        if self.novel_stride == 0 {
            return Err(PipelineError::InvalidConfig("novel_stride must be at least 1".into()));
        }
        if !(self.point_sigma.is_finite() && self.point_sigma > 0.0) {
            return Err(PipelineError::InvalidConfig(format!("point_sigma {}", self.point_sigma)));
        }
        if !(0.0..=1.0).contains(&self.max_fix_failure) {
            return Err(PipelineError::InvalidConfig("max_fix_failure must lie in [0, 1]".into()));
        }
        self.enhance.validate()?;
        self.reconstruct.validate()?;
        Ok(())
    }
}

/// Wall time of the three enhancement stages.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    /// Novel renders, reference selection and point maps.
    pub render: Duration,
    pub fix: Duration,
    pub enhance: Duration,
}

impl Timing {
    pub fn entries(&self) -> [(&'static str, Duration); 3] {
        [("render", self.render), ("fix", self.fix), ("enhance", self.enhance)]
    }
}

/// One request and what the fixer made of it.
#[derive(Clone, Debug)]
pub struct FixRecord {
    pub request: FixRequest,
    pub camera: CameraView,
    pub outcome: Result<Image, String>,
}

#[derive(Debug)]
pub struct GenreOutput {
    pub scene: Scene,
    pub timing: Timing,
    pub trace: Vec<LossReport>,
    pub records: Vec<FixRecord>,
}

impl GenreOutput {
    pub fn dropped(&self) -> impl Iterator<Item = &FixRecord> {
        self.records.iter().filter(|r| r.outcome.is_err())
    }
}

/// Renders novel views of `scene`, has them fixed, then enhances `scene`
/// against the source views and the fixed images. Failed views are dropped
/// unless too many fail.
pub fn genre(
    scene: &Scene,
    src: &[SourceView],
    points: &[ColoredPoint],
    fixer: &mut dyn Fixer,
    cfg: &PipelineConfig,
) -> Result<GenreOutput, PipelineError> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(EnhanceError::NoSourceViews.into());
    }
    let src_cams: Vec<CameraView> = src.iter().map(|v| v.cam).collect();
    let mut timing = Timing::default();

    let t = Instant::now();
    let cams = novel_cameras(&src_cams, &cfg.novel_offsets, cfg.novel_stride)?;
    let requests = build_requests(scene, &cams, src, points, cfg.point_sigma)?;
    timing.render = t.elapsed();

    let t = Instant::now();
    fixer.prepare(&cams);
    let results = fix(&requests, fixer)?;
    timing.fix = t.elapsed();

    let mut records = Vec::with_capacity(requests.len());
    let mut novel = Vec::new();
    for ((request, (_, cam)), res) in requests.into_iter().zip(&cams).zip(results) {
        let outcome = match res {
            Ok(r) => {
                novel.push(NovelView {
                    id: request.view_id.clone(),
                    cam: *cam,
                    target: r.fixed.clone(),
                });
                Ok(r.fixed)
            }
            Err(e) => {
                log::warn!("dropping novel view {}: {e}", request.view_id);
                Err(e.to_string())
            }
        };
        records.push(FixRecord {
            request,
            camera: *cam,
            outcome,
        });
    }
    let failed = records.len() - novel.len();
    if failed > 0 && failed as f64 > cfg.max_fix_failure * records.len() as f64 {
        let first = records.iter().find_map(|r| r.outcome.as_ref().err()).cloned().unwrap_or_default();
        return Err(PipelineError::FixerFailed {
            failed,
            total: records.len(),
            first,
        });
    }

    let t = Instant::now();
    let out = enhance(scene, src, &novel, &cfg.enhance)?;
    timing.enhance = t.elapsed();
    Ok(GenreOutput {
        scene: out.scene,
        timing,
        trace: out.trace,
        records,
    })
}

#[derive(Debug)]
pub struct ChunkOutput {
    pub frames: Range<u32>,
    /// Reconstructor output before the fixer stage.
    pub reconstructed: Scene,
    pub recon_time: Duration,
    pub recon_trace: Vec<LossReport>,
    /// `None` when no novel views are configured; `scene` then equals
    /// `reconstructed`.
    pub genre: Option<GenreOutput>,
    pub scene: Scene,
}

/// Source views and points belonging to a frame range. Untagged points are
/// shared by every chunk.
pub fn chunk_inputs(src: &[SourceView], points: &[ColoredPoint], frames: &Range<u32>) -> (Vec<SourceView>, Vec<ColoredPoint>) {
    let views = src.iter().filter(|v| frames.contains(&v.cam.frame_index)).cloned().collect();
    let pts = points
        .iter()
        .filter(|p| p.frame.is_none_or(|f| frames.contains(&f)))
        .copied()
        .collect();
    (views, pts)
}

/// Reconstructs one chunk from points, then runs [`genre`] on it.
pub fn genre_plus_chunk(
    frames: Range<u32>,
    src: &[SourceView],
    points: &[ColoredPoint],
    tracks: &[ActorTrack],
    fixer: &mut dyn Fixer,
    cfg: &PipelineConfig,
) -> Result<ChunkOutput, PipelineError> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(PipelineError::EmptyChunk { chunk: frames });
    }
    let t = Instant::now();
    let sky = estimate_sky(src, points);
    let init = init_from_points(points, tracks, sky, &cfg.init)?;
    let recon = enhance(&init, src, &[], &cfg.reconstruct)?;
    let recon_time = t.elapsed();
    let genre = if cfg.novel_offsets.is_empty() {
        None
    } else {
        Some(genre(&recon.scene, src, points, fixer, cfg)?)
    };
    let scene = genre.as_ref().map_or_else(|| recon.scene.clone(), |g| g.scene.clone());
    Ok(ChunkOutput {
        frames,
        reconstructed: recon.scene,
        recon_time,
        recon_trace: recon.trace,
        genre,
        scene,
    })
}

/// Full chain over non-overlapping chunks of `frames` frames. Chunks are
/// independent scenes.
pub fn genre_plus(
    src: &[SourceView],
    points: &[ColoredPoint],
    tracks: &[ActorTrack],
    frames: u32,
    fixer: &mut dyn Fixer,
    cfg: &PipelineConfig,
) -> Result<Vec<ChunkOutput>, PipelineError> {
    cfg.validate()?;
    chunks(frames)
        .into_iter()
        .map(|range| {
            let (views, pts) = chunk_inputs(src, points, &range);
            log::info!("chunk {range:?}: {} source views, {} points", views.len(), pts.len());
            genre_plus_chunk(range, &views, &pts, tracks, fixer, cfg)
        })
        .collect()
}

/// Writes each record's render, reference, point map and fixed image as
/// PNGs under `dir`, plus an index of outcomes.
pub fn dump_records(dir: &Path, records: &[FixRecord]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| SceneIoError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut index = String::from("view_id,status\n");
    for r in records {
        let id = &r.request.view_id;
        write_png(dir.join(format!("{id}_render.png")), &r.request.render)?;
        write_png(dir.join(format!("{id}_reference.png")), &r.request.reference)?;
        write_png(dir.join(format!("{id}_points.png")), &r.request.point_map)?;
        match &r.outcome {
            Ok(img) => {
                write_png(dir.join(format!("{id}_fixed.png")), img)?;
                let _ = writeln!(index, "{id},ok");
            }
            Err(e) => {
                let _ = writeln!(index, "{id},\"{}\"", e.replace('"', "'"));
            }
        }
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index).map_err(|source| SceneIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

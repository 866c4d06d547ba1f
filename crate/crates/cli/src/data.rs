//! Dataset directories as written by `gsfix synth`:
//!
//! ```text
//! DIR/poses.txt         cameras of every frame
//! DIR/images/NNNN.png   one image per frame
//! DIR/points.ply        colored points, frame-tagged for actors
//! DIR/tracks.gscn       actor box tracks (a scene without Gaussians)
//! DIR/spec.toml         synthetic only: regenerates ground truth anywhere
//! DIR/scene.gscn        synthetic only: the ground-truth scene
//! ```

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gsfix::enhance::SourceView;
use gsfix::evalx::{GroundTruth, RecordedFrames};
use gsfix::image::Image;
use gsfix::raster::ColoredPoint;
use gsfix::scene::{ActorTrack, CameraView, Scene, SceneMeta};
use gsfix::sceneio::{load_points, load_poses, load_scene, read_png, save_points, save_poses, save_scene, write_png};
use gsfix::synth::{generate, SynthScene, SynthSpec};

use crate::CliError;

pub fn image_path(dir: &Path, frame: u32) -> PathBuf {
    dir.join("images").join(format!("{frame:04}.png"))
}

fn require(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Usage(format!(
            "{} has no {name}; point --data at a dataset directory (create one with `gsfix synth --out DIR`)",
            dir.display()
        )))
    }
}

pub struct Dataset {
    pub dir: PathBuf,
    pub spec: Option<SynthSpec>,
    pub cameras: Vec<CameraView>,
    pub images: Vec<Image>,
    pub points: Vec<ColoredPoint>,
    pub tracks: Vec<ActorTrack>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "dataset directory {} does not exist (create one with `gsfix synth --out DIR`)",
                dir.display()
            )));
        }
        let cameras = load_poses(require(dir, "poses.txt")?)?;
        let points = load_points(require(dir, "points.ply")?)?;
        let tracks = match dir.join("tracks.gscn") {
            p if p.exists() => load_scene(p)?.actors.into_iter().map(|a| a.track).collect(),
            _ => Vec::new(),
        };
        let images = cameras
            .iter()
            .map(|c| {
                let p = image_path(dir, c.frame_index);
                if !p.exists() {
                    return Err(CliError::Usage(format!("{} is missing image {}", dir.display(), p.display())));
                }
                let img = read_png(&p)?;
                if img.shape() != (c.width as usize, c.height as usize) {
                    return Err(CliError::Op(format!(
                        "{} is {:?}, its camera is {}x{}",
                        p.display(),
                        img.shape(),
                        c.width,
                        c.height
                    )));
                }
                Ok(img)
            })
            .collect::<Result<_, _>>()?;
        let spec = match dir.join("spec.toml") {
            p if p.exists() => {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::Op(format!("{}: {e}", p.display())))?;
                Some(SynthSpec::from_toml(&text).map_err(|e| CliError::Op(format!("{}: {e}", p.display())))?)
            }
            _ => None,
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            spec,
            cameras,
            images,
            points,
            tracks,
        })
    }

    pub fn frame_count(&self) -> u32 {
        self.cameras.iter().map(|c| c.frame_index + 1).max().unwrap_or(0)
    }

    /// Input views: every `stride`-th frame inside `frames`.
    pub fn source_views(&self, stride: u32, frames: Option<&Range<u32>>, depth: bool) -> Vec<SourceView> {
        self.cameras
            .iter()
            .zip(&self.images)
            .filter(|(c, _)| c.frame_index % stride == 0 && frames.is_none_or(|r| r.contains(&c.frame_index)))
            .map(|(c, img)| {
                let v = SourceView::new(*c, img.clone());
                if depth {
                    v.with_point_depth(&self.points)
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn synthetic(&self) -> Result<Option<SynthScene>, CliError> {
        self.spec
            .as_ref()
            .map(|s| generate(s).map_err(|e| CliError::Op(e.to_string())))
            .transpose()
    }

    /// Ground truth at any camera for synthetic data, at the recorded
    /// cameras otherwise.
    pub fn ground_truth(&self) -> Result<Arc<dyn GroundTruth + Send + Sync>, CliError> {
        Ok(match self.synthetic()? {
            Some(s) => Arc::new(s),
            None => Arc::new(RecordedFrames {
                cameras: self.cameras.clone(),
                images: self.images.clone(),
            }),
        })
    }
}

/// Writes a synthetic scene as a dataset directory. Returns the written
/// files.
pub fn write_synthetic(dir: &Path, s: &SynthScene) -> Result<Vec<PathBuf>, CliError> {
    let io = |e: std::io::Error| CliError::Op(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir.join("images")).map_err(io)?;
    let mut written = Vec::new();
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, s.spec.to_toml()).map_err(io)?;
    written.push(spec);
    let scene = dir.join("scene.gscn");
    save_scene(&scene, &s.scene)?;
    written.push(scene);
    let tracks = dir.join("tracks.gscn");
    save_scene(&tracks, &tracks_only(&s.scene))?;
    written.push(tracks);
    let points = dir.join("points.ply");
    save_points(&points, &s.points)?;
    written.push(points);
    let poses = dir.join("poses.txt");
    save_poses(&poses, &s.cameras)?;
    written.push(poses);
    for cam in &s.cameras {
        let p = image_path(dir, cam.frame_index);
        write_png(&p, &s.gt_image(cam).map_err(|e| CliError::Op(e.to_string()))?)?;
        written.push(p);
    }
    Ok(written)
}

/// The actor tracks of `scene` with every Gaussian removed.
pub fn tracks_only(scene: &Scene) -> Scene {
    let mut actors = scene.actors.clone();
    for a in &mut actors {
        a.gaussians.clear();
    }
    Scene {
        background: Vec::new(),
        actors,
        distant: Vec::new(),
        meta: SceneMeta {
            extent: scene.meta.extent,
            seed: scene.meta.seed,
        },
    }
}

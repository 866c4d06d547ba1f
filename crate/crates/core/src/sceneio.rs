//! Scene, point cloud, pose and image files.
//!
//! Scene files (`GSCN` v1, little-endian):
//!
//! ```text
//! "GSCN" | u16 version | u16 flags (0)
//! u64 gaussian count N | u32 actor count A | u64 seed | f64 extent
//! A × { u32 id | u32 first_frame | u32 pose count P | u64 gaussian count
//!       | f64 size[3] | P × f64[7] (qw qx qy qz tx ty tz) }
//! N × u8 partition label (0 background, 1 actor, 2 distant)
//! 14 columns × N × f64: mu xyz, scale xyz, rot wxyz, opacity, color rgb
//! ```
//!
//! Gaussians are stored in canonical order, so the actor of each label-1
//! entry follows from the actor table.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::image::{quantize, Image};
use crate::raster::ColoredPoint;
use crate::scene::{
    pose_from_matrix, quat_norm, Actor, ActorTrack, CameraView, Gaussian, Intrinsics, Pose, Scene, SceneError, SceneMeta,
};

pub const SCENE_MAGIC: [u8; 4] = *b"GSCN";
pub const SCENE_VERSION: u16 = 1;
const COLUMNS: usize = 14;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a scene file (magic {found:02x?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported scene file version {0} (this build reads {SCENE_VERSION})")]
    UnsupportedVersion(u16),
    #[error("file truncated: need {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt file at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("invalid scene: {0}")]
    Invalid(#[from] SceneError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("byte {offset}: {reason}")]
    Binary { offset: usize, reason: String },
    #[error("image error: {0}")]
    Image(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneIoError + '_ {
    move |source| SceneIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Little-endian cursor that reports offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneIoError> {
        if self.remaining() < n {
            return Err(SceneIoError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N], SceneIoError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, SceneIoError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }

    fn u32(&mut self) -> Result<u32, SceneIoError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn u64(&mut self) -> Result<u64, SceneIoError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn f64(&mut self) -> Result<f64, SceneIoError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }

    /// Fails early when `count` items of `size` bytes cannot fit, so a
    /// corrupt count never triggers a huge allocation.
    fn check_room(&self, count: u64, size: usize) -> Result<usize, SceneIoError> {
        let need = count.checked_mul(size as u64).filter(|&n| n <= self.remaining() as u64);
        match need {
            Some(_) => Ok(count as usize),
            None => Err(SceneIoError::Truncated {
                offset: self.pos,
                needed: count.saturating_mul(size as u64).min(usize::MAX as u64) as usize,
            }),
        }
    }
}

fn gaussian_columns(g: &Gaussian) -> [f64; COLUMNS] {
    [
        g.mu.x, g.mu.y, g.mu.z, g.scale.x, g.scale.y, g.scale.z, g.rot[0], g.rot[1], g.rot[2], g.rot[3], g.opacity, g.color.x,
        g.color.y, g.color.z,
    ]
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let params: Vec<(&Gaussian, u8)> = scene
        .iter_params()
        .map(|(g, p)| {
            let label = match p {
                crate::scene::Partition::Background => 0,
                crate::scene::Partition::Actor(_) => 1,
                crate::scene::Partition::Distant => 2,
            };
            (g, label)
        })
        .collect();
    let mut out = Vec::with_capacity(40 + params.len() * (1 + COLUMNS * 8));
    out.extend_from_slice(&SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(&(scene.actors.len() as u32).to_le_bytes());
    out.extend_from_slice(&scene.meta.seed.to_le_bytes());
    out.extend_from_slice(&scene.meta.extent.to_le_bytes());
    for a in &scene.actors {
        let t = &a.track;
        out.extend_from_slice(&t.id.to_le_bytes());
        out.extend_from_slice(&t.first_frame.to_le_bytes());
        out.extend_from_slice(&(t.poses.len() as u32).to_le_bytes());
        out.extend_from_slice(&(a.gaussians.len() as u64).to_le_bytes());
        for v in t.size.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &t.poses {
            let q = p.rotation.quaternion();
            for v in [q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend(params.iter().map(|(_, l)| *l));
    let cols: Vec<[f64; COLUMNS]> = params.iter().map(|(g, _)| gaussian_columns(g)).collect();
    for c in 0..COLUMNS {
        for row in &cols {
            out.extend_from_slice(&row[c].to_le_bytes());
        }
    }
    out
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene, SceneIoError> {
    let mut r = Reader::new(bytes);
    let head = &bytes[..4.min(bytes.len())];
    if !SCENE_MAGIC.starts_with(head) {
        return Err(SceneIoError::BadMagic { found: head.to_vec() });
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != SCENE_VERSION {
        return Err(SceneIoError::UnsupportedVersion(version));
    }
    let flags_at = r.pos;
    if r.u16()? != 0 {
        return Err(SceneIoError::Corrupt {
            offset: flags_at,
            reason: "reserved flags must be zero".into(),
        });
    }
    let n_total = r.u64()?;
    let n_actors = r.u32()?;
    let seed = r.u64()?;
    let extent = r.f64()?;
    // Each actor entry is at least 48 bytes.
    let n_actors = r.check_room(n_actors as u64, 48)?;
    let mut actors = Vec::with_capacity(n_actors);
    for _ in 0..n_actors {
        let id = r.u32()?;
        let first_frame = r.u32()?;
        let n_poses = r.u32()?;
        let n_gauss = r.u64()?;
        let size = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let n_poses = r.check_room(n_poses as u64, 56)?;
        let mut poses = Vec::with_capacity(n_poses);
        for k in 0..n_poses {
            let at = r.pos;
            let q = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            let t = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            let norm = quat_norm(&q);
            if !(norm - 1.0).abs().le(&1e-6) || !t.iter().all(|v| v.is_finite()) {
                return Err(SceneError::InvalidTrack {
                    actor: id,
                    reason: format!("pose {k} at byte {at} is not rigid (quaternion norm {norm})"),
                }
                .into());
            }
            poses.push(Pose::from_parts(
                t.into(),
                UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
            ));
        }
        actors.push((
            ActorTrack {
                id,
                size,
                first_frame,
                poses,
            },
            n_gauss,
        ));
    }
    let n = r.check_room(n_total, 1 + COLUMNS * 8)?;
    let labels_at = r.pos;
    let labels = r.take(n)?;
    let actor_total = actors.iter().try_fold(0u64, |acc, (_, k)| acc.checked_add(*k));
    let n_bg = labels.iter().take_while(|&&l| l == 0).count();
    let n_act = labels[n_bg..].iter().take_while(|&&l| l == 1).count();
    let n_dist = labels[n_bg + n_act..].iter().take_while(|&&l| l == 2).count();
    if n_bg + n_act + n_dist != n {
        let bad = n_bg + n_act + n_dist;
        return Err(SceneIoError::Corrupt {
            offset: labels_at + bad,
            reason: format!("partition label {} out of canonical order at gaussian {bad}", labels[bad]),
        });
    }
    if actor_total != Some(n_act as u64) {
        return Err(SceneIoError::Corrupt {
            offset: labels_at,
            reason: format!("{n_act} actor labels but the actor table lists {actor_total:?}"),
        });
    }
    let mut cols = vec![[0.0f64; COLUMNS]; n];
    for c in 0..COLUMNS {
        for row in cols.iter_mut() {
            row[c] = r.f64()?;
        }
    }
    if r.remaining() != 0 {
        return Err(SceneIoError::Corrupt {
            offset: r.pos,
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    let mut gs = cols.iter().map(|c| Gaussian {
        mu: Vector3::new(c[0], c[1], c[2]),
        scale: Vector3::new(c[3], c[4], c[5]),
        rot: [c[6], c[7], c[8], c[9]],
        opacity: c[10],
        color: Vector3::new(c[11], c[12], c[13]),
    });
    let background: Vec<Gaussian> = gs.by_ref().take(n_bg).collect();
    let actors: Vec<Actor> = actors
        .into_iter()
        .map(|(track, k)| Actor {
            track,
            gaussians: gs.by_ref().take(k as usize).collect(),
        })
        .collect();
    let distant: Vec<Gaussian> = gs.collect();
    let scene = Scene {
        background,
        actors,
        distant,
        meta: SceneMeta { extent, seed },
    };
    if !(extent.is_finite() && extent >= 0.0) {
        return Err(SceneIoError::Corrupt {
            offset: 28,
            reason: format!("scene extent {extent} must be finite and non-negative"),
        });
    }
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<(), SceneIoError> {
    let path = path.as_ref();
    fs::write(path, encode_scene(scene)).map_err(io_err(path))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneIoError> {
    let path = path.as_ref();
    decode_scene(&fs::read(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// Points (PLY subset: vertex x y z, optional red green blue and frame).

/// Binary little-endian PLY with double positions, byte colors and an int
/// frame tag (-1 for static points).
pub fn encode_points(points: &[ColoredPoint]) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\ncomment gsfix colored points\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int frame\nend_header\n",
        points.len()
    )
    .into_bytes();
    for p in points {
        for v in p.position.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.color);
        let f = p.frame.map_or(-1i32, |f| f as i32);
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

/// ASCII PLY, same properties as [`encode_points`].
pub fn encode_points_ascii(points: &[ColoredPoint]) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int frame\nend_header\n",
        points.len()
    );
    for p in points {
        let f = p.frame.map_or(-1i64, |f| f as i64);
        writeln!(
            out,
            "{:?} {:?} {:?} {} {} {} {f}",
            p.position.x, p.position.y, p.position.z, p.color[0], p.color[1], p.color[2]
        )
        .expect("string write");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<(String, PlyType)>,
}

struct PlyHeader {
    ascii: bool,
    elements: Vec<PlyElement>,
    body_offset: usize,
    body_line: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader, SceneIoError> {
    let perr = |line: usize, reason: String| SceneIoError::Parse { line, reason };
    let mut pos = 0;
    let mut line_no = 0;
    let mut format: Option<bool> = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let Some(end) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(perr(line_no + 1, "header ends without end_header".into()));
        };
        line_no += 1;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| perr(line_no, "header is not UTF-8".into()))?
            .trim_end_matches('\r');
        let toks: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(perr(1, format!("expected `ply`, found `{line}`")));
            }
            continue;
        }
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, ver] => {
                if *ver != "1.0" {
                    return Err(perr(line_no, format!("unsupported PLY version {ver}")));
                }
                format = Some(match *f {
                    "ascii" => true,
                    "binary_little_endian" => false,
                    other => return Err(perr(line_no, format!("unsupported format `{other}`"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse::<usize>()
                    .map_err(|_| perr(line_no, format!("bad element count `{count}`")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let el = elements.last().ok_or_else(|| perr(line_no, "property before element".into()))?;
                if el.name == "vertex" || elements.iter().position(|e| e.name == "vertex").is_none() {
                    return Err(perr(line_no, "list properties are only supported after the vertex element".into()));
                }
            }
            ["property", ty, name] => {
                let ty = PlyType::parse(ty).ok_or_else(|| perr(line_no, format!("unknown property type `{ty}`")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(line_no, "property before element".into()))?;
                el.props.push((name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err(perr(line_no, format!("unrecognized header line `{line}`"))),
        }
    }
    let ascii = format.ok_or_else(|| perr(line_no, "missing format line".into()))?;
    Ok(PlyHeader {
        ascii,
        elements,
        body_offset: pos,
        body_line: line_no + 1,
    })
}

fn point_from_values(props: &[(String, PlyType)], vals: &[f64], at: impl Fn(String) -> SceneIoError) -> Result<ColoredPoint, SceneIoError> {
    let get = |name: &str| props.iter().position(|(n, _)| n == name).map(|i| vals[i]);
    let x = get("x").ok_or_else(|| at("vertex lacks x".into()))?;
    let y = get("y").ok_or_else(|| at("vertex lacks y".into()))?;
    let z = get("z").ok_or_else(|| at("vertex lacks z".into()))?;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(at("non-finite position".into()));
    }
    let mut color = [128u8; 3];
    for (c, name) in color.iter_mut().zip(["red", "green", "blue"]) {
        if let Some(v) = get(name) {
            let ty = props.iter().find(|(n, _)| n == name).map(|(_, t)| *t).expect("present");
            *c = match ty {
                PlyType::F32 | PlyType::F64 => quantize(v),
                _ if (0.0..=255.0).contains(&v) => v as u8,
                _ => return Err(at(format!("{name} value {v} outside 0..=255"))),
            };
        }
    }
    let frame = match get("frame") {
        None => None,
        Some(f) if f < 0.0 => None,
        Some(f) if f <= u32::MAX as f64 && f.fract() == 0.0 => Some(f as u32),
        Some(f) => return Err(at(format!("bad frame tag {f}"))),
    };
    Ok(ColoredPoint {
        position: Vector3::new(x, y, z),
        color,
        frame,
    })
}

pub fn decode_points(bytes: &[u8]) -> Result<Vec<ColoredPoint>, SceneIoError> {
    let h = parse_ply_header(bytes)?;
    let vi = h
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| SceneIoError::Parse {
            line: h.body_line - 1,
            reason: "no vertex element".into(),
        })?;
    let body = &bytes[h.body_offset..];
    if h.ascii {
        let text = std::str::from_utf8(body).map_err(|e| SceneIoError::Parse {
            line: h.body_line + body[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            reason: "body is not UTF-8".into(),
        })?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (h.body_line + i, l));
        // Skip elements stored before the vertices, one line each.
        for e in &h.elements[..vi] {
            for _ in 0..e.count {
                lines.next().ok_or_else(|| SceneIoError::Parse {
                    line: h.body_line,
                    reason: format!("missing {} data", e.name),
                })?;
            }
        }
        let v = &h.elements[vi];
        let mut out = Vec::with_capacity(v.count.min(1 << 20));
        for k in 0..v.count {
            let (line, l) = lines.next().ok_or_else(|| SceneIoError::Parse {
                line: h.body_line + k,
                reason: format!("expected {} vertices, found {k}", v.count),
            })?;
            let at = |reason: String| SceneIoError::Parse { line, reason };
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| at(format!("bad number `{t}`"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != v.props.len() {
                return Err(at(format!("{} values for {} properties", vals.len(), v.props.len())));
            }
            out.push(point_from_values(&v.props, &vals, at)?);
        }
        Ok(out)
    } else {
        let mut pos = h.body_offset;
        let row = |e: &PlyElement| e.props.iter().map(|(_, t)| t.size()).sum::<usize>();
        for e in &h.elements[..vi] {
            let skip = e.count.checked_mul(row(e)).filter(|&n| n <= bytes.len() - pos);
            pos += skip.ok_or(SceneIoError::Binary {
                offset: pos,
                reason: format!("{} data truncated", e.name),
            })?;
        }
        let v = &h.elements[vi];
        let stride = row(v);
        if v.count.checked_mul(stride).is_none_or(|n| n > bytes.len() - pos) {
            return Err(SceneIoError::Binary {
                offset: pos,
                reason: format!("{} vertices of {stride} bytes do not fit in {} bytes", v.count, bytes.len() - pos),
            });
        }
        let mut out = Vec::with_capacity(v.count);
        let mut vals = vec![0.0; v.props.len()];
        for _ in 0..v.count {
            let start = pos;
            for (slot, (_, t)) in vals.iter_mut().zip(&v.props) {
                *slot = t.read_le(&bytes[pos..pos + t.size()]);
                pos += t.size();
            }
            out.push(point_from_values(&v.props, &vals, |reason| SceneIoError::Binary { offset: start, reason })?);
        }
        Ok(out)
    }
}

pub fn save_points(path: impl AsRef<Path>, points: &[ColoredPoint]) -> Result<(), SceneIoError> {
    let path = path.as_ref();
    fs::write(path, encode_points(points)).map_err(io_err(path))
}

pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<ColoredPoint>, SceneIoError> {
    let path = path.as_ref();
    decode_points(&fs::read(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// Poses: an intrinsics header, then one world-from-camera 3×4 per frame.

pub fn encode_poses(cams: &[CameraView]) -> String {
    let mut out = String::from("# gsfix poses v1: frame then world-from-camera 3x4 rows\n");
    let mut last: Option<(Intrinsics, u32, u32)> = None;
    for c in cams {
        let k = (c.intrinsics, c.width, c.height);
        if last != Some(k) {
            writeln!(
                out,
                "intrinsics {:?} {:?} {:?} {:?} {} {}",
                c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy, c.width, c.height
            )
            .expect("string write");
            last = Some(k);
        }
        let r = c.pose.rotation.to_rotation_matrix().into_inner();
        let t = c.pose.translation.vector;
        write!(out, "{}", c.frame_index).expect("string write");
        for i in 0..3 {
            write!(out, " {:?} {:?} {:?} {:?}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]).expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn decode_poses(text: &str) -> Result<Vec<CameraView>, SceneIoError> {
    let mut intr: Option<(Intrinsics, u32, u32)> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let perr = |reason: String| SceneIoError::Parse { line, reason };
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| perr(format!("bad number `{t}`")));
        if toks[0] == "intrinsics" {
            if toks.len() != 7 {
                return Err(perr("intrinsics needs fx fy cx cy width height".into()));
            }
            let dim = |t: &str| {
                t.parse::<u32>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| perr(format!("bad image dimension `{t}`")))
            };
            intr = Some((
                Intrinsics {
                    fx: num(toks[1])?,
                    fy: num(toks[2])?,
                    cx: num(toks[3])?,
                    cy: num(toks[4])?,
                },
                dim(toks[5])?,
                dim(toks[6])?,
            ));
            continue;
        }
        let (k, w, h) = intr.ok_or_else(|| perr("pose before any intrinsics line".into()))?;
        if toks.len() != 13 {
            return Err(perr(format!("expected frame index and 12 numbers, found {} fields", toks.len())));
        }
        let frame = toks[0]
            .parse::<u32>()
            .map_err(|_| perr(format!("bad frame index `{}`", toks[0])))?;
        let v: Vec<f64> = toks[1..].iter().map(|t| num(t)).collect::<Result<_, _>>()?;
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let pose = pose_from_matrix(r, t).map_err(|e| perr(e.to_string()))?;
        out.push(CameraView::new(k, pose, w, h, frame).map_err(|e| perr(e.to_string()))?);
    }
    Ok(out)
}

pub fn save_poses(path: impl AsRef<Path>, cams: &[CameraView]) -> Result<(), SceneIoError> {
    let path = path.as_ref();
    fs::write(path, encode_poses(cams)).map_err(io_err(path))
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<CameraView>, SceneIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_poses(&text)
}

// ---------------------------------------------------------------------------
// Images: 8-bit RGB PNG.

pub fn encode_png(img: &Image) -> Result<Vec<u8>, SceneIoError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
        .ok_or_else(|| SceneIoError::Image("image buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| SceneIoError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, SceneIoError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| SceneIoError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_rgb8(w as usize, h as usize, img.as_raw()).map_err(|e| SceneIoError::Image(e.to_string()))
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<(), SceneIoError> {
    let path = path.as_ref();
    fs::write(path, encode_png(img)?).map_err(io_err(path))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image, SceneIoError> {
    let path = path.as_ref();
    decode_png(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_layout() {
        let s = Scene {
            meta: SceneMeta { extent: 1.0, seed: 3 },
            ..Scene::default()
        };
        let b = encode_scene(&s);
        assert_eq!(b.len(), 4 + 2 + 2 + 8 + 4 + 8 + 8);
        assert_eq!(&b[..6], b"GSCN\x01\x00");
        assert_eq!(decode_scene(&b).unwrap(), s);
    }

    #[test]
    fn ply_header_errors_carry_line_numbers() {
        let e = decode_points(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nbogus\nend_header\n").unwrap_err();
        assert!(matches!(e, SceneIoError::Parse { line: 5, .. }), "{e}");
        let e = decode_points(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 zz\n")
            .unwrap_err();
        assert!(matches!(e, SceneIoError::Parse { line: 8, .. }), "{e}");
    }
}

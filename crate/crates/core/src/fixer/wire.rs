//! Fixer wire protocol, version 1.
//!
//! Every frame starts with `"GRFX"`, a u8 version, a u8 message type, a
//! u32-length view id, and u32 width and height. Requests then carry three
//! RGB8 payloads (render, reference, point map), responses carry one.
//! Error frames use width = height = 0 and carry a u32-length UTF-8 message.
//! Integers are little-endian; payloads are row-major, 3 bytes per pixel.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"GRFX";
pub const VERSION: u8 = 1;
pub const MAX_VIEW_ID_LEN: u32 = 4096;
pub const MAX_MESSAGE_LEN: u32 = 1 << 16;
/// Largest accepted image, in pixels.
pub const MAX_PIXELS: u64 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Request = 1,
    Response = 2,
    Error = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Request),
            2 => Some(Self::Response),
            3 => Some(Self::Error),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Request {
        view_id: String,
        width: u32,
        height: u32,
        render: Vec<u8>,
        reference: Vec<u8>,
        point_map: Vec<u8>,
    },
    Response {
        view_id: String,
        width: u32,
        height: u32,
        fixed: Vec<u8>,
    },
    Error {
        view_id: String,
        message: String,
    },
}

impl Frame {
    pub fn view_id(&self) -> &str {
        match self {
            Frame::Request { view_id, .. } | Frame::Response { view_id, .. } | Frame::Error { view_id, .. } => view_id,
        }
    }

    pub fn msg_type(&self) -> MsgType {
        match self {
            Frame::Request { .. } => MsgType::Request,
            Frame::Response { .. } => MsgType::Response,
            Frame::Error { .. } => MsgType::Error,
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("frame truncated while reading `{field}`")]
    Truncated { field: &'static str },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("unknown message type {0}")]
    MsgType(u8),
    /// A header field is out of range. `consumed` tells whether the whole
    /// frame was read, so the stream is still aligned on a frame boundary.
    #[error("field `{field}`: {reason}")]
    Field {
        field: &'static str,
        reason: String,
        view_id: Option<String>,
        consumed: bool,
    },
}

impl WireError {
    /// True when the stream is no longer aligned and the reader must scan
    /// for the next magic before parsing again.
    pub fn needs_resync(&self) -> bool {
        match self {
            WireError::BadMagic(_) | WireError::Version(_) | WireError::MsgType(_) => true,
            WireError::Field { consumed, .. } => !consumed,
            _ => false,
        }
    }

    pub fn view_id(&self) -> Option<&str> {
        match self {
            WireError::Field { view_id, .. } => view_id.as_deref(),
            _ => None,
        }
    }
}

fn payload_len(width: u32, height: u32) -> Option<usize> {
    let px = (width as u64).checked_mul(height as u64)?;
    (px <= MAX_PIXELS).then(|| px as usize * 3)
}

fn field_error(field: &'static str, reason: impl Into<String>, view_id: Option<String>, consumed: bool) -> WireError {
    WireError::Field {
        field,
        reason: reason.into(),
        view_id,
        consumed,
    }
}

/// Serializes a frame, checking lengths so that anything encoded here
/// decodes back to the same frame.
pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let id = frame.view_id().as_bytes();
    if id.len() > MAX_VIEW_ID_LEN as usize {
        return Err(field_error("view_id", format!("{} bytes exceeds {MAX_VIEW_ID_LEN}", id.len()), None, false));
    }
    let (width, height, payloads): (u32, u32, Vec<&[u8]>) = match frame {
        Frame::Request {
            width,
            height,
            render,
            reference,
            point_map,
            ..
        } => (*width, *height, vec![render, reference, point_map]),
        Frame::Response { width, height, fixed, .. } => (*width, *height, vec![fixed]),
        Frame::Error { .. } => (0, 0, vec![]),
    };
    if let Frame::Request { .. } | Frame::Response { .. } = frame {
        let want = match payload_len(width, height) {
            Some(n) if n > 0 => n,
            _ => return Err(field_error("width", format!("invalid image size {width}x{height}"), None, false)),
        };
        for (p, name) in payloads.iter().zip(["render", "reference", "point_map"]) {
            if p.len() != want {
                let name = if frame.msg_type() == MsgType::Response { "fixed" } else { name };
                return Err(field_error(name, format!("payload is {} bytes, expected {want}", p.len()), None, false));
            }
        }
    }
    let mut out = Vec::with_capacity(18 + id.len() + payloads.iter().map(|p| p.len()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type() as u8);
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    if let Frame::Error { message, .. } = frame {
        let m = message.as_bytes();
        let m = &m[..m.len().min(MAX_MESSAGE_LEN as usize)];
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        out.extend_from_slice(m);
    }
    for p in payloads {
        out.extend_from_slice(p);
    }
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&encode(frame)?)?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], field: &'static str) -> Result<(), WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(WireError::Truncated { field }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn read_u8(r: &mut impl Read, field: &'static str) -> Result<u8, WireError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, field)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read, field: &'static str) -> Result<u32, WireError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut impl Read, n: usize, field: &'static str) -> Result<Vec<u8>, WireError> {
    let mut v = vec![0u8; n];
    read_exact(r, &mut v, field)?;
    Ok(v)
}

/// Reads one frame. A clean end of stream before the first byte yields
/// [`WireError::Closed`].
pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut magic = [0u8; 4];
    let first = loop {
        match r.read(&mut magic) {
            Ok(n) => break n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    };
    if first == 0 {
        return Err(WireError::Closed);
    }
    read_exact(r, &mut magic[first..], "magic")?;
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    read_body(r)
}

/// Discards bytes until the magic has been consumed. `carry` holds bytes
/// already read that may contain the start of it.
pub fn scan_to_magic(r: &mut impl Read, carry: &[u8]) -> Result<(), WireError> {
    let mut window: Vec<u8> = carry.iter().rev().take(3).rev().copied().collect();
    loop {
        if window.len() >= 4 && window[window.len() - 4..] == MAGIC {
            return Ok(());
        }
        let mut b = [0u8; 1];
        match r.read(&mut b) {
            Ok(0) => return Err(WireError::Closed),
            Ok(_) => {
                window.push(b[0]);
                if window.len() > 4 {
                    window.remove(0);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

/// Reads the rest of a frame whose magic was already consumed.
pub fn read_body(r: &mut impl Read) -> Result<Frame, WireError> {
    let version = read_u8(r, "version")?;
    if version != VERSION {
        return Err(WireError::Version(version));
    }
    let raw_type = read_u8(r, "msg_type")?;
    let msg_type = MsgType::from_u8(raw_type).ok_or(WireError::MsgType(raw_type))?;
    let id_len = read_u32(r, "view_id_len")?;
    if id_len > MAX_VIEW_ID_LEN {
        return Err(field_error("view_id_len", format!("{id_len} exceeds {MAX_VIEW_ID_LEN}"), None, false));
    }
    let id_bytes = read_vec(r, id_len as usize, "view_id")?;
    let width = read_u32(r, "width")?;
    let height = read_u32(r, "height")?;
    // Decode the id lossily for diagnostics; strict validity is checked once
    // the frame has been fully consumed.
    let lossy = Some(String::from_utf8_lossy(&id_bytes).into_owned());

    let frame = match msg_type {
        MsgType::Error => {
            let len = read_u32(r, "message_len")?;
            if len > MAX_MESSAGE_LEN {
                return Err(field_error("message_len", format!("{len} exceeds {MAX_MESSAGE_LEN}"), lossy, false));
            }
            let msg = read_vec(r, len as usize, "message")?;
            if width != 0 || height != 0 {
                return Err(field_error("width", "error frames must have zero size", lossy, true));
            }
            Frame::Error {
                view_id: String::new(),
                message: String::from_utf8_lossy(&msg).into_owned(),
            }
        }
        MsgType::Request | MsgType::Response => {
            let n = payload_len(width, height)
                .ok_or_else(|| field_error("width", format!("image {width}x{height} exceeds {MAX_PIXELS} pixels"), lossy.clone(), false))?;
            if msg_type == MsgType::Request {
                let render = read_vec(r, n, "render")?;
                let reference = read_vec(r, n, "reference")?;
                let point_map = read_vec(r, n, "point_map")?;
                Frame::Request {
                    view_id: String::new(),
                    width,
                    height,
                    render,
                    reference,
                    point_map,
                }
            } else {
                Frame::Response {
                    view_id: String::new(),
                    width,
                    height,
                    fixed: read_vec(r, n, "fixed")?,
                }
            }
        }
    };
    let view_id = String::from_utf8(id_bytes).map_err(|_| field_error("view_id", "not valid UTF-8", lossy.clone(), true))?;
    if msg_type != MsgType::Error && (width == 0 || height == 0) {
        return Err(field_error(
            if width == 0 { "width" } else { "height" },
            "image dimensions must be positive",
            Some(view_id),
            true,
        ));
    }
    Ok(match frame {
        Frame::Request {
            width,
            height,
            render,
            reference,
            point_map,
            ..
        } => Frame::Request {
            view_id,
            width,
            height,
            render,
            reference,
            point_map,
        },
        Frame::Response { width, height, fixed, .. } => Frame::Response {
            view_id,
            width,
            height,
            fixed,
        },
        Frame::Error { message, .. } => Frame::Error { view_id, message },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let f = Frame::Response {
            view_id: "ab".into(),
            width: 1,
            height: 1,
            fixed: vec![7, 8, 9],
        };
        let b = encode(&f).unwrap();
        assert_eq!(
            b,
            [b'G', b'R', b'F', b'X', 1, 2, 2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 1, 0, 0, 0, 7, 8, 9]
        );
        assert_eq!(read_frame(&mut &b[..]).unwrap(), f);
    }

    #[test]
    fn empty_stream_is_closed_not_truncated() {
        assert!(matches!(read_frame(&mut &[][..]), Err(WireError::Closed)));
        assert!(matches!(read_frame(&mut &b"GR"[..]), Err(WireError::Truncated { field: "magic" })));
    }

    #[test]
    fn extreme_dimensions_are_rejected_not_overflowed() {
        let mut b = MAGIC.to_vec();
        b.extend([1, 1, 0, 0, 0, 0]);
        b.extend(u32::MAX.to_le_bytes());
        b.extend(u32::MAX.to_le_bytes());
        let e = read_frame(&mut &b[..]).unwrap_err();
        assert!(matches!(e, WireError::Field { field: "width", consumed: false, .. }), "{e}");
    }

    #[test]
    fn scan_finds_magic_split_across_carry() {
        let mut rest = &b"FX\x01"[..];
        scan_to_magic(&mut rest, b"xxGR").unwrap();
        assert_eq!(rest, b"\x01");
    }
}

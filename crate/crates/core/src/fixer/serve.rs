//! Server side of the fixer protocol for builtin backends.
//!
//! Frames are handled one at a time in arrival order; pipelined requests
//! simply queue in the transport. A malformed frame is answered with an
//! error frame. When the stream lost alignment the server then discards
//! bytes up to the next magic and carries on.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::wire::{read_body, read_frame, scan_to_magic, write_frame, Frame, WireError};
use super::{FixRequest, FixerBackend};
use crate::image::{quantize, Image};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub responses: u64,
    pub errors: u64,
}

fn handle_request(backend: &dyn FixerBackend, view_id: String, width: u32, height: u32, payloads: [Vec<u8>; 3]) -> Frame {
    let (w, h) = (width as usize, height as usize);
    let [render, reference, point_map] = payloads;
    let to_img = |b: &[u8]| Image::from_rgb8(w, h, b).expect("payload sized by decoder");
    let req = match FixRequest::new(view_id.clone(), to_img(&render), to_img(&reference), to_img(&point_map)) {
        Ok(r) => r,
        Err(e) => return Frame::Error { view_id, message: e.to_string() },
    };
    match backend.fix_one(&req) {
        Ok(img) if img.shape() == (w, h) => Frame::Response {
            view_id,
            width,
            height,
            fixed: img.data.iter().map(|&v| quantize(v)).collect(),
        },
        Ok(img) => Frame::Error {
            view_id,
            message: format!("backend produced {:?} for a {w}x{h} request", img.shape()),
        },
        Err(e) => Frame::Error { view_id, message: e.to_string() },
    }
}

/// Serves until the peer closes the stream.
pub fn serve(backend: &dyn FixerBackend, reader: impl Read, writer: impl Write) -> Result<ServeStats, WireError> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let mut stats = ServeStats::default();
    let mut carry: Option<Vec<u8>> = None;
    loop {
        let next = match carry.take() {
            Some(c) => scan_to_magic(&mut reader, &c).and_then(|_| read_body(&mut reader)),
            None => read_frame(&mut reader),
        };
        let reply = match next {
            Ok(Frame::Request {
                view_id,
                width,
                height,
                render,
                reference,
                point_map,
            }) => {
                stats.requests += 1;
                handle_request(backend, view_id, width, height, [render, reference, point_map])
            }
            Ok(other) => Frame::Error {
                view_id: other.view_id().to_string(),
                message: format!("field `msg_type`: servers accept only requests, got {:?}", other.msg_type()),
            },
            Err(WireError::Closed) => return Ok(stats),
            Err(WireError::Io(e)) => return Err(WireError::Io(e)),
            Err(e @ WireError::Truncated { .. }) => {
                // Peer stopped mid-frame; report if it still listens.
                let _ = write_frame(&mut writer, &Frame::Error { view_id: String::new(), message: e.to_string() });
                return Ok(stats);
            }
            Err(e) => {
                if e.needs_resync() {
                    carry = Some(match &e {
                        WireError::BadMagic(m) => m.to_vec(),
                        _ => Vec::new(),
                    });
                }
                Frame::Error {
                    view_id: e.view_id().unwrap_or_default().to_string(),
                    message: e.to_string(),
                }
            }
        };
        match &reply {
            Frame::Response { .. } => stats.responses += 1,
            _ => stats.errors += 1,
        }
        write_frame(&mut writer, &reply)?;
    }
}

/// Builtin backend listening on loopback TCP, one thread per connection.
/// Stops accepting when dropped.
pub struct LocalServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl LocalServer {
    pub fn start(backend: Arc<dyn FixerBackend>) -> io::Result<Self> {
        Self::bind("127.0.0.1:0", backend)
    }

    pub fn bind(addr: &str, backend: Arc<dyn FixerBackend>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let backend = backend.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_tcp_stream(&*backend, stream) {
                        log::warn!("fixer connection ended: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends (it only ends once dropped).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

fn serve_tcp_stream(backend: &dyn FixerBackend, stream: TcpStream) -> Result<ServeStats, WireError> {
    stream.set_nodelay(true).ok();
    let reader = stream.try_clone()?;
    serve(backend, reader, stream)
}

impl Drop for LocalServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        TcpStream::connect(self.addr).ok();
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

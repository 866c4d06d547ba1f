//! Client side of the fixer protocol: stdio of a spawned process or TCP.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{read_frame, write_frame, Frame, WireError};
use super::{FixError, FixRequest, FixResponse, Fixer};
use crate::image::Image;

/// Where a backend lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    /// Program and arguments; the protocol runs over its stdin/stdout.
    Command(Vec<String>),
    /// `host:port`.
    Tcp(String),
}

impl Endpoint {
    /// `tcp://host:port` selects TCP; anything else is a whitespace-split
    /// command line.
    pub fn parse(s: &str) -> Result<Self, FixError> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(FixError::Connect {
                    endpoint: s.into(),
                    reason: "missing host:port".into(),
                });
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let argv: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err(FixError::Connect {
                endpoint: s.into(),
                reason: "empty command".into(),
            });
        }
        Ok(Endpoint::Command(argv))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Command(argv) => write!(f, "{}", argv.join(" ")),
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    /// Requests in flight at once.
    pub max_in_flight: usize,
    /// Budget for a whole batch.
    pub timeout: Duration,
    /// Re-sends after an error frame, per request.
    pub retries: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
            retries: 1,
        }
    }
}

/// One open protocol stream. Incoming frames are decoded on a reader
/// thread so a slow consumer never stalls the peer's writes.
pub struct Connection {
    writer: Box<dyn Write + Send>,
    rx: Receiver<Result<Frame, WireError>>,
    child: Option<Child>,
    tcp: Option<TcpStream>,
}

impl Connection {
    pub fn open(endpoint: &Endpoint) -> Result<Self, FixError> {
        let fail = |e: io::Error| FixError::Connect {
            endpoint: endpoint.to_string(),
            reason: e.to_string(),
        };
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(fail)?;
                stream.set_nodelay(true).ok();
                let reader = stream.try_clone().map_err(fail)?;
                let handle = stream.try_clone().map_err(fail)?;
                let mut conn = Self::from_parts(reader, stream, None);
                conn.tcp = Some(handle);
                Ok(conn)
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(fail)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self::from_parts(stdout, stdin, Some(child)))
            }
        }
    }

    pub fn from_parts(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static, child: Option<Child>) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let frame = read_frame(&mut reader);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        Self {
            writer: Box::new(BufWriter::new(writer)),
            rx,
            child,
            tcp: None,
        }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        write_frame(&mut self.writer, frame)
    }

    /// Writes bytes verbatim, for probing a server with malformed input.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.writer.write_all(bytes)?;
        self.writer.flush()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Frame, WireError> {
        match self.rx.recv_timeout(timeout) {
            Ok(frame) => frame,
            Err(RecvTimeoutError::Timeout) => Err(WireError::Io(io::Error::new(io::ErrorKind::TimedOut, "no frame before deadline"))),
            Err(RecvTimeoutError::Disconnected) => Err(WireError::Closed),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing our end lets a stdio backend see end of input and exit.
        self.writer = Box::new(io::sink());
        if let Some(s) = &self.tcp {
            s.shutdown(std::net::Shutdown::Both).ok();
        }
        if let Some(child) = &mut self.child {
            let deadline = Instant::now() + Duration::from_secs(2);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            child.kill().ok();
            child.wait().ok();
        }
    }
}

/// Quantizes a request for the wire.
pub fn request_frame(req: &FixRequest) -> Frame {
    let (w, h) = req.shape();
    Frame::Request {
        view_id: req.view_id.clone(),
        width: w as u32,
        height: h as u32,
        render: req.render.to_rgb8(),
        reference: req.reference.to_rgb8(),
        point_map: req.point_map.to_rgb8(),
    }
}

/// A backend behind the wire protocol. Reconnects lazily after a broken
/// stream.
pub struct RemoteFixer {
    endpoint: Endpoint,
    cfg: ClientConfig,
    conn: Option<Connection>,
    name: String,
}

impl RemoteFixer {
    pub fn new(endpoint: Endpoint, cfg: ClientConfig) -> Self {
        let name = format!("remote:{endpoint}");
        Self {
            endpoint,
            cfg,
            conn: None,
            name,
        }
    }

    fn connection(&mut self) -> Result<&mut Connection, FixError> {
        if self.conn.is_none() {
            self.conn = Some(Connection::open(&self.endpoint)?);
        }
        Ok(self.conn.as_mut().expect("just opened"))
    }

    fn decode_response(&self, req: &FixRequest, width: u32, height: u32, fixed: Vec<u8>) -> Result<FixResponse, FixError> {
        let (w, h) = req.shape();
        if width as usize != w {
            return Err(FixError::Protocol {
                field: "width",
                reason: format!("response for `{}` is {width} wide, request {w}", req.view_id),
            });
        }
        if height as usize != h {
            return Err(FixError::Protocol {
                field: "height",
                reason: format!("response for `{}` is {height} high, request {h}", req.view_id),
            });
        }
        let fixed = Image::from_rgb8(w, h, &fixed).map_err(|e| FixError::Protocol {
            field: "fixed",
            reason: e.to_string(),
        })?;
        Ok(FixResponse {
            view_id: req.view_id.clone(),
            fixed,
            backend_name: self.name.clone(),
        })
    }
}

impl Fixer for RemoteFixer {
    fn name(&self) -> &str {
        &self.name
    }

    fn fix_batch(&mut self, requests: &[FixRequest]) -> Vec<Result<FixResponse, FixError>> {
        let n = requests.len();
        let mut results: Vec<Option<Result<FixResponse, FixError>>> = (0..n).map(|_| None).collect();
        if n == 0 {
            return Vec::new();
        }
        if let Err(e) = self.connection() {
            let reason = e.to_string();
            return requests
                .iter()
                .map(|_| {
                    Err(FixError::Connect {
                        endpoint: self.endpoint.to_string(),
                        reason: reason.clone(),
                    })
                })
                .collect();
        }
        let k = self.cfg.max_in_flight.max(1);
        let deadline = Instant::now() + self.cfg.timeout;
        let mut queue: VecDeque<usize> = (0..n).collect();
        let mut attempts = vec![0u32; n];
        let mut in_flight: HashMap<String, usize> = HashMap::new();
        let mut broken: Option<String> = None;

        'outer: while !queue.is_empty() || !in_flight.is_empty() {
            while in_flight.len() < k {
                let Some(i) = queue.pop_front() else { break };
                attempts[i] += 1;
                let conn = self.conn.as_mut().expect("connected");
                if let Err(e) = conn.send(&request_frame(&requests[i])) {
                    queue.push_front(i);
                    broken = Some(format!("send failed: {e}"));
                    break 'outer;
                }
                in_flight.insert(requests[i].view_id.clone(), i);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            let frame = self.conn.as_ref().expect("connected").recv_timeout(left);
            match frame {
                Ok(Frame::Response {
                    view_id,
                    width,
                    height,
                    fixed,
                }) => match in_flight.remove(&view_id) {
                    Some(i) => results[i] = Some(self.decode_response(&requests[i], width, height, fixed)),
                    None => {
                        broken = Some(format!("response for unknown view id `{view_id}`"));
                        break;
                    }
                },
                Ok(Frame::Error { view_id, message }) => match in_flight.remove(&view_id) {
                    Some(i) if attempts[i] <= self.cfg.retries => {
                        log::warn!("fixer error on `{view_id}` (attempt {}): {message}; retrying", attempts[i]);
                        queue.push_back(i);
                    }
                    Some(i) => {
                        results[i] = Some(Err(FixError::Backend {
                            backend: self.name.clone(),
                            view_id,
                            message,
                        }))
                    }
                    None => log::warn!("fixer sent an error not tied to a request: {message}"),
                },
                Ok(Frame::Request { .. }) => {
                    broken = Some("backend sent a request frame".into());
                    break;
                }
                Err(WireError::Io(e)) if e.kind() == io::ErrorKind::TimedOut => {
                    for i in in_flight.values().copied().chain(queue.iter().copied()) {
                        results[i] = Some(Err(FixError::Timeout {
                            view_id: requests[i].view_id.clone(),
                            attempts: attempts[i],
                        }));
                    }
                    // Late responses would desynchronize the next batch.
                    self.conn = None;
                    in_flight.clear();
                    queue.clear();
                }
                Err(e) => {
                    broken = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(reason) = broken {
            self.conn = None;
            for i in in_flight.values().copied().chain(queue.iter().copied()) {
                results[i] = Some(Err(FixError::Protocol {
                    field: "stream",
                    reason: reason.clone(),
                }));
            }
        }
        results
            .into_iter()
            .zip(requests)
            .map(|(r, req)| {
                r.unwrap_or_else(|| {
                    Err(FixError::Protocol {
                        field: "stream",
                        reason: format!("no response for `{}`", req.view_id),
                    })
                })
            })
            .collect()
    }
}

//! Protocol conformance checks runnable against any backend endpoint.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::client::{ClientConfig, Connection, Endpoint, RemoteFixer};
use super::wire::{encode, Frame, MAGIC, VERSION};
use super::{FixRequest, Fixer};
use crate::image::Image;

pub const PIPELINED_REQUESTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct ConformanceConfig {
    /// Also require responses to equal the render byte for byte.
    pub expect_identity: bool,
    pub timeout: Duration,
    pub seed: u64,
}

impl Default for ConformanceConfig {
    fn default() -> Self {
        Self {
            expect_identity: false,
            timeout: Duration::from_secs(30),
            seed: 0,
        }
    }
}

fn random_rgb8(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Vec<u8> {
    (0..w * h * 3).map(|_| rng.random()).collect()
}

fn request(rng: &mut ChaCha8Rng, id: &str, w: u32, h: u32) -> Frame {
    Frame::Request {
        view_id: id.into(),
        width: w,
        height: h,
        render: random_rgb8(rng, w, h),
        reference: random_rgb8(rng, w, h),
        point_map: random_rgb8(rng, w, h),
    }
}

/// Raw header bytes with arbitrary field values.
fn raw_header(version: u8, msg_type: u8, id: &[u8], w: u32, h: u32) -> Vec<u8> {
    let mut b = MAGIC.to_vec();
    b.push(version);
    b.push(msg_type);
    b.extend_from_slice(&(id.len() as u32).to_le_bytes());
    b.extend_from_slice(id);
    b.extend_from_slice(&w.to_le_bytes());
    b.extend_from_slice(&h.to_le_bytes());
    b
}

struct Ctx<'a> {
    endpoint: &'a Endpoint,
    cfg: &'a ConformanceConfig,
    rng: ChaCha8Rng,
}

impl Ctx<'_> {
    fn open(&self) -> Result<Connection, String> {
        Connection::open(self.endpoint).map_err(|e| e.to_string())
    }

    /// Sends one request and checks its response; returns the response
    /// payload.
    fn expect_response(&self, conn: &Connection, sent: &Frame) -> Result<Vec<u8>, String> {
        let Frame::Request { view_id, width, height, render, .. } = sent else {
            unreachable!()
        };
        match conn.recv_timeout(self.cfg.timeout).map_err(|e| format!("no response: {e}"))? {
            Frame::Response {
                view_id: rid,
                width: rw,
                height: rh,
                fixed,
            } => {
                if &rid != view_id {
                    return Err(format!("response view id `{rid}`, expected `{view_id}`"));
                }
                if (rw, rh) != (*width, *height) {
                    return Err(format!("response is {rw}x{rh}, request {width}x{height}"));
                }
                if self.cfg.expect_identity && &fixed != render {
                    return Err("payload differs from the render".into());
                }
                Ok(fixed)
            }
            other => Err(format!("expected a response, got {:?} frame", other.msg_type())),
        }
    }

    fn round_trip(&mut self) -> Result<String, String> {
        let mut conn = self.open()?;
        let req = request(&mut self.rng, "conformance/round-trip", 17, 9);
        conn.send(&req).map_err(|e| e.to_string())?;
        self.expect_response(&conn, &req)?;
        Ok(if self.cfg.expect_identity {
            "payload returned bit-identical".into()
        } else {
            "response matched view id and size".into()
        })
    }

    /// Sends `bad` then a valid request on the same connection: the server
    /// must answer with an error frame and then still serve the request.
    fn malformed(&mut self, name: &str, bad: Vec<u8>) -> Result<String, String> {
        let mut conn = self.open()?;
        conn.send_raw(&bad).map_err(|e| e.to_string())?;
        let follow = request(&mut self.rng, &format!("conformance/after-{name}"), 5, 4);
        conn.send(&follow).map_err(|e| e.to_string())?;
        let mut errors = 0;
        loop {
            match conn.recv_timeout(self.cfg.timeout).map_err(|e| format!("connection lost after {errors} error frame(s): {e}"))? {
                Frame::Error { message, .. } => {
                    errors += 1;
                    log::debug!("{name}: server said {message}");
                }
                resp @ Frame::Response { .. } => {
                    if errors == 0 {
                        return Err("malformed frame was answered without an error frame".into());
                    }
                    // Re-check the follow-up response properly.
                    let Frame::Response { view_id, .. } = &resp else { unreachable!() };
                    if view_id != follow.view_id() {
                        return Err(format!("follow-up answered as `{view_id}`"));
                    }
                    return Ok(format!("{errors} error frame(s), connection kept"));
                }
                Frame::Request { .. } => return Err("server sent a request frame".into()),
            }
        }
    }

    fn pipelined(&mut self) -> Result<String, String> {
        let mut fixer = RemoteFixer::new(
            self.endpoint.clone(),
            ClientConfig {
                timeout: self.cfg.timeout,
                retries: 0,
                ..ClientConfig::default()
            },
        );
        let reqs: Vec<FixRequest> = (0..PIPELINED_REQUESTS)
            .map(|i| {
                let mut img = || Image::from_fn(6, 5, |_, _| [self.rng.random(), self.rng.random(), self.rng.random()]);
                FixRequest::new(format!("conformance/pipe-{i:03}"), img(), img(), img()).expect("same-size images")
            })
            .collect();
        let results = fixer.fix_batch(&reqs);
        let mut sent: BTreeMap<&str, usize> = BTreeMap::new();
        let mut got: BTreeMap<String, usize> = BTreeMap::new();
        for r in &reqs {
            *sent.entry(r.view_id.as_str()).or_default() += 1;
        }
        let mut failures = Vec::new();
        for (req, res) in reqs.iter().zip(&results) {
            match res {
                Ok(resp) => {
                    *got.entry(resp.view_id.clone()).or_default() += 1;
                    if self.cfg.expect_identity && resp.fixed.to_rgb8() != req.render.to_rgb8() {
                        failures.push(format!("{}: payload differs", req.view_id));
                    }
                }
                Err(e) => failures.push(e.to_string()),
            }
        }
        if !failures.is_empty() {
            return Err(format!("{} failed, first: {}", failures.len(), failures[0]));
        }
        let same = sent.len() == got.len() && sent.iter().all(|(k, v)| got.get(*k) == Some(v));
        if results.len() != PIPELINED_REQUESTS || !same {
            return Err(format!("{} responses for {PIPELINED_REQUESTS} requests, ids mismatched", results.len()));
        }
        Ok(format!("{PIPELINED_REQUESTS} responses matched by view id"))
    }
}

/// Runs every check against `endpoint`.
pub fn run(endpoint: &Endpoint, cfg: &ConformanceConfig) -> Vec<CheckResult> {
    let mut ctx = Ctx {
        endpoint,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let zeros = |n: usize| vec![0u8; n];
    let mut bad_version = raw_header(VERSION + 8, 1, b"v", 2, 2);
    bad_version.extend(zeros(36));
    let mut bad_type = raw_header(VERSION, 9, b"t", 2, 2);
    bad_type.extend(zeros(12));
    let mut bad_utf8 = raw_header(VERSION, 1, &[0xff, 0xfe, b'x'], 2, 1);
    bad_utf8.extend(zeros(18));
    let zero_width = raw_header(VERSION, 1, b"empty", 0, 3);
    let oversized = raw_header(VERSION, 1, b"huge", u32::MAX, u32::MAX);
    let mut truncated_garbage = b"JUNKJUNK".to_vec();
    truncated_garbage.extend_from_slice(&MAGIC[..2]);
    let response_to_server = encode(&Frame::Response {
        view_id: "backwards".into(),
        width: 1,
        height: 1,
        fixed: vec![1, 2, 3],
    })
    .expect("valid frame");

    let mut out = Vec::new();
    let mut record = |name: &'static str, r: Result<String, String>| {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        out.push(CheckResult { name, passed, detail });
    };
    record("round_trip", ctx.round_trip());
    record("malformed_magic", ctx.malformed("magic", truncated_garbage));
    record("malformed_version", ctx.malformed("version", bad_version));
    record("malformed_msg_type", ctx.malformed("msg_type", bad_type));
    record("malformed_view_id_utf8", ctx.malformed("utf8", bad_utf8));
    record("malformed_zero_width", ctx.malformed("zero-width", zero_width));
    record("malformed_oversized", ctx.malformed("oversized", oversized));
    record("unexpected_response_frame", ctx.malformed("response", response_to_server));
    record("pipelined_100", ctx.pipelined());
    out
}

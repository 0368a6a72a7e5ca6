//! Client for an out-of-process clip encoder.
//!
//! The wire protocol is newline-delimited JSON, one object per line:
//!
//! ```text
//! server -> client  {"hello": "...", "d": 768, "model_name": "..."}          (once, first)
//! client -> server  {"id": 1, "h": 64, "w": 64, "frames": ["<base64>", x8]}   (row-major u8)
//! server -> client  {"id": 1, "d": 768, "embedding": "<base64>"}             (d LE f32)
//!                   {"id": 1, "error": "bad_frames"}                          (on rejection)
//! ```
//!
//! Transport is TCP (`host:port`, optionally prefixed `tcp://`) or a child
//! process speaking the protocol on stdin/stdout (`stdio:<command> [args..]`).

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{Clip, ClipEncoder, Embedding, EncoderError, CLIP_LEN};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// Environment variable that overrides the configured bridge address.
pub const BRIDGE_ADDR_ENV: &str = "NIL_BRIDGE_ADDR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub hello: Value,
    pub d: usize,
    #[serde(default)]
    pub model_name: String,
}

#[derive(Debug, Serialize)]
struct Request<'a> {
    id: u64,
    h: usize,
    w: usize,
    frames: &'a [String],
}

/// Serializes a clip request line (without the trailing newline).
pub fn encode_request(id: u64, clip: &Clip) -> String {
    let frames: Vec<String> = clip.frames().iter().map(|f| B64.encode(&f.data)).collect();
    serde_json::to_string(&Request { id, h: clip.height(), w: clip.width(), frames: &frames })
        .expect("request serializes")
}

/// Decoded request, as seen by a server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRequest {
    pub id: u64,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<Vec<u8>>,
}

/// Parses and validates a request line. On failure returns the request id if
/// one could be recovered, and an error code.
pub fn decode_request(line: &str) -> Result<ClipRequest, (Option<u64>, String)> {
    let v: Value = serde_json::from_str(line).map_err(|_| (None, "invalid_json".to_string()))?;
    let id = v.get("id").and_then(Value::as_u64);
    let fail = |code: &str| (id, code.to_string());
    let id = id.ok_or_else(|| fail("missing_id"))?;
    let h = v.get("h").and_then(Value::as_u64).filter(|&h| h > 0).ok_or_else(|| fail("bad_h"))? as usize;
    let w = v.get("w").and_then(Value::as_u64).filter(|&w| w > 0).ok_or_else(|| fail("bad_w"))? as usize;
    let list = v.get("frames").and_then(Value::as_array).ok_or_else(|| fail("missing_frames"))?;
    if list.len() != CLIP_LEN {
        return Err(fail("bad_frame_count"));
    }
    let mut frames = Vec::with_capacity(CLIP_LEN);
    for f in list {
        let bytes = f.as_str().and_then(|s| B64.decode(s).ok()).ok_or_else(|| fail("bad_base64"))?;
        if bytes.len() != h * w {
            return Err(fail("bad_frame_size"));
        }
        frames.push(bytes);
    }
    Ok(ClipRequest { id, h, w, frames })
}

/// Serializes an embedding response line.
pub fn encode_response(id: u64, values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    serde_json::json!({"id": id, "d": values.len(), "embedding": B64.encode(bytes)}).to_string()
}

pub fn encode_error(id: Option<u64>, code: &str) -> String {
    serde_json::json!({"id": id, "error": code}).to_string()
}

enum Transport {
    Tcp(TcpStream),
    Child(Child),
}

/// Connection to a running encoder bridge. Requests on one connection are
/// serialized; open more connections for parallel use.
pub struct BridgeClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    transport: Transport,
    handshake: Handshake,
    next_id: u64,
    timeout: Duration,
}

fn spawn_line_reader(source: impl Read + Send + 'static) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

impl BridgeClient {
    /// Connects according to `addr`, see the module docs for the syntax.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, EncoderError> {
        match addr.strip_prefix("stdio:") {
            Some(cmd) => {
                let argv: Vec<&str> = cmd.split_whitespace().collect();
                if argv.is_empty() {
                    return Err(EncoderError::BridgeUnavailable("empty stdio command".into()));
                }
                Self::spawn(argv[0], &argv[1..], timeout)
            }
            None => Self::connect_tcp(addr.strip_prefix("tcp://").unwrap_or(addr), timeout),
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, EncoderError> {
        let unavailable = |e: std::io::Error| EncoderError::BridgeUnavailable(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| EncoderError::BridgeUnavailable(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(unavailable)?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone().map_err(unavailable)?;
        let writer = stream.try_clone().map_err(unavailable)?;
        Self::handshake(Box::new(writer), spawn_line_reader(reader), Transport::Tcp(stream), timeout)
    }

    /// Starts `program` and talks to it over its stdin/stdout.
    pub fn spawn(program: &str, args: &[&str], timeout: Duration) -> Result<Self, EncoderError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EncoderError::BridgeUnavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Box::new(stdin), spawn_line_reader(stdout), Transport::Child(child), timeout)
    }

    fn handshake(
        writer: Box<dyn Write + Send>,
        lines: Receiver<std::io::Result<String>>,
        transport: Transport,
        timeout: Duration,
    ) -> Result<Self, EncoderError> {
        let mut client = Self {
            writer,
            lines,
            transport,
            handshake: Handshake { hello: Value::Null, d: 0, model_name: String::new() },
            next_id: 1,
            timeout,
        };
        let line = client.read_line()?;
        let hs: Handshake = serde_json::from_str(&line)
            .map_err(|e| EncoderError::Protocol(format!("bad handshake {line:?}: {e}")))?;
        if hs.d == 0 {
            return Err(EncoderError::Protocol("handshake reports d = 0".into()));
        }
        log::info!("encoder bridge ready: model '{}', d = {}", hs.model_name, hs.d);
        client.handshake = hs;
        Ok(client)
    }

    pub fn handshake_info(&self) -> &Handshake {
        &self.handshake
    }

    fn read_line(&mut self) -> Result<String, EncoderError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line.trim_end_matches(['\r', '\n']).to_string()),
            Ok(Err(e)) => Err(EncoderError::BridgeUnavailable(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(EncoderError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(EncoderError::BridgeUnavailable("connection closed by bridge".into()))
            }
        }
    }

    pub fn encode_clip(&mut self, clip: &Clip) -> Result<Embedding, EncoderError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = encode_request(id, clip);
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| EncoderError::BridgeUnavailable(e.to_string()))?;
        let reply = self.read_line()?;
        let values = parse_response(&reply, id, self.handshake.d)?;
        Ok(Embedding { values, anchor: clip.anchor })
    }
}

/// Validates a response line for request `id` and decodes its embedding.
pub fn parse_response(line: &str, id: u64, d: usize) -> Result<Vec<f64>, EncoderError> {
    let bad = |m: String| EncoderError::Protocol(m);
    let v: Value = serde_json::from_str(line).map_err(|e| bad(format!("malformed response {line:?}: {e}")))?;
    if v.get("id").and_then(Value::as_u64) != Some(id) {
        return Err(bad(format!("response id {:?} does not match request {id}", v.get("id"))));
    }
    if let Some(code) = v.get("error") {
        return Err(bad(format!("bridge rejected request {id}: {code}")));
    }
    if v.get("d").and_then(Value::as_u64) != Some(d as u64) {
        return Err(bad(format!("response d {:?}, handshake d {d}", v.get("d"))));
    }
    let bytes = v
        .get("embedding")
        .and_then(Value::as_str)
        .and_then(|s| B64.decode(s).ok())
        .ok_or_else(|| bad("embedding is not valid base64".into()))?;
    if bytes.len() != 4 * d {
        return Err(bad(format!("embedding has {} bytes, expected {}", bytes.len(), 4 * d)));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("embedding contains non-finite values".into()));
    }
    Ok(values)
}

impl ClipEncoder for BridgeClient {
    fn dim(&self) -> usize {
        self.handshake.d
    }

    fn encode(&mut self, clip: &Clip) -> Result<Embedding, EncoderError> {
        self.encode_clip(clip)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        match &mut self.transport {
            Transport::Tcp(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
            Transport::Child(c) => {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Frame;

    #[test]
    fn request_round_trip() {
        let frames: Vec<Frame> =
            (0..8).map(|i| Frame { width: 3, height: 2, data: vec![i as u8; 6], index: i }).collect();
        let clip = Clip::new(frames, 7).unwrap();
        let req = decode_request(&encode_request(5, &clip)).unwrap();
        assert_eq!((req.id, req.h, req.w), (5, 2, 3));
        assert_eq!(req.frames[3], vec![3u8; 6]);
    }

    #[test]
    fn request_rejections() {
        assert_eq!(decode_request("{").unwrap_err(), (None, "invalid_json".into()));
        let seven = serde_json::json!({"id": 3, "h": 1, "w": 1, "frames": vec!["AA=="; 7]}).to_string();
        assert_eq!(decode_request(&seven).unwrap_err(), (Some(3), "bad_frame_count".into()));
        let size = serde_json::json!({"id": 4, "h": 2, "w": 1, "frames": vec!["AA=="; 8]}).to_string();
        assert_eq!(decode_request(&size).unwrap_err(), (Some(4), "bad_frame_size".into()));
    }

    #[test]
    fn response_validation() {
        let ok = encode_response(9, &[1.0, -0.5]);
        assert_eq!(parse_response(&ok, 9, 2).unwrap(), vec![1.0, -0.5]);
        assert!(matches!(parse_response(&ok, 8, 2), Err(EncoderError::Protocol(_))));
        assert!(matches!(parse_response(&ok, 9, 3), Err(EncoderError::Protocol(_))));
        assert!(matches!(parse_response("not json", 9, 2), Err(EncoderError::Protocol(_))));
        assert!(matches!(parse_response(&encode_error(Some(9), "x"), 9, 2), Err(EncoderError::Protocol(_))));
        let nan = encode_response(1, &[f32::NAN]);
        assert!(matches!(parse_response(&nan, 1, 1), Err(EncoderError::Protocol(_))));
    }
}

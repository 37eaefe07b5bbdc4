//! Protocol v1: newline-delimited JSON over a byte stream.
//!
//! ```text
//! → {"type":"hello","version":1}
//! ← {"type":"hello","version":1,"action_dim":8,"chunk_len":16,"views":[...],"introspection":true}
//! → {"type":"act","id":7,"instruction":"...","obs":{"front":{"w":224,"h":224,"rgb_b64":"..."}}}
//! ← {"type":"action","id":7,"action":[[...],...]}
//! → {"type":"introspect","id":8,"instruction":"...","obs":{...}}
//! ← {"type":"introspection","id":8,"attention_b64":"...","embeddings_b64":"...","n_tokens":N,"dim":D,"spatial_map":{...}}
//! ← {"type":"error","id":8,"message":"..."}
//! ```
//!
//! Images travel as base64 of row-major RGB8 bytes; attention and embeddings
//! as base64 of little-endian f32. Responses are matched to requests by id and
//! may arrive in any order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Policy, PolicyError, Session, PROTOCOL_VERSION};
use crate::baselines::IntrospectionPayload;
use crate::iss::ActionVector;
use crate::tensor::{ImageTensor, MultiViewObservation};

/// One image on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub w: usize,
    pub h: usize,
    pub rgb_b64: String,
}

impl WireImage {
    pub fn encode(img: &ImageTensor) -> Self {
        let rgb = img.to_rgb().to_u8();
        Self {
            w: img.width(),
            h: img.height(),
            rgb_b64: B64.encode(rgb.as_u8().expect("converted to u8")),
        }
    }

    pub fn decode(&self) -> Result<ImageTensor, PolicyError> {
        let bytes = B64
            .decode(&self.rgb_b64)
            .map_err(|e| PolicyError::Malformed(format!("rgb_b64: {e}")))?;
        if bytes.len() != self.w * self.h * 3 {
            return Err(PolicyError::Malformed(format!(
                "rgb_b64 holds {} bytes for a {}x{} RGB image",
                bytes.len(),
                self.w,
                self.h
            )));
        }
        ImageTensor::from_u8(self.w, self.h, 3, bytes).map_err(|e| PolicyError::Malformed(e.to_string()))
    }
}

pub fn encode_obs(obs: &MultiViewObservation) -> BTreeMap<String, WireImage> {
    obs.views.iter().map(|(n, v)| (n.clone(), WireImage::encode(v))).collect()
}

pub fn decode_obs(obs: &BTreeMap<String, WireImage>, timestep: usize) -> Result<MultiViewObservation, PolicyError> {
    let views = obs
        .iter()
        .map(|(n, v)| Ok((n.clone(), v.decode()?)))
        .collect::<Result<BTreeMap<_, _>, PolicyError>>()?;
    MultiViewObservation::new(views, timestep.max(1)).map_err(|e| PolicyError::Malformed(e.to_string()))
}

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f32(s: &str, expected: usize, field: &str) -> Result<Vec<f32>, PolicyError> {
    let bytes = B64
        .decode(s)
        .map_err(|e| PolicyError::Malformed(format!("{field}: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(PolicyError::Malformed(format!(
            "{field} holds {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Hello {
        version: u32,
    },
    Act {
        id: u64,
        instruction: String,
        obs: BTreeMap<String, WireImage>,
    },
    Introspect {
        id: u64,
        instruction: String,
        obs: BTreeMap<String, WireImage>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Hello {
        version: u32,
        #[serde(default)]
        action_dim: usize,
        #[serde(default)]
        chunk_len: usize,
        #[serde(default)]
        views: Vec<String>,
        #[serde(default)]
        introspection: bool,
    },
    Action {
        id: u64,
        action: Vec<Vec<f32>>,
    },
    Introspection {
        id: u64,
        attention_b64: String,
        embeddings_b64: String,
        n_tokens: usize,
        dim: usize,
        spatial_map: BTreeMap<String, Vec<usize>>,
    },
    Error {
        id: Option<u64>,
        message: String,
    },
}

impl ServerMessage {
    pub fn id(&self) -> Option<u64> {
        match self {
            ServerMessage::Hello { .. } => None,
            ServerMessage::Action { id, .. } | ServerMessage::Introspection { id, .. } => Some(*id),
            ServerMessage::Error { id, .. } => *id,
        }
    }

    pub fn hello(session: &Session) -> Self {
        ServerMessage::Hello {
            version: session.protocol_version,
            action_dim: session.action_dim,
            chunk_len: session.chunk_len,
            views: session.views.clone(),
            introspection: session.introspection,
        }
    }

    pub fn introspection(id: u64, p: &IntrospectionPayload) -> Self {
        ServerMessage::Introspection {
            id,
            attention_b64: encode_f32(p.attention()),
            embeddings_b64: encode_f32(p.embeddings()),
            n_tokens: p.n_tokens(),
            dim: p.dim(),
            spatial_map: p.spatial_token_map().clone(),
        }
    }
}

/// Serialize one message as a single line, newline included.
pub fn to_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol messages serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptions {
    pub handshake_timeout: Duration,
    pub act_timeout: Duration,
    pub pipelining_depth: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            handshake_timeout: Duration::from_secs(10),
            act_timeout: Duration::from_secs(60),
            pipelining_depth: 8,
        }
    }
}

type Pending = HashMap<u64, Sender<ServerMessage>>;

struct Shared {
    pending: Mutex<Pending>,
    hello: Mutex<Option<Sender<(String, ServerMessage)>>>,
    closed: AtomicBool,
    reason: Mutex<Option<String>>,
}

impl Shared {
    fn close(&self, why: String) {
        let mut reason = self.reason.lock().unwrap();
        if reason.is_none() {
            *reason = Some(why);
        }
        self.closed.store(true, Ordering::SeqCst);
        // dropping the senders wakes every waiting request
        self.pending.lock().unwrap().clear();
        self.hello.lock().unwrap().take();
    }

    fn closed_error(&self) -> PolicyError {
        PolicyError::Closed(
            self.reason
                .lock()
                .unwrap()
                .clone()
                .unwrap_or_else(|| "connection closed".into()),
        )
    }
}

/// Bounds the number of requests in flight.
struct Slots {
    used: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// A protocol-v1 client. One reader thread demultiplexes responses by id;
/// writes are serialized under a lock.
pub struct WireClient {
    session: Session,
    hello_line: String,
    writer: Mutex<Box<dyn Write + Send>>,
    shared: Arc<Shared>,
    slots: Slots,
    next_id: AtomicU64,
    opts: ClientOptions,
    child: Mutex<Option<Child>>,
    socket: Option<TcpStream>,
}

impl WireClient {
    /// Spawn `program` and talk to it over its stdin/stdout. Its stderr is
    /// inherited.
    pub fn spawn_stdio(program: &str, args: &[String], opts: &ClientOptions) -> Result<Self, PolicyError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PolicyError::Transport {
                id: None,
                message: format!("spawning `{program}`: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::from_streams(stdout, stdin, opts);
        match client {
            Ok(c) => {
                *c.child.lock().unwrap() = Some(child);
                Ok(c)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn connect_tcp(addr: &str, opts: &ClientOptions) -> Result<Self, PolicyError> {
        let transport = |message: String| PolicyError::Transport { id: None, message };
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| transport(format!("resolving {addr}: {e}")))?
            .next()
            .ok_or_else(|| transport(format!("{addr} resolves to nothing")))?;
        let stream = TcpStream::connect_timeout(&sock, opts.handshake_timeout)
            .map_err(|e| transport(format!("connecting to {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let clone = |s: &TcpStream| s.try_clone().map_err(|e| transport(format!("cloning socket: {e}")));
        let reader = clone(&stream)?;
        let control = clone(&stream)?;
        let mut client = Self::from_streams(reader, stream, opts)?;
        client.socket = Some(control);
        Ok(client)
    }

    /// Run the handshake over an arbitrary byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, opts: &ClientOptions) -> Result<Self, PolicyError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (hello_tx, hello_rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            pending: Mutex::new(HashMap::new()),
            hello: Mutex::new(Some(hello_tx)),
            closed: AtomicBool::new(false),
            reason: Mutex::new(None),
        });
        let reader_shared = Arc::clone(&shared);
        thread::Builder::new()
            .name("policy-wire-reader".into())
            .spawn(move || read_loop(BufReader::new(reader), reader_shared))
            .map_err(|e| PolicyError::Transport {
                id: None,
                message: format!("starting reader thread: {e}"),
            })?;

        let mut writer: Box<dyn Write + Send> = Box::new(writer);
        let hello = to_line(&ClientMessage::Hello { version: PROTOCOL_VERSION });
        if let Err(e) = writer.write_all(hello.as_bytes()).and_then(|_| writer.flush()) {
            shared.close(format!("writing hello: {e}"));
            return Err(PolicyError::Transport {
                id: None,
                message: format!("writing hello: {e}"),
            });
        }
        let (hello_line, reply) = match hello_rx.recv_timeout(opts.handshake_timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                shared.close("handshake timed out".into());
                return Err(PolicyError::Timeout {
                    what: "hello".into(),
                    after: opts.handshake_timeout,
                });
            }
            Err(RecvTimeoutError::Disconnected) => return Err(shared.closed_error()),
        };
        let session = match reply {
            ServerMessage::Hello {
                version,
                action_dim,
                chunk_len,
                views,
                introspection,
            } => {
                if version != PROTOCOL_VERSION {
                    shared.close("version mismatch".into());
                    return Err(PolicyError::VersionMismatch {
                        client: PROTOCOL_VERSION,
                        server: version,
                    });
                }
                if action_dim == 0 || chunk_len == 0 || views.is_empty() {
                    shared.close("malformed hello".into());
                    return Err(PolicyError::Malformed(format!(
                        "hello must carry action_dim >= 1, chunk_len >= 1 and views: {}",
                        hello_line.trim_end()
                    )));
                }
                Session {
                    protocol_version: version,
                    action_dim,
                    chunk_len,
                    views,
                    introspection,
                }
            }
            other => {
                shared.close("unexpected reply to hello".into());
                return Err(PolicyError::Malformed(format!("expected hello, got {other:?}")));
            }
        };
        Ok(Self {
            session,
            hello_line,
            writer: Mutex::new(writer),
            shared,
            slots: Slots {
                used: Mutex::new(0),
                freed: Condvar::new(),
                max: opts.pipelining_depth.max(1),
            },
            next_id: AtomicU64::new(1),
            opts: opts.clone(),
            child: Mutex::new(None),
            socket: None,
        })
    }

    /// The server's hello line exactly as received, newline included.
    pub fn hello_line(&self) -> &str {
        &self.hello_line
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    /// Send a request built by `line` from a fresh id and wait for the
    /// response carrying that id.
    pub fn request_raw<F>(&self, line: F) -> Result<ServerMessage, PolicyError>
    where
        F: FnOnce(u64) -> String,
    {
        let _slot = self.slots.acquire();
        if self.is_closed() {
            return Err(self.shared.closed_error());
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.shared.pending.lock().unwrap().insert(id, tx);
        if self.is_closed() {
            self.shared.pending.lock().unwrap().remove(&id);
            return Err(self.shared.closed_error());
        }
        {
            let mut w = self.writer.lock().unwrap();
            let text = line(id);
            if let Err(e) = w.write_all(text.as_bytes()).and_then(|_| w.flush()) {
                drop(w);
                self.shared.close(format!("write failed: {e}"));
                return Err(PolicyError::Transport {
                    id: Some(id),
                    message: format!("write failed: {e}"),
                });
            }
        }
        match rx.recv_timeout(self.opts.act_timeout) {
            Ok(msg) => Ok(msg),
            Err(RecvTimeoutError::Timeout) => {
                self.shared.pending.lock().unwrap().remove(&id);
                Err(PolicyError::Timeout {
                    what: format!("response to request {id}"),
                    after: self.opts.act_timeout,
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(PolicyError::Transport {
                id: Some(id),
                message: self
                    .shared
                    .reason
                    .lock()
                    .unwrap()
                    .clone()
                    .unwrap_or_else(|| "connection closed".into()),
            }),
        }
    }

    fn request(&self, msg: impl FnOnce(u64) -> ClientMessage) -> Result<ServerMessage, PolicyError> {
        let reply = self.request_raw(|id| to_line(&msg(id)))?;
        if let ServerMessage::Error { id, message } = reply {
            return Err(PolicyError::Server { id, message });
        }
        Ok(reply)
    }
}

fn read_loop<R: BufRead>(mut reader: R, shared: Arc<Shared>) {
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => {
                shared.close("server closed the connection".into());
                return;
            }
            Err(e) => {
                shared.close(format!("read failed: {e}"));
                return;
            }
            Ok(_) => {}
        }
        let msg: ServerMessage = match serde_json::from_str(line.trim_end_matches(['\n', '\r'])) {
            Ok(m) => m,
            Err(e) => {
                shared.close(format!("unparseable server message ({e}): {}", line.trim_end()));
                return;
            }
        };
        if let ServerMessage::Hello { .. } = msg {
            if let Some(tx) = shared.hello.lock().unwrap().take() {
                let _ = tx.send((line.clone(), msg));
            }
            continue;
        }
        match msg.id() {
            Some(id) => {
                if let Some(tx) = shared.pending.lock().unwrap().remove(&id) {
                    let _ = tx.send(msg);
                }
            }
            None => {
                // an error the server could not attribute to a request
                if let ServerMessage::Error { message, .. } = &msg {
                    if let Some(tx) = shared.hello.lock().unwrap().take() {
                        let _ = tx.send((line.clone(), msg.clone()));
                        continue;
                    }
                    eprintln!("policy server error without id: {message}");
                }
            }
        }
    }
}

impl Policy for WireClient {
    fn session(&self) -> &Session {
        &self.session
    }

    fn act(&self, obs: &MultiViewObservation, instruction: &str) -> Result<ActionVector, PolicyError> {
        let wire_obs = encode_obs(obs);
        let instruction = instruction.to_string();
        match self.request(|id| ClientMessage::Act { id, instruction, obs: wire_obs })? {
            ServerMessage::Action { action, .. } => {
                ActionVector::chunked(action).map_err(|e| PolicyError::Malformed(e.to_string()))
            }
            other => Err(PolicyError::Malformed(format!("expected action, got {other:?}"))),
        }
    }

    fn introspect(&self, obs: &MultiViewObservation, instruction: &str) -> Result<IntrospectionPayload, PolicyError> {
        let wire_obs = encode_obs(obs);
        let instruction = instruction.to_string();
        match self.request(|id| ClientMessage::Introspect { id, instruction, obs: wire_obs })? {
            ServerMessage::Introspection {
                attention_b64,
                embeddings_b64,
                n_tokens,
                dim,
                spatial_map,
                ..
            } => {
                let attention = decode_f32(&attention_b64, n_tokens * n_tokens, "attention_b64")?;
                let embeddings = decode_f32(&embeddings_b64, n_tokens * dim, "embeddings_b64")?;
                IntrospectionPayload::new(n_tokens, attention, dim, embeddings, spatial_map)
                    .map_err(|e| PolicyError::Malformed(e.to_string()))
            }
            other => Err(PolicyError::Malformed(format!("expected introspection, got {other:?}"))),
        }
    }

    fn pipelining_depth(&self) -> usize {
        self.slots.max
    }
}

impl Drop for WireClient {
    fn drop(&mut self) {
        self.shared.close("client dropped".into());
        if let Some(sock) = &self.socket {
            let _ = sock.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.lock().unwrap().take() {
            // closing stdin asks the server to exit; give it a moment
            drop(std::mem::replace(&mut *self.writer.lock().unwrap(), Box::new(std::io::sink())));
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_serializes_in_field_order() {
        let s = Session {
            protocol_version: 1,
            action_dim: 8,
            chunk_len: 16,
            views: vec!["front".into(), "overhead".into(), "wrist".into()],
            introspection: true,
        };
        assert_eq!(
            to_line(&ServerMessage::hello(&s)),
            "{\"type\":\"hello\",\"version\":1,\"action_dim\":8,\"chunk_len\":16,\"views\":[\"front\",\"overhead\",\"wrist\"],\"introspection\":true}\n"
        );
        assert_eq!(
            to_line(&ClientMessage::Hello { version: 1 }),
            "{\"type\":\"hello\",\"version\":1}\n"
        );
    }

    #[test]
    fn version_two_hello_parses_without_session_fields() {
        let m: ServerMessage = serde_json::from_str("{\"type\":\"hello\",\"version\":2}").unwrap();
        assert!(matches!(m, ServerMessage::Hello { version: 2, .. }));
    }

    #[test]
    fn images_round_trip_through_base64() {
        let img = ImageTensor::from_u8(2, 1, 3, vec![0, 10, 20, 255, 128, 7]).unwrap();
        let w = WireImage::encode(&img);
        assert_eq!(w.decode().unwrap(), img);
        let bad = WireImage { w: 3, ..w };
        assert!(bad.decode().is_err());
    }

    #[test]
    fn f32_payload_round_trip() {
        let v = vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25];
        assert_eq!(decode_f32(&encode_f32(&v), 4, "x").unwrap(), v);
        assert!(decode_f32(&encode_f32(&v), 3, "x").is_err());
    }

    #[test]
    fn error_without_id_parses() {
        let m: ServerMessage = serde_json::from_str("{\"type\":\"error\",\"id\":null,\"message\":\"bad json\"}").unwrap();
        assert_eq!(m.id(), None);
    }
}

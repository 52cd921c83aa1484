//! Client side: an expert whose scores come from a remote process.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::proto::{
    decode_tensor, encode_payload, read_frame, write_frame, Frame, PayloadEncoding, ReadOutcome, RequestHeader,
    RequestKind, ResponseHeader, Status, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::expert::ScoreModel;
use crate::flow::{score_from_velocity, NoiseSchedule};
use crate::lattice::LatticeField;

/// Where the backend lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Endpoint {
    /// `host:port` of a stream socket.
    Tcp(String),
    /// A program speaking the protocol on stdin/stdout; one process per connection.
    Spawn { program: String, #[serde(default)] args: Vec<String> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WirePrecision {
    #[default]
    F32,
    F64,
}

impl WirePrecision {
    fn encoding(self) -> PayloadEncoding {
        match self {
            WirePrecision::F32 => PayloadEncoding::F32le,
            WirePrecision::F64 => PayloadEncoding::F64le,
        }
    }
}

enum Conn {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: BufWriter<TcpStream>,
    },
    Child {
        child: Child,
        reader: BufReader<ChildStdout>,
        writer: BufWriter<ChildStdin>,
    },
}

impl Conn {
    fn open(ep: &Endpoint, timeout: Duration) -> Result<Self> {
        match ep {
            Endpoint::Tcp(addr) => {
                let s = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                s.set_nodelay(true)?;
                Ok(Conn::Tcp {
                    reader: BufReader::new(s.try_clone()?),
                    writer: BufWriter::new(s),
                })
            }
            Endpoint::Spawn { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::null())
                    .spawn()
                    .map_err(|e| Error::Transport(format!("spawn {program}: {e}")))?;
                let stdin = child.stdin.take().expect("piped");
                let stdout = child.stdout.take().expect("piped");
                Ok(Conn::Child {
                    child,
                    reader: BufReader::new(stdout),
                    writer: BufWriter::new(stdin),
                })
            }
        }
    }

    fn exchange(&mut self, frame: &Frame) -> Result<Frame> {
        let outcome = match self {
            Conn::Tcp { reader, writer } => round_trip(reader, writer, frame)?,
            Conn::Child { reader, writer, .. } => round_trip(reader, writer, frame)?,
        };
        match outcome {
            ReadOutcome::Frame(f) => Ok(f),
            ReadOutcome::Closed => Err(Error::Transport("backend closed the connection".into())),
        }
    }
}

fn round_trip<R: Read, W: Write>(r: &mut R, w: &mut W, frame: &Frame) -> Result<ReadOutcome> {
    write_frame(w, frame)?;
    read_frame(r)
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Conn::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Expert backed by a protocol endpoint. Safe to share across particle
/// workers: each in-flight request holds its own pooled connection.
pub struct RemoteExpert {
    name: String,
    endpoint: Endpoint,
    conditioning: String,
    kind: RequestKind,
    precision: WirePrecision,
    timeout: Duration,
    pool: Mutex<Vec<Conn>>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for RemoteExpert {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteExpert")
            .field("name", &self.name)
            .field("endpoint", &self.endpoint)
            .field("kind", &self.kind)
            .finish()
    }
}

impl RemoteExpert {
    /// Connects and performs the version handshake.
    pub fn connect(name: impl Into<String>, endpoint: Endpoint, conditioning: impl Into<String>) -> Result<Self> {
        Self::builder(name, endpoint, conditioning).connect()
    }

    pub fn builder(name: impl Into<String>, endpoint: Endpoint, conditioning: impl Into<String>) -> RemoteBuilder {
        RemoteBuilder {
            name: name.into(),
            endpoint,
            conditioning: conditioning.into(),
            kind: RequestKind::Score,
            precision: WirePrecision::F32,
            timeout: Duration::from_secs(10),
        }
    }

    fn take_conn(&self) -> Result<Conn> {
        if let Some(c) = self.pool.lock().expect("pool lock").pop() {
            return Ok(c);
        }
        Conn::open(&self.endpoint, self.timeout)
    }

    fn request_id(&self) -> String {
        format!("{}-{}", self.name, self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    /// Sends `frame` and validates the echoed id; transport failures retry once
    /// on a fresh connection.
    fn call(&self, frame: &Frame, id: &str) -> Result<Frame> {
        let mut last = None;
        for _ in 0..2 {
            let mut conn = match self.take_conn() {
                Ok(c) => c,
                Err(e) if e.is_retriable() => {
                    last = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            match conn.exchange(frame) {
                Ok(resp) => {
                    let head: ResponseHeader = resp.parse_header()?;
                    if head.request_id != id {
                        // Out of sync: the connection cannot be reused.
                        return Err(Error::Protocol(format!(
                            "response id '{}' does not match request '{id}'",
                            head.request_id
                        )));
                    }
                    self.pool.lock().expect("pool lock").push(conn);
                    return Ok(resp);
                }
                Err(e) if e.is_retriable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn hello(&self) -> Result<String> {
        let id = self.request_id();
        let req = RequestHeader {
            protocol_version: PROTOCOL_VERSION,
            request_id: id.clone(),
            kind: RequestKind::Hello,
            tau: 0.0,
            shape: None,
            conditioning: self.conditioning.clone(),
            payload: PayloadEncoding::None,
            data: None,
        };
        let resp = self.call(&Frame::new(&req, Vec::new()), &id)?;
        let head: ResponseHeader = resp.parse_header()?;
        if head.status != Status::Ok {
            return Err(Error::Protocol(format!(
                "handshake refused: {}",
                head.message.unwrap_or_default()
            )));
        }
        if head.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported version {}", head.protocol_version)));
        }
        Ok(head.server.unwrap_or_default())
    }

    /// Remote score at `(x, tau)`; velocity backends are converted locally.
    pub fn remote_score(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        let tau = match self.kind {
            RequestKind::Velocity => sched.velocity_tau(tau)?,
            _ => sched.score_tau(tau)?,
        };
        let enc = self.precision.encoding();
        let id = self.request_id();
        let req = RequestHeader {
            protocol_version: PROTOCOL_VERSION,
            request_id: id.clone(),
            kind: self.kind,
            tau,
            shape: Some(x.shape().dims()),
            conditioning: self.conditioning.clone(),
            payload: enc,
            data: None,
        };
        let resp = self.call(&Frame::new(&req, encode_payload(enc, x.data())), &id)?;
        let head: ResponseHeader = resp.parse_header()?;
        if head.status == Status::Error {
            return Err(Error::Backend(head.message.unwrap_or_else(|| "unspecified error".into())));
        }
        let (shape, values) = decode_tensor(head.payload, head.shape, &resp.payload, head.data.as_deref())?;
        if shape != x.shape() {
            return Err(Error::Protocol(format!("response shape {shape} for request shape {}", x.shape())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("response contains non-finite values".into()));
        }
        let out = LatticeField::from_vec(shape, values)?;
        match self.kind {
            RequestKind::Velocity => score_from_velocity(x, &out, tau, sched),
            _ => Ok(out),
        }
    }
}

impl ScoreModel for RemoteExpert {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        self.remote_score(x, tau, sched)
    }
}

pub struct RemoteBuilder {
    name: String,
    endpoint: Endpoint,
    conditioning: String,
    kind: RequestKind,
    precision: WirePrecision,
    timeout: Duration,
}

impl RemoteBuilder {
    /// Ask the backend for velocities instead of scores.
    pub fn velocity(mut self, yes: bool) -> Self {
        self.kind = if yes { RequestKind::Velocity } else { RequestKind::Score };
        self
    }

    pub fn precision(mut self, p: WirePrecision) -> Self {
        self.precision = p;
        self
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    pub fn connect(self) -> Result<RemoteExpert> {
        let expert = RemoteExpert {
            name: self.name,
            endpoint: self.endpoint,
            conditioning: self.conditioning,
            kind: self.kind,
            precision: self.precision,
            timeout: self.timeout,
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
        };
        expert.hello()?;
        Ok(expert)
    }
}

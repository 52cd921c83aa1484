//! Reference server answering protocol requests from an in-process expert.

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::backend::proto::{
    decode_tensor, encode_payload, read_frame, write_frame, Frame, PayloadEncoding, ReadOutcome, RequestHeader,
    RequestKind, ResponseHeader, Status, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::expert::ScoreModel;
use crate::flow::NoiseSchedule;
use crate::lattice::LatticeField;

#[derive(Clone, Debug)]
pub struct StubServer {
    expert: Arc<dyn ScoreModel>,
    sched: NoiseSchedule,
}

impl StubServer {
    pub fn new(expert: Arc<dyn ScoreModel>, sched: NoiseSchedule) -> Self {
        Self { expert, sched }
    }

    /// Response to one request frame. Never fails: problems become error responses.
    pub fn respond(&self, frame: &Frame) -> Frame {
        let req: RequestHeader = match frame.parse_header() {
            Ok(r) => r,
            Err(e) => {
                // Echo the id when the header is at least a JSON object carrying one.
                let id = serde_json::from_slice::<serde_json::Value>(&frame.header)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|s| s.as_str()).map(str::to_string))
                    .unwrap_or_default();
                return Frame::new(&ResponseHeader::error(id, e.to_string()), Vec::new());
            }
        };
        match self.answer(&req, &frame.payload) {
            Ok(f) => f,
            Err(e) => Frame::new(&ResponseHeader::error(req.request_id, e.to_string()), Vec::new()),
        }
    }

    fn answer(&self, req: &RequestHeader, payload: &[u8]) -> Result<Frame> {
        if req.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported version {} (server speaks {PROTOCOL_VERSION})",
                req.protocol_version
            )));
        }
        let mut resp = ResponseHeader {
            protocol_version: PROTOCOL_VERSION,
            request_id: req.request_id.clone(),
            status: Status::Ok,
            shape: None,
            payload: PayloadEncoding::None,
            message: None,
            data: None,
            server: None,
        };
        if req.kind == RequestKind::Hello {
            resp.server = Some(format!("anneal-stein-stub/{}", env!("CARGO_PKG_VERSION")));
            resp.message = Some(self.expert.name().to_string());
            return Ok(Frame::new(&resp, Vec::new()));
        }
        if !req.tau.is_finite() {
            return Err(Error::Domain("tau is not finite".into()));
        }
        let (shape, values) = decode_tensor(req.payload, req.shape, payload, req.data.as_deref())?;
        let x = LatticeField::from_vec(shape, values)?;
        let out = match req.kind {
            RequestKind::Score => self.expert.score(&x, req.tau, &self.sched)?,
            RequestKind::Velocity => self.expert.velocity(&x, req.tau, &self.sched)?,
            RequestKind::Hello => unreachable!(),
        };
        resp.shape = Some(out.shape().dims());
        let body = match req.payload {
            PayloadEncoding::Inline => {
                resp.payload = PayloadEncoding::Inline;
                resp.data = Some(out.into_vec());
                Vec::new()
            }
            enc => {
                resp.payload = enc;
                encode_payload(enc, out.data())
            }
        };
        Ok(Frame::new(&resp, body))
    }

    /// Serves one connection until EOF. A frame with an invalid length prefix
    /// gets an error response and ends the connection, since the stream can no
    /// longer be resynchronized; every other malformed frame keeps it open.
    pub fn serve_stream<R: Read, W: Write>(&self, reader: &mut R, writer: &mut W) -> Result<()> {
        loop {
            match read_frame(reader) {
                Ok(ReadOutcome::Closed) => return Ok(()),
                Ok(ReadOutcome::Frame(f)) => write_frame(writer, &self.respond(&f))?,
                Err(Error::Protocol(msg)) => {
                    let resp = Frame::new(&ResponseHeader::error("", msg), Vec::new());
                    let _ = write_frame(writer, &resp);
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve_tcp(&self, listener: TcpListener) -> Result<()> {
        for conn in listener.incoming() {
            let stream = conn?;
            let me = self.clone();
            thread::spawn(move || {
                let mut r = match stream.try_clone() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                let mut w = stream;
                let _ = me.serve_stream(&mut r, &mut w);
                linger_close(&w);
            });
        }
        Ok(())
    }

    /// Binds `addr`, then serves on a background thread. Returns the bound address.
    pub fn spawn_tcp(&self, addr: &str) -> Result<std::net::SocketAddr> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let me = self.clone();
        thread::spawn(move || {
            let _ = me.serve_tcp(listener);
        });
        Ok(local)
    }

    pub fn serve_stdio(&self) -> Result<()> {
        let stdin = std::io::stdin();
        let stdout = std::io::stdout();
        self.serve_stream(&mut stdin.lock(), &mut stdout.lock())
    }
}

/// Closing a socket with unread input makes the kernel send a reset, which can
/// destroy the error frame we just wrote. Half-close and drain briefly first.
fn linger_close(s: &TcpStream) {
    let _ = s.shutdown(Shutdown::Write);
    let _ = s.set_read_timeout(Some(Duration::from_millis(200)));
    let mut buf = [0u8; 4096];
    let mut r = s;
    let mut left = 1usize << 20;
    while left > 0 {
        match r.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => left = left.saturating_sub(n),
        }
    }
}

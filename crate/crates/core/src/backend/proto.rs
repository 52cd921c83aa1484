//! Frame layout and message headers shared by client and stub.
//!
//! A frame is `u32 BE frame_len | u32 BE header_len | header JSON | payload`,
//! where `frame_len` counts every byte after the first four.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Shape;

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on `frame_len`; larger prefixes are rejected unread.
pub const MAX_FRAME_LEN: u32 = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Hello,
    Score,
    Velocity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadEncoding {
    /// No tensor attached.
    #[default]
    None,
    /// Raw little-endian IEEE-754 binary32 after the header.
    F32le,
    /// Raw little-endian IEEE-754 binary64 after the header (lossless).
    F64le,
    /// Values in the header's `data` array.
    Inline,
}

impl PayloadEncoding {
    fn width(self) -> usize {
        match self {
            PayloadEncoding::F32le => 4,
            PayloadEncoding::F64le => 8,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    pub protocol_version: u32,
    pub request_id: String,
    pub kind: RequestKind,
    #[serde(default)]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 4]>,
    #[serde(default)]
    pub conditioning: String,
    #[serde(default)]
    pub payload: PayloadEncoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseHeader {
    pub protocol_version: u32,
    pub request_id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 4]>,
    #[serde(default)]
    pub payload: PayloadEncoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    /// Set on `hello` responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server: Option<String>,
}

impl ResponseHeader {
    pub fn error(request_id: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            request_id: request_id.into(),
            status: Status::Error,
            shape: None,
            payload: PayloadEncoding::None,
            message: Some(message.into()),
            data: None,
            server: None,
        }
    }
}

/// One decoded frame: raw header bytes and raw payload bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(header: &impl Serialize, payload: Vec<u8>) -> Self {
        Self {
            header: serde_json::to_vec(header).expect("headers serialize"),
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let frame_len = 4 + self.header.len() + self.payload.len();
        let mut out = Vec::with_capacity(4 + frame_len);
        out.extend_from_slice(&(frame_len as u32).to_be_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Splits a frame body (everything after the length prefix).
    pub fn from_body(body: Vec<u8>) -> Result<Self> {
        if body.len() < 4 {
            return Err(Error::Protocol(format!("frame body of {} bytes has no header length", body.len())));
        }
        let hlen = u32::from_be_bytes(body[..4].try_into().expect("4 bytes")) as usize;
        if hlen > body.len() - 4 {
            return Err(Error::Protocol(format!(
                "header length {hlen} exceeds frame body of {} bytes",
                body.len()
            )));
        }
        Ok(Self {
            header: body[4..4 + hlen].to_vec(),
            payload: body[4 + hlen..].to_vec(),
        })
    }

    /// Decodes a complete frame held in memory.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Protocol("frame shorter than its length prefix".into()));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
        check_len(len)?;
        if bytes.len() - 4 != len as usize {
            return Err(Error::Protocol(format!(
                "length prefix says {len} bytes, frame carries {}",
                bytes.len() - 4
            )));
        }
        Self::from_body(bytes[4..].to_vec())
    }

    pub fn parse_header<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_slice(&self.header).map_err(|e| Error::Protocol(format!("bad header: {e}")))
    }
}

fn check_len(len: u32) -> Result<()> {
    if !(4..=MAX_FRAME_LEN).contains(&len) {
        return Err(Error::Protocol(format!("frame length {len} outside [4, {MAX_FRAME_LEN}]")));
    }
    Ok(())
}

/// Outcome of reading one frame from a stream.
#[derive(Debug)]
pub enum ReadOutcome {
    Frame(Frame),
    /// Stream closed cleanly before a new frame began.
    Closed,
}

/// Reads one frame. I/O failures (including timeouts and mid-frame EOF) are
/// transport errors; a bad length prefix is a protocol error and leaves the
/// stream unsynchronized.
pub fn read_frame<R: Read>(r: &mut R) -> Result<ReadOutcome> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(ReadOutcome::Closed),
            Ok(0) => return Err(Error::Transport("stream closed inside length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(transport(e)),
        }
    }
    let len = u32::from_be_bytes(prefix);
    check_len(len)?;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(transport)?;
    Ok(ReadOutcome::Frame(Frame::from_body(body)?))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode()).map_err(transport)?;
    w.flush().map_err(transport)
}

fn transport(e: io::Error) -> Error {
    Error::Transport(format!("{}: {e}", kind_name(e.kind())))
}

fn kind_name(k: io::ErrorKind) -> &'static str {
    match k {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => "timeout",
        io::ErrorKind::UnexpectedEof => "unexpected eof",
        _ => "io",
    }
}

pub fn encode_payload(enc: PayloadEncoding, data: &[f64]) -> Vec<u8> {
    match enc {
        PayloadEncoding::F32le => data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
        PayloadEncoding::F64le => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        PayloadEncoding::None | PayloadEncoding::Inline => Vec::new(),
    }
}

/// Tensor values from a binary payload or inline array, checked against `shape`.
pub fn decode_tensor(
    enc: PayloadEncoding,
    shape: Option<[usize; 4]>,
    payload: &[u8],
    inline: Option<&[f64]>,
) -> Result<(Shape, Vec<f64>)> {
    let dims = shape.ok_or_else(|| Error::Protocol("tensor message without shape".into()))?;
    let shape = Shape::from_dims(dims);
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&c| c > 0)
        .ok_or_else(|| Error::Protocol(format!("invalid shape {dims:?}")))?;
    let values = match enc {
        PayloadEncoding::F32le | PayloadEncoding::F64le => {
            let w = enc.width();
            if payload.len() != count.saturating_mul(w) {
                return Err(Error::Protocol(format!(
                    "payload has {} bytes, shape {dims:?} needs {}",
                    payload.len(),
                    count.saturating_mul(w)
                )));
            }
            if w == 4 {
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            }
        }
        PayloadEncoding::Inline => {
            let d = inline.ok_or_else(|| Error::Protocol("inline payload without data".into()))?;
            if d.len() != count {
                return Err(Error::Protocol(format!(
                    "data has {} values, shape {dims:?} needs {count}",
                    d.len()
                )));
            }
            d.to_vec()
        }
        PayloadEncoding::None => return Err(Error::Protocol("tensor message without payload".into())),
    };
    Ok((shape, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = Frame {
            header: br#"{"a":1}"#.to_vec(),
            payload: vec![1, 2, 3],
        };
        let bytes = f.encode();
        assert_eq!(&bytes[..4], &(4 + 7 + 3u32).to_be_bytes());
        assert_eq!(&bytes[4..8], &7u32.to_be_bytes());
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        let mut cur = std::io::Cursor::new(bytes);
        match read_frame(&mut cur).unwrap() {
            ReadOutcome::Frame(g) => assert_eq!(g, f),
            ReadOutcome::Closed => panic!(),
        }
        assert!(matches!(read_frame(&mut cur).unwrap(), ReadOutcome::Closed));
    }

    #[test]
    fn bad_prefixes() {
        assert!(matches!(Frame::decode(&[0, 0, 0, 2, 0, 0]), Err(Error::Protocol(_))));
        assert!(matches!(Frame::decode(&[0xff, 0xff, 0xff, 0xff]), Err(Error::Protocol(_))));
        assert!(matches!(Frame::decode(&[0, 0, 0, 4, 0, 0, 0, 9]), Err(Error::Protocol(_))));
        let mut cur = std::io::Cursor::new(vec![0, 0, 0, 10, 0, 0]);
        assert!(matches!(read_frame(&mut cur), Err(Error::Transport(_))));
    }

    #[test]
    fn payload_round_trip() {
        let v = vec![0.5, -1.25, 3.0];
        for enc in [PayloadEncoding::F32le, PayloadEncoding::F64le] {
            let p = encode_payload(enc, &v);
            let (s, back) = decode_tensor(enc, Some([1, 1, 3, 1]), &p, None).unwrap();
            assert_eq!(s, Shape::new(1, 1, 3, 1));
            assert_eq!(back, v);
        }
        assert!(decode_tensor(PayloadEncoding::F32le, Some([1, 1, 3, 1]), &[0; 8], None).is_err());
        assert!(decode_tensor(PayloadEncoding::Inline, Some([1, 1, 2, 1]), &[], Some(&v)).is_err());
        assert!(decode_tensor(PayloadEncoding::F32le, Some([usize::MAX, 2, 1, 1]), &[], None).is_err());
    }

    #[test]
    fn header_json_shape() {
        let h = RequestHeader {
            protocol_version: 1,
            request_id: "r1".into(),
            kind: RequestKind::Score,
            tau: 0.5,
            shape: Some([1, 1, 1, 1]),
            conditioning: String::new(),
            payload: PayloadEncoding::F32le,
            data: None,
        };
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(
            s,
            r#"{"protocol_version":1,"request_id":"r1","kind":"score","tau":0.5,"shape":[1,1,1,1],"conditioning":"","payload":"f32le"}"#
        );
    }
}

//! Shared helpers for the backend and acceptance test targets.
#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anneal_stein::analytic::GmmExpert;
use anneal_stein::backend::proto::{
    encode_payload, read_frame, write_frame, Frame, PayloadEncoding, ReadOutcome, RequestHeader, RequestKind,
    ResponseHeader, PROTOCOL_VERSION,
};
use anneal_stein::backend::{Endpoint, RemoteExpert, StubServer, WirePrecision};
use anneal_stein::composition::{CompositeTarget, ExpertSlot, MaskBinding, MaskSet};
use anneal_stein::expert::ScoreModel;
use anneal_stein::flow::{AnnealLadder, NoiseSchedule, TauMapping};
use anneal_stein::{LatticeField, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn spawn_stub(expert: Arc<dyn ScoreModel>) -> SocketAddr {
    StubServer::new(expert, NoiseSchedule::rectified())
        .spawn_tcp("127.0.0.1:0")
        .expect("stub binds")
}

pub fn remote(addr: SocketAddr, precision: WirePrecision) -> RemoteExpert {
    RemoteExpert::builder("remote", Endpoint::Tcp(addr.to_string()), "")
        .precision(precision)
        .timeout(Duration::from_secs(5))
        .connect()
        .expect("remote connects")
}

/// Two full-foreground experts on a shared rectified schedule.
pub fn product_target(shape: Shape, steps: usize, a: Arc<dyn ScoreModel>, b: Arc<dyn ScoreModel>) -> CompositeTarget {
    product_target_with(shape, AnnealLadder::new(steps, TauMapping::Uniform, 1e-3).unwrap(), a, b)
}

pub fn product_target_with(
    shape: Shape,
    ladder: AnnealLadder,
    a: Arc<dyn ScoreModel>,
    b: Arc<dyn ScoreModel>,
) -> CompositeTarget {
    CompositeTarget::new(
        shape,
        NoiseSchedule::rectified(),
        ladder,
        vec![ExpertSlot::new(a, MaskBinding::Fg), ExpertSlot::new(b, MaskBinding::Fg)],
        MaskSet::full_foreground(shape),
    )
    .unwrap()
}

pub fn gaussian(shape: Shape, mean: f64, var: f64) -> Arc<GmmExpert> {
    Arc::new(GmmExpert::isotropic("g", shape, mean, var).unwrap())
}

/// A well-formed score request frame.
pub fn score_request(id: &str, x: &LatticeField, enc: PayloadEncoding) -> Frame {
    let req = RequestHeader {
        protocol_version: PROTOCOL_VERSION,
        request_id: id.into(),
        kind: RequestKind::Score,
        tau: 0.4,
        shape: Some(x.shape().dims()),
        conditioning: String::new(),
        payload: enc,
        data: (enc == PayloadEncoding::Inline).then(|| x.data().to_vec()),
    };
    Frame::new(&req, encode_payload(enc, x.data()))
}

/// One malformed variant of an encoded frame.
pub fn mutate(rng: &mut ChaCha8Rng, valid: &[u8]) -> Vec<u8> {
    let mut b = valid.to_vec();
    match rng.gen_range(0..12) {
        // truncation anywhere, including inside the prefix
        0 => b.truncate(rng.gen_range(0..b.len())),
        // random byte flips
        1 => {
            for _ in 0..rng.gen_range(1..6) {
                let i = rng.gen_range(0..b.len());
                b[i] ^= rng.gen::<u8>() | 1;
            }
        }
        // frame length prefix lies
        2 => {
            let len: u32 = match rng.gen_range(0..4) {
                0 => 0,
                1 => rng.gen_range(0..4),
                2 => u32::MAX - rng.gen_range(0..16),
                _ => rng.gen_range(0..2 * b.len() as u32),
            };
            b[..4].copy_from_slice(&len.to_be_bytes());
        }
        // header length lies
        3 => {
            let hl: u32 = if rng.gen() { u32::MAX } else { rng.gen_range(0..b.len() as u32 * 2) };
            b[4..8].copy_from_slice(&hl.to_be_bytes());
        }
        // pure noise
        4 => {
            let n = rng.gen_range(0..64);
            b = (0..n).map(|_| rng.gen()).collect();
        }
        // consistent framing around a junk header
        5 => {
            let junk: Vec<u8> = (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect();
            b = Frame { header: junk, payload: Vec::new() }.encode();
        }
        // JSON that is not the expected message
        6 => {
            let headers = [
                r#"{}"#,
                r#"[]"#,
                r#"{"protocol_version":"one","request_id":7}"#,
                r#"{"protocol_version":1,"request_id":"x","kind":"dance"}"#,
                r#"{"protocol_version":1,"request_id":"x","kind":"score","shape":[0,0,0,0],"payload":"f32le"}"#,
                r#"{"protocol_version":1,"request_id":"x","kind":"score","shape":[4294967295,4294967295,4294967295,4294967295],"payload":"f64le"}"#,
                r#"{"protocol_version":1,"request_id":"x","kind":"score","tau":1e400,"shape":[1,1,1,1],"payload":"inline","data":[1]}"#,
                r#"{"protocol_version":1,"request_id":"x","kind":"score","shape":[1,1,2,1],"payload":"inline","data":[1]}"#,
                r#"{"protocol_version":2,"request_id":"x","kind":"hello"}"#,
                r#"{"protocol_version":1,"request_id":"x","status":"ok"}"#,
            ];
            let h = headers[rng.gen_range(0..headers.len())];
            b = Frame { header: h.as_bytes().to_vec(), payload: Vec::new() }.encode();
        }
        // payload length off by a few bytes
        7 => {
            let f = Frame::decode(valid).expect("valid input");
            let mut p = f.payload.clone();
            if rng.gen() && !p.is_empty() {
                p.truncate(p.len() - rng.gen_range(1..=p.len().min(5)));
            } else {
                p.extend((0..rng.gen_range(1..5)).map(|_| rng.gen::<u8>()));
            }
            b = Frame { header: f.header, payload: p }.encode();
        }
        // NaN / Inf payload values
        8 => {
            let f = Frame::decode(valid).expect("valid input");
            let mut p = f.payload.clone();
            if p.len() >= 4 {
                let at = rng.gen_range(0..p.len() / 4) * 4;
                p[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
            }
            b = Frame { header: f.header, payload: p }.encode();
        }
        // garbage appended after a complete frame
        9 => b.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
        // header truncated inside the JSON
        10 => {
            let f = Frame::decode(valid).expect("valid input");
            let mut h = f.header.clone();
            h.truncate(rng.gen_range(0..h.len()));
            b = Frame { header: h, payload: f.payload }.encode();
        }
        // two frames glued with a corrupted second prefix
        _ => {
            let mut second = valid.to_vec();
            second[rng.gen_range(0..4)] ^= 0xff;
            b.extend(second);
        }
    }
    if b == valid {
        b.pop();
    }
    b
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub frames: usize,
    pub responses: usize,
    pub bad_responses: usize,
}

/// Sends `n` malformed frames to the stub, one connection each, and checks
/// every reply decodes as a response header. Panics if the stub stops
/// accepting connections.
pub fn fuzz_stub(addr: SocketAddr, n: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = LatticeField::from_vec(Shape::new(1, 1, 3, 1), vec![0.1, -0.4, 2.0]).unwrap();
    let encs = [PayloadEncoding::F32le, PayloadEncoding::F64le, PayloadEncoding::Inline];
    let mut rep = FuzzReport::default();
    for i in 0..n {
        let valid = score_request(&format!("f{i}"), &x, encs[i % 3]).encode();
        let bytes = mutate(&mut rng, &valid);
        let mut s = TcpStream::connect(addr).expect("stub still accepts connections");
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let _ = s.write_all(&bytes);
        let _ = s.shutdown(Shutdown::Write);
        rep.frames += 1;
        loop {
            match read_frame(&mut s) {
                Ok(ReadOutcome::Frame(f)) => {
                    rep.responses += 1;
                    if f.parse_header::<ResponseHeader>().is_err() {
                        rep.bad_responses += 1;
                    }
                }
                Ok(ReadOutcome::Closed) => break,
                Err(_) => {
                    rep.bad_responses += 1;
                    break;
                }
            }
        }
    }
    rep
}

/// A server that answers handshakes correctly and every other request with
/// a malformed variant of the true response, then hangs up.
pub fn spawn_hostile_server(expert: Arc<dyn ScoreModel>, seed: u64) -> SocketAddr {
    let stub = StubServer::new(expert, NoiseSchedule::rectified());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let counter = Arc::new(AtomicU64::new(0));
    thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(mut s) = conn else { continue };
            let stub = stub.clone();
            let counter = counter.clone();
            thread::spawn(move || {
                let _ = s.set_read_timeout(Some(Duration::from_secs(5)));
                while let Ok(ReadOutcome::Frame(f)) = read_frame(&mut s) {
                    let resp = stub.respond(&f);
                    let hello = f
                        .parse_header::<RequestHeader>()
                        .map(|h| h.kind == RequestKind::Hello)
                        .unwrap_or(false);
                    if hello {
                        if write_frame(&mut s, &resp).is_err() {
                            return;
                        }
                        continue;
                    }
                    let k = counter.fetch_add(1, Ordering::Relaxed);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let _ = s.write_all(&mutate(&mut rng, &resp.encode()));
                    let _ = s.shutdown(Shutdown::Both);
                    return;
                }
            });
        }
    });
    addr
}

#[derive(Debug, Default)]
pub struct ClientFuzzReport {
    pub errors: usize,
    pub exact: usize,
    /// Accepted values that differ from the true score (flipped payload bits).
    pub altered: usize,
    pub nonfinite: usize,
}

/// Issues `n` score calls against a hostile server.
pub fn fuzz_client(addr: SocketAddr, expert: &dyn ScoreModel, n: usize) -> ClientFuzzReport {
    let shape = Shape::new(1, 1, 3, 1);
    let x = LatticeField::from_vec(shape, vec![0.1, -0.4, 2.0]).unwrap();
    let sched = NoiseSchedule::rectified();
    let want = expert.score(&x, 0.4, &sched).unwrap();
    let client = RemoteExpert::builder("victim", Endpoint::Tcp(addr.to_string()), "")
        .precision(WirePrecision::F64)
        .timeout(Duration::from_secs(5))
        .connect()
        .expect("handshake succeeds");
    let mut rep = ClientFuzzReport::default();
    for _ in 0..n {
        match client.score(&x, 0.4, &sched) {
            Err(_) => rep.errors += 1,
            Ok(v) if v.data().iter().any(|a| !a.is_finite()) => rep.nonfinite += 1,
            Ok(v) if v == want => rep.exact += 1,
            Ok(v) => {
                assert_eq!(v.shape(), shape);
                rep.altered += 1;
            }
        }
    }
    rep
}

pub fn drain(s: &mut TcpStream) -> Vec<u8> {
    let mut v = Vec::new();
    let _ = s.read_to_end(&mut v);
    v
}

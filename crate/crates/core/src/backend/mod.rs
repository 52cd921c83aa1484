//! Wire protocol for out-of-process experts, its client and a reference stub.

mod client;
pub mod proto;
mod stub;

pub use client::{Endpoint, RemoteBuilder, RemoteExpert, WirePrecision};
pub use stub::StubServer;

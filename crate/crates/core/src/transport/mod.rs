//! Rank-addressed frame transport.
//!
//! A transport moves whole envelopes between universe ranks and preserves
//! FIFO order per (sender, receiver) pair. Inbound frames land in a channel
//! that only the owning rank drains.

use std::io;
use std::time::Duration;

use crate::frame::MessageEnvelope;

mod local;
mod tcp;

pub use local::{local_endpoints, LocalEndpoint};
pub use tcp::{TcpConfig, ENV_COORD_ADDR, ENV_RANK, ENV_SIZE};

pub(crate) use tcp::{TcpTransport, PEER_CLOSED};

/// An event in a rank's inbox.
#[derive(Debug)]
pub enum Inbound {
    Frame(MessageEnvelope),
    /// The link to universe rank `peer` broke or carried a malformed frame.
    PeerFailed { peer: u32, reason: String },
}

pub(crate) trait Transport {
    fn rank(&self) -> u32;
    fn size(&self) -> u32;
    /// Eager: returns once the envelope is queued for `dest` (a universe rank).
    fn send(&self, dest: u32, envelope: MessageEnvelope) -> io::Result<()>;
    fn try_recv(&self) -> Option<Inbound>;
    /// Blocks up to `timeout` (forever if `None`) for the next inbound event.
    fn recv_timeout(&self, timeout: Option<Duration>) -> Option<Inbound>;
    fn shutdown(&self);
}

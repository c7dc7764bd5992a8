use std::cell::Cell;
use std::io;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{Inbound, Transport, PEER_CLOSED};
use crate::frame::MessageEnvelope;

/// One rank's end of an in-process universe. Move it to the thread that will
/// drive the rank and pass it to [`Universe::init`](crate::Universe::init).
pub struct LocalEndpoint {
    rank: u32,
    peers: Vec<Sender<Inbound>>,
    inbox: Receiver<Inbound>,
    closed: Cell<bool>,
}

impl std::fmt::Debug for LocalEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalEndpoint")
            .field("rank", &self.rank)
            .field("size", &self.peers.len())
            .finish()
    }
}

/// Creates the `n` connected endpoints of an in-process universe.
pub fn local_endpoints(n: u32) -> Vec<LocalEndpoint> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel()).unzip();
    receivers
        .into_iter()
        .enumerate()
        .map(|(rank, inbox)| LocalEndpoint {
            rank: rank as u32,
            peers: senders.clone(),
            inbox,
            closed: Cell::new(false),
        })
        .collect()
}

impl LocalEndpoint {
    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.peers.len() as u32
    }
}

impl Transport for LocalEndpoint {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn size(&self) -> u32 {
        self.peers.len() as u32
    }

    fn send(&self, dest: u32, envelope: MessageEnvelope) -> io::Result<()> {
        let peer = self
            .peers
            .get(dest as usize)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("no rank {dest}")))?;
        peer.send(Inbound::Frame(envelope))
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, format!("rank {dest} has finalized")))
    }

    fn try_recv(&self) -> Option<Inbound> {
        self.inbox.try_recv().ok()
    }

    fn recv_timeout(&self, timeout: Option<Duration>) -> Option<Inbound> {
        match timeout {
            // Our own sender in `peers` keeps the channel open, so this only
            // returns once something arrives.
            None => self.inbox.recv().ok(),
            Some(t) => match self.inbox.recv_timeout(t) {
                Ok(ev) => Some(ev),
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
            },
        }
    }

    /// Tells every other rank that nothing more will come from this one.
    fn shutdown(&self) {
        if self.closed.replace(true) {
            return;
        }
        for (r, peer) in self.peers.iter().enumerate() {
            if r as u32 != self.rank {
                let _ = peer.send(Inbound::PeerFailed { peer: self.rank, reason: PEER_CLOSED.to_string() });
            }
        }
    }
}

impl Drop for LocalEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}

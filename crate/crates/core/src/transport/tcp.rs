//! Full-mesh TCP transport with a rank-0 rendezvous.
//!
//! Bring-up: rank 0 listens on the coordinator address. Every other rank
//! opens its own listener, connects to the coordinator and announces
//! `(rank, listen address)`. Once all ranks have announced, rank 0 sends the
//! address table to everyone. Rank `r` then dials every rank `0 < j < r` and
//! accepts a connection from every rank above it. Each link gets one reader
//! thread that decodes frames into the owning rank's inbox.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::{Inbound, Transport};
use crate::error::{MpError, Result};
use crate::frame::{self, MessageEnvelope, ReadFrameError};

pub const ENV_RANK: &str = "MMP_RANK";
pub const ENV_SIZE: &str = "MMP_SIZE";
pub const ENV_COORD_ADDR: &str = "MMP_COORD_ADDR";

const HELLO_MAGIC: u32 = 0x484D_504D;
const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(20);

#[derive(Debug, Clone)]
pub struct TcpConfig {
    pub rank: u32,
    pub size: u32,
    /// `host:port` of rank 0's listener.
    pub coord_addr: String,
    /// Bound on the whole bring-up, including retries while rank 0 starts.
    pub connect_timeout: Duration,
}

impl TcpConfig {
    pub fn new(rank: u32, size: u32, coord_addr: impl Into<String>) -> Self {
        TcpConfig {
            rank,
            size,
            coord_addr: coord_addr.into(),
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }

    /// Reads `MMP_RANK`, `MMP_SIZE` and `MMP_COORD_ADDR`.
    pub fn from_env() -> Result<Self> {
        fn var(name: &str) -> Result<String> {
            std::env::var(name).map_err(|_| MpError::other(format!("{name} is not set")))
        }
        let parse = |name: &str| -> Result<u32> {
            var(name)?
                .trim()
                .parse()
                .map_err(|_| MpError::other(format!("{name} is not an unsigned integer")))
        };
        let cfg = TcpConfig::new(parse(ENV_RANK)?, parse(ENV_SIZE)?, var(ENV_COORD_ADDR)?);
        if cfg.size == 0 || cfg.rank >= cfg.size {
            return Err(MpError::other(format!(
                "{ENV_RANK}={} is not below {ENV_SIZE}={}",
                cfg.rank, cfg.size
            )));
        }
        Ok(cfg)
    }
}

pub(crate) struct TcpTransport {
    rank: u32,
    size: u32,
    links: Vec<Option<TcpStream>>,
    self_tx: Sender<Inbound>,
    inbox: Receiver<Inbound>,
}

fn bring_up_err(rank: u32, what: &str, e: impl std::fmt::Display) -> MpError {
    MpError::other(format!("tcp bring-up on rank {rank}: {what}: {e}"))
}

impl TcpTransport {
    pub(crate) fn connect(cfg: &TcpConfig) -> Result<Self> {
        if cfg.size == 0 || cfg.rank >= cfg.size {
            return Err(MpError::other(format!("rank {} not below size {}", cfg.rank, cfg.size)));
        }
        let deadline = Instant::now() + cfg.connect_timeout;
        let rank = cfg.rank;
        let mut links: Vec<Option<TcpStream>> = (0..cfg.size).map(|_| None).collect();

        if rank == 0 {
            let listener = TcpListener::bind(&cfg.coord_addr)
                .map_err(|e| bring_up_err(rank, &format!("bind coordinator {}", cfg.coord_addr), e))?;
            let mut table = vec![String::new(); cfg.size as usize];
            table[0] = listener.local_addr().map_err(|e| bring_up_err(rank, "local addr", e))?.to_string();
            for _ in 1..cfg.size {
                let mut s = accept_until(&listener, deadline).map_err(|e| bring_up_err(rank, "accept", e))?;
                let (peer, addr) = read_hello(&mut s).map_err(|e| bring_up_err(rank, "hello", e))?;
                if peer == 0 || peer >= cfg.size || links[peer as usize].is_some() {
                    return Err(bring_up_err(rank, "hello", format!("unexpected rank {peer}")));
                }
                table[peer as usize] = addr;
                links[peer as usize] = Some(s);
            }
            let encoded = encode_table(&table);
            for s in links.iter_mut().flatten() {
                s.write_all(&encoded).map_err(|e| bring_up_err(rank, "send table", e))?;
            }
        } else {
            let mut coord = dial(&cfg.coord_addr, deadline).map_err(|e| bring_up_err(rank, &format!("connect coordinator {}", cfg.coord_addr), e))?;
            let local_ip = coord.local_addr().map_err(|e| bring_up_err(rank, "local addr", e))?.ip();
            let listener = TcpListener::bind((local_ip, 0)).map_err(|e| bring_up_err(rank, "bind", e))?;
            let my_addr = listener.local_addr().map_err(|e| bring_up_err(rank, "local addr", e))?;
            write_hello(&mut coord, rank, &my_addr.to_string()).map_err(|e| bring_up_err(rank, "hello", e))?;
            coord
                .set_read_timeout(Some(remaining(deadline)))
                .map_err(|e| bring_up_err(rank, "timeout", e))?;
            let table = read_table(&mut coord).map_err(|e| bring_up_err(rank, "address table", e))?;
            if table.len() != cfg.size as usize {
                return Err(bring_up_err(rank, "address table", "size disagrees with MMP_SIZE"));
            }
            links[0] = Some(coord);
            for j in 1..rank {
                let mut s = dial(&table[j as usize], deadline).map_err(|e| bring_up_err(rank, &format!("connect rank {j}"), e))?;
                write_hello(&mut s, rank, "").map_err(|e| bring_up_err(rank, "hello", e))?;
                links[j as usize] = Some(s);
            }
            for _ in rank + 1..cfg.size {
                let mut s = accept_until(&listener, deadline).map_err(|e| bring_up_err(rank, "accept", e))?;
                let (peer, _) = read_hello(&mut s).map_err(|e| bring_up_err(rank, "hello", e))?;
                if peer <= rank || peer >= cfg.size || links[peer as usize].is_some() {
                    return Err(bring_up_err(rank, "hello", format!("unexpected rank {peer}")));
                }
                links[peer as usize] = Some(s);
            }
        }

        let (tx, inbox) = mpsc::channel();
        for (peer, link) in links.iter().enumerate() {
            let Some(s) = link else { continue };
            s.set_read_timeout(None).ok();
            s.set_nodelay(true).ok();
            let reader = s.try_clone().map_err(|e| bring_up_err(rank, "clone stream", e))?;
            let tx = tx.clone();
            thread::Builder::new()
                .name(format!("mmp-r{rank}-from{peer}"))
                .spawn(move || reader_loop(reader, peer as u32, tx))
                .map_err(|e| bring_up_err(rank, "spawn reader", e))?;
        }
        Ok(TcpTransport {
            rank,
            size: cfg.size,
            links,
            self_tx: tx,
            inbox,
        })
    }
}

pub(crate) const PEER_CLOSED: &str = "peer closed the connection";

/// Forwards frames from one peer. End of stream is reported like a failure:
/// links are ordered, so nothing more can arrive from that peer.
fn reader_loop(mut stream: TcpStream, peer: u32, tx: Sender<Inbound>) {
    let mut r = io::BufReader::new(&mut stream);
    loop {
        let ev = match frame::read_frame(&mut r) {
            Ok(Some(env)) => Inbound::Frame(env),
            Ok(None) => Inbound::PeerFailed { peer, reason: PEER_CLOSED.to_string() },
            Err(ReadFrameError::Io(e)) => Inbound::PeerFailed { peer, reason: e.to_string() },
            Err(ReadFrameError::Malformed(e)) => Inbound::PeerFailed { peer, reason: e.to_string() },
        };
        let failed = matches!(ev, Inbound::PeerFailed { .. });
        if tx.send(ev).is_err() || failed {
            return;
        }
    }
}

fn remaining(deadline: Instant) -> Duration {
    deadline
        .saturating_duration_since(Instant::now())
        .max(Duration::from_millis(1))
}

fn dial(addr: &str, deadline: Instant) -> io::Result<TcpStream> {
    let targets: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    if targets.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "address resolves to nothing"));
    }
    loop {
        let mut last = None;
        for t in &targets {
            match TcpStream::connect_timeout(t, remaining(deadline).min(Duration::from_secs(2))) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            return Err(last.expect("at least one target"));
        }
        thread::sleep(Duration::from_millis(25));
    }
}

fn accept_until(listener: &TcpListener, deadline: Instant) -> io::Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                s.set_read_timeout(Some(remaining(deadline)))?;
                return Ok(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "peers did not connect in time"));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    }
}

fn write_hello(s: &mut TcpStream, rank: u32, addr: &str) -> io::Result<()> {
    let mut buf = Vec::with_capacity(10 + addr.len());
    buf.extend_from_slice(&HELLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&rank.to_le_bytes());
    put_str(&mut buf, addr);
    s.write_all(&buf)
}

fn read_hello(s: &mut TcpStream) -> io::Result<(u32, String)> {
    let mut word = [0u8; 4];
    s.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != HELLO_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad hello magic"));
    }
    s.read_exact(&mut word)?;
    Ok((u32::from_le_bytes(word), get_str(s)?))
}

fn encode_table(table: &[String]) -> Vec<u8> {
    let mut buf = (table.len() as u32).to_le_bytes().to_vec();
    for a in table {
        put_str(&mut buf, a);
    }
    buf
}

fn read_table(s: &mut TcpStream) -> io::Result<Vec<String>> {
    let mut word = [0u8; 4];
    s.read_exact(&mut word)?;
    (0..u32::from_le_bytes(word)).map(|_| get_str(s)).collect()
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(s: &mut TcpStream) -> io::Result<String> {
    let mut len = [0u8; 2];
    s.read_exact(&mut len)?;
    let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
    s.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

impl Transport for TcpTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn size(&self) -> u32 {
        self.size
    }

    fn send(&self, dest: u32, envelope: MessageEnvelope) -> io::Result<()> {
        if dest == self.rank {
            return self
                .self_tx
                .send(Inbound::Frame(envelope))
                .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "inbox closed"));
        }
        let mut link = self
            .links
            .get(dest as usize)
            .and_then(Option::as_ref)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("no link to rank {dest}")))?;
        if envelope.payload.len() <= 64 * 1024 {
            let bytes = frame::encode_frame(&envelope).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
            link.write_all(&bytes)
        } else {
            frame::write_frame(&mut link, &envelope.header, &envelope.payload)
        }
    }

    fn try_recv(&self) -> Option<Inbound> {
        self.inbox.try_recv().ok()
    }

    fn recv_timeout(&self, timeout: Option<Duration>) -> Option<Inbound> {
        match timeout {
            None => self.inbox.recv().ok(),
            Some(t) => match self.inbox.recv_timeout(t) {
                Ok(ev) => Some(ev),
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
            },
        }
    }

    fn shutdown(&self) {
        for s in self.links.iter().flatten() {
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

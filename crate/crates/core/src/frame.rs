//! Message envelopes and their wire frame.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic      0x4D504D31 ("MPM1")
//!      4     4  frame_len  bytes after this field
//!      8     4  context
//!     12     4  source
//!     16     4  dest
//!     20     4  tag
//!     24     1  dtype
//!     25     3  reserved (zero)
//!     28     8  count      element count
//!     36     …  payload    count × extent bytes
//! ```

use std::fmt;
use std::io::{self, Read, Write};

use crate::datatype::DatatypeKind;

pub const FRAME_MAGIC: u32 = 0x4D50_4D31;
/// Bytes before the payload, including magic and length.
pub const HEADER_LEN: usize = 36;
/// Bytes counted by `frame_len` when the payload is empty.
const BODY_HEADER_LEN: u32 = 28;

/// Matching context of a communicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextId(pub u32);

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx#{}", self.0)
    }
}

/// Matching metadata of a message. Ranks are communicator-local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnvelopeHeader {
    pub context: ContextId,
    pub source: u32,
    pub dest: u32,
    pub tag: u32,
    pub dtype: DatatypeKind,
    pub count: u64,
}

impl EnvelopeHeader {
    /// `count × extent`, or `None` if that overflows.
    pub fn payload_len(&self) -> Option<u64> {
        self.count.checked_mul(self.dtype.extent() as u64)
    }
}

/// A complete message: header plus `count × extent` payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub header: EnvelopeHeader,
    pub payload: Vec<u8>,
}

impl MessageEnvelope {
    pub fn new(header: EnvelopeHeader, payload: Vec<u8>) -> Result<Self, FrameError> {
        check_payload(&header, payload.len() as u64, HEADER_LEN)?;
        Ok(MessageEnvelope { header, payload })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameErrorKind {
    Truncated { needed: usize, available: usize },
    BadMagic(u32),
    BadDatatype(u8),
    BadFrameLength(u32),
    PayloadMismatch { expected: Option<u64>, actual: u64 },
    TooLarge(u64),
}

/// A malformed or unencodable frame; `offset` is the byte where decoding failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed frame at byte {offset}: {kind:?}")]
pub struct FrameError {
    pub offset: usize,
    pub kind: FrameErrorKind,
}

impl FrameError {
    fn at(offset: usize, kind: FrameErrorKind) -> Self {
        FrameError { offset, kind }
    }
}

fn check_payload(header: &EnvelopeHeader, actual: u64, offset: usize) -> Result<(), FrameError> {
    let expected = header.payload_len();
    if expected != Some(actual) {
        return Err(FrameError::at(offset, FrameErrorKind::PayloadMismatch { expected, actual }));
    }
    Ok(())
}

/// Encodes the 36-byte header of a frame whose payload is `payload_len` bytes.
///
/// The payload length is not checked against `count`, so header-only frames
/// with arbitrary counts can be produced; [`encode_frame`] checks it.
pub fn encode_header(header: &EnvelopeHeader, payload_len: u64) -> Result<[u8; HEADER_LEN], FrameError> {
    let frame_len = payload_len
        .checked_add(BODY_HEADER_LEN as u64)
        .filter(|&l| l <= u32::MAX as u64)
        .ok_or(FrameError::at(4, FrameErrorKind::TooLarge(payload_len)))?;
    let mut out = [0u8; HEADER_LEN];
    out[0..4].copy_from_slice(&FRAME_MAGIC.to_le_bytes());
    out[4..8].copy_from_slice(&(frame_len as u32).to_le_bytes());
    out[8..12].copy_from_slice(&header.context.0.to_le_bytes());
    out[12..16].copy_from_slice(&header.source.to_le_bytes());
    out[16..20].copy_from_slice(&header.dest.to_le_bytes());
    out[20..24].copy_from_slice(&header.tag.to_le_bytes());
    out[24] = header.dtype.code();
    out[28..36].copy_from_slice(&header.count.to_le_bytes());
    Ok(out)
}

pub fn encode_frame(envelope: &MessageEnvelope) -> Result<Vec<u8>, FrameError> {
    check_payload(&envelope.header, envelope.payload.len() as u64, HEADER_LEN)?;
    let head = encode_header(&envelope.header, envelope.payload.len() as u64)?;
    let mut out = Vec::with_capacity(HEADER_LEN + envelope.payload.len());
    out.extend_from_slice(&head);
    out.extend_from_slice(&envelope.payload);
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Decodes the fixed header. Returns the header and the declared `frame_len`.
pub fn decode_header(bytes: &[u8]) -> Result<(EnvelopeHeader, u32), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::at(
            bytes.len(),
            FrameErrorKind::Truncated { needed: HEADER_LEN, available: bytes.len() },
        ));
    }
    let magic = u32_at(bytes, 0);
    if magic != FRAME_MAGIC {
        return Err(FrameError::at(0, FrameErrorKind::BadMagic(magic)));
    }
    let frame_len = u32_at(bytes, 4);
    if frame_len < BODY_HEADER_LEN {
        return Err(FrameError::at(4, FrameErrorKind::BadFrameLength(frame_len)));
    }
    let dtype = DatatypeKind::from_code(bytes[24])
        .ok_or(FrameError::at(24, FrameErrorKind::BadDatatype(bytes[24])))?;
    let header = EnvelopeHeader {
        context: ContextId(u32_at(bytes, 8)),
        source: u32_at(bytes, 12),
        dest: u32_at(bytes, 16),
        tag: u32_at(bytes, 20),
        dtype,
        count: u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
    };
    Ok((header, frame_len))
}

/// Decodes one complete frame from the front of `bytes`; returns the envelope
/// and the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(MessageEnvelope, usize), FrameError> {
    let (header, frame_len) = decode_header(bytes)?;
    let total = 8 + frame_len as usize;
    if bytes.len() < total {
        return Err(FrameError::at(
            bytes.len(),
            FrameErrorKind::Truncated { needed: total, available: bytes.len() },
        ));
    }
    let payload = &bytes[HEADER_LEN..total];
    check_payload(&header, payload.len() as u64, HEADER_LEN)?;
    Ok((MessageEnvelope { header, payload: payload.to_vec() }, total))
}

/// Errors from reading frames off a byte stream.
#[derive(Debug, thiserror::Error)]
pub enum ReadFrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Malformed(#[from] FrameError),
}

pub fn write_frame<W: Write>(w: &mut W, header: &EnvelopeHeader, payload: &[u8]) -> io::Result<()> {
    check_payload(header, payload.len() as u64, HEADER_LEN)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let head = encode_header(header, payload.len() as u64)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&head)?;
    w.write_all(payload)
}

/// Reads one frame. `Ok(None)` on a clean end of stream at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<MessageEnvelope>, ReadFrameError> {
    let mut head = [0u8; HEADER_LEN];
    let got = read_full(r, &mut head)?;
    if got == 0 {
        return Ok(None);
    }
    if got < HEADER_LEN {
        return Err(FrameError::at(got, FrameErrorKind::Truncated { needed: HEADER_LEN, available: got }).into());
    }
    let (header, frame_len) = decode_header(&head)?;
    let payload_len = (frame_len - BODY_HEADER_LEN) as usize;
    check_payload(&header, payload_len as u64, HEADER_LEN)?;
    let mut payload = vec![0u8; payload_len];
    let got = read_full(r, &mut payload)?;
    if got < payload_len {
        return Err(FrameError::at(
            HEADER_LEN + got,
            FrameErrorKind::Truncated { needed: HEADER_LEN + payload_len, available: HEADER_LEN + got },
        )
        .into());
    }
    Ok(Some(MessageEnvelope { header, payload }))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

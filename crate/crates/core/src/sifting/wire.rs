//! Framing and payload codecs.
//!
//! A frame is `type: u8 | length: u32 LE | payload`. Integers are little
//! endian, gate indices eight bytes, and bit or class vectors are packed
//! least-significant-bit first behind an explicit `u64` count.

use std::fmt;
use std::io::{self, Read, Write};

use super::{ErrorKind, ProtocolError};

pub const PROTOCOL_VERSION: u8 = 0x01;

/// Frames larger than this are treated as malformed.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    Detections = 0x02,
    BasisReveal = 0x03,
    IntensityReveal = 0x04,
    ErrorSample = 0x05,
    TallyReport = 0x06,
    Bye = 0x07,
}

impl MessageType {
    pub fn from_code(code: u8) -> Option<Self> {
        use MessageType::*;
        Some(match code {
            0x01 => Hello,
            0x02 => Detections,
            0x03 => BasisReveal,
            0x04 => IntensityReveal,
            0x05 => ErrorSample,
            0x06 => TallyReport,
            0x07 => Bye,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use MessageType::*;
        match self {
            Hello => "HELLO",
            Detections => "DETECTIONS",
            BasisReveal => "BASIS_REVEAL",
            IntensityReveal => "INTENSITY_REVEAL",
            ErrorSample => "ERROR_SAMPLE",
            TallyReport => "TALLY_REPORT",
            Bye => "BYE",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageType,
    pub payload: Vec<u8>,
}

pub fn write_frame(out: &mut impl Write, kind: MessageType, payload: &[u8]) -> Result<(), ProtocolError> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_LEN)
        .ok_or_else(|| ProtocolError::new(kind, ErrorKind::Malformed("payload too large".into())))?;
    let send = |out: &mut dyn Write| -> io::Result<()> {
        out.write_all(&[kind as u8])?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(payload)?;
        out.flush()
    };
    send(out).map_err(|e| ProtocolError::new(kind, ErrorKind::Io(e.to_string())))
}

/// Reads one frame; `expected` names the message the caller is waiting for
/// and is used in errors raised before the type byte is known.
pub fn read_frame(input: &mut impl Read, expected: MessageType) -> Result<Frame, ProtocolError> {
    let mut head = [0u8; 5];
    input
        .read_exact(&mut head)
        .map_err(|e| ProtocolError::new(expected, ErrorKind::from_read(e)))?;
    let kind = MessageType::from_code(head[0]).ok_or_else(|| {
        ProtocolError::new(expected, ErrorKind::Malformed(format!("unknown type code 0x{:02x}", head[0])))
    })?;
    let len = u32::from_le_bytes(head[1..].try_into().unwrap());
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::new(kind, ErrorKind::Malformed(format!("length {len} exceeds limit"))));
    }
    let mut payload = Vec::new();
    input
        .take(u64::from(len))
        .read_to_end(&mut payload)
        .map_err(|e| ProtocolError::new(kind, ErrorKind::from_read(e)))?;
    if payload.len() != len as usize {
        return Err(ProtocolError::new(
            kind,
            ErrorKind::Malformed(format!("declared length {len}, stream ended after {}", payload.len())),
        ));
    }
    if kind != expected {
        return Err(ProtocolError::new(kind, ErrorKind::Unexpected { expected }));
    }
    Ok(Frame { kind, payload })
}

/// Cursor over a payload that turns short reads into framing errors.
pub struct PayloadReader<'a> {
    kind: MessageType,
    buf: &'a [u8],
}

impl<'a> PayloadReader<'a> {
    pub fn new(frame: &'a Frame) -> Self {
        Self {
            kind: frame.kind,
            buf: &frame.payload,
        }
    }

    pub fn error(&self, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::new(self.kind, ErrorKind::Malformed(reason.into()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() < n {
            return Err(self.error("payload too short"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    /// A count that must be matched by at least `min_bytes_each` bytes per
    /// element still in the payload, so a corrupt count cannot trigger a huge
    /// allocation.
    pub fn count(&mut self, bits_each: usize) -> Result<usize, ProtocolError> {
        let n = self.u64()?;
        let need = (n as u128 * bits_each as u128).div_ceil(8);
        if need > self.buf.len() as u128 {
            return Err(self.error(format!("count {n} exceeds payload")));
        }
        Ok(n as usize)
    }

    pub fn finish(self) -> Result<(), ProtocolError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.error(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

/// Packs `width`-bit values (width 1 or 2) LSB first.
pub fn pack(values: impl ExactSizeIterator<Item = u8>, width: usize) -> Vec<u8> {
    let n = values.len();
    let mut out = Vec::with_capacity(8 + (n * width).div_ceil(8));
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let mut acc = 0u8;
    let mut used = 0;
    let mask = (1u8 << width) - 1;
    for v in values {
        acc |= (v & mask) << used;
        used += width;
        if used == 8 {
            out.push(acc);
            acc = 0;
            used = 0;
        }
    }
    if used > 0 {
        out.push(acc);
    }
    out
}

/// Inverse of [`pack`]; the count has already been read. Padding bits must be
/// zero.
pub fn unpack(r: &mut PayloadReader<'_>, n: usize, width: usize) -> Result<Vec<u8>, ProtocolError> {
    let bytes = r.bytes((n * width).div_ceil(8))?;
    let per_byte = 8 / width;
    let mask = (1u8 << width) - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(bytes[i / per_byte] >> (i % per_byte * width) & mask);
    }
    let used = n * width % 8;
    if used != 0 && bytes[bytes.len() - 1] >> used != 0 {
        return Err(r.error("nonzero padding bits"));
    }
    Ok(out)
}

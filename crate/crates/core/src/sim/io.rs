//! Binary detection and pulse files.
//!
//! Detection file: `b"QKDT"`, version byte, three zero bytes, then 16-byte
//! little-endian records `gate: u64, detector: u8, basis: u8, offset_ps: u16,
//! reserved: [u8; 4]`.
//!
//! Pulse file: `b"QKDP"`, version byte, three zero bytes, then one byte per
//! gate starting at gate 0: bits 0-1 class index, bit 2 basis, bit 3 bit.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{DetectionRecord, PulseRecord, PulseSource};
use crate::model::IntensityClass;

pub const DETECTION_MAGIC: [u8; 4] = *b"QKDT";
pub const PULSE_MAGIC: [u8; 4] = *b"QKDP";
pub const STREAM_VERSION: u8 = 0x01;

const RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("bad magic, expected {expected:?}")]
    Magic { expected: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("truncated record at byte {0}")]
    Truncated(u64),
    #[error("record {index}: {reason}")]
    Record { index: u64, reason: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn write_header(out: &mut impl Write, magic: [u8; 4]) -> io::Result<()> {
    out.write_all(&magic)?;
    out.write_all(&[STREAM_VERSION, 0, 0, 0])
}

fn read_header(input: &mut impl Read, magic: [u8; 4]) -> Result<(), StreamError> {
    let mut h = [0u8; 8];
    input
        .read_exact(&mut h)
        .map_err(|_| StreamError::Magic { expected: magic })?;
    if h[..4] != magic {
        return Err(StreamError::Magic { expected: magic });
    }
    if h[4] != STREAM_VERSION {
        return Err(StreamError::Version(h[4]));
    }
    Ok(())
}

/// Offsets are rounded to whole picoseconds.
pub fn write_detections<'a>(
    out: &mut impl Write,
    records: impl IntoIterator<Item = &'a DetectionRecord>,
) -> io::Result<()> {
    write_header(out, DETECTION_MAGIC)?;
    for r in records {
        let mut rec = [0u8; RECORD_LEN];
        rec[..8].copy_from_slice(&r.gate_index.to_le_bytes());
        rec[8] = r.detector_id;
        rec[9] = r.bob_basis;
        let ps = (r.arrival_offset_s * 1e12).round().clamp(0.0, f64::from(u16::MAX)) as u16;
        rec[10..12].copy_from_slice(&ps.to_le_bytes());
        out.write_all(&rec)?;
    }
    Ok(())
}

pub fn read_detections(input: &mut impl Read) -> Result<Vec<DetectionRecord>, StreamError> {
    read_header(input, DETECTION_MAGIC)?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() % RECORD_LEN != 0 {
        let whole = body.len() / RECORD_LEN * RECORD_LEN;
        return Err(StreamError::Truncated(8 + whole as u64));
    }
    let mut out = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let index = i as u64;
        if rec[8] > 1 {
            return Err(StreamError::Record { index, reason: "detector id must be 0 or 1" });
        }
        if rec[9] > 1 {
            return Err(StreamError::Record { index, reason: "basis must be 0 or 1" });
        }
        if rec[12..].iter().any(|&b| b != 0) {
            return Err(StreamError::Record { index, reason: "reserved bytes must be zero" });
        }
        let gate_index = u64::from_le_bytes(rec[..8].try_into().unwrap());
        if let Some(prev) = out.last().map(|r: &DetectionRecord| r.gate_index) {
            if gate_index < prev {
                return Err(StreamError::Record { index, reason: "gates out of order" });
            }
        }
        out.push(DetectionRecord {
            gate_index,
            detector_id: rec[8],
            bob_basis: rec[9],
            arrival_offset_s: f64::from(u16::from_le_bytes([rec[10], rec[11]])) * 1e-12,
        });
    }
    Ok(out)
}

/// Writes gates `0..source.len()`.
pub fn write_pulses(out: &mut impl Write, source: &impl PulseSource) -> io::Result<()> {
    write_header(out, PULSE_MAGIC)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for gate in 0..source.len() {
        let p = source.pulse(gate).expect("gate within len");
        buf.push(p.class.index() as u8 | (p.alice_basis & 1) << 2 | (p.alice_bit & 1) << 3);
        if buf.len() == buf.capacity() {
            out.write_all(&buf)?;
            buf.clear();
        }
    }
    out.write_all(&buf)
}

/// A pulse file held in memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PulseFile {
    bytes: Vec<u8>,
}

impl PulseSource for PulseFile {
    fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    fn pulse(&self, gate: u64) -> Option<PulseRecord> {
        let b = *self.bytes.get(usize::try_from(gate).ok()?)?;
        Some(PulseRecord {
            gate_index: gate,
            class: IntensityClass::from_index(b & 3)?,
            alice_basis: b >> 2 & 1,
            alice_bit: b >> 3 & 1,
        })
    }
}

pub fn read_pulses(input: &mut impl Read) -> Result<PulseFile, StreamError> {
    read_header(input, PULSE_MAGIC)?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if let Some(i) = bytes.iter().position(|&b| b & 3 == 3 || b >> 4 != 0) {
        return Err(StreamError::Record { index: i as u64, reason: "invalid pulse byte" });
    }
    Ok(PulseFile { bytes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SessionConfig;
    use crate::sim::{simulate_session, SimulatedPulses};

    #[test]
    fn detection_round_trip() {
        let out = simulate_session(&SessionConfig::default(), 9, 300_000).unwrap();
        let recs: Vec<_> = out.detections().collect();
        assert!(!recs.is_empty());
        let mut buf = Vec::new();
        write_detections(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..8], b"QKDT\x01\0\0\0");
        assert_eq!(buf.len(), 8 + 16 * recs.len());
        let back = read_detections(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!((a.gate_index, a.detector_id, a.bob_basis), (b.gate_index, b.detector_id, b.bob_basis));
            assert!((a.arrival_offset_s - b.arrival_offset_s).abs() <= 0.5e-12);
        }
    }

    #[test]
    fn record_layout() {
        let r = DetectionRecord {
            gate_index: 0x0102_0304_0506_0708,
            detector_id: 1,
            bob_basis: 1,
            arrival_offset_s: 240e-12,
        };
        let mut buf = Vec::new();
        write_detections(&mut buf, [&r]).unwrap();
        assert_eq!(
            &buf[8..],
            &[8, 7, 6, 5, 4, 3, 2, 1, 1, 1, 240, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn rejects_bad_streams() {
        assert!(matches!(read_detections(&mut &b"QKDX\x01\0\0\0"[..]), Err(StreamError::Magic { .. })));
        assert!(matches!(read_detections(&mut &b"QKDT\x02\0\0\0"[..]), Err(StreamError::Version(2))));
        let mut short = b"QKDT\x01\0\0\0".to_vec();
        short.extend_from_slice(&[0; 15]);
        assert!(matches!(read_detections(&mut short.as_slice()), Err(StreamError::Truncated(8))));
        let mut bad = b"QKDT\x01\0\0\0".to_vec();
        bad.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(read_detections(&mut bad.as_slice()), Err(StreamError::Record { index: 0, .. })));
    }

    #[test]
    fn pulse_round_trip() {
        let src = SimulatedPulses::new(&SessionConfig::default(), 4, 5000);
        let mut buf = Vec::new();
        write_pulses(&mut buf, &src).unwrap();
        let file = read_pulses(&mut buf.as_slice()).unwrap();
        assert_eq!(file.len(), 5000);
        for g in 0..5000 {
            assert_eq!(file.pulse(g), src.pulse(g));
        }
        assert_eq!(file.pulse(5000), None);
    }
}

//! Sifting over a reliable byte stream.
//!
//! The exchange, after both sides send `HELLO`:
//!
//! 1. Bob → `DETECTIONS`: gates with a click and his basis for each.
//! 2. Alice → `BASIS_REVEAL`, `INTENSITY_REVEAL`: her basis and intensity
//!    class for exactly those gates.
//! 3. Bob → `ERROR_SAMPLE`: his bit for every sifted decoy gate and for the
//!    signal gates picked by a public rule at the requested fraction.
//! 4. Alice → `TALLY_REPORT`; Bob checks every count he can compute himself
//!    and echoes the report, which Alice compares byte for byte.
//! 5. Both → `BYE`.
//!
//! Either side aborts on the first inconsistency; the peer then sees the
//! stream close.

pub mod wire;

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::{ClassCounts, IntensityClass, SessionTally, SourceConfig};
use crate::sim::rng::{mix64, to_unit};
use crate::sim::{double_click_bit, DetectionRecord, PulseSource};
pub use wire::{MessageType, MAX_FRAME_LEN, PROTOCOL_VERSION};
use wire::{pack, read_frame, unpack, write_frame, Frame, PayloadReader};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ErrorKind {
    #[error("protocol version {theirs} does not match ours ({ours})")]
    VersionMismatch { ours: u8, theirs: u8 },
    #[error("invalid session parameters: {0}")]
    InvalidParameters(String),
    #[error("session parameters differ: {0}")]
    ParameterMismatch(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unexpected message, waiting for {expected}")]
    Unexpected { expected: MessageType },
    #[error("gate {0} was never sent")]
    UnknownGate(u64),
    #[error("tally cross-check failed: {0}")]
    TallyMismatch(String),
    #[error("peer closed the connection")]
    Closed,
    #[error("invalid local input: {0}")]
    LocalInput(String),
    #[error("transport: {0}")]
    Io(String),
}

impl ErrorKind {
    fn from_read(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::UnexpectedEof => ErrorKind::Closed,
            _ => ErrorKind::Io(e.to_string()),
        }
    }
}

/// A failed session, tagged with the message being sent, received or
/// awaited when it failed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error in {message}: {kind}")]
pub struct ProtocolError {
    pub message: MessageType,
    pub kind: ErrorKind,
}

impl ProtocolError {
    pub fn new(message: MessageType, kind: ErrorKind) -> Self {
        Self { message, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiftOptions {
    /// Fraction of sifted signal bits disclosed for error estimation. Decoy
    /// bits are always disclosed in full.
    pub signal_disclosure: f64,
}

impl Default for SiftOptions {
    fn default() -> Self {
        Self {
            signal_disclosure: 1.0,
        }
    }
}

const DISCLOSURE_KEY: u64 = 0x1319_8A2E_0370_7344;

/// Public rule deciding whether a sifted bit is disclosed.
pub fn is_disclosed(gate: u64, class: IntensityClass, signal_fraction: f64) -> bool {
    match class {
        IntensityClass::Signal => signal_fraction >= 1.0 || to_unit(mix64(gate ^ DISCLOSURE_KEY)) < signal_fraction,
        _ => true,
    }
}

fn hello_payload(src: &SourceConfig) -> Vec<u8> {
    let mut p = vec![PROTOCOL_VERSION];
    for x in hello_fields(src) {
        p.extend_from_slice(&x.to_le_bytes());
    }
    p
}

/// Order of the `HELLO` fields after the version byte.
pub const HELLO_FIELDS: [&str; 7] = [
    "clock_rate_hz",
    "mu",
    "nu1",
    "nu2",
    "duty_signal",
    "duty_decoy1",
    "duty_decoy2",
];

fn hello_fields(src: &SourceConfig) -> [f64; 7] {
    [
        src.clock_rate_hz,
        src.mu,
        src.nu1,
        src.nu2,
        src.duty[0],
        src.duty[1],
        src.duty[2],
    ]
}

fn exchange_hello(src: &SourceConfig, t: &mut (impl Read + Write)) -> Result<(), ProtocolError> {
    use MessageType::Hello;
    write_frame(t, Hello, &hello_payload(src))?;
    let frame = read_frame(t, Hello)?;
    let mut r = PayloadReader::new(&frame);
    let version = r.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::new(
            Hello,
            ErrorKind::VersionMismatch {
                ours: PROTOCOL_VERSION,
                theirs: version,
            },
        ));
    }
    let mut theirs = [0.0; 7];
    for x in theirs.iter_mut() {
        *x = r.f64()?;
    }
    r.finish()?;
    let invalid = |msg: String| ProtocolError::new(Hello, ErrorKind::InvalidParameters(msg));
    if theirs.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid("non-finite or negative field".into()));
    }
    for (name, d) in HELLO_FIELDS[4..].iter().zip(&theirs[4..]) {
        if *d <= 0.0 {
            return Err(invalid(format!("{name} must be positive, got {d}")));
        }
    }
    for ((name, a), b) in HELLO_FIELDS.iter().zip(hello_fields(src)).zip(theirs) {
        if a.to_bits() != b.to_bits() {
            return Err(ProtocolError::new(
                Hello,
                ErrorKind::ParameterMismatch(format!("{name}: ours {a}, theirs {b}")),
            ));
        }
    }
    Ok(())
}

fn encode_tally(t: &SessionTally) -> Vec<u8> {
    let mut p = Vec::with_capacity(128);
    for c in &t.counts {
        for x in [c.pulses_sent, c.clicks, c.sifted, c.disclosed, c.errors] {
            p.extend_from_slice(&x.to_le_bytes());
        }
    }
    p.extend_from_slice(&t.duration_s.to_le_bytes());
    p
}

fn decode_tally(frame: &Frame) -> Result<SessionTally, ProtocolError> {
    let mut r = PayloadReader::new(frame);
    let mut tally = SessionTally::default();
    for c in tally.counts.iter_mut() {
        *c = ClassCounts {
            pulses_sent: r.u64()?,
            clicks: r.u64()?,
            sifted: r.u64()?,
            disclosed: r.u64()?,
            errors: r.u64()?,
        };
    }
    tally.duration_s = r.f64()?;
    r.finish()?;
    Ok(tally)
}

fn expect_bye(t: &mut impl Read) -> Result<(), ProtocolError> {
    let frame = read_frame(t, MessageType::Bye)?;
    PayloadReader::new(&frame).finish()
}

/// Alice's side. `pulses` must cover every gate of the session.
pub fn run_alice_endpoint<P, T>(src: &SourceConfig, pulses: &P, transport: &mut T) -> Result<SessionTally, ProtocolError>
where
    P: PulseSource + ?Sized,
    T: Read + Write,
{
    use MessageType::*;
    exchange_hello(src, transport)?;

    let frame = read_frame(transport, Detections)?;
    let mut r = PayloadReader::new(&frame);
    let n = r.count(65)?;
    let mut gates = Vec::with_capacity(n);
    for _ in 0..n {
        gates.push(r.u64()?);
    }
    let n_check = r.u64()?;
    if n_check as usize != n {
        return Err(r.error("basis count differs from gate count"));
    }
    let bob_bases = unpack(&mut r, n, 1)?;
    r.finish()?;

    let mut records = Vec::with_capacity(n);
    let mut prev = None;
    for &g in &gates {
        if prev.is_some_and(|p| g <= p) {
            return Err(ProtocolError::new(
                Detections,
                ErrorKind::Malformed(format!("gate {g} not after {}", prev.unwrap())),
            ));
        }
        prev = Some(g);
        records.push(
            pulses
                .pulse(g)
                .ok_or(ProtocolError::new(Detections, ErrorKind::UnknownGate(g)))?,
        );
    }
    write_frame(transport, BasisReveal, &pack(records.iter().map(|p| p.alice_basis), 1))?;
    write_frame(
        transport,
        IntensityReveal,
        &pack(records.iter().map(|p| p.class.index() as u8), 2),
    )?;

    let frame = read_frame(transport, ErrorSample)?;
    let mut r = PayloadReader::new(&frame);
    let fraction = r.f64()?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(r.error(format!("disclosure fraction {fraction} outside [0, 1]")));
    }
    let disclosed_n = r.count(1)?;
    let bits = unpack(&mut r, disclosed_n, 1)?;
    r.finish()?;

    let mut tally = SessionTally {
        duration_s: pulses.len() as f64 / src.clock_rate_hz,
        ..SessionTally::default()
    };
    for g in 0..pulses.len() {
        let p = pulses.pulse(g).ok_or(ProtocolError::new(
            TallyReport,
            ErrorKind::LocalInput(format!("pulse record missing for gate {g}")),
        ))?;
        tally.class_mut(p.class).pulses_sent += 1;
    }
    let mut bits = bits.into_iter();
    for ((p, &g), &bb) in records.iter().zip(&gates).zip(&bob_bases) {
        let c = tally.class_mut(p.class);
        c.clicks += 1;
        if p.alice_basis != bb {
            continue;
        }
        c.sifted += 1;
        if is_disclosed(g, p.class, fraction) {
            let bit = bits.next().ok_or(ProtocolError::new(
                ErrorSample,
                ErrorKind::Malformed("fewer bits than disclosed gates".into()),
            ))?;
            c.disclosed += 1;
            if bit != p.alice_bit {
                c.errors += 1;
            }
        }
    }
    if bits.next().is_some() {
        return Err(ProtocolError::new(
            ErrorSample,
            ErrorKind::Malformed("more bits than disclosed gates".into()),
        ));
    }

    let report = encode_tally(&tally);
    write_frame(transport, TallyReport, &report)?;
    let echo = read_frame(transport, TallyReport)?;
    if echo.payload != report {
        return Err(ProtocolError::new(
            TallyReport,
            ErrorKind::TallyMismatch("peer's report differs from ours".into()),
        ));
    }
    write_frame(transport, Bye, &[])?;
    expect_bye(transport)?;
    Ok(tally)
}

/// One gate as seen by Bob.
struct BobEvent {
    gate: u64,
    basis: u8,
    bit: u8,
}

fn collapse(detections: &[DetectionRecord]) -> Result<Vec<BobEvent>, ProtocolError> {
    let bad = |msg: String| ProtocolError::new(MessageType::Detections, ErrorKind::LocalInput(msg));
    let mut out: Vec<BobEvent> = Vec::with_capacity(detections.len());
    let mut fired = 0u8;
    for d in detections {
        if d.detector_id > 1 || d.bob_basis > 1 {
            return Err(bad(format!("gate {}: detector and basis must be 0 or 1", d.gate_index)));
        }
        match out.last_mut() {
            Some(last) if last.gate == d.gate_index => {
                if last.basis != d.bob_basis {
                    return Err(bad(format!("gate {}: conflicting bases", d.gate_index)));
                }
                fired |= 1 << d.detector_id;
                last.bit = if fired == 0b11 { double_click_bit(last.gate) } else { d.detector_id };
                continue;
            }
            Some(last) if last.gate > d.gate_index => {
                return Err(bad(format!("gate {} out of order", d.gate_index)));
            }
            _ => {}
        }
        fired = 1 << d.detector_id;
        out.push(BobEvent {
            gate: d.gate_index,
            basis: d.bob_basis,
            bit: d.detector_id,
        });
    }
    Ok(out)
}

/// Bob's side. `detections` must be ordered by gate; two records on one gate
/// form a double click.
pub fn run_bob_endpoint<T: Read + Write>(
    src: &SourceConfig,
    detections: &[DetectionRecord],
    options: &SiftOptions,
    transport: &mut T,
) -> Result<SessionTally, ProtocolError> {
    use MessageType::*;
    let fraction = options.signal_disclosure;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ProtocolError::new(
            ErrorSample,
            ErrorKind::LocalInput(format!("disclosure fraction {fraction} outside [0, 1]")),
        ));
    }
    let events = collapse(detections)?;
    exchange_hello(src, transport)?;

    let mut payload = Vec::with_capacity(16 + 8 * events.len() + events.len() / 8 + 1);
    payload.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in &events {
        payload.extend_from_slice(&e.gate.to_le_bytes());
    }
    payload.extend(pack(events.iter().map(|e| e.basis), 1));
    write_frame(transport, Detections, &payload)?;

    let reveal = |t: &mut T, kind: MessageType, width: usize| -> Result<Vec<u8>, ProtocolError> {
        let frame = read_frame(t, kind)?;
        let mut r = PayloadReader::new(&frame);
        let n = r.count(width)?;
        if n != events.len() {
            return Err(r.error(format!("{n} entries for {} detections", events.len())));
        }
        let v = unpack(&mut r, n, width)?;
        r.finish()?;
        Ok(v)
    };
    let alice_bases = reveal(transport, BasisReveal, 1)?;
    let classes = reveal(transport, IntensityReveal, 2)?;

    let mut mine = [ClassCounts::default(); 3];
    let mut disclosed_bits = Vec::new();
    for ((e, &ab), &ci) in events.iter().zip(&alice_bases).zip(&classes) {
        let class = IntensityClass::from_index(ci).ok_or(ProtocolError::new(
            IntensityReveal,
            ErrorKind::Malformed(format!("class code {ci}")),
        ))?;
        let c = &mut mine[class.index()];
        c.clicks += 1;
        if ab != e.basis {
            continue;
        }
        c.sifted += 1;
        if is_disclosed(e.gate, class, fraction) {
            c.disclosed += 1;
            disclosed_bits.push(e.bit);
        }
    }
    let mut payload = fraction.to_le_bytes().to_vec();
    payload.extend(pack(disclosed_bits.into_iter(), 1));
    write_frame(transport, ErrorSample, &payload)?;

    let frame = read_frame(transport, TallyReport)?;
    let tally = decode_tally(&frame)?;
    let mismatch = |msg: String| ProtocolError::new(TallyReport, ErrorKind::TallyMismatch(msg));
    for (class, (theirs, ours)) in IntensityClass::ALL.iter().zip(tally.counts.iter().zip(&mine)) {
        let pairs = [
            ("clicks", theirs.clicks, ours.clicks),
            ("sifted", theirs.sifted, ours.sifted),
            ("disclosed", theirs.disclosed, ours.disclosed),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(mismatch(format!("{class} {name}: peer {a}, ours {b}")));
            }
        }
    }
    tally.check().map_err(|e| mismatch(e.to_string()))?;
    let expected_duration = tally.total_pulses() as f64 / src.clock_rate_hz;
    if tally.duration_s.to_bits() != expected_duration.to_bits() {
        return Err(mismatch(format!("duration {} s", tally.duration_s)));
    }
    write_frame(transport, TallyReport, &encode_tally(&tally))?;
    write_frame(transport, Bye, &[])?;
    expect_bye(transport)?;
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SessionConfig;
    use crate::sim::{simulate_session, SimulatedPulses};
    use std::os::unix::net::UnixStream;
    use std::thread;

    type Outcome = Result<SessionTally, ProtocolError>;

    fn run_pair(
        alice: impl FnOnce(&mut UnixStream) -> Outcome + Send + 'static,
        bob: impl FnOnce(&mut UnixStream) -> Outcome + Send + 'static,
    ) -> (Outcome, Outcome) {
        let (mut a, mut b) = UnixStream::pair().unwrap();
        let ta = thread::spawn(move || alice(&mut a));
        let tb = thread::spawn(move || bob(&mut b));
        (ta.join().unwrap(), tb.join().unwrap())
    }

    fn loopback(n: u64, seed: u64, options: SiftOptions) -> (SessionTally, Outcome, Outcome) {
        let cfg = SessionConfig::default();
        let out = simulate_session(&cfg, seed, n).unwrap();
        let recs: Vec<_> = out.detections().collect();
        let pulses = SimulatedPulses::new(&cfg, seed, n);
        let (sa, sb) = (cfg.source.clone(), cfg.source.clone());
        let (ra, rb) = run_pair(
            move |t| run_alice_endpoint(&sa, &pulses, t),
            move |t| run_bob_endpoint(&sb, &recs, &options, t),
        );
        (out.tally, ra, rb)
    }

    #[test]
    fn loopback_matches_simulator() {
        let (truth, a, b) = loopback(2_000_000, 17, SiftOptions::default());
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(encode_tally(&a), encode_tally(&b));
        assert_eq!(a, truth);
    }

    #[test]
    fn partial_disclosure() {
        let opts = SiftOptions {
            signal_disclosure: 0.25,
        };
        let (truth, a, b) = loopback(2_000_000, 5, opts);
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(a, b);
        let s = a.class(IntensityClass::Signal);
        assert_eq!(s.sifted, truth.class(IntensityClass::Signal).sifted);
        let f = s.disclosed as f64 / s.sifted as f64;
        assert!((f - 0.25).abs() < 5.0 * (0.25 * 0.75 / s.sifted as f64).sqrt());
        for c in [IntensityClass::Decoy1, IntensityClass::Decoy2] {
            assert_eq!(a.class(c).disclosed, a.class(c).sifted);
        }
    }

    #[test]
    fn empty_detection_stream() {
        let cfg = SessionConfig::default();
        let pulses = SimulatedPulses::new(&cfg, 1, 1000);
        let (sa, sb) = (cfg.source.clone(), cfg.source.clone());
        let (a, b) = run_pair(
            move |t| run_alice_endpoint(&sa, &pulses, t),
            move |t| run_bob_endpoint(&sb, &[], &SiftOptions::default(), t),
        );
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(a, b);
        assert_eq!(a.total_clicks(), 0);
        assert_eq!(a.total_pulses(), 1000);
    }

    fn fake_peer(frames: Vec<(u8, Vec<u8>)>) -> impl FnOnce(&mut UnixStream) -> Outcome + Send + 'static {
        move |t| {
            for (code, payload) in frames {
                t.write_all(&[code]).unwrap();
                t.write_all(&(payload.len() as u32).to_le_bytes()).unwrap();
                t.write_all(&payload).unwrap();
            }
            hang_up(t);
            Ok(SessionTally::default())
        }
    }

    /// Closes our half and drains the peer, so its writes never hit a closed
    /// socket and its reads see end of stream.
    fn hang_up(t: &mut UnixStream) {
        t.shutdown(std::net::Shutdown::Write).unwrap();
        let _ = io::copy(t, &mut io::sink());
    }

    #[test]
    fn version_mismatch() {
        let src = SessionConfig::default().source;
        let mut hello = hello_payload(&src);
        hello[0] = 2;
        let (_, b) = run_pair(fake_peer(vec![(1, hello)]), move |t| {
            run_bob_endpoint(&src, &[], &SiftOptions::default(), t)
        });
        let e = b.unwrap_err();
        assert_eq!(e.message, MessageType::Hello);
        assert_eq!(e.kind, ErrorKind::VersionMismatch { ours: 1, theirs: 2 });
    }

    #[test]
    fn zero_decoy_duty_rejected_at_hello() {
        let src = SessionConfig::default().source;
        let mut bad = src.clone();
        bad.duty = [0.96, 0.04, 0.0];
        let (_, a) = run_pair(fake_peer(vec![(1, hello_payload(&bad))]), move |t| {
            let pulses = SimulatedPulses::new(&SessionConfig::default(), 1, 10);
            run_alice_endpoint(&src, &pulses, t)
        });
        let e = a.unwrap_err();
        assert_eq!(e.message, MessageType::Hello);
        assert!(matches!(e.kind, ErrorKind::InvalidParameters(_)), "{e}");
    }

    #[test]
    fn parameter_mismatch() {
        let src = SessionConfig::default().source;
        let mut other = src.clone();
        other.mu = 0.5;
        let (_, a) = run_pair(fake_peer(vec![(1, hello_payload(&other))]), move |t| {
            let pulses = SimulatedPulses::new(&SessionConfig::default(), 1, 10);
            run_alice_endpoint(&src, &pulses, t)
        });
        assert!(matches!(a.unwrap_err().kind, ErrorKind::ParameterMismatch(_)));
    }

    #[test]
    fn corrupted_length_field() {
        let src = SessionConfig::default().source;
        let hello = hello_payload(&src);
        // DETECTIONS claiming far more bytes than follow
        let mut det = 1u64.to_le_bytes().to_vec();
        det.extend_from_slice(&5u64.to_le_bytes());
        let frames = vec![(1, hello), (2, det)];
        let (_, a) = run_pair(
            move |t| {
                for (code, payload) in frames {
                    let len = if code == 2 { 4096u32 } else { payload.len() as u32 };
                    t.write_all(&[code]).unwrap();
                    t.write_all(&len.to_le_bytes()).unwrap();
                    t.write_all(&payload).unwrap();
                }
                hang_up(t);
                Ok(SessionTally::default())
            },
            move |t| {
                let pulses = SimulatedPulses::new(&SessionConfig::default(), 1, 10);
                run_alice_endpoint(&src, &pulses, t)
            },
        );
        let e = a.unwrap_err();
        assert_eq!(e.message, MessageType::Detections);
        assert!(matches!(e.kind, ErrorKind::Malformed(_)), "{e}");
    }

    #[test]
    fn unknown_gate() {
        let cfg = SessionConfig::default();
        let n = 1_000_000_000u64;
        let recs = vec![DetectionRecord {
            gate_index: n + 1,
            detector_id: 0,
            bob_basis: 0,
            arrival_offset_s: 0.0,
        }];
        let pulses = SimulatedPulses::new(&cfg, 1, n);
        let (sa, sb) = (cfg.source.clone(), cfg.source.clone());
        let (a, b) = run_pair(
            move |t| run_alice_endpoint(&sa, &pulses, t),
            move |t| run_bob_endpoint(&sb, &recs, &SiftOptions::default(), t),
        );
        let e = a.unwrap_err();
        assert_eq!(e.kind, ErrorKind::UnknownGate(n + 1));
        assert_eq!(e.message, MessageType::Detections);
        assert_eq!(b.unwrap_err().kind, ErrorKind::Closed);
    }

    #[test]
    fn forged_tally_is_caught() {
        let cfg = SessionConfig::default();
        let src = cfg.source.clone();
        let recs = vec![DetectionRecord {
            gate_index: 3,
            detector_id: 1,
            bob_basis: 0,
            arrival_offset_s: 0.0,
        }];
        let pulses = SimulatedPulses::new(&cfg, 1, 100);
        let p = pulses.pulse(3).unwrap();
        let mut forged = SessionTally::default();
        forged.class_mut(p.class).pulses_sent = 100;
        forged.class_mut(p.class).clicks = 2;
        forged.duration_s = 100.0 / src.clock_rate_hz;
        let frames = vec![
            (1, hello_payload(&src)),
            (3, pack([p.alice_basis].into_iter(), 1)),
            (4, pack([p.class.index() as u8].into_iter(), 2)),
            (6, encode_tally(&forged)),
        ];
        let (_, b) = run_pair(fake_peer(frames), move |t| {
            run_bob_endpoint(&src, &recs, &SiftOptions::default(), t)
        });
        let e = b.unwrap_err();
        assert_eq!(e.message, MessageType::TallyReport);
        assert!(matches!(e.kind, ErrorKind::TallyMismatch(_)));
    }

    #[test]
    fn error_sample_covers_only_disclosed_bits() {
        // With no signal disclosure the sample carries exactly the sifted
        // decoy bits.
        let cfg = SessionConfig::default();
        let out = simulate_session(&cfg, 2, 500_000).unwrap();
        let recs: Vec<_> = out.detections().collect();
        let pulses = SimulatedPulses::new(&cfg, 2, 500_000);
        let (mut a, mut b) = UnixStream::pair().unwrap();
        let src = cfg.source.clone();
        let tb = thread::spawn(move || {
            run_bob_endpoint(&src, &recs, &SiftOptions { signal_disclosure: 0.0 }, &mut b)
        });
        write_frame(&mut a, MessageType::Hello, &hello_payload(&cfg.source)).unwrap();
        read_frame(&mut a, MessageType::Hello).unwrap();
        let det = read_frame(&mut a, MessageType::Detections).unwrap();
        let mut r = PayloadReader::new(&det);
        let n = r.count(65).unwrap();
        let gates: Vec<u64> = (0..n).map(|_| r.u64().unwrap()).collect();
        let recs: Vec<_> = gates.iter().map(|&g| pulses.pulse(g).unwrap()).collect();
        write_frame(&mut a, MessageType::BasisReveal, &pack(recs.iter().map(|p| p.alice_basis), 1)).unwrap();
        write_frame(
            &mut a,
            MessageType::IntensityReveal,
            &pack(recs.iter().map(|p| p.class.index() as u8), 2),
        )
        .unwrap();
        let sample = read_frame(&mut a, MessageType::ErrorSample).unwrap();
        let decoy_sifted = out.tally.class(IntensityClass::Decoy1).sifted + out.tally.class(IntensityClass::Decoy2).sifted;
        let mut r = PayloadReader::new(&sample);
        assert_eq!(r.f64().unwrap(), 0.0);
        assert_eq!(r.count(1).unwrap() as u64, decoy_sifted);
        assert_eq!(sample.payload.len() as u64, 16 + decoy_sifted.div_ceil(8));
        drop(a);
        assert_eq!(tb.join().unwrap().unwrap_err().kind, ErrorKind::Closed);
    }
}

//! Gate-level Monte Carlo of one session.
//!
//! Per gate the transmitter picks an intensity class, a basis and a bit; the
//! receiver picks a basis. Photons reaching the receiver are routed to the
//! detector matching Alice's bit (or the other one with the misalignment
//! probability) when the bases agree, and to either detector with equal
//! probability when they do not. Each detector also has an independent dark
//! count per gate and a queue of afterpulses. A detector that is live and has
//! any cause avalanches, goes dead for `dead_time_gates - 1` gates, and
//! schedules an afterpulse with probability `afterpulse_prob` into one of the
//! [`AFTERPULSE_WINDOW`] gates following the dead time.
//!
//! The gate range is cut into blocks simulated in parallel from an empty
//! receiver state. A sequential pass then re-runs the head of each block with
//! the state carried over from its predecessor until the two trajectories
//! agree over a full memory window, after which they cannot diverge again.

use rayon::prelude::*;
use thiserror::Error;

use super::rng::{mix64, normal_from_bits, to_unit, CounterRng};
use super::{DetectionRecord, PulseRecord, PulseSource, AFTERPULSE_WINDOW};
use crate::channel::system_efficiency;
use crate::model::{ConfigError, IntensityClass, SessionConfig, SessionTally};

/// Gates per parallel block.
pub const BLOCK_GATES: u64 = 1 << 20;

const TAG_PULSE: u64 = 0;
const TAG_CAUSE: u64 = 1;
const TAG_CAUSE_REST: u64 = 2; // 2, 3, 4
const TAG_AFTERPULSE: u64 = 5; // 5, 6
const TAG_ARRIVAL: u64 = 7; // 7, 8

const DOUBLE_CLICK_KEY: u64 = 0x243F_6A88_85A3_08D3;

/// Bit assigned to a gate where both detectors fired. A public function of
/// the gate index, so both the simulator and the receiver's sifting endpoint
/// resolve double clicks identically.
#[inline]
pub fn double_click_bit(gate: u64) -> u8 {
    (mix64(gate ^ DOUBLE_CLICK_KEY) & 1) as u8
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("number of pulses must be at least 1")]
    NoPulses,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One gate in which at least one detector avalanched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClickEvent {
    pub gate: u64,
    /// Bit `j` set when detector `j` fired.
    pub fired: u8,
    /// Bit `j` set when detector `j` had a photon among its causes.
    pub photon: u8,
}

impl ClickEvent {
    /// Bob's bit: the detector that fired, or the public coin for a double
    /// click.
    pub fn bit(&self) -> u8 {
        match self.fired {
            0b01 => 0,
            0b10 => 1,
            _ => double_click_bit(self.gate),
        }
    }
}

/// Transmitter choices, reproducible from `(seed, gate)`.
#[derive(Clone, Debug)]
pub struct SimulatedPulses {
    rng: CounterRng,
    /// Cumulative class thresholds on the top 32 bits of the pulse draw.
    thresholds: [u64; 2],
    n_pulses: u64,
}

impl SimulatedPulses {
    pub fn new(cfg: &SessionConfig, seed: u64, n_pulses: u64) -> Self {
        let scale = (1u64 << 32) as f64;
        let d = cfg.source.duty;
        let t0 = (d[0] * scale).round() as u64;
        let t1 = ((d[0] + d[1]) * scale).round() as u64;
        Self {
            rng: CounterRng::new(seed),
            thresholds: [t0, t1.max(t0)],
            n_pulses,
        }
    }

    /// `(class, alice_basis, alice_bit, bob_basis)` of a gate.
    #[inline(always)]
    pub fn choices(&self, gate: u64) -> (IntensityClass, u8, u8, u8) {
        let x = self.rng.draw(gate, TAG_PULSE);
        let top = x >> 32;
        let class = if top < self.thresholds[0] {
            IntensityClass::Signal
        } else if top < self.thresholds[1] {
            IntensityClass::Decoy1
        } else {
            IntensityClass::Decoy2
        };
        (class, (x & 1) as u8, (x >> 1 & 1) as u8, (x >> 2 & 1) as u8)
    }

    #[inline]
    pub fn bob_basis(&self, gate: u64) -> u8 {
        self.choices(gate).3
    }
}

impl PulseSource for SimulatedPulses {
    fn len(&self) -> u64 {
        self.n_pulses
    }

    fn pulse(&self, gate: u64) -> Option<PulseRecord> {
        (gate < self.n_pulses).then(|| {
            let (class, alice_basis, alice_bit, _) = self.choices(gate);
            PulseRecord {
                gate_index: gate,
                class,
                alice_basis,
                alice_bit,
            }
        })
    }
}

/// Cause probabilities for one (class, bases-match) combination. Events are
/// ordered `[photon on correct, dark correct, photon on other, dark other]`,
/// where "correct" is the detector matching Alice's bit.
#[derive(Clone, Copy, Debug)]
struct CauseTable {
    p: [f64; 4],
    any: f64,
}

impl CauseTable {
    fn new(mean_correct: f64, mean_other: f64, dark: f64) -> Self {
        let p = [
            1.0 - (-mean_correct).exp(),
            dark,
            1.0 - (-mean_other).exp(),
            dark,
        ];
        let none: f64 = p.iter().map(|x| 1.0 - x).product();
        Self { p, any: 1.0 - none }
    }
}

/// Receiver state of one detector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct DetectorState {
    /// First gate at which the detector can fire again.
    live_from: u64,
    /// Gates with a pending afterpulse.
    pending: Vec<u64>,
    next_afterpulse: Option<u64>,
}

impl DetectorState {
    fn push(&mut self, gate: u64) {
        self.pending.push(gate);
        self.next_afterpulse = Some(self.next_afterpulse.map_or(gate, |g| g.min(gate)));
    }

    /// Consumes afterpulses due at `gate`.
    #[inline(always)]
    fn take_due(&mut self, gate: u64) -> bool {
        if self.next_afterpulse != Some(gate) {
            return false;
        }
        self.pending.retain(|&g| g != gate);
        self.next_afterpulse = self.pending.iter().copied().min();
        true
    }

    /// Same behaviour from `gate` onward as a detector with no history.
    fn is_quiescent_at(&self, gate: u64) -> bool {
        self.live_from <= gate && self.pending.iter().all(|&g| g < gate)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct ReceiverState {
    det: [DetectorState; 2],
}

/// The per-gate physics, shared by the block and reconciliation passes.
#[derive(Clone, Debug)]
struct GateModel {
    pulses: SimulatedPulses,
    rng: CounterRng,
    /// `[class][matched as usize]`
    causes: [[CauseTable; 2]; 3],
    dead: u64,
    afterpulse_prob: f64,
    /// Cumulative afterpulse profile over the release window.
    afterpulse_cdf: [f64; AFTERPULSE_WINDOW],
}

impl GateModel {
    fn new(cfg: &SessionConfig, seed: u64, n_pulses: u64) -> Self {
        let det = &cfg.detector;
        let eta = system_efficiency(&cfg.channel, det);
        let e = det.misalignment_error;
        let causes = IntensityClass::ALL.map(|c| {
            let m = eta * cfg.source.flux(c);
            [
                CauseTable::new(0.5 * m, 0.5 * m, det.dark_prob_per_gate),
                CauseTable::new(m * (1.0 - e), m * e, det.dark_prob_per_gate),
            ]
        });
        let weights = crate::channel::afterpulse_weights();
        let mut afterpulse_cdf = [0.0; AFTERPULSE_WINDOW];
        let mut acc = 0.0;
        for (c, w) in afterpulse_cdf.iter_mut().zip(weights) {
            acc += w;
            *c = acc;
        }
        afterpulse_cdf[AFTERPULSE_WINDOW - 1] = 1.0;
        Self {
            pulses: SimulatedPulses::new(cfg, seed, n_pulses),
            rng: CounterRng::new(seed),
            causes,
            dead: u64::from(det.dead_time_gates),
            afterpulse_prob: det.afterpulse_prob,
            afterpulse_cdf,
        }
    }

    /// Fresh (photon or dark) causes at a gate, as `(cause mask, photon
    /// mask)` over the two detectors.
    #[inline(always)]
    fn fresh_causes(&self, gate: u64, class: IntensityClass, matched: bool, alice_bit: u8) -> (u8, u8) {
        let table = &self.causes[class.index()][matched as usize];
        let u = self.rng.uniform(gate, TAG_CAUSE);
        if u >= table.any {
            return (0, 0);
        }
        // The first event to occur is read off `u` itself; events after it are
        // independent of the conditioning and get their own draws.
        let mut hit = [false; 4];
        let mut acc = 0.0;
        let mut survive = 1.0;
        let mut first = 3;
        for (i, p) in table.p.iter().enumerate() {
            acc += survive * p;
            if u < acc {
                first = i;
                break;
            }
            survive *= 1.0 - p;
        }
        hit[first] = true;
        for (k, i) in (first + 1..4).enumerate() {
            hit[i] = self.rng.uniform(gate, TAG_CAUSE_REST + k as u64) < table.p[i];
        }
        let correct = alice_bit & 1;
        let (mut cause, mut photon) = (0u8, 0u8);
        let det_of = |i: usize| if i < 2 { correct } else { correct ^ 1 };
        for (i, h) in hit.iter().enumerate() {
            if *h {
                cause |= 1 << det_of(i);
                if i % 2 == 0 {
                    photon |= 1 << det_of(i);
                }
            }
        }
        (cause, photon)
    }

    /// Advances one gate. Returns the click event, if any, and bumps the
    /// pulse count of the gate's class.
    #[inline(always)]
    fn step(&self, gate: u64, state: &mut ReceiverState, sent: &mut [u64; 3]) -> Option<ClickEvent> {
        let (class, a_basis, a_bit, b_basis) = self.pulses.choices(gate);
        sent[class.index()] += 1;
        let (cause, photon) = self.fresh_causes(gate, class, a_basis == b_basis, a_bit);
        let mut fired = 0u8;
        for (j, det) in state.det.iter_mut().enumerate() {
            let after = det.take_due(gate);
            let caused = cause >> j & 1 == 1 || after;
            if caused && gate >= det.live_from {
                fired |= 1 << j;
                det.live_from = gate + self.dead;
                self.schedule_afterpulse(gate, j, det);
            }
        }
        (fired != 0).then_some(ClickEvent {
            gate,
            fired,
            photon: photon & fired,
        })
    }

    fn schedule_afterpulse(&self, gate: u64, detector: usize, det: &mut DetectorState) {
        if self.afterpulse_prob <= 0.0 {
            return;
        }
        let u = self.rng.uniform(gate, TAG_AFTERPULSE + detector as u64);
        if u >= self.afterpulse_prob {
            return;
        }
        let v = u / self.afterpulse_prob;
        let k = self.afterpulse_cdf.partition_point(|&c| c <= v);
        // k = 0 is the first gate after the dead time
        det.push(gate + self.dead + k as u64);
    }

    /// Runs `[start, end)` from `state`.
    fn run(&self, start: u64, end: u64, state: &mut ReceiverState) -> (Vec<ClickEvent>, [u64; 3]) {
        let mut events = Vec::with_capacity(((end - start) / 64) as usize);
        let mut sent = [0u64; 3];
        for gate in start..end {
            if let Some(ev) = self.step(gate, state, &mut sent) {
                events.push(ev);
            }
        }
        (events, sent)
    }

    /// Gates over which past clicks still influence the receiver.
    fn memory(&self) -> u64 {
        self.dead + AFTERPULSE_WINDOW as u64
    }
}

struct Block {
    start: u64,
    end: u64,
    events: Vec<ClickEvent>,
    sent: [u64; 3],
    end_state: ReceiverState,
}

/// Re-runs the head of `block` from `carried` until it agrees with the
/// block's own trajectory for a full memory window, then splices. Returns the
/// corrected events and end state.
fn reconcile(model: &GateModel, block: Block, mut carried: ReceiverState) -> (Vec<ClickEvent>, ReceiverState) {
    if carried.det.iter().all(|d| d.is_quiescent_at(block.start)) {
        return (block.events, block.end_state);
    }
    let window = model.memory();
    let mut events = Vec::new();
    let mut idx = 0; // into block.events
    let mut last_mismatch = block.start;
    let mut sent = [0u64; 3];
    for gate in block.start..block.end {
        if gate >= block.start + window && gate - last_mismatch > window {
            events.extend_from_slice(&block.events[idx..]);
            return (events, block.end_state);
        }
        let ours = model.step(gate, &mut carried, &mut sent);
        let theirs = match block.events.get(idx) {
            Some(ev) if ev.gate == gate => {
                idx += 1;
                Some(*ev)
            }
            _ => None,
        };
        if ours != theirs {
            last_mismatch = gate;
        }
        if let Some(ev) = ours {
            events.push(ev);
        }
    }
    (events, carried)
}

/// Result of [`simulate_session`].
#[derive(Clone, Debug)]
pub struct SimulationOutput {
    pub tally: SessionTally,
    pub events: Vec<ClickEvent>,
    pulses: SimulatedPulses,
    rng: CounterRng,
    gate_width_s: f64,
    jitter_sigma_s: f64,
}

impl SimulationOutput {
    pub fn pulses(&self) -> &SimulatedPulses {
        &self.pulses
    }

    /// Bob's time-tag stream: one record per avalanche, ordered by gate then
    /// detector.
    pub fn detections(&self) -> impl Iterator<Item = DetectionRecord> + '_ {
        self.events.iter().flat_map(move |ev| {
            let bob_basis = self.pulses.bob_basis(ev.gate);
            (0..2u8)
                .filter(move |j| ev.fired >> j & 1 == 1)
                .map(move |j| DetectionRecord {
                    gate_index: ev.gate,
                    detector_id: j,
                    bob_basis,
                    arrival_offset_s: self.arrival_offset(ev, j),
                })
        })
    }

    fn arrival_offset(&self, ev: &ClickEvent, detector: u8) -> f64 {
        let bits = self.rng.draw(ev.gate, TAG_ARRIVAL + u64::from(detector));
        let width = self.gate_width_s;
        if ev.photon >> detector & 1 == 1 {
            let t = 0.5 * width + self.jitter_sigma_s * normal_from_bits(bits);
            t.clamp(0.0, width)
        } else {
            to_unit(bits) * width
        }
    }
}

/// Simulates `n_pulses` gates. Identical `(cfg, seed, n_pulses)` give
/// identical output regardless of the thread pool size.
pub fn simulate_session(cfg: &SessionConfig, seed: u64, n_pulses: u64) -> Result<SimulationOutput, SimError> {
    simulate_with_block(cfg, seed, n_pulses, BLOCK_GATES)
}

pub(crate) fn simulate_with_block(
    cfg: &SessionConfig,
    seed: u64,
    n_pulses: u64,
    block_gates: u64,
) -> Result<SimulationOutput, SimError> {
    if n_pulses == 0 {
        return Err(SimError::NoPulses);
    }
    let cfg = cfg.clone().validate()?;
    let model = GateModel::new(&cfg, seed, n_pulses);
    let n_blocks = n_pulses.div_ceil(block_gates);
    let blocks: Vec<Block> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * block_gates;
            let end = (start + block_gates).min(n_pulses);
            let mut state = ReceiverState::default();
            let (events, sent) = model.run(start, end, &mut state);
            Block {
                start,
                end,
                events,
                sent,
                end_state: state,
            }
        })
        .collect();

    let mut sent = [0u64; 3];
    let mut events = Vec::with_capacity(blocks.iter().map(|b| b.events.len()).sum());
    let mut carried = ReceiverState::default();
    for block in blocks {
        for (s, b) in sent.iter_mut().zip(block.sent) {
            *s += b;
        }
        let (evs, end_state) = reconcile(&model, block, carried);
        events.extend(evs);
        carried = end_state;
    }

    let mut tally = SessionTally {
        duration_s: n_pulses as f64 / cfg.source.clock_rate_hz,
        ..SessionTally::default()
    };
    for (class, n) in IntensityClass::ALL.iter().zip(sent) {
        tally.class_mut(*class).pulses_sent = n;
    }
    for ev in &events {
        let (class, a_basis, a_bit, b_basis) = model.pulses.choices(ev.gate);
        let c = tally.class_mut(class);
        c.clicks += 1;
        if a_basis == b_basis {
            c.sifted += 1;
            c.disclosed += 1;
            if ev.bit() != a_bit {
                c.errors += 1;
            }
        }
    }

    Ok(SimulationOutput {
        tally,
        events,
        pulses: model.pulses,
        rng: model.rng,
        gate_width_s: cfg.detector.gate_width_s,
        jitter_sigma_s: cfg.detector.jitter_fwhm_s / super::FWHM_PER_SIGMA,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::min_click_separation;

    fn busy() -> SessionConfig {
        let mut cfg = SessionConfig::default();
        cfg.channel.length_km = 0.0;
        cfg.detector.efficiency = 1.0;
        cfg.detector.receiver_loss_factor = 1.0;
        cfg.detector.afterpulse_prob = 0.3;
        cfg.source.mu = 3.0;
        cfg.source.nu1 = 1.0;
        cfg.source.nu2 = 0.5;
        cfg
    }

    #[test]
    fn zero_pulses_is_an_error() {
        assert_eq!(
            simulate_session(&SessionConfig::default(), 1, 0).unwrap_err(),
            SimError::NoPulses
        );
    }

    #[test]
    fn blind_receiver_never_clicks() {
        let mut cfg = SessionConfig::default();
        cfg.detector.efficiency = 0.0;
        cfg.detector.dark_prob_per_gate = 0.0;
        for seed in [1, 2, 3] {
            let out = simulate_session(&cfg, seed, 200_000).unwrap();
            assert_eq!(out.tally.total_clicks(), 0);
            assert_eq!(out.tally.total_pulses(), 200_000);
        }
    }

    #[test]
    fn partitioned_run_matches_sequential() {
        let cfg = busy();
        let whole = simulate_with_block(&cfg, 11, 300_000, 300_000).unwrap();
        for block in [997, 4096, 65_536] {
            let parts = simulate_with_block(&cfg, 11, 300_000, block).unwrap();
            assert_eq!(parts.events, whole.events, "block {block}");
            assert_eq!(parts.tally, whole.tally);
        }
    }

    #[test]
    fn dead_time_is_respected_under_saturation() {
        for dead in [1u32, 2, 5] {
            let mut cfg = busy();
            cfg.detector.dead_time_gates = dead;
            let out = simulate_session(&cfg, 3, 100_000).unwrap();
            let recs: Vec<_> = out.detections().collect();
            assert_eq!(min_click_separation(&recs).unwrap(), u64::from(dead));
        }
    }

    #[test]
    fn tally_is_ordered() {
        let out = simulate_session(&busy(), 5, 100_000).unwrap();
        out.tally.check().unwrap();
        let s = out.tally.class(IntensityClass::Signal);
        assert_eq!(s.sifted, s.disclosed);
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = SessionConfig::default();
        let a = simulate_session(&cfg, 42, 500_000).unwrap();
        let b = simulate_session(&cfg, 42, 500_000).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.tally, b.tally);
        let ra: Vec<_> = a.detections().collect();
        let rb: Vec<_> = b.detections().collect();
        assert_eq!(ra, rb);
        let c = simulate_session(&cfg, 43, 500_000).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn photon_arrivals_stay_in_gate() {
        let out = simulate_session(&busy(), 8, 20_000).unwrap();
        let width = SessionConfig::default().detector.gate_width_s;
        for r in out.detections() {
            assert!((0.0..=width).contains(&r.arrival_offset_s));
        }
    }

    #[test]
    fn double_click_coin_is_fair() {
        let n = 100_000u64;
        let ones: u64 = (0..n).map(|g| u64::from(double_click_bit(g))).sum();
        assert!((ones as f64 - n as f64 / 2.0).abs() < 5.0 * (n as f64 / 4.0).sqrt());
    }
}

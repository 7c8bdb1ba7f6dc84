//! Gate-level simulation of the transmitter, fiber and gated receiver.

mod histogram;
mod io;
pub mod rng;
mod session;

pub use histogram::{simulate_arrival_histogram, ArrivalHistogram, HISTOGRAM_BIN_S};
pub use io::{
    read_detections, read_pulses, write_detections, write_pulses, PulseFile, StreamError,
    DETECTION_MAGIC, PULSE_MAGIC, STREAM_VERSION,
};
pub use session::{
    double_click_bit, simulate_session, ClickEvent, SimError, SimulatedPulses, SimulationOutput,
    BLOCK_GATES,
};

use thiserror::Error;

use crate::model::IntensityClass;

/// Gates after the dead time over which an afterpulse may be released.
pub const AFTERPULSE_WINDOW: usize = 32;

/// Ratio of full width at half maximum to standard deviation of a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Alice's choices for one gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PulseRecord {
    pub gate_index: u64,
    pub class: IntensityClass,
    pub alice_basis: u8,
    pub alice_bit: u8,
}

/// One registered avalanche.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRecord {
    pub gate_index: u64,
    pub detector_id: u8,
    pub bob_basis: u8,
    /// Seconds after the opening of the gate.
    pub arrival_offset_s: f64,
}

/// Random access to the transmitter's record.
pub trait PulseSource {
    /// Number of gates sent.
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `None` for gates that were never sent.
    fn pulse(&self, gate: u64) -> Option<PulseRecord>;
}

impl PulseSource for [PulseRecord] {
    fn len(&self) -> u64 {
        <[PulseRecord]>::len(self) as u64
    }

    /// Requires records indexed from gate 0 without gaps.
    fn pulse(&self, gate: u64) -> Option<PulseRecord> {
        usize::try_from(gate).ok().and_then(|i| self.get(i)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("need at least two clicks on one detector, got {clicks} in total")]
pub struct SeparationError {
    pub clicks: usize,
}

/// Smallest gate gap between consecutive clicks of the same detector.
pub fn min_click_separation(stream: &[DetectionRecord]) -> Result<u64, SeparationError> {
    let mut last = [None::<u64>; 2];
    let mut best = None::<u64>;
    for r in stream {
        let slot = &mut last[usize::from(r.detector_id & 1)];
        if let Some(prev) = *slot {
            let gap = r.gate_index.abs_diff(prev);
            best = Some(best.map_or(gap, |b| b.min(gap)));
        }
        *slot = Some(r.gate_index);
    }
    best.ok_or(SeparationError { clicks: stream.len() })
}

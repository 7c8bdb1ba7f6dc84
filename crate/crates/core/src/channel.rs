//! Closed-form channel and detector model: expected gains and QBER versus
//! fiber length, the key-rate sweep built on them, and the distance at which
//! the key rate reaches zero.

use rayon::prelude::*;
use thiserror::Error;

use crate::decoy::{self, DecoyError};
use crate::model::{
    ChannelConfig, DetectorConfig, GainStatistics, IntensityClass, SecurityBounds, SessionConfig,
};

/// Upper end of the cutoff search.
pub const CUTOFF_SEARCH_LIMIT_KM: f64 = 300.0;
/// Resolution of the cutoff bisection.
pub const CUTOFF_RESOLUTION_KM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("invalid sweep range: from {from} to {to} step {step}")]
    Range { from: f64, to: f64, step: f64 },
    #[error("no secure key at 0 km")]
    NoKey,
    #[error(transparent)]
    Decoy(#[from] DecoyError),
}

/// Overall probability that a photon leaving the source is detected:
/// receiver efficiency times fiber transmittance.
pub fn system_efficiency(channel: &ChannelConfig, det: &DetectorConfig) -> f64 {
    det.efficiency / det.receiver_loss_factor * channel.transmittance()
}

/// Modelled gains and signal QBER at one distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpectedStatistics {
    /// Indexed by [`IntensityClass::index`].
    pub gain: [f64; 3],
    pub qber_mu: f64,
    /// Background click probability per gate for the two-detector receiver.
    pub y0_background: f64,
}

impl ExpectedStatistics {
    pub fn gain_of(&self, class: IntensityClass) -> f64 {
        self.gain[class.index()]
    }
}

/// Threshold-detector model with a multiplicative afterpulse term.
///
/// With `eta` the system efficiency, `Y0 = 2 d` (two detectors) and afterpulse
/// probability `pa`:
///
/// * `Q_x = [1 - (1 - Y0) exp(-eta x)] (1 + pa)`
/// * `E_mu Q_mu = Y0 / 2 + e_mis (1 - exp(-eta mu)) + pa/2 [1 - (1 - Y0) exp(-eta mu)]`
pub fn expected_statistics(cfg: &SessionConfig) -> ExpectedStatistics {
    let eta = system_efficiency(&cfg.channel, &cfg.detector);
    let det = &cfg.detector;
    let y0 = 2.0 * det.dark_prob_per_gate;
    let pa = det.afterpulse_prob;
    let base = |x: f64| 1.0 - (1.0 - y0) * (-eta * x).exp();
    let gain = IntensityClass::ALL.map(|c| (base(cfg.source.flux(c)) * (1.0 + pa)).min(1.0));
    let mu = cfg.source.mu;
    let wrong = 0.5 * y0 + det.misalignment_error * (1.0 - (-eta * mu).exp()) + 0.5 * pa * base(mu);
    let g_mu = gain[0];
    let qber_mu = if g_mu > 0.0 { (wrong / g_mu).min(1.0) } else { 0.0 };
    ExpectedStatistics {
        gain,
        qber_mu,
        y0_background: y0,
    }
}

/// Gains a session of `cfg.duration_s` would measure under the closed-form
/// model, with binomial `k_sigma` deviations on the expected pulse counts.
pub fn modeled_gains(cfg: &SessionConfig) -> GainStatistics {
    let stats = expected_statistics(cfg);
    let dev = |p: f64, n: f64| {
        if n > 0.0 {
            cfg.k_sigma * (p * (1.0 - p) / n).sqrt()
        } else {
            0.0
        }
    };
    let n = IntensityClass::ALL.map(|c| cfg.pulses_of(c));
    let sifted_signal = 0.5 * n[0] * stats.gain[0];
    GainStatistics {
        q_mu: stats.gain[0],
        q_nu1: stats.gain[1],
        q_nu2: stats.gain[2],
        eps_mu: stats.qber_mu,
        dev_q_mu: dev(stats.gain[0], n[0]),
        dev_q_nu1: dev(stats.gain[1], n[1]),
        dev_q_nu2: dev(stats.gain[2], n[2]),
        dev_eps_mu: dev(stats.qber_mu, sifted_signal),
    }
}

/// Worst-case security bounds of the modelled session at `cfg`'s length.
pub fn modeled_bounds(cfg: &SessionConfig) -> Result<SecurityBounds, DecoyError> {
    decoy::analyze(&modeled_gains(cfg), cfg)
}

/// One row of a distance sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub distance_km: f64,
    pub raw_bps: f64,
    pub secure_bps: f64,
    pub qber: f64,
}

/// Distances `from, from + step, ...` up to and including `to`.
pub fn sweep_distances(from_km: f64, to_km: f64, step_km: f64) -> Result<Vec<f64>, ChannelError> {
    let ok = from_km.is_finite()
        && to_km.is_finite()
        && step_km.is_finite()
        && from_km >= 0.0
        && to_km >= from_km
        && step_km > 0.0;
    if !ok {
        return Err(ChannelError::Range {
            from: from_km,
            to: to_km,
            step: step_km,
        });
    }
    let count = ((to_km - from_km) / step_km + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| from_km + i as f64 * step_km).collect())
}

/// Raw rate, worst-case secure rate and QBER at each distance. Points are
/// evaluated in parallel; the output order follows the distances.
pub fn rate_vs_distance(
    cfg: &SessionConfig,
    from_km: f64,
    to_km: f64,
    step_km: f64,
) -> Result<Vec<SweepPoint>, ChannelError> {
    sweep_distances(from_km, to_km, step_km)?
        .into_par_iter()
        .map(|d| sweep_point(cfg, d))
        .collect()
}

pub fn sweep_point(cfg: &SessionConfig, distance_km: f64) -> Result<SweepPoint, ChannelError> {
    let at = cfg.with_length_km(distance_km);
    let gains = modeled_gains(&at);
    let bounds = decoy::analyze(&gains, &at)?;
    Ok(SweepPoint {
        distance_km,
        raw_bps: bounds.raw_rate_bps,
        secure_bps: bounds.secure_rate_bps,
        qber: gains.eps_mu,
    })
}

/// Largest distance with a positive key rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    pub distance_km: f64,
    /// The rate is still positive at [`CUTOFF_SEARCH_LIMIT_KM`]; `distance_km`
    /// is then the search limit itself.
    pub beyond_search_limit: bool,
}

/// Bisection on distance to within [`CUTOFF_RESOLUTION_KM`]. Assumes the
/// secure rate is non-increasing in length.
pub fn find_cutoff_distance(cfg: &SessionConfig) -> Result<Cutoff, ChannelError> {
    let rate = |km: f64| sweep_point(cfg, km).map(|p| p.secure_bps);
    if rate(0.0)? <= 0.0 {
        return Err(ChannelError::NoKey);
    }
    if rate(CUTOFF_SEARCH_LIMIT_KM)? > 0.0 {
        return Ok(Cutoff {
            distance_km: CUTOFF_SEARCH_LIMIT_KM,
            beyond_search_limit: true,
        });
    }
    let (mut lo, mut hi) = (0.0, CUTOFF_SEARCH_LIMIT_KM);
    while hi - lo > CUTOFF_RESOLUTION_KM / 2.0 {
        let mid = 0.5 * (lo + hi);
        if rate(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Cutoff {
        distance_km: lo,
        beyond_search_limit: false,
    })
}

/// Steady-state expectations for the gate-level receiver of [`crate::sim`]:
/// two detectors with dead time, afterpulses released after the dead time
/// into whatever gate follows, and fair-coin double clicks.
///
/// Unlike [`expected_statistics`], afterpulses here are driven by the mean
/// click rate over all intensity classes, and dead time removes a fraction of
/// gates. This is the model the Monte Carlo converges to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceiverStatistics {
    /// Click probability per gate of each class.
    pub gain: [f64; 3],
    /// Error fraction of sifted signal clicks.
    pub qber_mu: f64,
    /// Sifted clicks over all clicks.
    pub sifted_fraction: f64,
    /// Stationary avalanche probability per gate of a single detector.
    pub detector_rate: f64,
    /// Per-detector probability that an afterpulse is due in a live gate.
    pub afterpulse_per_gate: f64,
}

/// Per-gate probabilities that each detector has a photon or dark cause,
/// ignoring dead time and afterpulses: `(correct, wrong)` for matched bases
/// and `(either, either)` for mismatched.
fn fresh_causes(eta: f64, flux: f64, det: &DetectorConfig) -> ([f64; 2], [f64; 2]) {
    let d = det.dark_prob_per_gate;
    let e = det.misalignment_error;
    let cause = |mean: f64| 1.0 - (1.0 - d) * (-mean).exp();
    let m = eta * flux;
    (
        [cause(m * (1.0 - e)), cause(m * e)],
        [cause(0.5 * m), cause(0.5 * m)],
    )
}

/// Afterpulse release profile: weight of the `k`-th live gate after the dead
/// time, `k = 1..=AFTERPULSE_WINDOW`, geometric with ratio one half.
pub fn afterpulse_weights() -> [f64; crate::sim::AFTERPULSE_WINDOW] {
    let mut w = [0.0; crate::sim::AFTERPULSE_WINDOW];
    let mut v = 1.0;
    for x in w.iter_mut() {
        *x = v;
        v *= 0.5;
    }
    let total: f64 = w.iter().sum();
    w.map(|x| x / total)
}

pub fn receiver_statistics(cfg: &SessionConfig) -> ReceiverStatistics {
    let det = &cfg.detector;
    let eta = system_efficiency(&cfg.channel, det);
    let causes = IntensityClass::ALL.map(|c| fresh_causes(eta, cfg.source.flux(c), det));
    let dead = f64::from(det.dead_time_gates - 1);
    let pa = det.afterpulse_prob;
    let w1 = afterpulse_weights()[0];

    // Mean fresh-cause probability of one detector; bits are uniform, so each
    // detector is the correct one half of the time.
    let mean_cause: f64 = IntensityClass::ALL
        .iter()
        .zip(&causes)
        .map(|(c, (matched, mismatched))| {
            cfg.source.duty(*c)
                * (0.25 * (matched[0] + matched[1]) + 0.25 * (mismatched[0] + mismatched[1]))
        })
        .sum();

    // Afterpulse due in a live gate, given live. The first release gate
    // directly follows the dead time, so it is live with certainty.
    let afterpulse = |r: f64| {
        let live = 1.0 - dead * r;
        (pa * r * (1.0 - dead * r * (1.0 - w1)) / live).min(1.0)
    };
    let mut r = mean_cause;
    for _ in 0..200 {
        let a = afterpulse(r);
        let next = (1.0 - dead * r) * (1.0 - (1.0 - a) * (1.0 - mean_cause));
        if (next - r).abs() < 1e-16 {
            r = next;
            break;
        }
        r = next;
    }
    let live = 1.0 - dead * r;
    let a = afterpulse(r);
    let fire = |c: f64| live * (1.0 - (1.0 - c) * (1.0 - a));
    let any = |p: [f64; 2]| 1.0 - (1.0 - fire(p[0])) * (1.0 - fire(p[1]));

    let mut gain = [0.0; 3];
    let mut sifted = 0.0;
    let mut clicks = 0.0;
    for (c, (matched, mismatched)) in IntensityClass::ALL.iter().zip(&causes) {
        let m = any(*matched);
        let x = any(*mismatched);
        gain[c.index()] = 0.5 * (m + x);
        sifted += cfg.source.duty(*c) * 0.5 * m;
        clicks += cfg.source.duty(*c) * gain[c.index()];
    }
    let (pc, pw) = (fire(causes[0].0[0]), fire(causes[0].0[1]));
    let matched_clicks = 1.0 - (1.0 - pc) * (1.0 - pw);
    let errors = pw * (1.0 - pc) + 0.5 * pc * pw;
    ReceiverStatistics {
        gain,
        qber_mu: if matched_clicks > 0.0 { errors / matched_clicks } else { 0.0 },
        sifted_fraction: if clicks > 0.0 { sifted / clicks } else { 0.0 },
        detector_rate: r,
        afterpulse_per_gate: a,
    }
}

//! Domain types shared by every stage of the pipeline: source, channel and
//! detector configuration, per-class session tallies, and the measured gain
//! statistics that feed the decoy bounds.
//!
//! All types are plain values. Construction does not validate; call
//! [`SessionConfig::validate`] (or [`validate_config`]) before handing a
//! configuration to the analysis or simulation code.

use std::fmt;

use thiserror::Error;

/// Tolerance on the sum of the three duty cycles.
pub const DUTY_SUM_TOLERANCE: f64 = 1e-12;

/// The three pulse intensities of the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntensityClass {
    Signal,
    Decoy1,
    Decoy2,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [Self::Signal, Self::Decoy1, Self::Decoy2];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn from_index(index: u8) -> Option<Self> {
        match index {
            0 => Some(Self::Signal),
            1 => Some(Self::Decoy1),
            2 => Some(Self::Decoy2),
            _ => None,
        }
    }

    /// Short lowercase name used in tally files.
    pub fn name(self) -> &'static str {
        match self {
            Self::Signal => "signal",
            Self::Decoy1 => "decoy1",
            Self::Decoy2 => "decoy2",
        }
    }
}

impl fmt::Display for IntensityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Weak-coherent source: clock, the three mean photon numbers and how often
/// each is chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceConfig {
    pub clock_rate_hz: f64,
    pub mu: f64,
    pub nu1: f64,
    pub nu2: f64,
    /// Selection probability per class, indexed by [`IntensityClass::index`].
    pub duty: [f64; 3],
    /// Floor of the weakest decoy relative to the signal, in dB. When unset
    /// the ratio `mu / nu2` is used wherever an extinction ratio is needed.
    pub extinction_db: Option<f64>,
}

impl SourceConfig {
    /// Mean photon number of a class.
    #[inline]
    pub fn flux(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.mu,
            IntensityClass::Decoy1 => self.nu1,
            IntensityClass::Decoy2 => self.nu2,
        }
    }

    #[inline]
    pub fn duty(&self, class: IntensityClass) -> f64 {
        self.duty[class.index()]
    }

    /// Extinction ratio in dB, explicit or implied by `mu / nu2`.
    pub fn extinction_db(&self) -> f64 {
        self.extinction_db
            .unwrap_or_else(|| 10.0 * (self.mu / self.nu2).log10())
    }

    /// Weakest decoy implied by the extinction ratio for a given signal flux.
    pub fn nu2_for(&self, mu: f64) -> f64 {
        mu * 10f64.powf(-self.extinction_db() / 10.0)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = ConfigError::new;
        if !(self.clock_rate_hz.is_finite() && self.clock_rate_hz > 0.0) {
            return Err(err("source.clock_rate_hz", "must be finite and > 0"));
        }
        for (name, v) in [
            ("source.mu", self.mu),
            ("source.nu1", self.nu1),
            ("source.nu2", self.nu2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(err(name, "must be finite and >= 0"));
            }
        }
        if self.mu <= self.nu1 {
            return Err(err("source.mu", "mu <= nu1 violates intensity ordering"));
        }
        if self.nu1 <= self.nu2 {
            return Err(err("source.nu1", "nu1 <= nu2 violates intensity ordering"));
        }
        if self.mu <= self.nu1 + self.nu2 {
            return Err(err(
                "source.mu",
                "mu <= nu1 + nu2 violates decoy bound validity",
            ));
        }
        for (class, d) in IntensityClass::ALL.iter().zip(self.duty) {
            if !(0.0..=1.0).contains(&d) {
                return Err(ConfigError {
                    field: duty_key(*class),
                    reason: "duty cycle must lie in [0, 1]".into(),
                });
            }
        }
        let sum: f64 = self.duty.iter().sum();
        if (sum - 1.0).abs() > DUTY_SUM_TOLERANCE {
            return Err(ConfigError::new(
                "source.duty_signal",
                format!("duty cycles sum to {sum}, expected 1"),
            ));
        }
        if let Some(ext) = self.extinction_db {
            if !ext.is_finite() || ext <= 0.0 {
                return Err(err("source.extinction_db", "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

pub(crate) fn duty_key(class: IntensityClass) -> &'static str {
    match class {
        IntensityClass::Signal => "source.duty_signal",
        IntensityClass::Decoy1 => "source.duty_decoy1",
        IntensityClass::Decoy2 => "source.duty_decoy2",
    }
}

/// Fiber link.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub length_km: f64,
    pub loss_db_per_km: f64,
}

impl ChannelConfig {
    /// Channel transmittance `10^(-alpha L / 10)`.
    pub fn transmittance(&self) -> f64 {
        10f64.powf(-self.length_km * self.loss_db_per_km / 10.0)
    }
}

/// Gated receiver with two single-photon detectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Divides `efficiency` to give the overall receiver efficiency.
    pub receiver_loss_factor: f64,
    pub dark_prob_per_gate: f64,
    pub afterpulse_prob: f64,
    /// Minimum gate spacing between two avalanches on one detector.
    pub dead_time_gates: u32,
    pub gate_width_s: f64,
    pub jitter_fwhm_s: f64,
    pub misalignment_error: f64,
}

impl DetectorConfig {
    /// Conventional gated-mode comparison detector: 370 ps jitter and a gate
    /// that spans the whole 1.036 GHz clock period.
    pub fn conventional_gated() -> Self {
        Self {
            jitter_fwhm_s: 370e-12,
            gate_width_s: 1.0 / 1.036e9,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = ConfigError::new;
        for (name, p) in [
            ("detector.efficiency", self.efficiency),
            ("detector.dark_prob_per_gate", self.dark_prob_per_gate),
            ("detector.afterpulse_prob", self.afterpulse_prob),
            ("detector.misalignment_error", self.misalignment_error),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(err(name, "probability must lie in [0, 1]"));
            }
        }
        if !(self.receiver_loss_factor.is_finite() && self.receiver_loss_factor >= 1.0) {
            return Err(err("detector.receiver_loss_factor", "must be finite and >= 1"));
        }
        if self.dead_time_gates < 1 {
            return Err(err("detector.dead_time_gates", "must be >= 1"));
        }
        if !(self.gate_width_s.is_finite() && self.gate_width_s > 0.0) {
            return Err(err("detector.gate_width_s", "must be finite and > 0"));
        }
        if !(self.jitter_fwhm_s.is_finite() && self.jitter_fwhm_s >= 0.0) {
            return Err(err("detector.jitter_fwhm_s", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Everything needed to analyse or simulate one session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub source: SourceConfig,
    pub channel: ChannelConfig,
    pub detector: DetectorConfig,
    pub duration_s: f64,
    /// Number of standard deviations used for finite-size worst-casing.
    pub k_sigma: f64,
    /// Error-correction inefficiency.
    pub f_ec: f64,
}

impl Default for SourceConfig {
    /// Operating point of the 20 km experiment.
    fn default() -> Self {
        Self {
            clock_rate_hz: 1.036e9,
            mu: 0.55,
            nu1: 0.10,
            nu2: 7.5e-4,
            duty: [0.80, 0.16, 0.04],
            extinction_db: None,
        }
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            length_km: 20.06,
            loss_db_per_km: 0.20,
        }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency: 0.10,
            receiver_loss_factor: 2.0,
            dark_prob_per_gate: 6.8e-6,
            afterpulse_prob: 0.047,
            dead_time_gates: 2,
            gate_width_s: 0.48e-9,
            jitter_fwhm_s: 50e-12,
            misalignment_error: 0.003,
        }
    }
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            source: SourceConfig::default(),
            channel: ChannelConfig::default(),
            detector: DetectorConfig::default(),
            duration_s: 2.3,
            k_sigma: 10.0,
            f_ec: 1.10,
        }
    }
}

impl SessionConfig {
    /// Clock period in seconds.
    #[inline]
    pub fn clock_period_s(&self) -> f64 {
        1.0 / self.source.clock_rate_hz
    }

    /// Expected number of pulses of `class` emitted during the session.
    pub fn pulses_of(&self, class: IntensityClass) -> f64 {
        self.source.clock_rate_hz * self.duration_s * self.source.duty(class)
    }

    /// Signal pulses and session length used by the key-rate formula.
    pub fn exposure(&self) -> Exposure {
        Exposure {
            signal_pulses: self.pulses_of(IntensityClass::Signal),
            duration_s: self.duration_s,
        }
    }

    pub fn with_length_km(&self, length_km: f64) -> Self {
        let mut cfg = self.clone();
        cfg.channel.length_km = length_km;
        cfg
    }

    /// Returns the configuration unchanged when every invariant holds,
    /// otherwise the first violation found.
    pub fn validate(self) -> Result<Self, ConfigError> {
        self.source.validate()?;
        let c = &self.channel;
        if !(c.length_km.is_finite() && c.length_km >= 0.0) {
            return Err(ConfigError::new("channel.length_km", "must be finite and >= 0"));
        }
        if !(c.loss_db_per_km.is_finite() && c.loss_db_per_km >= 0.0) {
            return Err(ConfigError::new(
                "channel.loss_db_per_km",
                "must be finite and >= 0",
            ));
        }
        self.detector.validate()?;
        if self.detector.gate_width_s > self.clock_period_s() {
            return Err(ConfigError::new(
                "detector.gate_width_s",
                "gate wider than the clock period",
            ));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(ConfigError::new("session.duration_s", "must be finite and > 0"));
        }
        if !(self.k_sigma.is_finite() && self.k_sigma >= 0.0) {
            return Err(ConfigError::new("session.k_sigma", "must be finite and >= 0"));
        }
        if !(self.f_ec.is_finite() && self.f_ec >= 1.0) {
            return Err(ConfigError::new("session.f_ec", "must be finite and >= 1"));
        }
        Ok(self)
    }
}

/// Free-function form of [`SessionConfig::validate`].
pub fn validate_config(cfg: SessionConfig) -> Result<SessionConfig, ConfigError> {
    cfg.validate()
}

/// First violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub(crate) fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

/// Number of signal pulses and the wall-clock time they took. The key-rate
/// formula needs both; they come either from a configuration or from a tally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exposure {
    pub signal_pulses: f64,
    pub duration_s: f64,
}

/// Raw counts for one intensity class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub pulses_sent: u64,
    /// Gates with at least one registered avalanche.
    pub clicks: u64,
    /// Clicks where both parties used the same basis.
    pub sifted: u64,
    /// Sifted bits whose value was compared in public.
    pub disclosed: u64,
    /// Disclosed bits that disagreed.
    pub errors: u64,
}

/// Per-class bookkeeping for a finished session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionTally {
    pub counts: [ClassCounts; 3],
    pub duration_s: f64,
}

impl SessionTally {
    #[inline]
    pub fn class(&self, class: IntensityClass) -> &ClassCounts {
        &self.counts[class.index()]
    }

    #[inline]
    pub fn class_mut(&mut self, class: IntensityClass) -> &mut ClassCounts {
        &mut self.counts[class.index()]
    }

    pub fn total_pulses(&self) -> u64 {
        self.counts.iter().map(|c| c.pulses_sent).sum()
    }

    pub fn total_clicks(&self) -> u64 {
        self.counts.iter().map(|c| c.clicks).sum()
    }

    pub fn total_sifted(&self) -> u64 {
        self.counts.iter().map(|c| c.sifted).sum()
    }

    /// Checks `errors <= disclosed <= sifted <= clicks <= pulses_sent` for
    /// every class.
    pub fn check(&self) -> Result<(), TallyError> {
        for class in IntensityClass::ALL {
            let c = self.class(class);
            let ordered = c.errors <= c.disclosed
                && c.disclosed <= c.sifted
                && c.sifted <= c.clicks
                && c.clicks <= c.pulses_sent;
            if !ordered {
                return Err(TallyError::Inconsistent(class));
            }
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(TallyError::Duration);
        }
        Ok(())
    }

    /// Signal pulses and duration recorded by this tally.
    pub fn exposure(&self) -> Exposure {
        Exposure {
            signal_pulses: self.class(IntensityClass::Signal).pulses_sent as f64,
            duration_s: self.duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TallyError {
    #[error("no pulses sent in class {0}")]
    NoPulses(IntensityClass),
    #[error("no disclosed sifted bits in class {0}")]
    NoSiftedBits(IntensityClass),
    #[error("counts for class {0} violate errors <= disclosed <= sifted <= clicks <= sent")]
    Inconsistent(IntensityClass),
    #[error("session duration must be finite and >= 0")]
    Duration,
}

/// Measured gains and signal QBER with their absolute k·σ deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainStatistics {
    pub q_mu: f64,
    pub q_nu1: f64,
    pub q_nu2: f64,
    pub eps_mu: f64,
    pub dev_q_mu: f64,
    pub dev_q_nu1: f64,
    pub dev_q_nu2: f64,
    pub dev_eps_mu: f64,
}

impl GainStatistics {
    /// The 20 km measurement: central values and ten-sigma deviations.
    pub const TABLE1: GainStatistics = GainStatistics {
        q_mu: 8.680e-3,
        q_nu1: 1.970e-3,
        q_nu2: 4.470e-4,
        eps_mu: 0.02530,
        dev_q_mu: 0.025e-3,
        dev_q_nu1: 0.025e-3,
        dev_q_nu2: 0.225e-4,
        dev_eps_mu: 0.00009,
    };

    /// Same central values, all deviations zero.
    pub fn central(&self) -> Self {
        Self {
            dev_q_mu: 0.0,
            dev_q_nu1: 0.0,
            dev_q_nu2: 0.0,
            dev_eps_mu: 0.0,
            ..*self
        }
    }

    pub fn gain(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.q_mu,
            IntensityClass::Decoy1 => self.q_nu1,
            IntensityClass::Decoy2 => self.q_nu2,
        }
    }

    /// Central values and deviations as `[q_mu, q_nu1, q_nu2, eps_mu]`.
    pub(crate) fn as_arrays(&self) -> ([f64; 4], [f64; 4]) {
        (
            [self.q_mu, self.q_nu1, self.q_nu2, self.eps_mu],
            [self.dev_q_mu, self.dev_q_nu1, self.dev_q_nu2, self.dev_eps_mu],
        )
    }

    /// Every value finite, centrals in [0, 1], deviations non-negative.
    pub fn is_valid(&self) -> bool {
        let (c, d) = self.as_arrays();
        c.iter().all(|v| (0.0..=1.0).contains(v)) && d.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Output of the decoy analysis.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SecurityBounds {
    pub y0_lower: f64,
    pub q1_lower: f64,
    pub eps1_upper: f64,
    pub secure_rate_bps: f64,
    pub raw_rate_bps: f64,
}

fn binomial_dev(k_sigma: f64, p: f64, n: u64) -> f64 {
    k_sigma * (p * (1.0 - p) / n as f64).sqrt()
}

/// Converts raw counts into gains with binomial k·σ deviations.
///
/// Gains are clicks per emitted pulse of each class, before sifting. The
/// signal QBER is the error fraction over disclosed signal bits.
pub fn tallies_to_gains(tally: &SessionTally, k_sigma: f64) -> Result<GainStatistics, TallyError> {
    tally.check()?;
    let mut q = [0.0; 3];
    let mut dev = [0.0; 3];
    for class in IntensityClass::ALL {
        let c = tally.class(class);
        if c.pulses_sent == 0 {
            return Err(TallyError::NoPulses(class));
        }
        let p = c.clicks as f64 / c.pulses_sent as f64;
        q[class.index()] = p;
        dev[class.index()] = binomial_dev(k_sigma, p, c.pulses_sent);
    }
    let signal = tally.class(IntensityClass::Signal);
    if signal.disclosed == 0 {
        return Err(TallyError::NoSiftedBits(IntensityClass::Signal));
    }
    let eps = signal.errors as f64 / signal.disclosed as f64;
    Ok(GainStatistics {
        q_mu: q[0],
        q_nu1: q[1],
        q_nu2: q[2],
        eps_mu: eps,
        dev_q_mu: dev[0],
        dev_q_nu1: dev[1],
        dev_q_nu2: dev[2],
        dev_eps_mu: binomial_dev(k_sigma, eps, signal.disclosed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tally_with(counts: [ClassCounts; 3]) -> SessionTally {
        SessionTally {
            counts,
            duration_s: 1.0,
        }
    }

    fn uniform(pulses: u64, clicks: u64, errors: u64) -> SessionTally {
        let c = ClassCounts {
            pulses_sent: pulses,
            clicks,
            sifted: clicks / 2,
            disclosed: clicks / 2,
            errors,
        };
        tally_with([c; 3])
    }

    #[test]
    fn reference_configuration_is_accepted() {
        let cfg = SessionConfig::default();
        assert_eq!(validate_config(cfg.clone()), Ok(cfg));
    }

    #[test]
    fn decoy_validity_boundary_is_rejected() {
        let mut cfg = SessionConfig::default();
        cfg.source.mu = 0.1;
        cfg.source.nu1 = 0.06;
        cfg.source.nu2 = 0.05;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.field, "source.mu");
        assert!(err.reason.contains("nu1 + nu2"), "{err}");
    }

    #[test]
    fn duty_cycles_must_sum_to_one() {
        let mut cfg = SessionConfig::default();
        cfg.source.duty = [0.5, 0.5, 0.5];
        let err = cfg.validate().unwrap_err();
        assert!(err.reason.contains("sum"), "{err}");
    }

    #[test]
    fn gate_wider_than_period_is_rejected() {
        let mut cfg = SessionConfig::default();
        cfg.detector.gate_width_s = 1.0e-9;
        assert_eq!(cfg.validate().unwrap_err().field, "detector.gate_width_s");
    }

    #[test]
    fn other_invariants_name_their_field() {
        type Mutation = fn(&mut SessionConfig);
        let cases: Vec<(Mutation, &str)> = vec![
            (|c| c.source.clock_rate_hz = 0.0, "source.clock_rate_hz"),
            (|c| c.source.nu1 = 0.6, "source.mu"),
            (|c| c.source.nu2 = 0.2, "source.nu1"),
            (|c| c.channel.length_km = -1.0, "channel.length_km"),
            (|c| c.detector.efficiency = 1.5, "detector.efficiency"),
            (|c| c.detector.receiver_loss_factor = 0.5, "detector.receiver_loss_factor"),
            (|c| c.detector.dead_time_gates = 0, "detector.dead_time_gates"),
            (|c| c.duration_s = 0.0, "session.duration_s"),
            (|c| c.k_sigma = -1.0, "session.k_sigma"),
            (|c| c.f_ec = 0.9, "session.f_ec"),
        ];
        for (mutate, field) in cases {
            let mut cfg = SessionConfig::default();
            mutate(&mut cfg);
            assert_eq!(cfg.validate().unwrap_err().field, field);
        }
    }

    #[test]
    fn extinction_defaults_to_intensity_ratio() {
        let s = SourceConfig::default();
        assert_relative_eq!(s.nu2_for(s.mu), s.nu2, max_relative = 1e-12);
        let explicit = SourceConfig {
            extinction_db: Some(29.0),
            ..SourceConfig::default()
        };
        assert_relative_eq!(explicit.nu2_for(0.55), 0.55 * 10f64.powf(-2.9));
    }

    #[test]
    fn saturated_class_has_zero_deviation() {
        let g = tallies_to_gains(&uniform(1000, 1000, 0), 10.0).unwrap();
        assert_eq!(g.q_mu, 1.0);
        assert_eq!(g.dev_q_mu, 0.0);
        assert_eq!(g.eps_mu, 0.0);
        assert_eq!(g.dev_eps_mu, 0.0);
    }

    #[test]
    fn signal_deviation_at_reference_scale() {
        // 1.036 GHz * 2.3 s * 0.80 signal pulses.
        let n = 1_906_240_000u64;
        let clicks = (8.680e-3 * n as f64).round() as u64;
        let signal = ClassCounts {
            pulses_sent: n,
            clicks,
            sifted: clicks / 2,
            disclosed: clicks / 2,
            errors: 0,
        };
        let mut t = uniform(1000, 10, 0);
        t.counts[0] = signal;
        let g = tallies_to_gains(&t, 10.0).unwrap();
        assert_relative_eq!(g.q_mu, 8.680e-3, max_relative = 1e-7);
        // 10 * sqrt(q (1 - q) / n) evaluated independently.
        assert_relative_eq!(g.dev_q_mu, 2.124604e-5, max_relative = 1e-6);
    }

    #[test]
    fn empty_class_is_named() {
        let mut t = uniform(100, 10, 1);
        t.counts[2] = ClassCounts::default();
        assert_eq!(
            tallies_to_gains(&t, 10.0),
            Err(TallyError::NoPulses(IntensityClass::Decoy2))
        );
        let mut t = uniform(100, 10, 0);
        t.counts[0].sifted = 0;
        t.counts[0].disclosed = 0;
        assert_eq!(
            tallies_to_gains(&t, 10.0),
            Err(TallyError::NoSiftedBits(IntensityClass::Signal))
        );
    }

    #[test]
    fn inconsistent_tally_is_rejected() {
        let mut t = uniform(100, 10, 1);
        t.counts[1].clicks = 200;
        assert_eq!(t.check(), Err(TallyError::Inconsistent(IntensityClass::Decoy1)));
    }

    proptest! {
        #[test]
        fn scaling_counts_shrinks_deviations(
            sent in 10u64..1_000_000,
            click_frac in 0.0f64..1.0,
            err_frac in 0.0f64..0.5,
            scale in 2u64..50,
        ) {
            let clicks = (sent as f64 * click_frac) as u64;
            let sifted = clicks / 2 + 1;
            let clicks = clicks.max(sifted);
            let sent = sent.max(clicks);
            let errors = (sifted as f64 * err_frac) as u64;
            let base = ClassCounts { pulses_sent: sent, clicks, sifted, disclosed: sifted, errors };
            let scaled = ClassCounts {
                pulses_sent: sent * scale,
                clicks: clicks * scale,
                sifted: sifted * scale,
                disclosed: sifted * scale,
                errors: errors * scale,
            };
            let a = tallies_to_gains(&tally_with([base; 3]), 10.0).unwrap();
            let b = tallies_to_gains(&tally_with([scaled; 3]), 10.0).unwrap();
            prop_assert!((a.q_mu - b.q_mu).abs() <= 1e-15);
            prop_assert!((a.eps_mu - b.eps_mu).abs() <= 1e-15);
            let root = (scale as f64).sqrt();
            for (x, y) in [(a.dev_q_mu, b.dev_q_mu), (a.dev_eps_mu, b.dev_eps_mu)] {
                prop_assert!(x.is_finite() && x >= 0.0);
                prop_assert!((x - y * root).abs() <= 1e-12 * x.max(1e-300) + 1e-18);
            }
        }
    }
}

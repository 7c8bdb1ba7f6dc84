//! Three-intensity decoy-state bounds.
//!
//! The pipeline is
//!
//! 1. [`y0_lower`]: background yield from the two decoys,
//! 2. [`q1_lower`]: single-photon gain of the signal state,
//! 3. [`eps1_upper`]: error rate of the detected single-photon pulses,
//! 4. [`secure_rate`]: the key rate after error correction and privacy
//!    amplification.
//!
//! [`analyze`] runs the whole chain at every sign corner of the measured
//! quantities and keeps the worst one. [`exact_gains`] computes the gains a
//! weak-coherent source would produce for a known set of photon-number yields
//! and serves as the ground truth the bounds are tested against.

use thiserror::Error;

use crate::model::{Exposure, GainStatistics, SecurityBounds, SessionConfig, SourceConfig};

/// Poisson tail mass allowed beyond the truncation of a [`YieldModel`].
pub const TRUNCATION_TAIL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecoyError {
    #[error("entropy argument {0} outside [0, 1]")]
    Domain(f64),
    #[error("decoy intensities coincide (nu1 = nu2 = {0})")]
    DegenerateDecoys(f64),
    #[error("bound validity violated: {0}")]
    Validity(&'static str),
    #[error("single-photon gain bound is zero; no key can be distilled")]
    NoSinglePhotonSignal,
    #[error("photon-number truncation at n = {nmax} leaves Poisson tail {tail:e} at flux {flux}")]
    Truncation { flux: f64, nmax: usize, tail: f64 },
    #[error("invalid yield model: {0}")]
    YieldModel(&'static str),
}

/// `H2(x) = -x log2 x - (1-x) log2 (1-x)`, with `0 log2 0 = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, DecoyError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DecoyError::Domain(x));
    }
    Ok(entropy_term(x) + entropy_term(1.0 - x))
}

#[inline]
fn entropy_term(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

/// Lower bound on the vacuum yield, clamped at zero.
pub fn y0_lower(nu1: f64, nu2: f64, q_nu1: f64, q_nu2: f64) -> Result<f64, DecoyError> {
    if nu1 == nu2 {
        return Err(DecoyError::DegenerateDecoys(nu1));
    }
    if !(nu1 > nu2 && nu2 >= 0.0) {
        return Err(DecoyError::Validity("nu1 > nu2 >= 0"));
    }
    let y0 = (nu1 * q_nu2 * nu2.exp() - nu2 * q_nu1 * nu1.exp()) / (nu1 - nu2);
    Ok(y0.max(0.0))
}

/// Lower bound on the single-photon gain of the signal state, clamped at zero.
pub fn q1_lower(
    mu: f64,
    nu1: f64,
    nu2: f64,
    q_mu: f64,
    q_nu1: f64,
    q_nu2: f64,
    y0_l: f64,
) -> Result<f64, DecoyError> {
    if !(nu1 > nu2 && nu2 >= 0.0) {
        return Err(DecoyError::Validity("nu1 > nu2 >= 0"));
    }
    if mu <= nu1 + nu2 {
        return Err(DecoyError::Validity("mu > nu1 + nu2"));
    }
    let prefactor = mu * mu * (-mu).exp() / (mu * nu1 - mu * nu2 - nu1 * nu1 + nu2 * nu2);
    let decoy_term = q_nu1 * nu1.exp() - q_nu2 * nu2.exp();
    let multi_photon = (nu1 * nu1 - nu2 * nu2) / (mu * mu) * (q_mu * mu.exp() - y0_l);
    Ok((prefactor * (decoy_term - multi_photon)).max(0.0))
}

/// Upper bound on the single-photon error rate, clamped to `[0, 1/2]`.
pub fn eps1_upper(mu: f64, eps_mu: f64, q_mu: f64, y0_l: f64, q1_l: f64) -> Result<f64, DecoyError> {
    if q1_l <= 0.0 {
        return Err(DecoyError::NoSinglePhotonSignal);
    }
    let e1 = (eps_mu * q_mu * mu.exp() - 0.5 * y0_l) / (q1_l * mu.exp());
    Ok(e1.clamp(0.0, 0.5))
}

/// Secure and raw (sifted) key rates in bits per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyRates {
    pub secure_bps: f64,
    pub raw_bps: f64,
}

/// Key rate after reconciliation (cost `f_ec · H2(eps_mu)` per signal
/// detection) and privacy amplification (credited only to single photons).
/// Both parties keep half the detections after sifting.
pub fn secure_rate(
    q1_l: f64,
    eps1_u: f64,
    q_mu: f64,
    eps_mu: f64,
    f_ec: f64,
    exposure: Exposure,
) -> Result<KeyRates, DecoyError> {
    let h_mu = binary_entropy(eps_mu)?;
    let h_1 = binary_entropy(eps1_u)?;
    let half_rate = 0.5 * exposure.signal_pulses / exposure.duration_s;
    let per_pulse = -q_mu * f_ec * h_mu + q1_l * (1.0 - h_1);
    Ok(KeyRates {
        secure_bps: (half_rate * per_pulse).max(0.0),
        raw_bps: half_rate * q_mu,
    })
}

/// Full bound chain at one point of the measured quantities.
fn evaluate(
    source: &SourceConfig,
    q: [f64; 4],
    f_ec: f64,
    exposure: Exposure,
) -> Result<SecurityBounds, DecoyError> {
    let [q_mu, q_nu1, q_nu2, eps_mu] = q;
    let (mu, nu1, nu2) = (source.mu, source.nu1, source.nu2);
    let y0 = y0_lower(nu1, nu2, q_nu1, q_nu2)?;
    let q1 = q1_lower(mu, nu1, nu2, q_mu, q_nu1, q_nu2, y0)?;
    let (eps1, rates) = match eps1_upper(mu, eps_mu, q_mu, y0, q1) {
        Ok(e1) => (e1, secure_rate(q1, e1, q_mu, eps_mu, f_ec, exposure)?),
        Err(DecoyError::NoSinglePhotonSignal) => {
            let raw = secure_rate(0.0, 0.5, q_mu, eps_mu, f_ec, exposure)?.raw_bps;
            (
                0.5,
                KeyRates {
                    secure_bps: 0.0,
                    raw_bps: raw,
                },
            )
        }
        Err(e) => return Err(e),
    };
    Ok(SecurityBounds {
        y0_lower: y0,
        q1_lower: q1,
        eps1_upper: eps1,
        secure_rate_bps: rates.secure_bps,
        raw_rate_bps: rates.raw_bps,
    })
}

/// Worst case over the 16 sign corners of `(Q_mu, Q_nu1, Q_nu2, eps_mu)`,
/// using the session's signal count and duration.
pub fn analyze(gains: &GainStatistics, cfg: &SessionConfig) -> Result<SecurityBounds, DecoyError> {
    analyze_with_exposure(gains, cfg, cfg.exposure())
}

/// As [`analyze`], with the signal count and duration supplied explicitly
/// (for example from a measured tally).
pub fn analyze_with_exposure(
    gains: &GainStatistics,
    cfg: &SessionConfig,
    exposure: Exposure,
) -> Result<SecurityBounds, DecoyError> {
    let (central, dev) = gains.as_arrays();
    let raw_rate = 0.5 * exposure.signal_pulses / exposure.duration_s * gains.q_mu;
    let mut worst: Option<SecurityBounds> = None;
    for corner in 0u32..16 {
        let mut q = central;
        for (i, v) in q.iter_mut().enumerate() {
            let sign = if corner >> i & 1 == 1 { 1.0 } else { -1.0 };
            *v = (*v + sign * dev[i]).clamp(0.0, 1.0);
        }
        let bounds = evaluate(&cfg.source, q, cfg.f_ec, exposure)?;
        if worst.is_none_or(|w| bounds.secure_rate_bps < w.secure_rate_bps) {
            worst = Some(bounds);
        }
    }
    let mut worst = worst.expect("sixteen corners evaluated");
    worst.raw_rate_bps = raw_rate;
    Ok(worst)
}

/// Photon-number resolved yields and error rates of a channel, the ground
/// truth the decoy bounds estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct YieldModel {
    yields: Vec<f64>,
    error_rates: Vec<f64>,
}

impl YieldModel {
    /// `yields[n]` and `error_rates[n]` describe `n`-photon pulses. Vacuum
    /// clicks are random, so `error_rates[0]` must be exactly one half.
    pub fn new(yields: Vec<f64>, error_rates: Vec<f64>) -> Result<Self, DecoyError> {
        if yields.len() != error_rates.len() {
            return Err(DecoyError::YieldModel("yields and error rates differ in length"));
        }
        if yields.len() < 3 {
            return Err(DecoyError::YieldModel("need at least n = 0, 1, 2"));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !yields.iter().all(in_unit) || !error_rates.iter().all(in_unit) {
            return Err(DecoyError::YieldModel("yields and error rates must lie in [0, 1]"));
        }
        if error_rates[0] != 0.5 {
            return Err(DecoyError::YieldModel("vacuum error rate must be 1/2"));
        }
        Ok(Self {
            yields,
            error_rates,
        })
    }

    /// Threshold detector with background `y0` and overall efficiency `eta`:
    /// `Y_n = 1 - (1 - y0)(1 - eta)^n`, `e_n = e_opt` for `n >= 1`.
    pub fn threshold_detector(y0: f64, eta: f64, e_opt: f64, nmax: usize) -> Result<Self, DecoyError> {
        let yields = (0..=nmax)
            .map(|n| 1.0 - (1.0 - y0) * (1.0 - eta).powi(n as i32))
            .collect();
        let errors = (0..=nmax)
            .map(|n| if n == 0 { 0.5 } else { e_opt })
            .collect();
        Self::new(yields, errors)
    }

    pub fn nmax(&self) -> usize {
        self.yields.len() - 1
    }

    pub fn yields(&self) -> &[f64] {
        &self.yields
    }

    pub fn error_rates(&self) -> &[f64] {
        &self.error_rates
    }

    /// Smallest truncation for which the Poisson tail at `flux` is below
    /// [`TRUNCATION_TAIL`].
    pub fn required_nmax(flux: f64) -> usize {
        let mut n = 2;
        while poisson_tail(flux, n) >= TRUNCATION_TAIL {
            n += 1;
        }
        n
    }
}

/// `P(N > nmax)` for `N ~ Poisson(flux)`, summed directly.
fn poisson_tail(flux: f64, nmax: usize) -> f64 {
    if flux == 0.0 {
        return 0.0;
    }
    let mut term = poisson_pmf(flux, nmax + 1);
    let mut tail = 0.0;
    let mut n = nmax + 1;
    while term > 0.0 && (term > 1e-30 || (n as f64) < flux) {
        tail += term;
        n += 1;
        term *= flux / n as f64;
    }
    tail
}

fn poisson_pmf(flux: f64, n: usize) -> f64 {
    if flux == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    // log-space to survive large n
    let ln = -flux + n as f64 * flux.ln() - ln_factorial(n);
    ln.exp()
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Expected gain and error-weighted gain of a Poisson source of mean `flux`
/// over the channel described by `model`.
pub fn exact_gains(model: &YieldModel, flux: f64) -> Result<(f64, f64), DecoyError> {
    if !(flux.is_finite() && flux >= 0.0) {
        return Err(DecoyError::Validity("flux >= 0"));
    }
    let tail = poisson_tail(flux, model.nmax());
    if tail >= TRUNCATION_TAIL {
        return Err(DecoyError::Truncation {
            flux,
            nmax: model.nmax(),
            tail,
        });
    }
    let mut weight = (-flux).exp();
    let mut gain = 0.0;
    let mut err_gain = 0.0;
    for (n, (y, e)) in model.yields.iter().zip(&model.error_rates).enumerate() {
        if n > 0 {
            weight *= flux / n as f64;
        }
        gain += weight * y;
        err_gain += weight * y * e;
    }
    Ok((gain, err_gain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // reference-session centrals
    const MU: f64 = 0.55;
    const NU1: f64 = 0.10;
    const NU2: f64 = 7.5e-4;
    const Q_MU: f64 = 8.680e-3;
    const Q_NU1: f64 = 1.970e-3;
    const Q_NU2: f64 = 4.470e-4;
    const EPS_MU: f64 = 0.0253;

    #[test]
    fn entropy_reference_points() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        // 30-digit evaluation: 0.17024389904402499344
        assert!((binary_entropy(0.0253).unwrap() - 0.170_243_899).abs() < 1e-9);
        assert_eq!(binary_entropy(-0.1), Err(DecoyError::Domain(-0.1)));
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn vacuum_decoy_measures_background_directly() {
        assert_eq!(y0_lower(0.1, 0.0, 2e-3, 3e-5).unwrap(), 3e-5);
    }

    #[test]
    fn reference_plug_in_values() {
        // Reference values from a 30-digit evaluation of the same formulas.
        let y0 = y0_lower(NU1, NU2, Q_NU1, Q_NU2).unwrap();
        assert_relative_eq!(y0, 4.342_634_5e-4, max_relative = 1e-7);
        let q1 = q1_lower(MU, NU1, NU2, Q_MU, Q_NU1, Q_NU2, y0).unwrap();
        assert_relative_eq!(q1, 4.880_600_9e-3, max_relative = 1e-7);
        let e1 = eps1_upper(MU, EPS_MU, Q_MU, y0, q1).unwrap();
        assert_relative_eq!(e1, 1.932_751_6e-2, max_relative = 1e-7);
        let exposure = SessionConfig::default().exposure();
        let r = secure_rate(q1, e1, Q_MU, EPS_MU, 1.10, exposure).unwrap();
        assert_relative_eq!(r.secure_bps, 1_070_522.7, max_relative = 1e-7);
        assert_relative_eq!(r.raw_bps, 0.5 * 1.036e9 * 0.8 * Q_MU, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_and_invalid_intensities() {
        assert_eq!(y0_lower(0.1, 0.1, 1e-3, 1e-3), Err(DecoyError::DegenerateDecoys(0.1)));
        assert_eq!(
            q1_lower(0.1, 0.06, 0.05, 1e-2, 1e-3, 1e-4, 0.0),
            Err(DecoyError::Validity("mu > nu1 + nu2"))
        );
        assert_eq!(
            eps1_upper(MU, EPS_MU, Q_MU, 0.0, 0.0),
            Err(DecoyError::NoSinglePhotonSignal)
        );
    }

    #[test]
    fn errors_fully_explained_by_background() {
        let y0 = 2.0 * EPS_MU * Q_MU * MU.exp();
        assert_eq!(eps1_upper(MU, EPS_MU, Q_MU, y0, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn zero_single_photon_gain_gives_zero_rate() {
        let exposure = SessionConfig::default().exposure();
        let r = secure_rate(0.0, 0.5, Q_MU, EPS_MU, 1.1, exposure).unwrap();
        assert_eq!(r.secure_bps, 0.0);
    }

    #[test]
    fn zero_deviation_corners_match_central_pipeline() {
        let cfg = SessionConfig::default();
        let g = GainStatistics::TABLE1.central();
        let b = analyze(&g, &cfg).unwrap();
        let y0 = y0_lower(NU1, NU2, Q_NU1, Q_NU2).unwrap();
        let q1 = q1_lower(MU, NU1, NU2, Q_MU, Q_NU1, Q_NU2, y0).unwrap();
        let e1 = eps1_upper(MU, EPS_MU, Q_MU, y0, q1).unwrap();
        let r = secure_rate(q1, e1, Q_MU, EPS_MU, cfg.f_ec, cfg.exposure()).unwrap();
        assert_eq!(b.y0_lower, y0);
        assert_eq!(b.q1_lower, q1);
        assert_eq!(b.eps1_upper, e1);
        assert_eq!(b.secure_rate_bps, r.secure_bps);
        assert_eq!(b.raw_rate_bps, r.raw_bps);
    }

    #[test]
    fn reference_worst_corner() {
        // Brute-force oracle: (Q_mu+, Q_nu1-, Q_nu2+, eps+) at 30 digits.
        let b = analyze(&GainStatistics::TABLE1, &SessionConfig::default()).unwrap();
        assert_relative_eq!(b.secure_rate_bps, 998_775.6, max_relative = 1e-6);
        assert_relative_eq!(b.q1_lower, 4.681_673_9e-3, max_relative = 1e-6);
        assert_relative_eq!(b.eps1_upper, 1.904_040_6e-2, max_relative = 1e-6);
        assert_relative_eq!(b.y0_lower, 4.571_592_7e-4, max_relative = 1e-6);
    }

    #[test]
    fn no_key_anywhere_reports_zero() {
        let g = GainStatistics {
            q_nu1: 0.0,
            q_nu2: 0.0,
            ..GainStatistics::TABLE1
        };
        let b = analyze(&g, &SessionConfig::default()).unwrap();
        assert_eq!(b.secure_rate_bps, 0.0);
        assert_eq!(b.q1_lower, 0.0);
    }

    #[test]
    fn uniform_yields_normalise() {
        let m = YieldModel::new(vec![1.0; 30], {
            let mut e = vec![0.1; 30];
            e[0] = 0.5;
            e
        })
        .unwrap();
        for flux in [0.0, 0.1, 0.55, 1.0, 3.0] {
            let (g, _) = exact_gains(&m, flux).unwrap();
            assert!((g - 1.0).abs() < 1e-12, "flux {flux}: {g}");
        }
        let zero = YieldModel::new(vec![0.0; 30], {
            let mut e = vec![0.0; 30];
            e[0] = 0.5;
            e
        })
        .unwrap();
        assert_eq!(exact_gains(&zero, 0.7).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn threshold_detector_gain_matches_closed_form() {
        for &(d, eta, x) in &[(1.36e-5, 0.0199, 0.55), (1e-3, 0.3, 0.9), (0.0, 0.05, 0.1)] {
            let m = YieldModel::threshold_detector(d, eta, 0.01, YieldModel::required_nmax(x)).unwrap();
            let (g, _) = exact_gains(&m, x).unwrap();
            let closed = 1.0 - (1.0 - d) * (-eta * x).exp();
            assert!((g - closed).abs() < 1e-10, "{g} vs {closed}");
        }
    }

    #[test]
    fn truncation_is_enforced() {
        let m = YieldModel::threshold_detector(0.0, 0.1, 0.01, 4).unwrap();
        assert!(matches!(exact_gains(&m, 2.0), Err(DecoyError::Truncation { .. })));
        assert!(YieldModel::new(vec![0.5; 3], vec![0.1; 3]).is_err());
        assert!(YieldModel::new(vec![0.5; 2], vec![0.5; 2]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric(x in 0.0f64..=1.0) {
            let a = binary_entropy(x).unwrap();
            let b = binary_entropy(1.0 - x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= 1.0);
        }

        #[test]
        fn rate_is_monotone(
            q1 in 1e-4f64..1e-2,
            e1 in 0.0f64..0.45,
            eps in 0.0f64..0.2,
            step in 1e-4f64..0.05,
        ) {
            let exp = SessionConfig::default().exposure();
            let q_mu = 1e-2;
            let base = secure_rate(q1, e1, q_mu, eps, 1.1, exp).unwrap().secure_bps;
            let worse_e1 = secure_rate(q1, (e1 + step).min(0.5), q_mu, eps, 1.1, exp).unwrap().secure_bps;
            let worse_eps = secure_rate(q1, e1, q_mu, (eps + step).min(0.5), 1.1, exp).unwrap().secure_bps;
            let better_q1 = secure_rate(q1 * (1.0 + step), e1, q_mu, eps, 1.1, exp).unwrap().secure_bps;
            prop_assert!(worse_e1 <= base);
            prop_assert!(worse_eps <= base);
            prop_assert!(better_q1 >= base);
        }

        #[test]
        fn worst_casing_is_conservative(
            scale in 0.0f64..3.0,
            which in 1u32..16,
        ) {
            let cfg = SessionConfig::default();
            let t = GainStatistics::TABLE1;
            let pick = |bit: u32, v: f64| if which >> bit & 1 == 1 { v * scale } else { 0.0 };
            let g = GainStatistics {
                dev_q_mu: pick(0, t.dev_q_mu),
                dev_q_nu1: pick(1, t.dev_q_nu1),
                dev_q_nu2: pick(2, t.dev_q_nu2),
                dev_eps_mu: pick(3, t.dev_eps_mu),
                ..t
            };
            let central = analyze(&t.central(), &cfg).unwrap();
            let worst = analyze(&g, &cfg).unwrap();
            prop_assert!(worst.secure_rate_bps <= central.secure_rate_bps);
            for p in [worst.y0_lower, worst.q1_lower, worst.eps1_upper] {
                prop_assert!((0.0..=1.0).contains(&p));
            }
            prop_assert!(worst.secure_rate_bps >= 0.0);
        }
    }
}

//! Photon arrival-time histogram of the gated receiver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::FWHM_PER_SIGMA;
use crate::model::DetectorConfig;

pub const HISTOGRAM_BIN_S: f64 = 10e-12;

/// Clock periods covered by one histogram.
const PERIODS: usize = 4;

/// Arrival times folded onto a window of a few clock periods, gate `k`
/// centred at `(k + 1/2) T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalHistogram {
    pub bin_width_s: f64,
    pub period_s: f64,
    pub gate_width_s: f64,
    /// All arrivals, as a time tagger would record them.
    pub arrivals: Vec<u64>,
    /// Arrivals inside their own gate's active window.
    pub detected: Vec<u64>,
    pub n_photons: u64,
    pub dropped: u64,
    /// Photons that landed closer to a neighbouring gate centre than to their
    /// own.
    pub crossed: u64,
}

impl ArrivalHistogram {
    pub fn drop_fraction(&self) -> f64 {
        ratio(self.dropped, self.n_photons)
    }

    /// Fraction of photons that spill past the midpoint between gates.
    pub fn overlap_fraction(&self) -> f64 {
        ratio(self.crossed, self.n_photons)
    }

    /// Arrivals per bin in the bins straddling the midpoints between gates.
    pub fn midpoint_density(&self) -> f64 {
        let bins_per_period = self.arrivals.len() / PERIODS;
        let mut total = 0;
        for k in 0..PERIODS {
            // midpoints at k T, i.e. bin edges at multiples of the period
            let edge = k * bins_per_period;
            let left = (edge + self.arrivals.len() - 1) % self.arrivals.len();
            total += self.arrivals[left] + self.arrivals[edge];
        }
        total as f64 / (2 * PERIODS) as f64
    }

    /// FWHM of a Gaussian fitted to the peak shape (all periods folded), by
    /// weighted least squares on the log counts with the bin-width
    /// correction. `None` when there are too few populated bins.
    pub fn fitted_fwhm_s(&self) -> Option<f64> {
        let bins_per_period = self.arrivals.len() / PERIODS;
        let mut folded = vec![0u64; bins_per_period];
        for (i, c) in self.arrivals.iter().enumerate() {
            folded[i % bins_per_period] += c;
        }
        let peak = *folded.iter().max()?;
        let cut = (peak / 20).max(5);
        // normal equations for ln c = a + b x + c x^2, weights = counts
        let centre = 0.5 * self.period_s;
        let mut s = [[0.0f64; 3]; 3];
        let mut r = [0.0f64; 3];
        let mut used = 0;
        for (i, &c) in folded.iter().enumerate() {
            if c < cut {
                continue;
            }
            used += 1;
            let x = ((i as f64 + 0.5) * self.bin_width_s - centre) / self.bin_width_s;
            let y = (c as f64).ln();
            let w = c as f64;
            let basis = [1.0, x, x * x];
            for j in 0..3 {
                r[j] += w * basis[j] * y;
                for k in 0..3 {
                    s[j][k] += w * basis[j] * basis[k];
                }
            }
        }
        if used < 3 {
            return None;
        }
        let coef = solve3(s, r)?;
        if coef[2] >= 0.0 {
            return None;
        }
        let var_bins = -0.5 / coef[2] - 1.0 / 12.0;
        (var_bins > 0.0).then(|| FWHM_PER_SIGMA * var_bins.sqrt() * self.bin_width_s)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Draws `n_photons` arrivals with Gaussian timing jitter around the gate
/// centres. Photons outside the active window of their gate are counted as
/// dropped.
///
/// # Panics
///
/// If `det.jitter_fwhm_s` or `clock_rate_hz` is not positive.
pub fn simulate_arrival_histogram(
    det: &DetectorConfig,
    clock_rate_hz: f64,
    n_photons: u64,
    seed: u64,
) -> ArrivalHistogram {
    assert!(det.jitter_fwhm_s > 0.0, "jitter must be positive");
    assert!(clock_rate_hz > 0.0, "clock rate must be positive");
    let period = 1.0 / clock_rate_hz;
    let bins_per_period = (period / HISTOGRAM_BIN_S).round().max(1.0) as usize;
    let bin = period / bins_per_period as f64;
    let n_bins = bins_per_period * PERIODS;
    let span = period * PERIODS as f64;
    let half_gate = 0.5 * det.gate_width_s;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, det.jitter_fwhm_s / FWHM_PER_SIGMA).expect("finite jitter");
    let mut h = ArrivalHistogram {
        bin_width_s: bin,
        period_s: period,
        gate_width_s: det.gate_width_s,
        arrivals: vec![0; n_bins],
        detected: vec![0; n_bins],
        n_photons,
        dropped: 0,
        crossed: 0,
    };
    for _ in 0..n_photons {
        let gate = rng.gen_range(0..PERIODS);
        let dt: f64 = jitter.sample(&mut rng);
        let t = ((gate as f64 + 0.5) * period + dt).rem_euclid(span);
        let i = ((t / bin) as usize).min(n_bins - 1);
        h.arrivals[i] += 1;
        if dt.abs() > 0.5 * period {
            h.crossed += 1;
        }
        if dt.abs() <= half_gate {
            h.detected[i] += 1;
        } else {
            h.dropped += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detector(fwhm: f64) -> DetectorConfig {
        DetectorConfig {
            jitter_fwhm_s: fwhm,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn empty() {
        let h = simulate_arrival_histogram(&detector(50e-12), 1.036e9, 0, 1);
        assert!(h.arrivals.iter().all(|&c| c == 0));
        assert_eq!(h.drop_fraction(), 0.0);
        assert_eq!(h.fitted_fwhm_s(), None);
    }

    #[test]
    fn fast_detector_peaks_are_separated() {
        let h = simulate_arrival_histogram(&detector(50e-12), 1.036e9, 1_000_000, 2);
        let fwhm = h.fitted_fwhm_s().unwrap();
        assert!((fwhm - 50e-12).abs() < 2e-12, "{fwhm:e}");
        assert_eq!(h.crossed, 0);
        assert_eq!(h.dropped, 0);
        assert_eq!(h.midpoint_density(), 0.0);
    }

    #[test]
    fn slow_detector_peaks_overlap() {
        let h = simulate_arrival_histogram(&detector(370e-12), 1.036e9, 1_000_000, 3);
        assert!(h.midpoint_density() > 0.0);
        assert!(h.overlap_fraction() > 1e-3);
        // P(|z| > 240 / 157.1) = 0.1266
        assert!((h.drop_fraction() - 0.1266).abs() < 2e-3, "{}", h.drop_fraction());
        let fwhm = h.fitted_fwhm_s().unwrap();
        assert!((fwhm - 370e-12).abs() < 15e-12, "{fwhm:e}");
    }

    #[test]
    fn counts_are_conserved() {
        let h = simulate_arrival_histogram(&detector(200e-12), 1.036e9, 50_000, 4);
        assert_eq!(h.arrivals.iter().sum::<u64>(), 50_000);
        assert_eq!(h.detected.iter().sum::<u64>() + h.dropped, 50_000);
    }
}

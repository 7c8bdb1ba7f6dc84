//! Choice of signal and decoy intensities.
//!
//! The weakest decoy is tied to the signal by the source's extinction ratio,
//! so the search runs over `(mu, nu1)`: a coarse grid scored in parallel,
//! then coordinate descent from the best grid point. The objective is the
//! worst-case secure rate of the closed-form channel model at the
//! configuration's length, duration and `k_sigma`.

use rayon::prelude::*;
use thiserror::Error;

use crate::channel::modeled_bounds;
use crate::model::{ConfigError, SessionConfig};

pub const MU_GRID: (f64, f64, f64) = (0.05, 1.0, 0.05);
pub const NU1_GRID_STEP: f64 = 0.01;
/// Upper end of the `nu1` search as a fraction of `mu`.
pub const NU1_MAX_FRACTION: f64 = 0.5;
/// Refinement stops once the step falls below this.
pub const MIN_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("no grid point satisfies mu > nu1 + nu2")]
    Infeasible,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimum {
    pub mu: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub predicted_rate_bps: f64,
    /// Best score found on the coarse grid.
    pub grid_rate_bps: f64,
}

/// Secure rate at the given intensities, or `None` if they are infeasible.
pub fn score(cfg: &SessionConfig, mu: f64, nu1: f64, nu2: f64) -> Option<f64> {
    if !(mu > nu1 + nu2 && nu1 > nu2 && nu2 >= 0.0) {
        return None;
    }
    let mut at = cfg.clone();
    at.source.mu = mu;
    at.source.nu1 = nu1;
    at.source.nu2 = nu2;
    modeled_bounds(&at).ok().map(|b| b.secure_rate_bps)
}

/// [`score`] with `nu2` pinned by the extinction ratio.
pub fn objective(cfg: &SessionConfig, mu: f64, nu1: f64) -> Option<f64> {
    score(cfg, mu, nu1, cfg.source.nu2_for(mu))
}

/// The coarse grid, `mu` ascending then `nu1` ascending.
pub fn grid(cfg: &SessionConfig) -> Vec<(f64, f64)> {
    let (lo, hi, step) = MU_GRID;
    let n_mu = ((hi - lo) / step).round() as usize + 1;
    let mut pts = Vec::new();
    for i in 0..n_mu {
        // i / 20 rounds exactly to the decimal grid values
        let mu = (i as f64 + lo / step) / (1.0 / step);
        let n_nu = (NU1_MAX_FRACTION * mu / NU1_GRID_STEP + 1e-9).floor() as usize;
        for j in 1..=n_nu {
            let nu1 = j as f64 / (1.0 / NU1_GRID_STEP);
            if mu > nu1 + cfg.source.nu2_for(mu) {
                pts.push((mu, nu1));
            }
        }
    }
    pts
}

fn better(cand: (f64, f64, f64), best: (f64, f64, f64)) -> bool {
    cand.2 > best.2 || (cand.2 == best.2 && cand.0 < best.0)
}

pub fn optimize_intensities(cfg: &SessionConfig) -> Result<Optimum, OptimizeError> {
    let cfg = cfg.clone().validate()?;
    let pts = grid(&cfg);
    let scored: Vec<(f64, f64, f64)> = pts
        .par_iter()
        .filter_map(|&(mu, nu1)| objective(&cfg, mu, nu1).map(|r| (mu, nu1, r)))
        .collect();
    let mut best = *scored.first().ok_or(OptimizeError::Infeasible)?;
    for &p in &scored[1..] {
        if better(p, best) {
            best = p;
        }
    }
    let grid_rate_bps = best.2;

    let (mu_lo, mu_hi, mu_step) = MU_GRID;
    let mut steps = [mu_step / 2.0, NU1_GRID_STEP / 2.0];
    while steps[0].max(steps[1]) >= MIN_STEP {
        let mut moved = false;
        for axis in 0..2 {
            for sign in [-1.0, 1.0] {
                let (mut mu, mut nu1) = (best.0, best.1);
                if axis == 0 {
                    mu += sign * steps[0];
                } else {
                    nu1 += sign * steps[1];
                }
                if !(mu_lo..=mu_hi).contains(&mu) || nu1 <= 0.0 || nu1 > NU1_MAX_FRACTION * mu {
                    continue;
                }
                if let Some(r) = objective(&cfg, mu, nu1) {
                    if better((mu, nu1, r), best) {
                        best = (mu, nu1, r);
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            steps = steps.map(|s| s / 2.0);
        }
    }

    Ok(Optimum {
        mu: best.0,
        nu1: best.1,
        nu2: cfg.source.nu2_for(best.0),
        predicted_rate_bps: best.2,
        grid_rate_bps,
    })
}

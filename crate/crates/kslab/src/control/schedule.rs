use serde::Serialize;

use crate::basis::SpectralBasis;
use crate::error::{Error, Result};

/// One dyadic interval `[T_{j-1}, T_j]` with `τ_j = T/2^j` and `r_j = β² 16^j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LrInterval {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub tau: f64,
    pub r: f64,
    /// Number of modes with `μ_i ≤ r`, capped at the truncation size.
    pub band: usize,
}

/// Dyadic schedule, truncated once the band covers every mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrSchedule {
    pub beta: f64,
    pub horizon: f64,
    pub intervals: Vec<LrInterval>,
}

impl LrSchedule {
    /// Start of the free tail after the last interval.
    pub fn tail_start(&self) -> f64 {
        self.intervals.last().map_or(0.0, |i| i.end)
    }
}

/// Build the schedule for horizon `T` and frequency scale `β`.
///
/// ```
/// use kslab::{basis::SpectralBasis, control::lr_schedule};
/// let s = lr_schedule(1.0, 1.0, &SpectralBasis::new(4).unwrap()).unwrap();
/// assert_eq!(s.intervals[0].tau, 0.5);
/// assert_eq!(s.intervals[0].r, 16.0);
/// ```
pub fn lr_schedule(horizon: f64, beta: f64, basis: &SpectralBasis) -> Result<LrSchedule> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param("horizon", "must be positive"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param("beta", "must be positive"));
    }
    let mu_max = *basis.mu().last().expect("basis is nonempty");
    let mut intervals = Vec::new();
    let mut j = 1usize;
    loop {
        let tau = horizon / 2f64.powi(j as i32);
        let r = beta * beta * 16f64.powi(j as i32);
        intervals.push(LrInterval {
            index: j,
            start: horizon - 2.0 * tau,
            end: horizon - tau,
            tau,
            r,
            band: basis.band_size(r),
        });
        if r >= mu_max || j >= 60 {
            break;
        }
        j += 1;
    }
    Ok(LrSchedule {
        beta,
        horizon,
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn telescoping_and_bands() {
        let b = SpectralBasis::new(16).unwrap();
        let pi2 = std::f64::consts::PI.powi(2);
        let s = lr_schedule(1.0, pi2, &b).unwrap();
        assert_eq!(s.intervals[0].band, 2);
        let j = s.intervals.len();
        let sum: f64 = s.intervals.iter().map(|i| i.tau).sum();
        assert!((sum - (1.0 - 0.5f64.powi(j as i32))).abs() < 1e-15);
        assert!(s.intervals.windows(2).all(|w| w[0].r < w[1].r));
        assert_eq!(s.intervals.last().unwrap().band, 16);
        assert_eq!(j, 4);
    }
}

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Counts above this are classified bright. `None` when the two
    /// distributions coincide.
    pub threshold: Option<u64>,
    /// Weighted probability of correct classification at the threshold.
    pub fidelity: f64,
    /// True when the NV⁻ distribution is the brighter one.
    pub minus_is_bright: bool,
}

impl ThresholdResult {
    /// Classify a count as NV⁻.
    pub fn is_minus(&self, counts: u64) -> bool {
        match self.threshold {
            Some(t) => (counts > t) == self.minus_is_bright,
            None => false,
        }
    }
}

/// Poisson pmf table for n = 0..=n_max, built in log space.
pub fn poisson_pmf(mean: f64, n_max: u64) -> Vec<f64> {
    let lm = mean.ln();
    let mut lf = 0.0;
    (0..=n_max)
        .map(|n| {
            if n > 0 {
                lf += (n as f64).ln();
            }
            (n as f64 * lm - mean - lf).exp()
        })
        .collect()
}

/// Integer threshold n* maximising w·P(N_bright > n*) + (1 − w)·P(N_dim ≤ n*)
/// over the two Poisson count distributions. `weight_minus` is w for the
/// NV⁻ population; ½ gives the balanced fidelity.
pub fn poisson_mixture_threshold(mean_minus: f64, mean_zero: f64, weight_minus: f64) -> Result<ThresholdResult> {
    if !(mean_minus > 0.0 && mean_zero > 0.0) || !mean_minus.is_finite() || !mean_zero.is_finite() {
        return Err(Error::param("poisson means", "must be positive and finite"));
    }
    if !(0.0..=1.0).contains(&weight_minus) {
        return Err(Error::param("weight_minus", "must lie in [0, 1]"));
    }
    if mean_minus == mean_zero {
        return Ok(ThresholdResult { threshold: None, fidelity: 0.5, minus_is_bright: true });
    }
    let minus_is_bright = mean_minus > mean_zero;
    let (bright, dim, wb) = if minus_is_bright {
        (mean_minus, mean_zero, weight_minus)
    } else {
        (mean_zero, mean_minus, 1.0 - weight_minus)
    };
    let n_max = (bright + 12.0 * bright.sqrt() + 30.0).ceil() as u64;
    let pb = poisson_pmf(bright, n_max);
    let pd = poisson_pmf(dim, n_max);
    let mut cb = 0.0;
    let mut cd = 0.0;
    let mut best = (0u64, f64::NEG_INFINITY);
    for n in 0..=n_max {
        cb += pb[n as usize];
        cd += pd[n as usize];
        let f = wb * (1.0 - cb) + (1.0 - wb) * cd;
        if f > best.1 + 1e-15 {
            best = (n, f);
        }
    }
    Ok(ThresholdResult { threshold: Some(best.0), fidelity: best.1, minus_is_bright })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(a: f64, b: f64) -> (u64, f64) {
        // direct factorial sums, independent of the log-space table
        let pmf = |m: f64, k: u64| {
            let mut p = (-m).exp();
            for i in 1..=k {
                p *= m / i as f64;
            }
            p
        };
        let mut best = (0, -1.0);
        for t in 0..=100u64 {
            let p_hi: f64 = 1.0 - (0..=t).map(|k| pmf(a, k)).sum::<f64>();
            let p_lo: f64 = (0..=t).map(|k| pmf(b, k)).sum();
            let f = 0.5 * (p_hi + p_lo);
            if f > best.1 + 1e-15 {
                best = (t, f);
            }
        }
        best
    }

    #[test]
    fn matches_exhaustive_scan() {
        let r = poisson_mixture_threshold(20.0, 5.0, 0.5).unwrap();
        let (t, f) = brute(20.0, 5.0);
        assert_eq!(r.threshold, Some(t));
        assert!((r.fidelity - f).abs() < 1e-12);
    }

    #[test]
    fn equal_means() {
        let r = poisson_mixture_threshold(7.0, 7.0, 0.5).unwrap();
        assert_eq!(r.fidelity, 0.5);
        assert!(r.threshold.is_none());
    }

    #[test]
    fn well_separated() {
        assert!(poisson_mixture_threshold(200.0, 5.0, 0.5).unwrap().fidelity > 0.999);
    }

    #[test]
    fn swapping_means_reflects_rule() {
        let a = poisson_mixture_threshold(20.0, 5.0, 0.5).unwrap();
        let b = poisson_mixture_threshold(5.0, 20.0, 0.5).unwrap();
        assert_eq!(a.threshold, b.threshold);
        assert_eq!(a.fidelity, b.fidelity);
        for n in 0..40 {
            assert_eq!(a.is_minus(n), !b.is_minus(n));
        }
    }
}

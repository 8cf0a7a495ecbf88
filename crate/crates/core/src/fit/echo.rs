use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, LmOptions, Model};
use super::{residual_rms, scaled_sigmas, weights, FitResult, Masked, Spectrum};
use crate::{Error, Result};

/// y = A·exp(−(2τ/T2)ⁿ), parameters [T2, n, A].
struct Echo<'a> {
    tau: &'a [f64],
}

impl Model for Echo<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_points(&self) -> usize {
        self.tau.len()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        let r = 2.0 * self.tau[i] / p[0];
        p[2] * (-(r.abs().powf(p[1]))).exp()
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let r = (2.0 * self.tau[i] / p[0]).abs();
        let u = r.powf(p[1]);
        let e = (-u).exp();
        g[0] = p[2] * e * u * p[1] / p[0];
        g[1] = if r > 0.0 { -p[2] * e * u * r.ln() } else { 0.0 };
        g[2] = e;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoOptions {
    /// Hold the stretch exponent at this value.
    pub fix_exponent: Option<f64>,
    /// Fit a free amplitude instead of pinning y(0) = 1.
    pub free_amplitude: bool,
}

impl Default for EchoOptions {
    fn default() -> Self {
        Self { fix_exponent: None, free_amplitude: false }
    }
}

/// Fit echo decay. Reports `T2`, `exponent` and `amplitude`.
pub fn fit_echo(s: &Spectrum, opts: EchoOptions) -> Result<FitResult> {
    if s.len() < 6 {
        return Err(Error::Fit("echo fit needs at least 6 delays".into()));
    }
    let xs = s.x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let tau: Vec<f64> = s.x.iter().map(|v| v / xs).collect();
    let w = weights(&s.sigma, 1.0);
    let a0 = if opts.free_amplitude {
        s.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-6)
    } else {
        1.0
    };
    // 1/e crossing for T2, n from opts or 1
    let mut order: Vec<usize> = (0..tau.len()).collect();
    order.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]));
    let cross = order.iter().find(|&&i| s.y[i] / a0 < (-1.0f64).exp()).map(|&i| tau[i]);
    let t2_0 = cross.map_or(2.0, |t| 2.0 * t.max(1e-3));
    let n0 = opts.fix_exponent.unwrap_or(1.0);

    let inner = Echo { tau: &tau };
    let mut free = vec![0];
    if opts.fix_exponent.is_none() {
        free.push(1);
    }
    if opts.free_amplitude {
        free.push(2);
    }
    let full0 = vec![t2_0, n0, a0];
    let m = Masked { inner: &inner, full: full0.clone(), free: free.clone() };
    let p0: Vec<f64> = free.iter().map(|&i| full0[i]).collect();
    let out = levenberg_marquardt(&m, &s.y, &w, &p0, LmOptions::default());
    let full = m.full_params(&out.params);
    let sig_free = scaled_sigmas(&out, tau.len());
    let mut sig = [0.0; 3];
    for (k, &i) in free.iter().enumerate() {
        sig[i] = sig_free[k];
    }
    let rms = residual_rms(&inner, &s.y, &full);
    let mut r = FitResult::empty("echo", &out, rms);
    let t2 = full[0].abs() * xs;
    r.push("T2", t2, sig[0] * xs);
    r.push("exponent", full[1], sig[1]);
    r.push("amplitude", full[2], sig[2]);
    let max_tau = tau.iter().cloned().fold(0.0, f64::max) * xs;
    if max_tau < t2 / 2.0 {
        r.flags.push("delays do not span beyond T2/2".into());
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taus() -> Vec<f64> {
        (0..=12).map(|i| i as f64 * 2.5).collect()
    }

    #[test]
    fn round_trip_free_exponent() {
        let x = taus();
        let y: Vec<f64> = x.iter().map(|t| (-(2.0 * t / 24.9f64).powf(2.0)).exp()).collect();
        let r = fit_echo(&Spectrum::unweighted(x, y).unwrap(), EchoOptions::default()).unwrap();
        assert!((r.value("T2") / 24.9 - 1.0).abs() < 1e-6);
        assert!((r.value("exponent") / 2.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn round_trip_fixed_exponent_free_amplitude() {
        let x = taus();
        let y: Vec<f64> = x.iter().map(|t| 0.7 * (-(2.0 * t / 24.9)).exp()).collect();
        let opts = EchoOptions { fix_exponent: Some(1.0), free_amplitude: true };
        let r = fit_echo(&Spectrum::unweighted(x, y).unwrap(), opts).unwrap();
        assert!((r.value("T2") / 24.9 - 1.0).abs() < 1e-6);
        assert!((r.value("amplitude") / 0.7 - 1.0).abs() < 1e-6);
        assert_eq!(r.value("exponent"), 1.0);
    }

    #[test]
    fn pinned_intercept_has_small_residual() {
        let x = taus();
        let y: Vec<f64> = x.iter().map(|t| (-(2.0 * t / 24.9)).exp()).collect();
        let opts = EchoOptions { fix_exponent: Some(1.0), free_amplitude: false };
        let r = fit_echo(&Spectrum::unweighted(x, y).unwrap(), opts).unwrap();
        assert!(r.residual_rms < 1e-9);
        assert_eq!(r.value("amplitude"), 1.0);
    }
}

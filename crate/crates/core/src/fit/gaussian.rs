use super::lm::{levenberg_marquardt, LmOptions, Model};
use super::{residual_rms, scaled_sigmas, FitResult};
use crate::{Error, Result};

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// z = B + A·exp(−r²/2s²), parameters [B, A, x₀, (y₀,) s].
struct Gauss<'a> {
    x: &'a [f64],
    y: Option<&'a [f64]>,
}

impl Gauss<'_> {
    fn centre_offsets(&self, i: usize, p: &[f64]) -> (f64, f64, f64) {
        match self.y {
            Some(y) => (self.x[i] - p[2], y[i] - p[3], p[4]),
            None => (self.x[i] - p[2], 0.0, p[3]),
        }
    }
}

impl Model for Gauss<'_> {
    fn n_params(&self) -> usize {
        if self.y.is_some() {
            5
        } else {
            4
        }
    }
    fn n_points(&self) -> usize {
        self.x.len()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        let (dx, dy, s) = self.centre_offsets(i, p);
        p[0] + p[1] * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let (dx, dy, s) = self.centre_offsets(i, p);
        let r2 = dx * dx + dy * dy;
        let e = (-r2 / (2.0 * s * s)).exp();
        g[0] = 1.0;
        g[1] = e;
        g[2] = p[1] * e * dx / (s * s);
        if self.y.is_some() {
            g[3] = p[1] * e * dy / (s * s);
            g[4] = p[1] * e * r2 / (s * s * s);
        } else {
            g[3] = p[1] * e * r2 / (s * s * s);
        }
    }
}

fn guess(x: &[f64], z: &[f64]) -> (f64, f64, usize, f64) {
    let zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let (imax, zmax) = z
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    let half = 0.5 * (zmin + zmax);
    let above = z.iter().filter(|&&v| v > half).count().max(1);
    let span = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
    let width = (span * above as f64 / z.len() as f64 / FWHM_PER_SIGMA).max(span / z.len() as f64);
    (zmin, zmax - zmin, imax, width)
}

fn finish(r: &mut FitResult, s: f64, ss: f64) {
    r.push("sigma", s.abs(), ss);
    r.push("fwhm", s.abs() * FWHM_PER_SIGMA, ss * FWHM_PER_SIGMA);
}

/// Peak profile along one axis. Reports `background`, `amplitude`,
/// `center`, `sigma` and `fwhm`.
pub fn fit_gaussian_1d(x: &[f64], z: &[f64]) -> Result<FitResult> {
    if x.len() != z.len() || x.len() < 6 {
        return Err(Error::Fit("gaussian profile needs ≥ 6 matched points".into()));
    }
    let (b, a, i, s) = guess(x, z);
    let m = Gauss { x, y: None };
    let w = vec![1.0; x.len()];
    let out = levenberg_marquardt(&m, z, &w, &[b, a, x[i], s], LmOptions::default());
    let sig = scaled_sigmas(&out, x.len());
    let p = &out.params;
    let mut r = FitResult::empty("gaussian_1d", &out, residual_rms(&m, z, p));
    r.push("background", p[0], sig[0]);
    r.push("amplitude", p[1], sig[1]);
    r.push("center", p[2], sig[2]);
    finish(&mut r, p[3], sig[3]);
    Ok(r)
}

/// Isotropic 2D peak over scattered pixels. Reports `background`,
/// `amplitude`, `center_x`, `center_y`, `sigma` and `fwhm`.
pub fn fit_gaussian_2d(x: &[f64], y: &[f64], z: &[f64]) -> Result<FitResult> {
    if x.len() != z.len() || y.len() != z.len() || x.len() < 10 {
        return Err(Error::Fit("gaussian map needs ≥ 10 matched pixels".into()));
    }
    let (b, a, i, _) = guess(x, z);
    // width from the fraction of pixels above half maximum: π·(fwhm/2)² per pixel area
    let zmin = b;
    let above = z.iter().filter(|&&v| v > zmin + 0.5 * a).count().max(1) as f64;
    let xr = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
    let yr = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y.iter().cloned().fold(f64::INFINITY, f64::min);
    let area = (xr * yr / z.len() as f64).max(f64::MIN_POSITIVE);
    let s0 = 2.0 * (above * area / std::f64::consts::PI).sqrt() / FWHM_PER_SIGMA;
    let m = Gauss { x, y: Some(y) };
    let w = vec![1.0; x.len()];
    let out = levenberg_marquardt(&m, z, &w, &[b, a, x[i], y[i], s0.max(1e-9)], LmOptions::default());
    let sig = scaled_sigmas(&out, x.len());
    let p = &out.params;
    let mut r = FitResult::empty("gaussian_2d", &out, residual_rms(&m, z, p));
    r.push("background", p[0], sig[0]);
    r.push("amplitude", p[1], sig[1]);
    r.push("center_x", p[2], sig[2]);
    r.push("center_y", p[3], sig[3]);
    finish(&mut r, p[4], sig[4]);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_round_trip() {
        let x: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 * 0.05).collect();
        let z: Vec<f64> = x.iter().map(|v| 0.1 + 2.0 * (-(v - 0.1f64).powi(2) / (2.0 * 0.17 * 0.17)).exp()).collect();
        let r = fit_gaussian_1d(&x, &z).unwrap();
        assert!((r.value("sigma") / 0.17 - 1.0).abs() < 1e-6);
        assert!((r.value("center") - 0.1).abs() < 1e-8);
    }

    #[test]
    fn map_round_trip() {
        let mut x = vec![];
        let mut y = vec![];
        let mut z = vec![];
        for i in 0..21 {
            for j in 0..21 {
                let (a, b) = (-1.0 + i as f64 * 0.1, -1.0 + j as f64 * 0.1);
                x.push(a);
                y.push(b);
                z.push(5.0 + 100.0 * (-((a - 0.2f64).powi(2) + (b + 0.1f64).powi(2)) / (2.0 * 0.2 * 0.2)).exp());
            }
        }
        let r = fit_gaussian_2d(&x, &y, &z).unwrap();
        assert!((r.value("fwhm") / (0.2 * FWHM_PER_SIGMA) - 1.0).abs() < 1e-6);
        assert!((r.value("center_x") - 0.2).abs() < 1e-8);
        assert!((r.value("center_y") + 0.1).abs() < 1e-8);
    }
}

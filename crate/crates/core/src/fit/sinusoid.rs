use std::f64::consts::{PI, TAU};

use super::lm::{levenberg_marquardt, LmOptions, Model};
use super::{residual_rms, scaled_sigmas, weights, FitResult, Spectrum};
use crate::{Error, Result};

pub const FLAG_PERIOD_UNIDENTIFIABLE: &str = "period unidentifiable";

/// y = O + A·e^{−γt}·cos(2πt/T + φ) over t already divided by the span.
struct Damped<'a> {
    t: &'a [f64],
}

impl Model for Damped<'_> {
    fn n_params(&self) -> usize {
        5
    }
    fn n_points(&self) -> usize {
        self.t.len()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        let t = self.t[i];
        p[4] + p[2] * (-p[3] * t).exp() * (TAU * t / p[0] + p[1]).cos()
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let t = self.t[i];
        let e = (-p[3] * t).exp();
        let th = TAU * t / p[0] + p[1];
        let (s, c) = th.sin_cos();
        g[0] = p[2] * e * s * TAU * t / (p[0] * p[0]);
        g[1] = -p[2] * e * s;
        g[2] = e * c;
        g[3] = -t * p[2] * e * c;
        g[4] = 1.0;
    }
}

/// Least-squares (O, a, b) for y ≈ O + a·cos(2πft) + b·sin(2πft).
fn linear_at(t: &[f64], y: &[f64], f: f64) -> ([f64; 3], f64) {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut r = nalgebra::Vector3::<f64>::zeros();
    for (&t, &y) in t.iter().zip(y) {
        let (s, c) = (TAU * f * t).sin_cos();
        let row = [1.0, c, s];
        for a in 0..3 {
            r[a] += row[a] * y;
            for b in 0..3 {
                m[(a, b)] += row[a] * row[b];
            }
        }
    }
    let sol = m.lu().solve(&r).unwrap_or_else(nalgebra::Vector3::zeros);
    let ss: f64 = t
        .iter()
        .zip(y)
        .map(|(&t, &y)| {
            let (s, c) = (TAU * f * t).sin_cos();
            (y - sol[0] - sol[1] * c - sol[2] * s).powi(2)
        })
        .sum();
    ([sol[0], sol[1], sol[2]], ss)
}

/// Fit a damped sinusoid. Reports `period`, `phase` (rad), `amplitude`,
/// `decay_rate` (1/time) and `offset`, in the units of the input.
pub fn fit_damped_sinusoid(s: &Spectrum) -> Result<FitResult> {
    if s.len() < 6 {
        return Err(Error::Fit("damped sinusoid needs at least 6 points".into()));
    }
    let span = s.x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if span <= 0.0 {
        return Err(Error::Fit("zero time span".into()));
    }
    let ys = s.y.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let t: Vec<f64> = s.x.iter().map(|x| x / span).collect();
    let y: Vec<f64> = s.y.iter().map(|v| v / ys).collect();
    let w = weights(&s.sigma, ys);
    let n = t.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let range = y.iter().fold(0.0f64, |a, v| a.max((v - mean).abs()));

    if range <= 1e-12 * mean.abs().max(1e-300) {
        let mut r = FitResult {
            model: "damped_sinusoid".into(),
            names: vec![],
            values: vec![],
            sigmas: vec![],
            residual_rms: 0.0,
            converged: true,
            iterations: 0,
            flags: vec![FLAG_PERIOD_UNIDENTIFIABLE.into()],
        };
        r.push("period", f64::NAN, f64::INFINITY);
        r.push("phase", 0.0, f64::INFINITY);
        r.push("amplitude", 0.0, 0.0);
        r.push("decay_rate", 0.0, f64::INFINITY);
        r.push("offset", mean * ys, 0.0);
        return Ok(r);
    }

    // dominant periodogram peak of the linear model residual
    let tmin = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let tspan = (1.0 - tmin).max(1e-12);
    let fmax = n as f64 / (2.0 * tspan);
    let fmin = 0.5 / tspan;
    let mut best = (fmin, f64::INFINITY);
    let coarse = 0.05 / tspan;
    let mut f = fmin;
    while f <= fmax {
        let (_, ss) = linear_at(&t, &y, f);
        if ss < best.1 {
            best = (f, ss);
        }
        f += coarse;
    }
    let fine = coarse / 50.0;
    let centre = best.0;
    let mut f = (centre - coarse).max(fine);
    while f <= centre + coarse {
        let (_, ss) = linear_at(&t, &y, f);
        if ss < best.1 {
            best = (f, ss);
        }
        f += fine;
    }
    let ([o, a, b], _) = linear_at(&t, &y, best.0);
    let p0 = [1.0 / best.0, (-b).atan2(a), a.hypot(b), 0.0, o];

    let m = Damped { t: &t };
    let out = levenberg_marquardt(&m, &y, &w, &p0, LmOptions::default());
    let sig = scaled_sigmas(&out, n);
    let rms = residual_rms(&m, &y, &out.params) * ys;
    let mut p = out.params.clone();
    if p[2] < 0.0 {
        p[2] = -p[2];
        p[1] += PI;
    }
    if p[0] < 0.0 {
        // cos(−θ) symmetry: flip period sign together with phase
        p[0] = -p[0];
        p[1] = -p[1];
    }
    p[1] = (p[1] + PI).rem_euclid(TAU) - PI;

    let mut r = FitResult::empty("damped_sinusoid", &out, rms);
    r.push("period", p[0] * span, sig[0] * span);
    r.push("phase", p[1], sig[1]);
    r.push("amplitude", p[2] * ys, sig[2] * ys);
    r.push("decay_rate", p[3] / span, sig[3] / span);
    r.push("offset", p[4] * ys, sig[4] * ys);
    if !(p[2] > 3.0 * sig[2]) {
        r.flags.push(FLAG_PERIOD_UNIDENTIFIABLE.into());
    }
    if tspan < 2.0 * p[0] {
        r.flags.push("span shorter than two periods".into());
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(t: f64, p: [f64; 5]) -> f64 {
        p[4] + p[2] * (-p[3] * t).exp() * (TAU * t / p[0] + p[1]).cos()
    }

    #[test]
    fn round_trip() {
        let truth = [221.1, 0.3, 0.09, 1.0e-3, 1.0];
        let x: Vec<f64> = (0..=40).map(|i| i as f64 * 20.0).collect();
        let y: Vec<f64> = x.iter().map(|&t| model(t, truth)).collect();
        let r = fit_damped_sinusoid(&Spectrum::unweighted(x, y).unwrap()).unwrap();
        for (k, name) in ["period", "phase", "amplitude", "decay_rate", "offset"].iter().enumerate() {
            assert!((r.value(name) / truth[k] - 1.0).abs() < 1e-6, "{name}: {}", r.value(name));
        }
        assert!(r.flags.is_empty());
    }

    #[test]
    fn zero_amplitude_is_flagged() {
        let x: Vec<f64> = (0..=40).map(|i| i as f64 * 20.0).collect();
        let y = vec![2.0; 41];
        let r = fit_damped_sinusoid(&Spectrum::unweighted(x, y).unwrap()).unwrap();
        assert_eq!(r.value("amplitude"), 0.0);
        assert!(r.has_flag(FLAG_PERIOD_UNIDENTIFIABLE));
    }

    #[test]
    fn noise_only_is_flagged() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let nd = Normal::new(0.0, 0.01).unwrap();
        let x: Vec<f64> = (0..=40).map(|i| i as f64 * 20.0).collect();
        let y: Vec<f64> = x.iter().map(|_| 1.0 + nd.sample(&mut rng)).collect();
        let r = fit_damped_sinusoid(&Spectrum::new(x, y, vec![0.01; 41]).unwrap()).unwrap();
        assert!(r.value("amplitude") < 0.02);
    }
}

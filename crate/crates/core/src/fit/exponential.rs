use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, LmOptions, LmOutcome, Model};
use super::{residual_rms, scaled_sigmas, weights, FitResult, Masked, Spectrum};
use crate::{Error, Result};

pub const FLAG_COLLAPSED: &str = "collapsed to single exponential";
pub const FLAG_FILTER_BIASED: &str = "fast component biased by readout filter";
pub const FLAG_NO_TRANSIENT: &str = "no transient";

/// y = A·e^{−kt} + O, parameters [A, k, O].
struct Single<'a> {
    t: &'a [f64],
}

impl Model for Single<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_points(&self) -> usize {
        self.t.len()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        p[0] * (-p[1] * self.t[i]).exp() + p[2]
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let t = self.t[i];
        let e = (-p[1] * t).exp();
        g[0] = e;
        g[1] = -t * p[0] * e;
        g[2] = 1.0;
    }
}

/// y = A_f·e^{−k_f t} + A_s·e^{−k_s t} + O, parameters [A_f, k_f, A_s, k_s, O].
struct Double<'a> {
    t: &'a [f64],
}

impl Model for Double<'_> {
    fn n_params(&self) -> usize {
        5
    }
    fn n_points(&self) -> usize {
        self.t.len()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        let t = self.t[i];
        p[0] * (-p[1] * t).exp() + p[2] * (-p[3] * t).exp() + p[4]
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let t = self.t[i];
        let ef = (-p[1] * t).exp();
        let es = (-p[3] * t).exp();
        g[0] = ef;
        g[1] = -t * p[0] * ef;
        g[2] = es;
        g[3] = -t * p[2] * es;
        g[4] = 1.0;
    }
}

/// OLS of ln(y) = a − k·t over points with y > floor. Returns (e^a, k).
fn log_linear(t: &[f64], y: &[f64], floor: f64) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(_, &y)| y > floor && y > 0.0)
        .map(|(&t, &y)| (t, y.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let k = -slope;
    let a = my - slope * mt;
    (k.is_finite() && k > 0.0).then(|| (a.exp(), k))
}

fn tail_stats(y: &[f64], frac: f64) -> (f64, f64) {
    let m = ((y.len() as f64 * frac).ceil() as usize).clamp(1, y.len());
    let tail = &y[y.len() - m..];
    let mean = tail.iter().sum::<f64>() / m as f64;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
    (mean, var.sqrt())
}

fn scale_of(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE)
}

/// Fit A·e^{−kt} (+ O when `with_offset`). Reports `amplitude`, `rate`,
/// `tau` and `offset`.
pub fn fit_exponential(s: &Spectrum, with_offset: bool) -> Result<FitResult> {
    let np = if with_offset { 3 } else { 2 };
    if s.len() < np + 2 {
        return Err(Error::Fit("too few points for exponential".into()));
    }
    let ts = scale_of(&s.x);
    let ys = scale_of(&s.y);
    let t: Vec<f64> = s.x.iter().map(|v| v / ts).collect();
    let y: Vec<f64> = s.y.iter().map(|v| v / ys).collect();
    let w = weights(&s.sigma, ys);
    let o0 = if with_offset { tail_stats(&y, 0.1).0 } else { 0.0 };
    let d: Vec<f64> = y.iter().map(|v| v - o0).collect();
    let (a0, k0) = log_linear(&t, &d, 1e-9 * scale_of(&d)).unwrap_or((d[0].max(1e-3), 1.0));
    let inner = Single { t: &t };
    let (out, full) = if with_offset {
        let o = levenberg_marquardt(&inner, &y, &w, &[a0, k0, o0], LmOptions::default());
        let p = o.params.clone();
        (o, p)
    } else {
        let m = Masked { inner: &inner, full: vec![a0, k0, 0.0], free: vec![0, 1] };
        let o = levenberg_marquardt(&m, &y, &w, &[a0, k0], LmOptions::default());
        let p = m.full_params(&o.params);
        (o, p)
    };
    let sig = scaled_sigmas(&out, t.len());
    let rms = residual_rms(&inner, &y, &full) * ys;
    let mut r = FitResult::empty("exponential", &out, rms);
    r.push("amplitude", full[0] * ys, sig[0] * ys);
    r.push("rate", full[1] / ts, sig[1] / ts);
    r.push("tau", ts / full[1], sig[1] * ts / (full[1] * full[1]));
    r.push("offset", full[2] * ys, if with_offset { sig[2] * ys } else { 0.0 });
    Ok(r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DoubleExpOptions {
    /// Readout filter time constant; a fitted τ_f within 20 of these is flagged.
    pub filter_tau_s: Option<f64>,
}

/// Linear amplitudes [A_f, A_s, O] for fixed rates, and the weighted SSR.
fn project(t: &[f64], y: &[f64], w: &[f64], kf: f64, ks: f64) -> ([f64; 3], f64) {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut r = nalgebra::Vector3::<f64>::zeros();
    for i in 0..t.len() {
        let row = [(-kf * t[i]).exp(), (-ks * t[i]).exp(), 1.0];
        let ww = w[i] * w[i];
        for a in 0..3 {
            r[a] += ww * row[a] * y[i];
            for b in 0..3 {
                m[(a, b)] += ww * row[a] * row[b];
            }
        }
    }
    let sol = m.lu().solve(&r).unwrap_or_else(nalgebra::Vector3::zeros);
    let ss = (0..t.len())
        .map(|i| {
            let f = sol[0] * (-kf * t[i]).exp() + sol[1] * (-ks * t[i]).exp() + sol[2];
            ((y[i] - f) * w[i]).powi(2)
        })
        .sum();
    ([sol[0], sol[1], sol[2]], ss)
}

/// Fit a double exponential with offset. Reports `A_f`, `tau_f`, `A_s`,
/// `tau_s` and `offset`; amplitudes refer to t = 0 of the input axis.
pub fn fit_double_exponential(s: &Spectrum, opts: DoubleExpOptions) -> Result<FitResult> {
    if s.len() < 10 {
        return Err(Error::Fit("too few points for double exponential".into()));
    }
    let ts = scale_of(&s.x);
    let ys = scale_of(&s.y);
    let t: Vec<f64> = s.x.iter().map(|v| v / ts).collect();
    let y: Vec<f64> = s.y.iter().map(|v| v / ys).collect();
    let w = weights(&s.sigma, ys);
    let (o0, noise) = tail_stats(&y, 0.1);
    let spread = y.iter().fold(0.0f64, |a, v| a.max((v - o0).abs()));

    if spread <= 1e-12 * o0.abs().max(1e-300) {
        let mut r = FitResult {
            model: "double_exponential".into(),
            names: vec![],
            values: vec![],
            sigmas: vec![],
            residual_rms: 0.0,
            converged: true,
            iterations: 0,
            flags: vec![FLAG_NO_TRANSIENT.into()],
        };
        r.push("A_f", 0.0, 0.0);
        r.push("tau_f", f64::NAN, f64::INFINITY);
        r.push("A_s", 0.0, 0.0);
        r.push("tau_s", f64::NAN, f64::INFINITY);
        r.push("offset", o0 * ys, 0.0);
        return Ok(r);
    }

    // start 1: log-linear regression on the tail, then on the early residual
    let d: Vec<f64> = y.iter().map(|v| v - o0).collect();
    let floor = (3.0 * noise).max(1e-9 * spread);
    let tmin = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    let late: Vec<usize> = (0..t.len()).filter(|&i| d[i] < 0.3 * dmax).collect();
    let lt: Vec<f64> = late.iter().map(|&i| t[i]).collect();
    let ld: Vec<f64> = late.iter().map(|&i| d[i]).collect();
    let (as0, ks0) = log_linear(&lt, &ld, floor).unwrap_or((0.5 * dmax, 3.0 / (1.0 - tmin).max(1e-9)));
    let early: Vec<f64> = d.iter().zip(&t).map(|(v, &t)| v - as0 * (-ks0 * t).exp()).collect();
    let (af0, kf0) = log_linear(&t, &early, floor.max(0.05 * dmax)).unwrap_or((0.5 * dmax, 10.0 * ks0));
    let mut starts = vec![[af0, kf0.max(1.5 * ks0), as0, ks0, o0]];

    // starts 2 and 3: best rate pairs on a variable-projection grid
    let step = (t.len() / 4000).max(1);
    let td: Vec<f64> = t.iter().step_by(step).cloned().collect();
    let yd: Vec<f64> = y.iter().step_by(step).cloned().collect();
    let wd: Vec<f64> = w.iter().step_by(step).cloned().collect();
    let mut grid = Vec::new();
    for i in 0..24 {
        let ks = 0.3 * 10f64.powf(i as f64 * 4.0 / 23.0);
        for j in 0..12 {
            let kf = ks * 1.5 * 10f64.powf(j as f64 * 3.0 / 11.0);
            let (a, ss) = project(&td, &yd, &wd, kf, ks);
            grid.push((ss, [a[0], kf, a[1], ks, a[2]]));
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, p) in grid.iter() {
        if starts.len() >= 3 {
            break;
        }
        if starts.iter().all(|q| ((q[3] / p[3]).ln().abs() > 0.3) || ((q[1] / p[1]).ln().abs() > 0.3)) {
            starts.push(*p);
        }
    }

    let m = Double { t: &t };
    let mut best: Option<LmOutcome> = None;
    for p0 in &starts {
        let out = levenberg_marquardt(&m, &y, &w, p0, LmOptions::default());
        let better = match &best {
            None => true,
            Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.chi2 < b.chi2),
        };
        if better && out.chi2.is_finite() {
            best = Some(out);
        }
    }
    let out = best.ok_or_else(|| Error::Fit("double exponential failed on every start".into()))?;
    let mut sig = scaled_sigmas(&out, t.len());
    let mut p = out.params.clone();
    if p[1] < p[3] {
        p.swap(0, 2);
        p.swap(1, 3);
        sig.swap(0, 2);
        sig.swap(1, 3);
    }
    let tot = p[0].abs() + p[2].abs();
    let degenerate = !(p[3] > 0.0)
        || p[1] < 1.1 * p[3]
        || p[0].abs() < 1e-4 * tot
        || p[2].abs() < 1e-4 * tot
        || !(sig[1] < p[1])
        || !(sig[3] < p[3]);
    if degenerate {
        let single = fit_exponential(s, true)?;
        let mut r = FitResult {
            model: "double_exponential".into(),
            names: vec![],
            values: vec![],
            sigmas: vec![],
            residual_rms: single.residual_rms,
            converged: single.converged,
            iterations: out.iterations + single.iterations,
            flags: single.flags.clone(),
        };
        r.flags.push(FLAG_COLLAPSED.into());
        r.push("A_f", 0.0, 0.0);
        r.push("tau_f", f64::NAN, f64::INFINITY);
        r.push("A_s", single.value("amplitude"), single.sigma("amplitude"));
        r.push("tau_s", single.value("tau"), single.sigma("tau"));
        r.push("offset", single.value("offset"), single.sigma("offset"));
        return Ok(r);
    }
    let rms = residual_rms(&m, &y, &p) * ys;
    let mut r = FitResult::empty("double_exponential", &out, rms);
    let tau_f = ts / p[1];
    r.push("A_f", p[0] * ys, sig[0] * ys);
    r.push("tau_f", tau_f, sig[1] * ts / (p[1] * p[1]));
    r.push("A_s", p[2] * ys, sig[2] * ys);
    r.push("tau_s", ts / p[3], sig[3] * ts / (p[3] * p[3]));
    r.push("offset", p[4] * ys, sig[4] * ys);
    if let Some(ft) = opts.filter_tau_s {
        if tau_f < 20.0 * ft {
            r.flags.push(FLAG_FILTER_BIASED.into());
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * dt).collect()
    }

    #[test]
    fn double_round_trip() {
        let t = axis(3000, 0.01);
        let truth = [3e-12, 0.05, 8e-12, 2.0, 1e-12];
        let y: Vec<f64> = t
            .iter()
            .map(|&t| truth[0] * (-t / truth[1]).exp() + truth[2] * (-t / truth[3]).exp() + truth[4])
            .collect();
        let r = fit_double_exponential(&Spectrum::unweighted(t, y).unwrap(), DoubleExpOptions::default()).unwrap();
        for (k, name) in ["A_f", "tau_f", "A_s", "tau_s", "offset"].iter().enumerate() {
            assert!((r.value(name) / truth[k] - 1.0).abs() < 1e-6, "{name}: {}", r.value(name));
        }
        assert!(!r.has_flag(FLAG_COLLAPSED));
    }

    #[test]
    fn degenerate_rates_collapse() {
        let t = axis(500, 0.02);
        let y: Vec<f64> = t.iter().map(|&t| 2.0 * (-t / 1.5).exp() + 0.1).collect();
        let r = fit_double_exponential(&Spectrum::unweighted(t, y).unwrap(), DoubleExpOptions::default()).unwrap();
        assert!(r.has_flag(FLAG_COLLAPSED));
        assert!((r.value("tau_s") / 1.5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pure_offset() {
        let t = axis(100, 0.1);
        let r = fit_double_exponential(&Spectrum::unweighted(t, vec![4.0; 100]).unwrap(), DoubleExpOptions::default()).unwrap();
        assert_eq!(r.value("A_f"), 0.0);
        assert_eq!(r.value("A_s"), 0.0);
        assert_eq!(r.value("offset"), 4.0);
    }

    #[test]
    fn single_round_trip() {
        let t = axis(20, 0.25);
        let y: Vec<f64> = t.iter().map(|&t| 0.8 * (-1.3 * t).exp()).collect();
        let r = fit_exponential(&Spectrum::unweighted(t, y).unwrap(), false).unwrap();
        assert!((r.value("rate") / 1.3 - 1.0).abs() < 1e-8);
        assert!((r.value("amplitude") / 0.8 - 1.0).abs() < 1e-8);
        assert_eq!(r.value("offset"), 0.0);
    }

    #[test]
    fn filter_flag() {
        let t = axis(3000, 0.01);
        let y: Vec<f64> = t.iter().map(|&t| 3.0 * (-t / 0.05).exp() + 8.0 * (-t / 2.0).exp()).collect();
        let opts = DoubleExpOptions { filter_tau_s: Some(1.0 / (2.0 * std::f64::consts::PI * 37.0)) };
        let r = fit_double_exponential(&Spectrum::unweighted(t, y).unwrap(), opts).unwrap();
        assert!(r.has_flag(FLAG_FILTER_BIASED));
    }
}

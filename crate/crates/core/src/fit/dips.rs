use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, LmOptions, Model};
use super::{median, residual_rms, scaled_sigmas, weights, FitResult, Spectrum};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lineshape {
    /// w²/(d² + w²), w the half width at half maximum.
    #[default]
    Lorentzian,
    /// exp(−d²/2w²), w the standard deviation.
    Gaussian,
}

impl Lineshape {
    fn value(self, d: f64, w: f64) -> f64 {
        match self {
            Lineshape::Lorentzian => w * w / (d * d + w * w),
            Lineshape::Gaussian => (-d * d / (2.0 * w * w)).exp(),
        }
    }

    /// (L, ∂L/∂x₀, ∂L/∂w)
    fn with_grad(self, d: f64, w: f64) -> (f64, f64, f64) {
        match self {
            Lineshape::Lorentzian => {
                let den = d * d + w * w;
                let l = w * w / den;
                (l, 2.0 * w * w * d / (den * den), 2.0 * w * d * d / (den * den))
            }
            Lineshape::Gaussian => {
                let l = (-d * d / (2.0 * w * w)).exp();
                (l, l * d / (w * w), l * d * d / (w * w * w))
            }
        }
    }

    /// Half-width at half maximum for width parameter w.
    pub fn hwhm(self, w: f64) -> f64 {
        match self {
            Lineshape::Lorentzian => w.abs(),
            Lineshape::Gaussian => w.abs() * (2.0 * std::f64::consts::LN_2).sqrt(),
        }
    }
}

/// y = B·(1 − Σᵢ Cᵢ·L(x − x₀ᵢ; wᵢ)), parameters [B, x₀₁, w₁, C₁, x₀₂, …].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipModel {
    pub shape: Lineshape,
    pub n_dips: usize,
}

impl DipModel {
    pub fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.n_dips {
            let (x0, w, c) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k]);
            s += c * self.shape.value(x - x0, w);
        }
        p[0] * (1.0 - s)
    }
}

struct DipsFit<'a> {
    model: DipModel,
    u: &'a [f64],
}

impl Model for DipsFit<'_> {
    fn n_params(&self) -> usize {
        1 + 3 * self.model.n_dips
    }
    fn n_points(&self) -> usize {
        self.u.len()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        self.model.eval(self.u[i], p)
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let x = self.u[i];
        let b = p[0];
        let mut s = 0.0;
        for k in 0..self.model.n_dips {
            let (x0, w, c) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k]);
            let (l, dl_dx0, dl_dw) = self.model.shape.with_grad(x - x0, w);
            s += c * l;
            g[1 + 3 * k] = -b * c * dl_dx0;
            g[2 + 3 * k] = -b * c * dl_dw;
            g[3 + 3 * k] = -b * l;
        }
        g[0] = 1.0 - s;
    }
}

/// Lorentzian dips; see [`fit_dips`].
pub fn fit_lorentzian_dips(s: &Spectrum, n_dips: usize) -> Result<FitResult> {
    fit_dips(s, n_dips, Lineshape::Lorentzian)
}

/// Fit one or two resonance dips. Parameters are reported as `baseline`,
/// `center_k`, `width_k` and `contrast_k` (k = 1, 2 ordered by centre).
pub fn fit_dips(s: &Spectrum, n_dips: usize, shape: Lineshape) -> Result<FitResult> {
    if !(1..=2).contains(&n_dips) {
        return Err(Error::param("n_dips", "must be 1 or 2"));
    }
    let need = 5 * (3 * n_dips + 1);
    if s.len() < need {
        return Err(Error::Fit(format!(
            "{} points given, {need} needed for {n_dips} dip(s)",
            s.len()
        )));
    }
    let (xmin, xmax) = s
        .x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let xm = 0.5 * (xmin + xmax);
    let xs = (0.5 * (xmax - xmin)).max(f64::MIN_POSITIVE);
    let ys = s.y.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let u: Vec<f64> = s.x.iter().map(|x| (x - xm) / xs).collect();
    let v: Vec<f64> = s.y.iter().map(|y| y / ys).collect();
    let w = weights(&s.sigma, ys);

    let model = DipModel { shape, n_dips };
    let fit = DipsFit { model, u: &u };
    let mut starts = vec![initial_guess(&u, &v, n_dips, shape)];
    if n_dips == 2 {
        // overlapping pairs: split a single-dip fit symmetrically
        let one = DipsFit { model: DipModel { shape, n_dips: 1 }, u: &u };
        let q = levenberg_marquardt(&one, &v, &w, &initial_guess(&u, &v, 1, shape), LmOptions::default()).params;
        let hw = q[2].abs();
        for k in [0.5, 1.0, 1.5] {
            starts.push(vec![q[0], q[1] - k * hw, 0.6 * hw, q[3], q[1] + k * hw, 0.6 * hw, q[3]]);
        }
    }
    let sane = |p: &[f64]| (0..n_dips).all(|k| p[3 + 3 * k] > 0.0 && p[3 + 3 * k] < 1.0 && p[2 + 3 * k].abs() < 2.0);
    let out = starts
        .iter()
        .map(|p0| levenberg_marquardt(&fit, &v, &w, p0, LmOptions::default()))
        .min_by(|a, b| {
            let key = |o: &super::lm::LmOutcome| (!o.converged || !sane(&o.params), o.chi2);
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        })
        .expect("at least one start");
    let sig = scaled_sigmas(&out, u.len());
    let rms = residual_rms(&fit, &v, &out.params) * ys;

    let mut r = FitResult::empty(
        match shape {
            Lineshape::Lorentzian => "lorentzian_dips",
            Lineshape::Gaussian => "gaussian_dips",
        },
        &out,
        rms,
    );
    let p = &out.params;
    r.push("baseline", p[0] * ys, sig[0] * ys);
    let mut order: Vec<usize> = (0..n_dips).collect();
    order.sort_by(|&a, &b| p[1 + 3 * a].total_cmp(&p[1 + 3 * b]));
    for (k, &d) in order.iter().enumerate() {
        let j = 1 + 3 * d;
        r.push(&format!("center_{}", k + 1), p[j] * xs + xm, sig[j] * xs);
        r.push(&format!("width_{}", k + 1), p[j + 1].abs() * xs, sig[j + 1] * xs);
        r.push(&format!("contrast_{}", k + 1), p[j + 2], sig[j + 2]);
    }
    Ok(r)
}

fn initial_guess(u: &[f64], v: &[f64], n_dips: usize, shape: Lineshape) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let top = &sorted[(sorted.len() * 7) / 10..];
    let b = if top.is_empty() { median(v) } else { top.iter().sum::<f64>() / top.len() as f64 };
    let spacing = (u[u.len() - 1] - u[0]).abs() / (u.len() - 1).max(1) as f64;
    let mut p = vec![b];
    let mut taken: Vec<(f64, f64)> = Vec::new();
    for _ in 0..n_dips {
        // deepest point outside previously claimed dips
        let mut best: Option<usize> = None;
        for i in 0..u.len() {
            if taken.iter().any(|&(c, w)| (u[i] - c).abs() < 2.0 * w) {
                continue;
            }
            if best.map_or(true, |j| v[i] < v[j]) {
                best = Some(i);
            }
        }
        let i0 = best.unwrap_or(0);
        let c = (1.0 - v[i0] / b).max(1e-6);
        let half = b * (1.0 - c / 2.0);
        let mut lo = i0;
        while lo > 0 && v[lo] < half {
            lo -= 1;
        }
        let mut hi = i0;
        while hi + 1 < u.len() && v[hi] < half {
            hi += 1;
        }
        let hw = (0.5 * (u[hi] - u[lo]).abs()).max(spacing);
        let wpar = match shape {
            Lineshape::Lorentzian => hw,
            Lineshape::Gaussian => hw / (2.0 * std::f64::consts::LN_2).sqrt(),
        };
        taken.push((u[i0], hw.max(2.0 * spacing)));
        p.extend([u[i0], wpar, c]);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn single_dip_round_trip() {
        let m = DipModel { shape: Lineshape::Lorentzian, n_dips: 1 };
        let truth = [12.0e-12, 2870.0, 6.0, 0.0542];
        let x = grid(2820.0, 2920.0, 41);
        let y: Vec<f64> = x.iter().map(|&x| m.eval(x, &truth)).collect();
        let r = fit_lorentzian_dips(&Spectrum::unweighted(x, y).unwrap(), 1).unwrap();
        assert!(r.converged);
        for (name, t) in [("baseline", truth[0]), ("center_1", truth[1]), ("width_1", truth[2]), ("contrast_1", truth[3])] {
            assert!((r.value(name) / t - 1.0).abs() < 1e-6, "{name}: {} vs {t}", r.value(name));
        }
    }

    #[test]
    fn split_dips_round_trip() {
        let m = DipModel { shape: Lineshape::Lorentzian, n_dips: 2 };
        let truth = [1.0, 2858.79, 5.0, 0.0728, 2881.21, 5.0, 0.0719];
        let x = grid(2830.0, 2910.0, 81);
        let y: Vec<f64> = x.iter().map(|&x| m.eval(x, &truth)).collect();
        let r = fit_lorentzian_dips(&Spectrum::unweighted(x, y).unwrap(), 2).unwrap();
        assert!((r.value("center_2") - r.value("center_1") - 22.42).abs() < 1e-6);
        assert!((r.value("contrast_1") - 0.0728).abs() < 1e-8);
        assert!((r.value("contrast_2") - 0.0719).abs() < 1e-8);
    }

    #[test]
    fn gaussian_round_trip() {
        let m = DipModel { shape: Lineshape::Gaussian, n_dips: 1 };
        let truth = [5.0, 2870.0, 4.0, 0.1];
        let x = grid(2840.0, 2900.0, 61);
        let y: Vec<f64> = x.iter().map(|&x| m.eval(x, &truth)).collect();
        let r = fit_dips(&Spectrum::unweighted(x, y).unwrap(), 1, Lineshape::Gaussian).unwrap();
        assert!((r.value("width_1") / 4.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn flat_spectrum_has_no_significant_contrast() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 0.01).unwrap();
        let x = grid(2820.0, 2920.0, 41);
        let y: Vec<f64> = x.iter().map(|_| 1.0 + n.sample(&mut rng)).collect();
        let r = fit_lorentzian_dips(&Spectrum::new(x, y, vec![0.01; 41]).unwrap(), 1).unwrap();
        let (c, s) = r.get("contrast_1").unwrap();
        assert!(c.abs() <= 3.0 * s, "{c} ± {s}");
    }

    #[test]
    fn too_few_points() {
        let x = grid(0.0, 1.0, 10);
        let y = vec![1.0; 10];
        assert!(fit_lorentzian_dips(&Spectrum::unweighted(x, y).unwrap(), 1).is_err());
    }
}

//! Curve fitting and readout statistics.

mod dips;
mod echo;
mod exponential;
mod gaussian;
pub mod lm;
mod sinusoid;
pub mod stats;
mod threshold;

pub use dips::{fit_dips, fit_lorentzian_dips, DipModel, Lineshape};
pub use echo::{fit_echo, EchoOptions};
pub use exponential::{fit_double_exponential, fit_exponential, DoubleExpOptions};
pub use gaussian::{fit_gaussian_1d, fit_gaussian_2d};
pub use sinusoid::fit_damped_sinusoid;
pub use threshold::{poisson_mixture_threshold, poisson_pmf, ThresholdResult};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use lm::{LmOutcome, Model};

/// Flag set on every result whose optimiser did not converge.
pub const FLAG_UNRELIABLE: &str = "unreliable: did not converge";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Spectrum {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != sigma.len() {
            return Err(Error::param("spectrum", "x, y and sigma lengths differ"));
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::param("spectrum", "sigma must be positive and finite"));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::param("spectrum", "non-finite sample"));
        }
        Ok(Self { x, y, sigma })
    }

    /// Uniform unit weights.
    pub fn unweighted(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        Self::new(x, y, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
    pub flags: Vec<String>,
}

impl FitResult {
    /// (value, 1σ) for a named parameter.
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| (self.values[i], self.sigmas[i]))
    }

    pub fn value(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |v| v.0)
    }

    pub fn sigma(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |v| v.1)
    }

    pub fn has_flag(&self, prefix: &str) -> bool {
        self.flags.iter().any(|f| f.starts_with(prefix))
    }

    pub fn reliable(&self) -> bool {
        self.converged && !self.has_flag("unreliable")
    }

    pub(crate) fn push(&mut self, name: &str, value: f64, sigma: f64) {
        self.names.push(name.to_string());
        self.values.push(value);
        self.sigmas.push(sigma);
    }

    pub(crate) fn empty(model: &str, outcome: &LmOutcome, residual_rms: f64) -> Self {
        let mut flags = Vec::new();
        if !outcome.converged {
            flags.push(FLAG_UNRELIABLE.to_string());
        }
        Self {
            model: model.to_string(),
            names: Vec::new(),
            values: Vec::new(),
            sigmas: Vec::new(),
            residual_rms,
            converged: outcome.converged,
            iterations: outcome.iterations,
            flags,
        }
    }
}

/// 1σ from the inverse Hessian scaled by the residual variance χ²/(N−p).
pub(crate) fn scaled_sigmas(out: &LmOutcome, n_points: usize) -> Vec<f64> {
    let p = out.params.len();
    let s2 = if n_points > p {
        out.chi2 / (n_points - p) as f64
    } else {
        0.0
    };
    (0..p)
        .map(|i| {
            let d = out.inv_hessian[(i, i)];
            if d.is_infinite() {
                f64::INFINITY
            } else {
                (d.max(0.0) * s2).sqrt()
            }
        })
        .collect()
}

pub(crate) fn residual_rms<M: Model + ?Sized>(m: &M, y: &[f64], p: &[f64]) -> f64 {
    let n = m.n_points();
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = (0..n).map(|i| (y[i] - m.eval(i, p)).powi(2)).sum();
    (ss / n as f64).sqrt()
}

/// Fixes a subset of parameters of an inner model.
pub(crate) struct Masked<'a, M: Model> {
    pub inner: &'a M,
    pub full: Vec<f64>,
    pub free: Vec<usize>,
}

impl<M: Model> Masked<'_, M> {
    fn expand(&self, p: &[f64]) -> [f64; 8] {
        let mut buf = [0.0; 8];
        buf[..self.full.len()].copy_from_slice(&self.full);
        for (k, &i) in self.free.iter().enumerate() {
            buf[i] = p[k];
        }
        buf
    }

    pub fn full_params(&self, p: &[f64]) -> Vec<f64> {
        self.expand(p)[..self.full.len()].to_vec()
    }
}

impl<M: Model> Model for Masked<'_, M> {
    fn n_params(&self) -> usize {
        self.free.len()
    }
    fn n_points(&self) -> usize {
        self.inner.n_points()
    }
    fn eval(&self, i: usize, p: &[f64]) -> f64 {
        let full = self.expand(p);
        self.inner.eval(i, &full[..self.full.len()])
    }
    fn grad(&self, i: usize, p: &[f64], g: &mut [f64]) {
        let full = self.expand(p);
        let mut gf = [0.0; 8];
        let n = self.full.len();
        self.inner.grad(i, &full[..n], &mut gf[..n]);
        for (k, &j) in self.free.iter().enumerate() {
            g[k] = gf[j];
        }
    }
}

/// Median of a slice (NaN-free input).
pub(crate) fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub(crate) fn weights(sigma: &[f64], scale: f64) -> Vec<f64> {
    sigma.iter().map(|s| scale / s).collect()
}

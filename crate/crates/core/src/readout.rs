//! Electrode-generated photocurrent (EGPC) readout: baseline current, trap
//! release transient, amplifier filter, noise and integrated excess charge.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::check_range;
use crate::fit::{fit_double_exponential, DoubleExpOptions, Spectrum};
use crate::geometry::{DeviceLayout, LaserSpot, Point3};
use crate::traps::ReleaseProfile;
use crate::units::ELEMENTARY_CHARGE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplifierChain {
    /// Transimpedance sensitivity, A per V of output.
    pub sensitivity_a_per_v: f64,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    /// Input-referred white noise RMS per sample.
    pub noise_rms_a: f64,
}

impl Default for AmplifierChain {
    fn default() -> Self {
        Self {
            sensitivity_a_per_v: 20e-12,
            cutoff_hz: 37.0,
            sample_rate_hz: 1000.0,
            noise_rms_a: 50e-15,
        }
    }
}

impl AmplifierChain {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz.is_finite()) {
            return Err(Error::param("cutoff_hz", "must be positive"));
        }
        if !(self.sample_rate_hz > 2.0 * self.cutoff_hz) || !self.sample_rate_hz.is_finite() {
            return Err(Error::param("sample_rate_hz", "must exceed twice the filter cutoff"));
        }
        if !(self.sensitivity_a_per_v > 0.0) {
            return Err(Error::param("sensitivity_a_per_v", "must be positive"));
        }
        if !(self.noise_rms_a >= 0.0 && self.noise_rms_a.is_finite()) {
            return Err(Error::param("noise_rms_a", "must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Filter pole 2π·f_c in s⁻¹.
    pub fn omega(&self) -> f64 {
        TAU * self.cutoff_hz
    }

    pub fn time_constant_s(&self) -> f64 {
        1.0 / self.omega()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn to_volts(&self, current_a: f64) -> f64 {
        current_a / self.sensitivity_a_per_v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Saturation {
    /// V/(V + V₀)
    #[default]
    Hyperbolic,
    /// tanh(V/V₀)
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgpcModel {
    /// Baseline photocurrent per watt at full saturation and peak profile.
    pub photocurrent_per_watt: f64,
    pub v0_v: f64,
    pub saturation: Saturation,
    /// 1/e² radius of the edge-collection profile along the surface.
    pub lateral_width_um: f64,
    /// 1/e² depth of the edge-collection profile.
    pub axial_width_um: f64,
    /// Charges delivered to the contact per released hole.
    pub gain_collection: f64,
}

impl Default for EgpcModel {
    fn default() -> Self {
        Self {
            photocurrent_per_watt: 2e-8,
            v0_v: 1.0,
            saturation: Saturation::Hyperbolic,
            lateral_width_um: 1.0,
            axial_width_um: 2.0,
            gain_collection: 5000.0,
        }
    }
}

impl EgpcModel {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("photocurrent_per_watt", self.photocurrent_per_watt),
            ("v0_v", self.v0_v),
            ("lateral_width_um", self.lateral_width_um),
            ("axial_width_um", self.axial_width_um),
            ("gain_collection", self.gain_collection),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(n, "must be positive and finite"));
            }
        }
        Ok(())
    }

    /// Charge per released hole reaching the amplifier, in C.
    pub fn q_eff(&self) -> f64 {
        ELEMENTARY_CHARGE * self.gain_collection
    }

    /// Forward saturation factor, 0 for V ≤ 0.
    pub fn sat(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        match self.saturation {
            Saturation::Hyperbolic => v / (v + self.v0_v),
            Saturation::Tanh => (v / self.v0_v).tanh(),
        }
    }
}

/// Illuminated electrode and the edge-collection profile at `spot`.
pub fn edge_profile(spot: &LaserSpot, layout: &DeviceLayout, egpc: &EgpcModel) -> (usize, f64) {
    let idx = layout.nearest_electrode(&spot.center);
    (idx, edge_factor(spot, layout, idx, egpc))
}

/// Edge-collection profile of electrode `idx` at `spot`.
pub fn edge_factor(spot: &LaserSpot, layout: &DeviceLayout, idx: usize, egpc: &EgpcModel) -> f64 {
    let c = &spot.center;
    let d = layout.facing_edge(idx).distance(c.x, c.y);
    let wl = egpc.lateral_width_um;
    let wa = egpc.axial_width_um;
    (-2.0 * d * d / (wl * wl)).exp() * (-2.0 * c.z * c.z / (wa * wa)).exp()
}

/// Voltage across the illuminated contact, positive when it is forward biased.
pub fn forward_voltage(layout: &DeviceLayout, illuminated: usize, bias_v: f64) -> f64 {
    layout.potential(illuminated, bias_v) - layout.potential(1 - illuminated, bias_v)
}

/// Fraction of released-hole charge collected for a read at `spot`:
/// the edge profile when the illuminated contact is forward biased, else 0.
pub fn collection_factor(spot: &LaserSpot, layout: &DeviceLayout, bias_v: f64, egpc: &EgpcModel) -> Result<f64> {
    check_range("bias (V)", bias_v, -10.0, 10.0)?;
    let (idx, f) = edge_profile(spot, layout, egpc);
    Ok(if forward_voltage(layout, idx, bias_v) > 0.0 { f } else { 0.0 })
}

/// I₀ = G_e·P·sat(V)·edge_profile(spot).
pub fn baseline_current(
    power_w: f64,
    bias_v: f64,
    spot: &LaserSpot,
    layout: &DeviceLayout,
    egpc: &EgpcModel,
) -> Result<f64> {
    check_range("bias (V)", bias_v, -10.0, 10.0)?;
    if !(power_w >= 0.0 && power_w.is_finite()) {
        return Err(Error::param("read power", "must be finite and ≥ 0"));
    }
    let (idx, f) = edge_profile(spot, layout, egpc);
    let v = forward_voltage(layout, idx, bias_v);
    Ok(egpc.photocurrent_per_watt * power_w * egpc.sat(v) * f)
}

/// A current waveform starting at t = 0 with the filter at rest.
pub trait CurrentSource {
    /// Unfiltered current at t.
    fn ideal(&self, t: f64) -> f64;
    /// Filter output y' = ω(I − y), y(0) = 0, at sample k·dt for k < n.
    fn filtered(&self, n: usize, dt: f64, omega: f64) -> Vec<f64>;
}

/// Baseline step plus exponential terms, all switched on at t = 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalyticCurrent {
    pub baseline_a: f64,
    /// (amplitude A, rate s⁻¹)
    pub terms: Vec<(f64, f64)>,
}

impl AnalyticCurrent {
    pub fn new(baseline_a: f64, profile: &ReleaseProfile, q_c: f64) -> Self {
        let terms = profile
            .terms()
            .iter()
            .filter(|(a, _)| *a != 0.0)
            .map(|&(a, k)| (a * q_c, k))
            .collect();
        Self { baseline_a, terms }
    }

    /// Exact first-order filter response at t.
    pub fn filtered_at(&self, t: f64, omega: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let mut y = -self.baseline_a * (-omega * t).exp_m1();
        for &(a, k) in &self.terms {
            let d = omega - k;
            y += if (d * t).abs() < 1e-8 {
                a * omega * t * (-omega * t).exp()
            } else {
                // a·ω/(ω−k)·(e^{−kt} − e^{−ωt}) = a·ω/(ω−k)·e^{−kt}·(1 − e^{−(ω−k)t})
                -a * omega / d * (-k * t).exp() * (-d * t).exp_m1()
            };
        }
        y
    }

    /// ∫₀ᵀ of the ideal current.
    pub fn integral(&self, t: f64) -> f64 {
        self.baseline_a * t
            + self
                .terms
                .iter()
                .map(|&(a, k)| if k > 0.0 { -a / k * (-k * t).exp_m1() } else { a * t })
                .sum::<f64>()
    }
}

impl CurrentSource for AnalyticCurrent {
    fn ideal(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.baseline_a + self.terms.iter().map(|&(a, k)| a * (-k * t).exp()).sum::<f64>()
    }

    fn filtered(&self, n: usize, dt: f64, omega: f64) -> Vec<f64> {
        (0..n).map(|k| self.filtered_at(k as f64 * dt, omega)).collect()
    }
}

/// Zero-order-hold samples on a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCurrent {
    pub dt_s: f64,
    pub values: Vec<f64>,
}

impl CurrentSource for SampledCurrent {
    fn ideal(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let i = (t / self.dt_s).floor() as usize;
        self.values.get(i).copied().unwrap_or(0.0)
    }

    /// Evaluated on the source grid; `dt` must equal `dt_s`.
    fn filtered(&self, n: usize, dt: f64, omega: f64) -> Vec<f64> {
        debug_assert!((dt - self.dt_s).abs() <= 1e-12 * dt);
        lowpass_zoh(&self.values, self.dt_s, omega, n)
    }
}

/// Exact first-order response to a zero-order-hold input, sampled at k·dt.
pub fn lowpass_zoh(input: &[f64], dt: f64, omega: f64, n: usize) -> Vec<f64> {
    let alpha = (-omega * dt).exp();
    let mut y = 0.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(y);
        let x = input.get(k).copied().unwrap_or(0.0);
        y = alpha * y + (1.0 - alpha) * x;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub bias_v: f64,
    pub read_power_w: f64,
    pub wavelength_nm: f64,
    pub spot: Point3,
    pub seed: u64,
    /// Filter cutoff used to synthesize the trace; 0 when unknown.
    pub cutoff_hz: f64,
    /// Per-sample noise RMS; 0 when unknown or absent.
    pub noise_rms_a: f64,
    pub warnings: Vec<String>,
}

impl Default for TraceMeta {
    fn default() -> Self {
        Self {
            bias_v: 0.0,
            read_power_w: 0.0,
            wavelength_nm: 532.0,
            spot: Point3::new(0.0, 0.0, 0.0),
            seed: 0,
            cutoff_hz: 0.0,
            noise_rms_a: 0.0,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentTrace {
    pub start_s: f64,
    pub dt_s: f64,
    pub samples: Vec<f64>,
    pub meta: TraceMeta,
}

impl CurrentTrace {
    pub fn new(start_s: f64, dt_s: f64, samples: Vec<f64>, meta: TraceMeta) -> Result<Self> {
        let t = Self { start_s, dt_s, samples, meta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::param("trace", "needs at least 2 samples"));
        }
        if !(self.dt_s > 0.0) || !self.start_s.is_finite() {
            return Err(Error::param("trace", "sample interval must be positive"));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("trace", "non-finite sample"));
        }
        Ok(())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_s + i as f64 * self.dt_s
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.samples.len()).map(|i| self.time(i)).collect()
    }

    pub fn duration(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt_s
    }

    /// Header rows `# key=value`, then `t_s,current_A`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.meta;
        writeln!(w, "# bias_V={}", m.bias_v)?;
        writeln!(w, "# read_power_W={}", m.read_power_w)?;
        writeln!(w, "# wavelength_nm={}", m.wavelength_nm)?;
        writeln!(w, "# spot_um={},{},{}", m.spot.x, m.spot.y, m.spot.z)?;
        writeln!(w, "# seed={}", m.seed)?;
        writeln!(w, "# cutoff_Hz={}", m.cutoff_hz)?;
        writeln!(w, "# noise_rms_A={}", m.noise_rms_a)?;
        for warn in &m.warnings {
            writeln!(w, "# warning={warn}")?;
        }
        writeln!(w, "t_s,current_A")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(w, "{},{}", self.time(i), v)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut meta = TraceMeta::default();
        let mut t = Vec::new();
        let mut y = Vec::new();
        let mut header_seen = false;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("line {}: {what}", ln + 1));
            if let Some(kv) = line.strip_prefix('#') {
                let (k, v) = kv.trim().split_once('=').ok_or_else(|| bad("expected key=value"))?;
                let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("bad number"));
                match k.trim() {
                    "bias_V" => meta.bias_v = num(v)?,
                    "read_power_W" => meta.read_power_w = num(v)?,
                    "wavelength_nm" => meta.wavelength_nm = num(v)?,
                    "spot_um" => {
                        let c: Vec<f64> = v.split(',').map(num).collect::<Result<_>>()?;
                        if c.len() != 3 {
                            return Err(bad("spot needs 3 coordinates"));
                        }
                        meta.spot = Point3::new(c[0], c[1], c[2]);
                    }
                    "seed" => meta.seed = v.trim().parse().map_err(|_| bad("bad seed"))?,
                    "cutoff_Hz" => meta.cutoff_hz = num(v)?,
                    "noise_rms_A" => meta.noise_rms_a = num(v)?,
                    "warning" => meta.warnings.push(v.to_string()),
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                if line.replace(' ', "") != "t_s,current_A" {
                    return Err(bad("expected header t_s,current_A"));
                }
                header_seen = true;
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
            t.push(a.trim().parse::<f64>().map_err(|_| bad("bad time"))?);
            y.push(b.trim().parse::<f64>().map_err(|_| bad("bad current"))?);
        }
        if t.len() < 2 {
            return Err(Error::Parse("trace needs at least 2 samples".into()));
        }
        let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        for (i, ti) in t.iter().enumerate() {
            if (ti - (t[0] + i as f64 * dt)).abs() > 1e-6 * dt {
                return Err(Error::Parse(format!("sample {i}: times are not uniformly spaced")));
            }
        }
        CurrentTrace::new(t[0], dt, y, meta)
    }
}

/// Sample `source` through the chain for `duration_s`, adding seeded noise
/// after the filter.
pub fn synthesize(
    source: &dyn CurrentSource,
    chain: &AmplifierChain,
    duration_s: f64,
    seed: u64,
    mut meta: TraceMeta,
) -> Result<CurrentTrace> {
    chain.validate()?;
    let dt = chain.dt();
    if !(duration_s >= dt) || !duration_s.is_finite() {
        return Err(Error::param("duration", "must cover at least one sample interval"));
    }
    if duration_s < 3.0 * chain.time_constant_s() {
        meta.warnings.push(format!(
            "duration {duration_s} s is shorter than 3 filter time constants"
        ));
    }
    let n = (duration_s / dt + 1e-9).floor() as usize + 1;
    let mut y = source.filtered(n, dt, chain.omega());
    if chain.noise_rms_a > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, chain.noise_rms_a).map_err(|e| Error::param("noise", e.to_string()))?;
        for v in &mut y {
            *v += nd.sample(&mut rng);
        }
    }
    meta.seed = seed;
    meta.cutoff_hz = chain.cutoff_hz;
    meta.noise_rms_a = chain.noise_rms_a;
    CurrentTrace::new(0.0, dt, y, meta)
}

/// Trace for a trap release `r(t)` (holes/s) collected with `q_c` coulombs
/// per hole on top of baseline `baseline_a`.
pub fn synthesize_trace(
    release: &ReleaseProfile,
    q_c: f64,
    baseline_a: f64,
    chain: &AmplifierChain,
    duration_s: f64,
    seed: u64,
    meta: TraceMeta,
) -> Result<CurrentTrace> {
    let src = AnalyticCurrent::new(baseline_a, release, q_c);
    synthesize(&src, chain, duration_s, seed, meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    #[default]
    TailMean,
    DoubleExpOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QIntOptions {
    pub baseline: BaselineMethod,
    pub tail_fraction: f64,
    /// Integrate only over [start, end] seconds of the trace.
    pub window_s: Option<(f64, f64)>,
    pub check_settled: bool,
    /// Tail drift allowed relative to the peak excess current.
    pub settle_tolerance: f64,
}

impl Default for QIntOptions {
    fn default() -> Self {
        Self {
            baseline: BaselineMethod::TailMean,
            tail_fraction: 0.2,
            window_s: None,
            check_settled: true,
            settle_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QInt {
    pub charge_c: f64,
    pub sigma_c: f64,
    pub baseline_a: f64,
    pub noise_rms_a: f64,
}

/// Per-sample noise: from metadata, else from first differences of the tail.
fn noise_level(trace: &CurrentTrace, tail: &[f64]) -> f64 {
    if trace.meta.noise_rms_a > 0.0 {
        return trace.meta.noise_rms_a;
    }
    if trace.meta.cutoff_hz > 0.0 {
        // synthesized without noise
        return 0.0;
    }
    let d: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    if d.len() < 2 {
        return 0.0;
    }
    crate::fit::stats::std_dev(&d) / std::f64::consts::SQRT_2
}

/// Q_int = ∫ (I − baseline) dt with baseline from the final window, following
/// the filter's step response when the trace records its cutoff.
pub fn integrate_excess_charge(trace: &CurrentTrace, opts: &QIntOptions) -> Result<QInt> {
    trace.validate()?;
    if !(opts.tail_fraction > 0.0 && opts.tail_fraction < 1.0) {
        return Err(Error::param("tail_fraction", "must lie in (0, 1)"));
    }
    let n = trace.samples.len();
    let m = ((n as f64 * opts.tail_fraction).round() as usize).clamp(2, n);
    let tail_start = n - m;
    let y = &trace.samples;
    let tail = &y[tail_start..];
    let omega = TAU * trace.meta.cutoff_hz;
    let shape: Vec<f64> = (0..n)
        .map(|i| {
            let t = trace.time(i);
            if omega > 0.0 {
                if t <= 0.0 {
                    0.0
                } else {
                    -(-omega * t).exp_m1()
                }
            } else {
                1.0
            }
        })
        .collect();
    let sigma = noise_level(trace, tail);
    let tail_shape_mean = shape[tail_start..].iter().sum::<f64>() / m as f64;
    let baseline = match opts.baseline {
        BaselineMethod::TailMean => tail.iter().sum::<f64>() / m as f64 / tail_shape_mean,
        BaselineMethod::DoubleExpOffset => {
            let settle = if omega > 0.0 { 5.0 / omega } else { 0.0 };
            let idx: Vec<usize> = (0..n).filter(|&i| trace.time(i) >= settle).collect();
            let x: Vec<f64> = idx.iter().map(|&i| trace.time(i)).collect();
            let v: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let s = Spectrum::new(x, v, vec![sigma.max(1e-30); idx.len()])?;
            let f = fit_double_exponential(&s, DoubleExpOptions::default())?;
            f.value("offset")
        }
    };

    let excess: Vec<f64> = (0..n).map(|i| y[i] - baseline * shape[i]).collect();
    if opts.check_settled {
        check_settled(trace, &excess[tail_start..], tail_start, sigma, &excess, opts.settle_tolerance)?;
    }

    // trapezoid weights over the window
    let (lo, hi) = match opts.window_s {
        Some((a, b)) => {
            if !(b > a) {
                return Err(Error::param("window", "end must exceed start"));
            }
            let lo = (0..n).find(|&i| trace.time(i) >= a - 1e-12).unwrap_or(n);
            let hi = (0..n).rev().find(|&i| trace.time(i) <= b + 1e-12).unwrap_or(0);
            if hi <= lo {
                return Err(Error::param("window", "contains fewer than two samples"));
            }
            (lo, hi)
        }
        None => (0, n - 1),
    };
    let dt = trace.dt_s;
    let wt = |i: usize| {
        if i < lo || i > hi {
            0.0
        } else if i == lo || i == hi {
            0.5 * dt
        } else {
            dt
        }
    };
    let q: f64 = (lo..=hi).map(|i| wt(i) * excess[i]).sum();

    // Q is linear in the samples: cᵢ = wᵢ − [i ∈ tail]·Σⱼ wⱼ sⱼ / (m·s̄_tail)
    let var = match opts.baseline {
        BaselineMethod::TailMean => {
            let s_w: f64 = (lo..=hi).map(|i| wt(i) * shape[i]).sum();
            let g = s_w / (m as f64 * tail_shape_mean);
            (0..n)
                .map(|i| {
                    let c = wt(i) - if i >= tail_start { g } else { 0.0 };
                    c * c
                })
                .sum::<f64>()
        }
        // offset fitted over the whole read: treat it as a tail-free constant
        BaselineMethod::DoubleExpOffset => (lo..=hi).map(|i| wt(i).powi(2)).sum::<f64>(),
    };
    Ok(QInt {
        charge_c: q,
        sigma_c: sigma * var.sqrt(),
        baseline_a: baseline,
        noise_rms_a: sigma,
    })
}

fn check_settled(
    trace: &CurrentTrace,
    tail: &[f64],
    tail_start: usize,
    sigma: f64,
    excess: &[f64],
    tol: f64,
) -> Result<()> {
    let m = tail.len();
    let t: Vec<f64> = (0..m).map(|i| trace.time(tail_start + i)).collect();
    let mt = t.iter().sum::<f64>() / m as f64;
    let my = tail.iter().sum::<f64>() / m as f64;
    let sxx: f64 = t.iter().map(|v| (v - mt).powi(2)).sum();
    let sxy: f64 = t.iter().zip(tail).map(|(a, b)| (a - mt) * (b - my)).sum();
    let slope = sxy / sxx;
    let se = sigma / sxx.sqrt();
    let w = t[m - 1] - t[0];
    let peak = excess.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let drift = slope.abs() * w;
    // 5σ keeps false alarms below 1e-6 per read over long sweeps
    let allowed = (5.0 * se * w).max(tol * peak);
    if drift <= allowed {
        return Ok(());
    }
    // decay rate from the means of the tail thirds
    let third = m / 3;
    let mean = |a: usize, b: usize| tail[a..b].iter().sum::<f64>() / (b - a) as f64;
    let (m1, m2, m3) = (mean(0, third), mean(third, 2 * third), mean(2 * third, m));
    let r = (m1 - m2) / (m2 - m3);
    let factor = drift / allowed;
    let extra = if r.is_finite() && r > 1.0 {
        let k = r.ln() / (w / 3.0);
        factor.ln() / k
    } else {
        trace.duration()
    };
    Err(Error::NotSettled { extra_s: extra.max(trace.dt_s) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet() -> AmplifierChain {
        AmplifierChain { noise_rms_a: 0.0, ..Default::default() }
    }

    fn layout() -> DeviceLayout {
        DeviceLayout::default()
    }

    fn edge_spot(layout: &DeviceLayout, idx: usize) -> LaserSpot {
        let e = layout.facing_edge(idx);
        let x = 0.5 * (e.a.0 + e.b.0);
        let y = 0.5 * (e.a.1 + e.b.1);
        LaserSpot::new(Point3::new(x, y, 0.0), 532.0, 3.5e-3).unwrap()
    }

    #[test]
    fn reverse_biased_contact_gives_no_current() {
        let l = layout();
        let egpc = EgpcModel::default();
        let pos = l.positive_electrode(2.2).unwrap();
        let on = baseline_current(3.5e-3, 2.2, &edge_spot(&l, pos), &l, &egpc).unwrap();
        let off = baseline_current(3.5e-3, 2.2, &edge_spot(&l, 1 - pos), &l, &egpc).unwrap();
        assert!(on > 0.0);
        assert_eq!(off, 0.0);
        assert_eq!(baseline_current(3.5e-3, 0.0, &edge_spot(&l, pos), &l, &egpc).unwrap(), 0.0);
        assert!(baseline_current(3.5e-3, 10.5, &edge_spot(&l, pos), &l, &egpc).is_err());
    }

    #[test]
    fn baseline_is_linear_in_power() {
        let l = layout();
        let egpc = EgpcModel::default();
        let s = edge_spot(&l, 1);
        let a = baseline_current(1e-3, 3.0, &s, &l, &egpc).unwrap();
        let b = baseline_current(2e-3, 3.0, &s, &l, &egpc).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn profile_peaks_at_edge_surface() {
        let l = layout();
        let egpc = EgpcModel::default();
        let s = edge_spot(&l, 1);
        let (_, f0) = edge_profile(&s, &l, &egpc);
        assert!((f0 - 1.0).abs() < 1e-12);
        let mut off = s.clone();
        off.center = s.center.translated(0.5, 0.0, 0.0);
        let mut deep = s.clone();
        deep.center = s.center.translated(0.0, 0.0, 1.0);
        assert!(edge_profile(&off, &l, &egpc).1 < f0);
        assert!(edge_profile(&deep, &l, &egpc).1 < f0);
    }

    #[test]
    fn step_response_matches_first_order() {
        let src = AnalyticCurrent { baseline_a: 1.0, terms: vec![] };
        let t = 4.30e-3;
        let y = src.filtered_at(t, TAU * 37.0);
        assert!((y - 0.632).abs() < 1e-3);
        // discrete ZOH on a fine grid
        let dt = 1e-6;
        let n = (t / dt).round() as usize + 1;
        let z = lowpass_zoh(&vec![1.0; n], dt, TAU * 37.0, n);
        let exact = 1.0 - (-TAU * 37.0 * (n - 1) as f64 * dt).exp();
        assert!((z[n - 1] / exact - 1.0).abs() < 1e-6);
    }

    #[test]
    fn analytic_and_sampled_filters_agree() {
        let src = AnalyticCurrent { baseline_a: 0.0, terms: vec![(1.0, 5.0)] };
        let dt = 1e-5;
        let n = 20_000;
        let samples = SampledCurrent { dt_s: dt, values: (0..n).map(|k| src.ideal((k as f64 + 0.5) * dt)).collect() };
        let a = src.filtered(n, dt, 100.0);
        let b = samples.filtered(n, dt, 100.0);
        for k in (100..n).step_by(997) {
            assert!((a[k] - b[k]).abs() < 1e-4 * a[k].abs().max(1e-3), "{k}: {} {}", a[k], b[k]);
        }
    }

    #[test]
    fn zero_release_is_baseline_only() {
        let tr = synthesize_trace(&ReleaseProfile::empty(), 1.0, 1e-12, &AmplifierChain::default(), 5.0, 9, TraceMeta::default()).unwrap();
        let q = integrate_excess_charge(&tr, &QIntOptions::default()).unwrap();
        assert!(q.charge_c.abs() <= 3.0 * q.sigma_c, "{} ± {}", q.charge_c, q.sigma_c);
    }

    #[test]
    fn analytic_q_int_example() {
        // I = I₀ + A e^{−t/τ}, A = 10 pA, τ = 2 s, 60 s trace
        let src = AnalyticCurrent { baseline_a: 5e-12, terms: vec![(10e-12, 0.5)] };
        let tr = synthesize(&src, &quiet(), 60.0, 1, TraceMeta::default()).unwrap();
        let q = integrate_excess_charge(&tr, &QIntOptions::default()).unwrap();
        assert!((q.charge_c / 20e-12 - 1.0).abs() < 5e-3, "{}", q.charge_c);
    }

    #[test]
    fn short_trace_is_not_settled() {
        let src = AnalyticCurrent { baseline_a: 0.0, terms: vec![(10e-12, 0.5)] };
        let tr = synthesize(&src, &quiet(), 5.0, 1, TraceMeta::default()).unwrap();
        match integrate_excess_charge(&tr, &QIntOptions::default()) {
            Err(Error::NotSettled { extra_s }) => assert!(extra_s > 1.0, "{extra_s}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_duration_warns() {
        let src = AnalyticCurrent { baseline_a: 1.0, terms: vec![] };
        let tr = synthesize(&src, &quiet(), 0.005, 1, TraceMeta::default()).unwrap();
        assert!(!tr.meta.warnings.is_empty());
    }

    #[test]
    fn determinism_and_csv_round_trip() {
        let src = AnalyticCurrent { baseline_a: 1e-12, terms: vec![(2e-12, 1.0)] };
        let a = synthesize(&src, &AmplifierChain::default(), 2.0, 77, TraceMeta::default()).unwrap();
        let b = synthesize(&src, &AmplifierChain::default(), 2.0, 77, TraceMeta::default()).unwrap();
        assert_eq!(a.samples, b.samples);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let back = CurrentTrace::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.samples, a.samples);
        assert_eq!(back.meta.seed, 77);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "t_s,current_A\n0,1\n0.001,abc\n";
        let e = CurrentTrace::read_csv(std::io::Cursor::new(text)).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn double_exp_baseline_matches_tail_mean() {
        let src = AnalyticCurrent { baseline_a: 3e-12, terms: vec![(4e-12, 20.0), (10e-12, 0.5)] };
        let tr = synthesize(&src, &quiet(), 40.0, 1, TraceMeta::default()).unwrap();
        let a = integrate_excess_charge(&tr, &QIntOptions::default()).unwrap();
        let opts = QIntOptions { baseline: BaselineMethod::DoubleExpOffset, ..Default::default() };
        let b = integrate_excess_charge(&tr, &opts).unwrap();
        assert!((b.baseline_a / 3e-12 - 1.0).abs() < 1e-4, "{}", b.baseline_a);
        assert!((a.charge_c / b.charge_c - 1.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn filter_is_linear(xs in prop::collection::vec(-1.0f64..1.0, 50), ys in prop::collection::vec(-1.0f64..1.0, 50), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let w = TAU * 37.0;
            let dt = 1e-3;
            let fx = lowpass_zoh(&xs, dt, w, 50);
            let fy = lowpass_zoh(&ys, dt, w, 50);
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let fm = lowpass_zoh(&mix, dt, w, 50);
            for k in 0..50 {
                prop_assert!((fm[k] - (a * fx[k] + b * fy[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn reverse_bias_null(v in 0.1f64..10.0, p in 1e-4f64..1e-2) {
            let l = layout();
            let egpc = EgpcModel::default();
            let neg = 1 - l.positive_electrode(v).unwrap();
            let s = edge_spot(&l, neg);
            prop_assert_eq!(baseline_current(p, v, &s, &l, &egpc).unwrap(), 0.0);
            prop_assert_eq!(collection_factor(&s, &l, v, &egpc).unwrap(), 0.0);
        }
    }
}

//! Raster scans: PL maps, photoelectric Q_int maps, readout-position maps and
//! the single-shot hole-capture experiment.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::check_range;
use crate::fit::{self, stats, poisson_mixture_threshold, poisson_pmf, Spectrum, ThresholdResult};
use crate::geometry::Point3;
use crate::photophysics::{nv_minus_fraction, photo_steady_state, Beam, PhotoParams, Propagator, SpinManifold};
use crate::readout::{edge_factor, forward_voltage};
use crate::record::{PointResult, RunRecord};
use crate::sequence::protocols::{pump_segment, read_point, read_segment_at, run_points, PumpParams, ReadParams, Sweep};
use crate::sequence::{Protocol, ProtocolPlan, PulseSequence, SweepPoint, World};
use crate::transport::{hole_capture_rate, nv_population_decay, DistanceKernel, HoleCurrentField};
use crate::units::{LengthDim, Length, Power, Quantity, TimeDim, Voltage, Wavelength};
use crate::{seeds, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapUnit {
    Counts,
    Coulomb,
    Probability,
}

impl MapUnit {
    pub fn label(self) -> &'static str {
        match self {
            MapUnit::Counts => "counts",
            MapUnit::Coulomb => "C",
            MapUnit::Probability => "probability",
        }
    }
}

/// A value matrix over a rectangular grid. `values[j][i]` sits at `(x[i], y[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMap {
    pub name: String,
    pub unit: MapUnit,
    pub x_axis: String,
    pub y_axis: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    !v.is_empty() && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl ScanMap {
    pub fn new(name: impl Into<String>, unit: MapUnit, x: Vec<f64>, y: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self {
            name: name.into(),
            unit,
            x_axis: "x_um".into(),
            y_axis: "y_um".into(),
            x,
            y,
            values,
            metadata: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_axes(mut self, x_axis: &str, y_axis: &str) -> Self {
        self.x_axis = x_axis.into();
        self.y_axis = y_axis.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !strictly_increasing(&self.x) || !strictly_increasing(&self.y) {
            return Err(Error::param("map.grid", "axes must be non-empty and strictly increasing"));
        }
        if self.values.len() != self.y.len() || self.values.iter().any(|r| r.len() != self.x.len()) {
            return Err(Error::param("map.values", "matrix dimensions must match the grids"));
        }
        if self.unit == MapUnit::Probability && self.values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("map.values", "probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j][i]
    }

    /// (i, j) of the largest value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (j, row) in self.values.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        (best.0, best.1)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Mean over the outermost ring of pixels.
    pub fn border_mean(&self) -> f64 {
        let (nx, ny) = (self.x.len(), self.y.len());
        let mut s = 0.0;
        let mut n = 0usize;
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || i + 1 == nx || j + 1 == ny {
                    s += self.values[j][i];
                    n += 1;
                }
            }
        }
        s / n as f64
    }

    /// (peak − background)/background with the border mean as background.
    /// `None` when the background is not positive.
    pub fn contrast(&self) -> Option<f64> {
        let b = self.border_mean();
        (b > 0.0).then(|| (self.max() - b) / b)
    }

    /// Pixels strictly above all eight neighbours and above `floor`.
    pub fn local_maxima(&self, floor: f64) -> Vec<(usize, usize)> {
        let (nx, ny) = (self.x.len() as isize, self.y.len() as isize);
        let mut out = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let v = self.values[j as usize][i as usize];
                if v <= floor {
                    continue;
                }
                let mut peak = true;
                for dj in -1..=1 {
                    for di in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (di, dj) != (0, 0) && a >= 0 && b >= 0 && a < nx && b < ny && self.values[b as usize][a as usize] >= v {
                            peak = false;
                        }
                    }
                }
                if peak {
                    out.push((i as usize, j as usize));
                }
            }
        }
        out
    }

    /// Flattened (x, y, value) pixels.
    pub fn pixels(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut zs = Vec::new();
        for (j, row) in self.values.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                xs.push(self.x[i]);
                ys.push(self.y[j]);
                zs.push(v);
            }
        }
        (xs, ys, zs)
    }

    /// Matrix CSV: a header row of x values, then one row per y.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\\{}", self.y_axis, self.x_axis);
        for x in &self.x {
            s.push_str(&format!(",{x:e}"));
        }
        s.push('\n');
        for (y, row) in self.y.iter().zip(&self.values) {
            s.push_str(&format!("{y:e}"));
            for v in row {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }

    /// Values rescaled to 0–255 between the map minimum and maximum.
    pub fn to_png_data(&self) -> Vec<Vec<u8>> {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        self.values
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
                    .collect()
            })
            .collect()
    }

    pub fn png_data_csv(&self) -> String {
        let mut s = String::new();
        for row in self.to_png_data() {
            let r: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlParams {
    pub power: Power,
    pub wavelength: Wavelength,
    /// Counting time per pixel.
    pub dwell: crate::units::Time,
    /// Detected fraction of emitted photons.
    pub collection_efficiency: f64,
    /// Background count rate (counts/s).
    pub background_cps: f64,
}

impl Default for PlParams {
    fn default() -> Self {
        Self {
            power: Quantity::new(300e-6),
            wavelength: Quantity::new(532.0),
            dwell: Quantity::new(10e-3),
            collection_efficiency: 0.01,
            background_cps: 2000.0,
        }
    }
}

impl PlParams {
    fn validate(&self) -> Result<()> {
        check_range("pl.power (W)", self.power.value(), 0.0, 1.0)?;
        check_range("pl.dwell (s)", self.dwell.value(), 1e-9, 1e3)?;
        check_range("pl.collection_efficiency", self.collection_efficiency, 0.0, 1.0)?;
        check_range("pl.background_cps", self.background_cps, 0.0, 1e9)?;
        Ok(())
    }
}

/// Steady-state photon emission rate (s⁻¹) of an NV at the focus.
pub fn photon_rate(photo: &PhotoParams, manifold: SpinManifold, beam: Beam) -> Result<f64> {
    if beam.power_w == 0.0 {
        return Ok(0.0);
    }
    let x = photo_steady_state(photo, manifold, &[beam])?;
    let dt = 1e-3;
    let p = Propagator::new(photo, manifold, &[beam], dt)?;
    Ok(p.photons.dot(&x) / dt)
}

/// PL raster at focal depth `depth_um`; each pixel is Poisson-sampled from
/// Σ rate·spot_power_at(NV) + background.
pub fn acquire_pl_map(world: &World, x: &[f64], y: &[f64], depth_um: f64, pl: &PlParams, seed: u64) -> Result<ScanMap> {
    pl.validate()?;
    let (p, lam, dwell) = (pl.power.value(), pl.wavelength.value(), pl.dwell.value());
    let rate = photon_rate(&world.photo, world.manifold, Beam::new(p, lam))? * pl.collection_efficiency;
    let mut values = Vec::with_capacity(y.len());
    for (j, &yy) in y.iter().enumerate() {
        let mut row = Vec::with_capacity(x.len());
        for (i, &xx) in x.iter().enumerate() {
            let spot = world.spot(Point3::new(xx, yy, depth_um), lam, p)?;
            let signal: f64 = world.nvs.iter().map(|nv| crate::geometry::spot_power_at(&nv.position, &spot)).sum();
            let mean = (rate * signal + pl.background_cps) * dwell;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[j as u64, i as u64]));
            row.push(poisson(&mut rng, mean) as f64);
        }
        values.push(row);
    }
    let mut m = ScanMap::new("pl", MapUnit::Counts, x.to_vec(), y.to_vec(), values)?;
    m.metadata.insert("depth_um".into(), depth_um.into());
    m.metadata.insert("peak_rate_cps".into(), rate.into());
    m.metadata.insert("seed".into(), seed.into());
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageScanParams {
    pub x: Sweep<LengthDim>,
    pub y: Sweep<LengthDim>,
    /// Focal depth of the scan plane.
    pub depth: Length,
    pub pump: PumpParams,
    pub read: ReadParams,
    pub pl: PlParams,
}

impl Default for ImageScanParams {
    fn default() -> Self {
        Self {
            x: Sweep::linear(-1.0, 1.0, 21),
            y: Sweep::linear(-1.0, 1.0, 21),
            depth: Quantity::new(4.0),
            pump: PumpParams::default(),
            read: ReadParams { duration: Quantity::new(10.0), ..ReadParams::default() },
            pl: PlParams::default(),
        }
    }
}

/// One point per pixel: pump at the pixel, then read at the fixed read spot.
pub fn build_image_scan(protocol: &Protocol, p: &ImageScanParams, world: &World) -> Result<ProtocolPlan> {
    let xs = p.x.values("image_scan.x")?;
    let ys = p.y.values("image_scan.y")?;
    if !strictly_increasing(&xs) || !strictly_increasing(&ys) {
        return Err(Error::param("image_scan.x/y", "grids must be strictly increasing"));
    }
    let at = read_point(world, &p.read);
    let read = read_segment_at(world, &p.read, at, p.read.power.value(), p.read.wavelength.value())?;
    let mut plan = ProtocolPlan::new(protocol, "x", "um");
    for &y in &ys {
        for &x in &xs {
            let px = Point3::new(x, y, p.depth.value());
            let pump = pump_segment(world, px, p.pump.power.value(), p.pump.duration.value())?;
            plan.points.push(SweepPoint {
                value: x,
                variant: String::new(),
                sequence: PulseSequence::new(vec![pump, read.clone()]),
                coords: Some(px),
            });
        }
    }
    Ok(plan)
}

fn distinct(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut d: Vec<f64> = v.collect();
    d.sort_by(|a, b| a.total_cmp(b));
    d.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
    d
}

/// Q_int map over the coordinates recorded with each point. The map spans
/// the first two of x, y, z that vary; a single varying axis gives one row.
pub fn readout_scan_map(rec: &RunRecord) -> Result<ScanMap> {
    let coord = |p: &PointResult, k: &str| {
        p.extra
            .get(k)
            .copied()
            .ok_or_else(|| Error::param("map", format!("point {} has no `{k}` coordinate", p.index)))
    };
    let mut axes = Vec::new();
    for k in ["x_um", "y_um", "z_um"] {
        let mut vals = Vec::with_capacity(rec.points.len());
        for p in &rec.points {
            vals.push(coord(p, k)?);
        }
        axes.push((k, distinct(vals.into_iter())));
    }
    let varying: Vec<usize> = (0..3).filter(|&a| axes[a].1.len() > 1).collect();
    let (ax, ay) = match varying.as_slice() {
        [] => (0, 1),
        [a] => (*a, if *a == 0 { 1 } else { 0 }),
        [a, b, ..] => (*a, *b),
    };
    let (xs, ys) = (axes[ax].1.clone(), axes[ay].1.clone());
    let mut values = vec![vec![0.0; xs.len()]; ys.len()];
    let mut seen = vec![vec![false; xs.len()]; ys.len()];
    let find = |grid: &[f64], v: f64| grid.iter().position(|g| (g - v).abs() <= 1e-9 * (1.0 + v.abs()));
    for p in &rec.points {
        let i = find(&xs, coord(p, axes[ax].0)?).expect("coordinate on grid");
        let j = find(&ys, coord(p, axes[ay].0)?).expect("coordinate on grid");
        values[j][i] = p.value;
        seen[j][i] = true;
    }
    if seen.iter().flatten().any(|s| !s) {
        return Err(Error::param("map", "points do not cover the full grid"));
    }
    let map = ScanMap::new(format!("{}_qint", rec.protocol), MapUnit::Coulomb, xs, ys, values)?;
    Ok(map.with_axes(axes[ax].0, axes[ay].0))
}

pub fn run_image_scan(plan: &ProtocolPlan, p: &ImageScanParams, world: &World, master: u64, block: u64) -> Result<RunRecord> {
    let (points, _) = run_points(plan, world, master, block, false)?;
    let mut rec = plan_record(plan, master, block);
    rec.points = points;
    let qmap = readout_scan_map(&rec)?;
    let pl = acquire_pl_map(world, &qmap.x, &qmap.y, p.depth.value(), &p.pl, seeds::derive(master, &[block, u64::MAX - 1]))?;
    let (qi, qj) = qmap.argmax();
    let (pi, pj) = pl.argmax();
    rec.derived.insert("maxima_offset_px".into(), (qi.abs_diff(pi).max(qj.abs_diff(pj))) as f64);
    for (name, m) in [("pl", &pl), ("qint", &qmap)] {
        if let Some(c) = m.contrast() {
            rec.derived.insert(format!("{name}_contrast"), c);
        }
    }
    rec.warnings.push("imaging contrast (peak − background)/background is model-dependent".into());
    if world.nvs.len() == 1 {
        let mut fwhm = [0.0; 2];
        for (k, (name, m)) in [("pl", &pl), ("qint", &qmap)].into_iter().enumerate() {
            let (x, y, z) = m.pixels();
            let f = fit::fit_gaussian_2d(&x, &y, &z)?;
            fwhm[k] = f.value("fwhm");
            rec.derived.insert(format!("{name}_fwhm_um"), fwhm[k]);
            rec.fits.insert(format!("{name}_spot"), f);
        }
        rec.derived.insert("fwhm_ratio".into(), fwhm[1] / fwhm[0]);
    }
    rec.maps.push(pl);
    rec.maps.push(qmap);
    Ok(rec)
}

fn plan_record(plan: &ProtocolPlan, master: u64, block: u64) -> RunRecord {
    let mut rec = RunRecord::new(plan.protocol.kind().name(), &plan.sweep_name, &plan.sweep_unit);
    rec.metadata.insert("master_seed".into(), master.into());
    rec.metadata.insert("block".into(), block.into());
    rec.warnings.extend(plan.notes.iter().cloned());
    rec
}

/// Photon statistics of the single-shot charge probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChargeReadoutModel {
    /// NV⁻ photon rate under the probe (counts/s).
    pub rate_minus_cps: f64,
    pub rate_zero_cps: f64,
    pub background_cps: f64,
    pub duration_s: f64,
    /// Fixed threshold; the balanced-accuracy optimum when absent.
    pub threshold: Option<u64>,
}

impl Default for ChargeReadoutModel {
    fn default() -> Self {
        Self {
            rate_minus_cps: 400.0,
            rate_zero_cps: 100.0,
            background_cps: 0.0,
            duration_s: 50e-3,
            threshold: None,
        }
    }
}

/// Classification rule with its per-state hit rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeClassifier {
    pub rule: ThresholdResult,
    /// P(classified NV⁻ | NV⁻).
    pub f_minus: f64,
    /// P(classified NV⁰ | NV⁰).
    pub f_zero: f64,
}

impl ChargeClassifier {
    /// Invert an observed NV⁻-classified fraction to a population.
    pub fn invert(&self, observed: f64) -> f64 {
        (observed - (1.0 - self.f_zero)) / (self.f_minus + self.f_zero - 1.0)
    }
}

impl ChargeReadoutModel {
    pub fn means(&self) -> (f64, f64) {
        (
            (self.rate_minus_cps + self.background_cps) * self.duration_s,
            (self.rate_zero_cps + self.background_cps) * self.duration_s,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_minus_cps > self.rate_zero_cps && self.rate_zero_cps >= 0.0) {
            return Err(Error::param("probe.rates", "need r₋ > r₀ ≥ 0"));
        }
        check_range("probe.background_cps", self.background_cps, 0.0, 1e9)?;
        check_range("probe.duration_s", self.duration_s, 1e-9, 1e3)?;
        if let Some(t) = self.threshold {
            let (m, z) = self.means();
            if !((t as f64) >= z.floor() && (t as f64) < m) {
                return Err(Error::param("probe.threshold", format!("must lie between the means {z} and {m}")));
            }
        }
        Ok(())
    }

    pub fn classifier(&self) -> Result<ChargeClassifier> {
        self.validate()?;
        let (m, z) = self.means();
        let mut rule = poisson_mixture_threshold(m, z.max(1e-12), 0.5)?;
        if let Some(t) = self.threshold {
            rule.threshold = Some(t);
        }
        let t = rule.threshold.unwrap_or(0) as usize;
        let cdf = |mean: f64| -> f64 {
            if mean <= 1e-12 {
                1.0
            } else {
                poisson_pmf(mean, t as u64).iter().sum::<f64>().min(1.0)
            }
        };
        let f_minus = 1.0 - cdf(m);
        let f_zero = cdf(z);
        rule.fidelity = 0.5 * (f_minus + f_zero);
        Ok(ChargeClassifier { rule, f_minus, f_zero })
    }
}

/// One probe shot: photon counts and the NV⁻ verdict.
pub fn single_shot_charge_readout<R: Rng + ?Sized>(is_minus: bool, model: &ChargeReadoutModel, rng: &mut R) -> Result<(u64, bool)> {
    let c = model.classifier()?;
    let (m, z) = model.means();
    let n = poisson(rng, if is_minus { m } else { z });
    Ok((n, c.rule.is_minus(n)))
}

/// NV⁻ fraction after photo-steady preparation at `wavelength_nm`.
pub fn prepared_minus_fraction(photo: &PhotoParams, manifold: SpinManifold, power_w: f64, wavelength_nm: f64) -> Result<f64> {
    let x = photo_steady_state(photo, manifold, &[Beam::new(power_w, wavelength_nm)])?;
    Ok(nv_minus_fraction(&x, manifold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreparationStats {
    pub shots: usize,
    pub classified_minus: f64,
    /// Population after inverting the readout fidelities.
    pub estimated_minus: f64,
    pub sigma: f64,
}

/// Repeated prepare-and-probe of an NV whose NV⁻ probability is `p_minus`.
pub fn preparation_statistics(p_minus: f64, model: &ChargeReadoutModel, shots: usize, seed: u64) -> Result<PreparationStats> {
    check_range("p_minus", p_minus, 0.0, 1.0)?;
    if shots == 0 {
        return Err(Error::param("shots", "must be ≥ 1"));
    }
    let c = model.classifier()?;
    let (m, z) = model.means();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..shots {
        let minus = rng.random::<f64>() < p_minus;
        if c.rule.is_minus(poisson(&mut rng, if minus { m } else { z })) {
            hits += 1;
        }
    }
    let q = hits as f64 / shots as f64;
    let d = c.f_minus + c.f_zero - 1.0;
    Ok(PreparationStats {
        shots,
        classified_minus: q,
        estimated_minus: c.invert(q),
        sigma: (q * (1.0 - q) / shots as f64).sqrt() / d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prepump {
    Off,
    On,
    /// Both variants with shared random numbers.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoleCaptureParams {
    /// NVs to probe; all when empty.
    pub nvs: Vec<String>,
    pub bias: Voltage,
    pub contact_power: Power,
    pub contact_wavelength: Wavelength,
    /// Contact-illumination spots; four along the injecting edge when absent.
    pub spots: Option<Vec<[Length; 3]>>,
    pub times: Sweep<TimeDim>,
    pub shots: usize,
    pub probe: ChargeReadoutModel,
    pub kernel: DistanceKernel,
    pub prepump: Prepump,
    /// Bank fill reached by the prepump, as a fraction of capacity.
    pub prepump_fill: f64,
    /// Green preparation power.
    pub prepare_power: Power,
}

impl Default for HoleCaptureParams {
    fn default() -> Self {
        Self {
            nvs: Vec::new(),
            bias: Quantity::new(1.0),
            contact_power: Quantity::new(3.5e-3),
            contact_wavelength: Quantity::new(532.0),
            spots: None,
            times: Sweep::linear(0.0, 1.0, 11),
            shots: 2000,
            probe: ChargeReadoutModel::default(),
            kernel: DistanceKernel::Hyperbolic { d0_um: 10.0 },
            prepump: Prepump::Both,
            prepump_fill: 0.5,
            prepare_power: Quantity::new(3.5e-3),
        }
    }
}

struct HoleCaptureSetup {
    nvs: Vec<usize>,
    spots: Vec<Point3>,
    times: Vec<f64>,
    variants: Vec<(&'static str, bool)>,
}

fn hole_capture_setup(p: &HoleCaptureParams, world: &World) -> Result<HoleCaptureSetup> {
    check_range("hole_capture.bias (V)", p.bias.value(), -10.0, 10.0)?;
    check_range("hole_capture.contact_power (W)", p.contact_power.value(), 0.0, 1.0)?;
    check_range("hole_capture.prepump_fill", p.prepump_fill, 0.0, 1.0)?;
    p.kernel.validate("hole_capture.kernel")?;
    p.probe.validate()?;
    if p.shots == 0 {
        return Err(Error::param("hole_capture.shots", "must be ≥ 1"));
    }
    let times = p.times.values("hole_capture.times")?;
    if times.iter().any(|t| *t < 0.0) {
        return Err(Error::param("hole_capture.times", "must be ≥ 0"));
    }
    let nvs = if p.nvs.is_empty() {
        (0..world.nvs.len()).collect()
    } else {
        p.nvs.iter().map(|id| world.nv_index(id)).collect::<Result<Vec<_>>>()?
    };
    if nvs.is_empty() {
        return Err(Error::param("hole_capture.nvs", "the NV registry is empty"));
    }
    let spots = match &p.spots {
        Some(s) if !s.is_empty() => s.iter().map(|[x, y, z]| Point3::new(x.value(), y.value(), z.value())).collect(),
        Some(_) => return Err(Error::param("hole_capture.spots", "must not be empty")),
        None => {
            let idx = world
                .layout
                .positive_electrode(p.bias.value())
                .ok_or_else(|| Error::param("hole_capture.bias", "no electrode injects at zero bias"))?;
            let e = world.layout.facing_edge(idx);
            [0.2, 0.4, 0.6, 0.8]
                .iter()
                .map(|f| Point3::new(e.a.0 + f * (e.b.0 - e.a.0), e.a.1 + f * (e.b.1 - e.a.1), 0.0))
                .collect()
        }
    };
    let variants = match p.prepump {
        Prepump::Off => vec![("unpumped", false)],
        Prepump::On => vec![("prepumped", true)],
        Prepump::Both => vec![("unpumped", false), ("prepumped", true)],
    };
    Ok(HoleCaptureSetup { nvs, spots, times, variants })
}

/// Validates the experiment; the shots are drawn when it runs.
pub fn build_hole_capture(protocol: &Protocol, p: &HoleCaptureParams, world: &World) -> Result<ProtocolPlan> {
    let s = hole_capture_setup(p, world)?;
    let mut plan = ProtocolPlan::new(protocol, "illumination_time", "s");
    plan.notes.push(format!(
        "{} NVs × {} spots × {} times × {} shots",
        s.nvs.len(),
        s.spots.len(),
        s.times.len(),
        p.shots
    ));
    Ok(plan)
}

/// Hole current injected by contact illumination at `spot`.
fn contact_current(world: &World, p: &HoleCaptureParams, spot: &Point3) -> Result<(usize, f64, f64)> {
    let ls = world.spot(*spot, p.contact_wavelength.value(), p.contact_power.value())?;
    let idx = world.layout.nearest_electrode(spot);
    let f = edge_factor(&ls, &world.layout, idx, &world.egpc);
    let v = forward_voltage(&world.layout, idx, p.bias.value());
    Ok((idx, f, world.egpc.photocurrent_per_watt * p.contact_power.value() * world.egpc.sat(v) * f))
}

pub fn run_hole_capture(plan: &ProtocolPlan, p: &HoleCaptureParams, world: &World, master: u64, block: u64) -> Result<RunRecord> {
    let s = hole_capture_setup(p, world)?;
    let classifier = p.probe.classifier()?;
    let (m_minus, m_zero) = p.probe.means();
    let p0 = prepared_minus_fraction(&world.photo, world.manifold, p.prepare_power.value(), 532.0)?;
    let mut rec = plan_record(plan, master, block);
    rec.value_name = "p_minus".into();
    rec.value_unit = "probability".into();
    rec.metadata.insert("threshold".into(), classifier.rule.threshold.into());
    rec.metadata.insert("fidelity".into(), classifier.rule.fidelity.into());
    rec.metadata.insert("prepared_minus".into(), p0.into());
    let n = p.shots as f64;
    let d = classifier.f_minus + classifier.f_zero - 1.0;
    if !(d > 0.0) {
        return Err(Error::param("hole_capture.probe", "readout cannot distinguish the charge states"));
    }
    let mut rates: BTreeMap<(&str, usize, usize), f64> = BTreeMap::new();
    for (si, spot) in s.spots.iter().enumerate() {
        let (idx, f, current) = contact_current(world, p, spot)?;
        let field = HoleCurrentField::new(&world.layout, p.bias.value(), current, p.kernel)?;
        let mut bank = world.banks[idx].emptied();
        bank.fast.occupancy = p.prepump_fill * bank.fast.capacity;
        bank.slow.occupancy = p.prepump_fill * bank.slow.capacity;
        let power_at_edge = p.contact_power.value() * f;
        let tmax = s.times.iter().cloned().fold(0.0, f64::max).max(1e-9);
        let (_, release) = bank.discharge(power_at_edge, p.contact_wavelength.value(), tmax)?;
        let mut maps: Vec<Vec<Vec<f64>>> = vec![Vec::new(); s.variants.len()];
        for &nv in &s.nvs {
            let rec_nv = &world.nvs[nv];
            let rate = hole_capture_rate(rec_nv, &field);
            let mut rows = vec![Vec::with_capacity(s.times.len()); s.variants.len()];
            let mut series: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = vec![Default::default(); s.variants.len()];
            for (ti, &t) in s.times.iter().enumerate() {
                let truth: Vec<f64> = s
                    .variants
                    .iter()
                    .map(|&(_, pumped)| {
                        let extra = if pumped { field.extra_dose(rec_nv, release.released(t) * world.egpc.q_eff()) } else { 0.0 };
                        nv_population_decay(p0, rate, t, extra)
                    })
                    .collect::<Result<_>>()?;
                // the same draws serve every variant
                let seed = seeds::derive(master, &[block, si as u64, nv as u64, ti as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut hits = vec![0usize; s.variants.len()];
                for _ in 0..p.shots {
                    let u: f64 = rng.random();
                    let c_minus = classifier.rule.is_minus(poisson(&mut rng, m_minus));
                    let c_zero = classifier.rule.is_minus(poisson(&mut rng, m_zero));
                    for (k, &pt) in truth.iter().enumerate() {
                        if if u < pt { c_minus } else { c_zero } {
                            hits[k] += 1;
                        }
                    }
                }
                for (k, &(name, _)) in s.variants.iter().enumerate() {
                    let q = hits[k] as f64 / n;
                    let sigma = (q * (1.0 - q)).max(1.0 / n) / n;
                    let est = classifier.invert(q);
                    let mut extra = BTreeMap::new();
                    extra.insert("p_minus_true".into(), truth[k]);
                    extra.insert("p_minus_est".into(), est);
                    extra.insert("spot".into(), si as f64);
                    extra.insert("nv".into(), nv as f64);
                    rec.points.push(PointResult {
                        index: rec.points.len(),
                        sweep_value: t,
                        variant: format!("{name}/s{si}/{}", rec_nv.id),
                        value: q,
                        sigma: sigma.sqrt(),
                        seed,
                        extra,
                    });
                    rows[k].push(q);
                    series[k].0.push(t);
                    series[k].1.push(est);
                    series[k].2.push(sigma.sqrt() / d);
                }
            }
            for (k, &(name, _)) in s.variants.iter().enumerate() {
                let (x, y, sg) = std::mem::take(&mut series[k]);
                let fit = fit::fit_exponential(&Spectrum::new(x, y, sg)?, false)?;
                rates.insert((name, si, nv), fit.value("rate"));
                rec.derived.insert(format!("rate_{name}_s{si}_{}", rec_nv.id), fit.value("rate"));
                rec.derived.insert(format!("model_rate_s{si}_{}", rec_nv.id), rate);
                rec.fits.insert(format!("decay_{name}_s{si}_{}", rec_nv.id), fit);
                maps[k].push(std::mem::take(&mut rows[k]));
            }
        }
        for (k, &(name, _)) in s.variants.iter().enumerate() {
            let ys: Vec<f64> = (0..s.nvs.len()).map(|i| i as f64).collect();
            let mut m = ScanMap::new(format!("p_minus_{name}_s{si}"), MapUnit::Probability, s.times.clone(), ys, std::mem::take(&mut maps[k]))?
                .with_axes("time_s", "nv_index");
            let ids: Vec<serde_json::Value> = s.nvs.iter().map(|&i| world.nvs[i].id.clone().into()).collect();
            m.metadata.insert("nvs".into(), ids.into());
            m.metadata.insert("spot_um".into(), vec![spot.x, spot.y, spot.z].into());
            rec.maps.push(m);
        }
    }
    let (name, _) = s.variants[0];
    let mut r = Vec::new();
    let mut edge = Vec::new();
    let mut radial = Vec::new();
    let geometry = HoleCurrentField::new(&world.layout, p.bias.value(), 1.0, p.kernel)?;
    for (si, spot) in s.spots.iter().enumerate() {
        for &nv in &s.nvs {
            let pos = &world.nvs[nv].position;
            r.push(rates[&(name, si, nv)]);
            edge.push(geometry.injector_distance(pos));
            radial.push(pos.lateral_distance(spot));
        }
    }
    if r.len() > 2 {
        rec.derived.insert("spearman_edge".into(), stats::spearman(&r, &edge));
        rec.derived.insert("spearman_radial".into(), stats::spearman(&r, &radial));
    }
    if s.variants.len() == 2 {
        let ok = rates
            .iter()
            .filter(|((v, _, _), _)| *v == "unpumped")
            .all(|(&(_, si, nv), &ru)| rates[&("prepumped", si, nv)] >= ru);
        rec.derived.insert("prepumped_not_slower".into(), if ok { 1.0 } else { 0.0 });
    }
    Ok(rec)
}

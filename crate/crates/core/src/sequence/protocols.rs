//! Protocol builders and the sweep runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{execute, ExecOptions, PulseEvent, PulseSequence, Segment, World};
use crate::error::check_range;
use crate::fit::{self, DoubleExpOptions, EchoOptions, Lineshape, Spectrum};
use crate::geometry::Point3;
use crate::imaging::{self, HoleCaptureParams, ImageScanParams};
use crate::readout::{BaselineMethod, CurrentTrace};
use crate::record::{PointResult, RunRecord};
use crate::units::{Dimension, Frequency, FrequencyDim, Length, LengthDim, Power, PowerDim, Quantity, Time, TimeDim, Voltage, Wavelength, WavelengthDim};
use crate::{seeds, Error, Result};

/// A swept quantity: either `start`/`stop`/`points` (linear) or an explicit
/// `values` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "")]
pub struct Sweep<D: Dimension> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Quantity<D>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Quantity<D>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Quantity<D>>>,
}

impl<D: Dimension> Sweep<D> {
    pub fn linear(start: f64, stop: f64, points: usize) -> Self {
        Self {
            start: Some(Quantity::new(start)),
            stop: Some(Quantity::new(stop)),
            points: Some(points),
            values: None,
        }
    }

    pub fn list(values: &[f64]) -> Self {
        Self {
            start: None,
            stop: None,
            points: None,
            values: Some(values.iter().map(|&v| Quantity::new(v)).collect()),
        }
    }

    /// Log-spaced list.
    pub fn geometric(start: f64, stop: f64, points: usize) -> Self {
        let r = (stop / start).ln();
        let v: Vec<f64> = (0..points).map(|i| start * (r * i as f64 / (points - 1) as f64).exp()).collect();
        Self::list(&v)
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = match (&self.values, self.start, self.stop, self.points) {
            (Some(v), None, None, None) => v.iter().map(|q| q.value()).collect::<Vec<_>>(),
            (None, Some(a), Some(b), Some(n)) => {
                if n == 0 {
                    return Err(Error::param(name, "sweep needs at least one point"));
                }
                if n == 1 {
                    vec![a.value()]
                } else {
                    let (a, b) = (a.value(), b.value());
                    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
                }
            }
            _ => {
                return Err(Error::param(
                    name,
                    "give either `values` or all of `start`, `stop` and `points`",
                ))
            }
        };
        if v.is_empty() {
            return Err(Error::param(name, "sweep is empty"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::param(name, "sweep values must be finite"));
        }
        Ok(v)
    }
}

fn power(v: f64) -> Power {
    Quantity::new(v)
}
fn time(v: f64) -> Time {
    Quantity::new(v)
}

/// Laser timings shared by the spin-resolved cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleParams {
    pub init_power: Power,
    pub init_duration: Time,
    /// Dark time between the polarising pulse and the microwave block.
    pub settle: Time,
    pub pi_duration: Time,
    pub ion_power: Power,
    pub ion_duration: Time,
    /// Dark time closing each cycle.
    pub gap: Time,
    /// Total pumping time; the cycle count is floor(budget / period).
    pub budget: Time,
    /// Explicit cycle count, overriding the budget.
    pub cycles: Option<u64>,
    pub wavelength: Wavelength,
}

impl Default for CycleParams {
    fn default() -> Self {
        Self {
            init_power: power(300e-6),
            init_duration: time(2.5e-6),
            settle: time(2e-6),
            pi_duration: time(100e-9),
            ion_power: power(3.5e-3),
            ion_duration: time(500e-9),
            gap: time(1e-6),
            budget: time(1.5),
            cycles: None,
            wavelength: Quantity::new(532.0),
        }
    }
}

impl CycleParams {
    fn validate(&self) -> Result<()> {
        check_range("cycle.init_power (W)", self.init_power.value(), 0.0, 1.0)?;
        check_range("cycle.ion_power (W)", self.ion_power.value(), 0.0, 1.0)?;
        for (n, v) in [
            ("cycle.init_duration (s)", self.init_duration.value()),
            ("cycle.pi_duration (s)", self.pi_duration.value()),
            ("cycle.ion_duration (s)", self.ion_duration.value()),
            ("cycle.budget (s)", self.budget.value()),
        ] {
            check_range(n, v, 1e-12, 1e5)?;
        }
        check_range("cycle.gap (s)", self.gap.value(), 0.0, 1.0)?;
        check_range("cycle.settle (s)", self.settle.value(), 0.0, 1.0)?;
        Ok(())
    }

    /// Period of the reference cycle with a π pulse.
    pub fn reference_period(&self) -> f64 {
        self.init_duration.value() + self.settle.value() + self.pi_duration.value() + self.ion_duration.value() + self.gap.value()
    }

    pub fn cycle_count(&self) -> u64 {
        self.cycles
            .unwrap_or_else(|| (self.budget.value() / self.reference_period() * (1.0 + 1e-12)).floor() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadParams {
    pub power: Power,
    pub wavelength: Wavelength,
    pub duration: Time,
    pub bias: Voltage,
    /// Read spot (x, y, z); the midpoint of the positive electrode's facing
    /// edge at the surface when absent.
    pub position: Option<[Length; 3]>,
    pub electrode: Option<String>,
    /// Integrate only this part of the trace.
    pub window: Option<[Time; 2]>,
    pub baseline: BaselineMethod,
}

impl Default for ReadParams {
    fn default() -> Self {
        Self {
            power: power(3.5e-3),
            wavelength: Quantity::new(532.0),
            duration: time(30.0),
            bias: Quantity::new(2.2),
            position: None,
            electrode: None,
            window: None,
            baseline: BaselineMethod::TailMean,
        }
    }
}

impl ReadParams {
    fn long(duration: f64, window: f64) -> Self {
        Self {
            duration: time(duration),
            window: Some([time(0.0), time(window)]),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        check_range("read.power (W)", self.power.value(), 0.0, 1.0)?;
        check_range("read.wavelength (nm)", self.wavelength.value(), 500.0, 780.0)?;
        check_range("read.duration (s)", self.duration.value(), 1e-3, 1e5)?;
        check_range("read.bias (V)", self.bias.value(), -10.0, 10.0)?;
        if let Some([a, b]) = self.window {
            if !(a.value() >= 0.0 && b.value() > a.value()) {
                return Err(Error::param("read.window", "needs 0 ≤ start < end"));
            }
        }
        Ok(())
    }
}

/// Default read point: the facing-edge midpoint of the electrode that is
/// positive under `bias_v` (the biased pad at zero bias), at the surface.
pub fn default_read_point(world: &World, bias_v: f64) -> Point3 {
    let layout = &world.layout;
    let idx = layout.positive_electrode(bias_v).unwrap_or_else(|| {
        layout
            .electrodes()
            .iter()
            .position(|e| e.terminal == crate::geometry::Terminal::Biased)
            .unwrap_or(0)
    });
    let e = layout.facing_edge(idx);
    Point3::new(0.5 * (e.a.0 + e.b.0), 0.5 * (e.a.1 + e.b.1), 0.0)
}

pub(crate) fn read_point(world: &World, r: &ReadParams) -> Point3 {
    match r.position {
        Some([x, y, z]) => Point3::new(x.value(), y.value(), z.value()),
        None => default_read_point(world, r.bias.value()),
    }
}

pub(crate) fn read_segment_at(world: &World, r: &ReadParams, at: Point3, power_w: f64, wavelength_nm: f64) -> Result<Segment> {
    let spot = world.spot(at, wavelength_nm, power_w)?;
    Ok(Segment::new(
        "read",
        vec![
            PulseEvent::SetBias { start_s: 0.0, volts: r.bias.value() },
            PulseEvent::ReadWindow {
                start_s: 0.0,
                duration_s: r.duration.value(),
                spot,
                electrode: r.electrode.clone(),
            },
        ],
        1,
    ))
}

pub(crate) fn read_segment(world: &World, r: &ReadParams) -> Result<Segment> {
    read_segment_at(world, r, read_point(world, r), r.power.value(), r.wavelength.value())
}

pub(crate) fn pump_segment(world: &World, at: Point3, power_w: f64, duration_s: f64) -> Result<Segment> {
    check_range("pump.power (W)", power_w, 0.0, 1.0)?;
    check_range("pump.duration (s)", duration_s, 1e-9, 1e6)?;
    let spot = world.spot(at, 532.0, power_w)?;
    Ok(Segment::new("pump", vec![PulseEvent::Laser { start_s: 0.0, duration_s, spot }], 1))
}

pub(crate) fn nv_or_first(world: &World, id: &Option<String>) -> Result<usize> {
    match id {
        Some(id) => world.nv_index(id),
        None if !world.nvs.is_empty() => Ok(0),
        None => Err(Error::param("protocol.nv", "the NV registry is empty")),
    }
}

/// Amplitude making `pi_s` a π pulse for NV `nv`.
fn pi_amplitude(world: &World, nv: usize, pi_s: f64) -> Result<f64> {
    let omega = world.nvs[nv].rabi_per_drive_mhz;
    if !(omega > 0.0) {
        return Err(Error::param("nv.rabi_per_drive", "must be > 0 to calibrate a π pulse"));
    }
    Ok(1.0 / (2.0 * omega * pi_s * 1e6))
}

/// One spin-resolved cycle: init, settle, microwave block, ionise, dark gap. The
/// cycle is padded with darkness to `period` when that is longer.
fn spin_cycle(world: &World, nv: usize, c: &CycleParams, mw: &[(f64, f64, f64, f64)], mw_span: f64, period: f64) -> Result<Vec<PulseEvent>> {
    let at = world.nvs[nv].position;
    let lam = c.wavelength.value();
    let (ti, tion) = (c.init_duration.value(), c.ion_duration.value());
    let mut ev = vec![PulseEvent::Laser { start_s: 0.0, duration_s: ti, spot: world.spot(at, lam, c.init_power.value())? }];
    let t0 = ti + c.settle.value();
    let mut t = t0;
    for &(dur, freq, amp, phase) in mw {
        // zero amplitude marks free precession, left dark
        if dur > 0.0 && amp > 0.0 {
            ev.push(PulseEvent::Microwave { start_s: t, duration_s: dur, frequency_hz: freq, amplitude: amp, phase_rad: phase });
        }
        t += dur;
    }
    let t_ion = t0 + mw_span.max(t - t0);
    ev.push(PulseEvent::Laser { start_s: t_ion, duration_s: tion, spot: world.spot(at, lam, c.ion_power.value())? });
    let end = (t_ion + tion + c.gap.value()).max(period);
    if end > t_ion + tion {
        ev.push(PulseEvent::Wait { start_s: t_ion + tion, duration_s: end - t_ion - tion });
    }
    Ok(ev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcdmrParams {
    pub nv: Option<String>,
    pub frequencies: Sweep<FrequencyDim>,
    pub cycle: CycleParams,
    /// Drive amplitude; π-calibrated to `cycle.pi_duration` when absent.
    pub mw_amplitude: Option<f64>,
    pub read: ReadParams,
    pub dips: usize,
    pub lineshape: Lineshape,
    /// Execute the sweep points in a seeded random order.
    pub shuffle: bool,
}

impl Default for CcdmrParams {
    fn default() -> Self {
        Self {
            nv: None,
            frequencies: Sweep::linear(2.77e9, 2.97e9, 41),
            cycle: CycleParams::default(),
            mw_amplitude: None,
            read: ReadParams::default(),
            dips: 1,
            lineshape: Lineshape::Lorentzian,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RabiParams {
    pub nv: Option<String>,
    pub durations: Sweep<TimeDim>,
    pub frequency: Frequency,
    pub mw_amplitude: f64,
    pub cycle: CycleParams,
    pub read: ReadParams,
}

impl Default for RabiParams {
    fn default() -> Self {
        Self {
            nv: None,
            durations: Sweep::linear(0.0, 800e-9, 41),
            frequency: Quantity::new(2.87e9),
            mw_amplitude: 1.0,
            cycle: CycleParams::default(),
            read: ReadParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoParams {
    pub nv: Option<String>,
    /// Free-evolution time τ on each side of the refocusing pulse.
    pub taus: Sweep<TimeDim>,
    pub frequency: Frequency,
    pub cycle: CycleParams,
    pub read: ReadParams,
    /// Hold the stretch exponent at this value; free when absent.
    pub fix_exponent: Option<f64>,
}

impl Default for EchoParams {
    fn default() -> Self {
        Self {
            nv: None,
            taus: Sweep::linear(0.0, 30e-6, 16),
            frequency: Quantity::new(2.87e9),
            cycle: CycleParams::default(),
            read: ReadParams::default(),
            fix_exponent: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpParams {
    pub power: Power,
    pub duration: Time,
}

impl Default for PumpParams {
    fn default() -> Self {
        Self { power: power(3.5e-3), duration: time(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutMapParams {
    pub nv: Option<String>,
    pub pump: PumpParams,
    pub read: ReadParams,
    /// Read-spot grid. Axes with one value are held fixed; the map spans
    /// the first two axes that vary.
    pub x: Sweep<LengthDim>,
    pub y: Sweep<LengthDim>,
    pub z: Sweep<LengthDim>,
}

impl Default for ReadoutMapParams {
    fn default() -> Self {
        Self {
            nv: None,
            pump: PumpParams::default(),
            read: ReadParams::default(),
            x: Sweep::linear(2.0, 9.0, 15),
            y: Sweep::list(&[0.0]),
            z: Sweep::linear(0.0, 6.0, 13),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WavelengthSweepParams {
    pub nv: Option<String>,
    pub pump: PumpParams,
    pub wavelengths: Sweep<WavelengthDim>,
    pub read: ReadParams,
}

impl Default for WavelengthSweepParams {
    fn default() -> Self {
        Self {
            nv: None,
            pump: PumpParams::default(),
            wavelengths: Sweep::list(&[633.0, 600.0, 570.0, 560.0, 555.0, 550.0, 545.0, 540.0]),
            read: ReadParams::long(200.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSweepParams {
    pub nv: Option<String>,
    pub pump: PumpParams,
    pub powers: Sweep<PowerDim>,
    pub read: ReadParams,
    /// Fit the double-exponential release to each trace.
    pub fit_transient: bool,
}

impl Default for PowerSweepParams {
    fn default() -> Self {
        Self {
            nv: None,
            pump: PumpParams::default(),
            powers: Sweep::list(&[0.5e-3, 1e-3, 2e-3, 3.5e-3, 7e-3]),
            read: ReadParams::long(200.0, 10.0),
            fit_transient: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FillVsTimeParams {
    /// Source NVs; every NV in the registry when empty.
    pub nvs: Vec<String>,
    pub power: Power,
    pub durations: Sweep<TimeDim>,
    pub read: ReadParams,
}

impl Default for FillVsTimeParams {
    fn default() -> Self {
        Self {
            nvs: Vec::new(),
            power: power(3.5e-3),
            durations: Sweep::geometric(1e-3, 100.0, 21),
            read: ReadParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarkStabilityParams {
    pub nv: Option<String>,
    pub pump: PumpParams,
    pub waits: Sweep<TimeDim>,
    pub read: ReadParams,
}

impl Default for DarkStabilityParams {
    fn default() -> Self {
        Self {
            nv: None,
            pump: PumpParams::default(),
            waits: Sweep::list(&[60.0, 3600.0, 86400.0]),
            read: ReadParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    Ccdmr(CcdmrParams),
    Rabi(RabiParams),
    Echo(EchoParams),
    ImageScan(ImageScanParams),
    ReadoutMap(ReadoutMapParams),
    WavelengthSweep(WavelengthSweepParams),
    PowerSweep(PowerSweepParams),
    FillVsTime(FillVsTimeParams),
    HoleCapture(HoleCaptureParams),
    DarkStability(DarkStabilityParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Ccdmr,
    Rabi,
    Echo,
    ImageScan,
    ReadoutMap,
    WavelengthSweep,
    PowerSweep,
    FillVsTime,
    HoleCapture,
    DarkStability,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 10] = [
        ProtocolKind::Ccdmr,
        ProtocolKind::Rabi,
        ProtocolKind::Echo,
        ProtocolKind::ImageScan,
        ProtocolKind::ReadoutMap,
        ProtocolKind::WavelengthSweep,
        ProtocolKind::PowerSweep,
        ProtocolKind::FillVsTime,
        ProtocolKind::HoleCapture,
        ProtocolKind::DarkStability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Ccdmr => "ccdmr",
            ProtocolKind::Rabi => "rabi",
            ProtocolKind::Echo => "echo",
            ProtocolKind::ImageScan => "image_scan",
            ProtocolKind::ReadoutMap => "readout_map",
            ProtocolKind::WavelengthSweep => "wavelength_sweep",
            ProtocolKind::PowerSweep => "power_sweep",
            ProtocolKind::FillVsTime => "fill_vs_time",
            ProtocolKind::HoleCapture => "hole_capture",
            ProtocolKind::DarkStability => "dark_stability",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownProtocol(name.to_string()))
    }
}

impl Protocol {
    pub fn kind(&self) -> ProtocolKind {
        match self {
            Protocol::Ccdmr(_) => ProtocolKind::Ccdmr,
            Protocol::Rabi(_) => ProtocolKind::Rabi,
            Protocol::Echo(_) => ProtocolKind::Echo,
            Protocol::ImageScan(_) => ProtocolKind::ImageScan,
            Protocol::ReadoutMap(_) => ProtocolKind::ReadoutMap,
            Protocol::WavelengthSweep(_) => ProtocolKind::WavelengthSweep,
            Protocol::PowerSweep(_) => ProtocolKind::PowerSweep,
            Protocol::FillVsTime(_) => ProtocolKind::FillVsTime,
            Protocol::HoleCapture(_) => ProtocolKind::HoleCapture,
            Protocol::DarkStability(_) => ProtocolKind::DarkStability,
        }
    }

    /// Read settings of the protocols that end in a single read window.
    pub fn read(&self) -> Option<&ReadParams> {
        match self {
            Protocol::Ccdmr(p) => Some(&p.read),
            Protocol::Rabi(p) => Some(&p.read),
            Protocol::Echo(p) => Some(&p.read),
            Protocol::ImageScan(p) => Some(&p.read),
            Protocol::ReadoutMap(p) => Some(&p.read),
            Protocol::WavelengthSweep(p) => Some(&p.read),
            Protocol::PowerSweep(p) => Some(&p.read),
            Protocol::FillVsTime(p) => Some(&p.read),
            Protocol::HoleCapture(_) => None,
            Protocol::DarkStability(p) => Some(&p.read),
        }
    }

    /// Protocol of `kind` with every parameter at its default.
    pub fn default_for(kind: ProtocolKind) -> Self {
        match kind {
            ProtocolKind::Ccdmr => Protocol::Ccdmr(Default::default()),
            ProtocolKind::Rabi => Protocol::Rabi(Default::default()),
            ProtocolKind::Echo => Protocol::Echo(Default::default()),
            ProtocolKind::ImageScan => Protocol::ImageScan(Default::default()),
            ProtocolKind::ReadoutMap => Protocol::ReadoutMap(Default::default()),
            ProtocolKind::WavelengthSweep => Protocol::WavelengthSweep(Default::default()),
            ProtocolKind::PowerSweep => Protocol::PowerSweep(Default::default()),
            ProtocolKind::FillVsTime => Protocol::FillVsTime(Default::default()),
            ProtocolKind::HoleCapture => Protocol::HoleCapture(Default::default()),
            ProtocolKind::DarkStability => Protocol::DarkStability(Default::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub variant: String,
    pub sequence: PulseSequence,
    /// Read-spot or pixel coordinates for map protocols.
    pub coords: Option<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolPlan {
    pub protocol: Protocol,
    pub sweep_name: String,
    pub sweep_unit: String,
    /// Every point runs on a fresh copy of the world.
    pub points: Vec<SweepPoint>,
    /// Cycles per point for the spin-resolved protocols.
    pub cycles: Option<u64>,
    pub cycle_period_s: Option<f64>,
    pub notes: Vec<String>,
}

impl ProtocolPlan {
    pub(crate) fn new(protocol: &Protocol, name: &str, unit: &str) -> Self {
        Self {
            protocol: protocol.clone(),
            sweep_name: name.into(),
            sweep_unit: unit.into(),
            points: Vec::new(),
            cycles: None,
            cycle_period_s: None,
            notes: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, value: f64, variant: impl Into<String>, segments: Vec<Segment>) {
        self.points.push(SweepPoint { value, variant: variant.into(), sequence: PulseSequence::new(segments), coords: None });
    }
}

/// Expand a protocol into per-point sequences against `world`.
pub fn build_protocol(protocol: &Protocol, world: &World) -> Result<ProtocolPlan> {
    match protocol {
        Protocol::Ccdmr(p) => {
            p.cycle.validate()?;
            p.read.validate()?;
            if !(1..=2).contains(&p.dips) {
                return Err(Error::param("ccdmr.dips", "must be 1 or 2"));
            }
            let nv = nv_or_first(world, &p.nv)?;
            let tpi = p.cycle.pi_duration.value();
            let amp = match p.mw_amplitude {
                Some(a) => a,
                None => pi_amplitude(world, nv, tpi)?,
            };
            check_range("ccdmr.mw_amplitude", amp, 0.0, 100.0)?;
            let n = p.cycle.cycle_count();
            let mut plan = ProtocolPlan::new(protocol, "frequency", "Hz");
            plan.cycles = Some(n);
            plan.cycle_period_s = Some(p.cycle.reference_period());
            let read = read_segment(world, &p.read)?;
            for f in p.frequencies.values("ccdmr.frequencies")? {
                let cyc = spin_cycle(world, nv, &p.cycle, &[(tpi, f, amp, 0.0)], tpi, 0.0)?;
                plan.push(f, "", vec![Segment::new("cycle", cyc, n), read.clone()]);
            }
            plan.notes.push(format!("{n} cycles of {:.4e} s per point", p.cycle.reference_period()));
            Ok(plan)
        }
        Protocol::Rabi(p) => {
            p.cycle.validate()?;
            p.read.validate()?;
            let nv = nv_or_first(world, &p.nv)?;
            let durs = p.durations.values("rabi.durations")?;
            if durs.iter().any(|&d| d < 0.0) {
                return Err(Error::param("rabi.durations", "must be ≥ 0"));
            }
            let span = durs.iter().cloned().fold(0.0, f64::max);
            let n = p.cycle.cycle_count();
            let base = p.cycle.init_duration.value() + p.cycle.settle.value() + p.cycle.ion_duration.value() + p.cycle.gap.value();
            let mut plan = ProtocolPlan::new(protocol, "mw_duration", "s");
            plan.cycles = Some(n);
            plan.cycle_period_s = Some(base + span);
            let read = read_segment(world, &p.read)?;
            for d in durs {
                let cyc = spin_cycle(world, nv, &p.cycle, &[(d, p.frequency.value(), p.mw_amplitude, 0.0)], d, base + span)?;
                plan.push(d, "", vec![Segment::new("cycle", cyc, n), read.clone()]);
            }
            Ok(plan)
        }
        Protocol::Echo(p) => {
            use std::f64::consts::FRAC_PI_2;
            p.cycle.validate()?;
            p.read.validate()?;
            let nv = nv_or_first(world, &p.nv)?;
            let tpi = p.cycle.pi_duration.value();
            let amp = pi_amplitude(world, nv, tpi)?;
            let f = p.frequency.value();
            let n = p.cycle.cycle_count();
            let mut plan = ProtocolPlan::new(protocol, "tau", "s");
            plan.cycles = Some(n);
            let read = read_segment(world, &p.read)?;
            for tau in p.taus.values("echo.taus")? {
                if tau < 0.0 {
                    return Err(Error::param("echo.taus", "must be ≥ 0"));
                }
                for (variant, last) in [("half_pi", 0.5), ("three_halves_pi", 1.5)] {
                    // gaps between pulses are dark microwave-off slices
                    let mw = [
                        (0.5 * tpi, f, amp, 0.0),
                        (tau, f, 0.0, 0.0),
                        (tpi, f, amp, FRAC_PI_2),
                        (tau, f, 0.0, 0.0),
                        (last * tpi, f, amp, 0.0),
                    ];
                    let cyc = spin_cycle(world, nv, &p.cycle, &mw, 0.0, 0.0)?;
                    plan.push(tau, variant, vec![Segment::new("cycle", cyc, n), read.clone()]);
                }
            }
            Ok(plan)
        }
        Protocol::ImageScan(p) => imaging::build_image_scan(protocol, p, world),
        Protocol::HoleCapture(p) => imaging::build_hole_capture(protocol, p, world),
        Protocol::ReadoutMap(p) => {
            p.read.validate()?;
            let nv = nv_or_first(world, &p.nv)?;
            let pump = pump_segment(world, world.nvs[nv].position, p.pump.power.value(), p.pump.duration.value())?;
            let mut plan = ProtocolPlan::new(protocol, "read_position", "um");
            let (xs, ys, zs) = (p.x.values("readout_map.x")?, p.y.values("readout_map.y")?, p.z.values("readout_map.z")?);
            for &z in &zs {
                for &y in &ys {
                    for &x in &xs {
                        let at = Point3::new(x, y, z);
                        let read = read_segment_at(world, &p.read, at, p.read.power.value(), p.read.wavelength.value())?;
                        plan.points.push(SweepPoint {
                            value: x,
                            variant: String::new(),
                            sequence: PulseSequence::new(vec![pump.clone(), read]),
                            coords: Some(at),
                        });
                    }
                }
            }
            Ok(plan)
        }
        Protocol::WavelengthSweep(p) => {
            p.read.validate()?;
            let nv = nv_or_first(world, &p.nv)?;
            let pump = pump_segment(world, world.nvs[nv].position, p.pump.power.value(), p.pump.duration.value())?;
            let mut plan = ProtocolPlan::new(protocol, "wavelength", "nm");
            let at = read_point(world, &p.read);
            for lam in p.wavelengths.values("wavelength_sweep.wavelengths")? {
                check_range("wavelength_sweep.wavelengths (nm)", lam, 500.0, 780.0)?;
                let read = read_segment_at(world, &p.read, at, p.read.power.value(), lam)?;
                plan.push(lam, "", vec![pump.clone(), read]);
            }
            Ok(plan)
        }
        Protocol::PowerSweep(p) => {
            p.read.validate()?;
            let nv = nv_or_first(world, &p.nv)?;
            let pump = pump_segment(world, world.nvs[nv].position, p.pump.power.value(), p.pump.duration.value())?;
            let mut plan = ProtocolPlan::new(protocol, "read_power", "W");
            let at = read_point(world, &p.read);
            for pw in p.powers.values("power_sweep.powers")? {
                check_range("power_sweep.powers (W)", pw, 0.0, 1.0)?;
                let read = read_segment_at(world, &p.read, at, pw, p.read.wavelength.value())?;
                plan.push(pw, "", vec![pump.clone(), read]);
            }
            Ok(plan)
        }
        Protocol::FillVsTime(p) => {
            p.read.validate()?;
            let ids: Vec<usize> = if p.nvs.is_empty() {
                (0..world.nvs.len()).collect()
            } else {
                p.nvs.iter().map(|id| world.nv_index(id)).collect::<Result<_>>()?
            };
            if ids.is_empty() {
                return Err(Error::param("fill_vs_time.nvs", "no source NVs"));
            }
            let read = read_segment(world, &p.read)?;
            let mut plan = ProtocolPlan::new(protocol, "pump_duration", "s");
            for &i in &ids {
                for d in p.durations.values("fill_vs_time.durations")? {
                    let pump = pump_segment(world, world.nvs[i].position, p.power.value(), d)?;
                    plan.push(d, world.nvs[i].id.clone(), vec![pump, read.clone()]);
                }
            }
            Ok(plan)
        }
        Protocol::DarkStability(p) => {
            p.read.validate()?;
            let nv = nv_or_first(world, &p.nv)?;
            let pump = pump_segment(world, world.nvs[nv].position, p.pump.power.value(), p.pump.duration.value())?;
            let read = read_segment(world, &p.read)?;
            let mut plan = ProtocolPlan::new(protocol, "wait", "s");
            for w in p.waits.values("dark_stability.waits")? {
                check_range("dark_stability.waits (s)", w, 1e-9, 1e7)?;
                let wait = Segment::new("dark", vec![PulseEvent::Wait { start_s: 0.0, duration_s: w }], 1);
                plan.push(w, "", vec![pump.clone(), wait, read.clone()]);
            }
            Ok(plan)
        }
    }
}

/// Seed of point `point` in block `block`.
pub fn point_seed(master: u64, block: u64, point: u64) -> u64 {
    seeds::derive(master, &[block, point])
}

/// Run every point of a sequence-driven plan on its own copy of `world`.
/// Results come back in sweep order whatever the execution order.
pub fn run_points(plan: &ProtocolPlan, world: &World, master: u64, block: u64, keep_traces: bool) -> Result<(Vec<PointResult>, Vec<Option<CurrentTrace>>)> {
    let mut order: Vec<usize> = (0..plan.points.len()).collect();
    if let Protocol::Ccdmr(CcdmrParams { shuffle: true, .. }) = plan.protocol {
        use rand::seq::SliceRandom;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeds::derive(master, &[block, u64::MAX]));
        order.shuffle(&mut rng);
    }
    let opts = ExecOptions { keep_traces, ..Default::default() };
    let mut base = world.clone();
    if let Some(r) = plan.protocol.read() {
        base.qint.window_s = r.window.map(|[a, b]| (a.value(), b.value()));
        base.qint.baseline = r.baseline;
    }
    if matches!(plan.protocol, Protocol::ReadoutMap(_) | Protocol::ImageScan(_)) {
        // off-edge pixels release only partly within the read
        base.qint.check_settled = false;
    }
    let world = &base;
    let mut done: Vec<(usize, Result<(PointResult, Option<CurrentTrace>)>)> = order
        .par_iter()
        .map(|&i| {
            let pt = &plan.points[i];
            let seed = point_seed(master, block, i as u64);
            let mut w = world.clone();
            let r = execute(&pt.sequence, &mut w, seed, &opts).and_then(|out| {
                let read = out
                    .reads
                    .last()
                    .ok_or_else(|| Error::InvalidSequence(format!("point {i} has no read window")))?;
                let mut extra = std::collections::BTreeMap::new();
                extra.insert("released_holes".to_string(), read.released_holes);
                extra.insert("expected_charge_C".to_string(), read.expected_charge_c);
                if let Some(c) = pt.coords {
                    extra.insert("x_um".into(), c.x);
                    extra.insert("y_um".into(), c.y);
                    extra.insert("z_um".into(), c.z);
                }
                Ok((
                    PointResult {
                        index: i,
                        sweep_value: pt.value,
                        variant: pt.variant.clone(),
                        value: read.q.charge_c,
                        sigma: read.q.sigma_c,
                        seed,
                        extra,
                    },
                    read.trace.clone(),
                ))
            });
            (i, r)
        })
        .collect();
    done.sort_by_key(|(i, _)| *i);
    let mut points = Vec::with_capacity(done.len());
    let mut traces = Vec::with_capacity(done.len());
    for (i, r) in done {
        let (p, t) = r.map_err(|e| match e {
            Error::AtEvent { .. } => e,
            other => Error::InvalidSequence(format!("sweep point {i}: {other}")),
        })?;
        points.push(p);
        traces.push(t);
    }
    Ok((points, traces))
}

fn spectrum(x: Vec<f64>, y: Vec<f64>, s: Vec<f64>) -> Result<Spectrum> {
    if s.iter().all(|v| *v > 0.0) {
        Spectrum::new(x, y, s)
    } else {
        Spectrum::unweighted(x, y)
    }
}

/// Build and execute a protocol, then run its analysis.
pub fn run_protocol(protocol: &Protocol, world: &World, master: u64, block: u64) -> Result<RunRecord> {
    let plan = build_protocol(protocol, world)?;
    run_plan(&plan, world, master, block)
}

pub fn run_plan(plan: &ProtocolPlan, world: &World, master: u64, block: u64) -> Result<RunRecord> {
    let kind = plan.protocol.kind();
    match &plan.protocol {
        Protocol::ImageScan(p) => return imaging::run_image_scan(plan, p, world, master, block),
        Protocol::HoleCapture(p) => return imaging::run_hole_capture(plan, p, world, master, block),
        _ => {}
    }
    let keep = matches!(&plan.protocol, Protocol::PowerSweep(p) if p.fit_transient);
    let (points, traces) = run_points(plan, world, master, block, keep)?;
    let mut rec = RunRecord::new(kind.name(), &plan.sweep_name, &plan.sweep_unit);
    rec.points = points;
    rec.metadata.insert("master_seed".into(), master.into());
    rec.metadata.insert("block".into(), block.into());
    if let Some(n) = plan.cycles {
        rec.metadata.insert("cycles_per_point".into(), n.into());
    }
    if let Some(t) = plan.cycle_period_s {
        rec.metadata.insert("cycle_period_s".into(), t.into());
    }
    for n in &plan.notes {
        rec.warnings.push(n.clone());
    }
    let q: Vec<f64> = rec.points.iter().map(|p| p.value * 1e12).collect();
    let s: Vec<f64> = rec.points.iter().map(|p| p.sigma * 1e12).collect();
    let x: Vec<f64> = rec.points.iter().map(|p| p.sweep_value).collect();
    match &plan.protocol {
        Protocol::Ccdmr(p) => {
            rec.metadata.insert("shuffled".into(), p.shuffle.into());
            let xm: Vec<f64> = x.iter().map(|f| f * 1e-6).collect();
            let fit = fit::fit_dips(&spectrum(xm, q, s)?, p.dips, p.lineshape)?;
            for k in 1..=p.dips {
                rec.derived.insert(format!("center_{k}_mhz"), fit.value(&format!("center_{k}")));
                rec.derived.insert(format!("contrast_{k}"), fit.value(&format!("contrast_{k}")));
            }
            if p.dips == 2 {
                rec.derived.insert("split_mhz".into(), (fit.value("center_2") - fit.value("center_1")).abs());
            }
            rec.fits.insert("dips".into(), fit);
        }
        Protocol::Rabi(_) => {
            let xn: Vec<f64> = x.iter().map(|t| t * 1e9).collect();
            let fit = fit::fit_damped_sinusoid(&spectrum(xn, q, s)?)?;
            rec.derived.insert("period_ns".into(), fit.value("period"));
            rec.derived.insert("contrast".into(), 2.0 * fit.value("amplitude").abs() / fit.value("offset"));
            rec.fits.insert("rabi".into(), fit);
        }
        Protocol::Echo(p) => {
            let half = rec.series("half_pi");
            let three = rec.series("three_halves_pi");
            let mut tx = Vec::new();
            let mut d = Vec::new();
            let mut ds = Vec::new();
            for (a, b) in half.iter().zip(&three) {
                let sum = a.value + b.value;
                tx.push(a.sweep_value * 1e6);
                d.push((b.value - a.value) / sum);
                let g1 = -2.0 * b.value / (sum * sum);
                let g3 = 2.0 * a.value / (sum * sum);
                ds.push(((g1 * a.sigma).powi(2) + (g3 * b.sigma).powi(2)).sqrt());
            }
            for (i, v) in d.iter().enumerate() {
                rec.derived.insert(format!("echo_{i}"), *v);
            }
            let opts = EchoOptions { fix_exponent: p.fix_exponent, free_amplitude: true };
            let fit = fit::fit_echo(&spectrum(tx, d, ds)?, opts)?;
            rec.derived.insert("t2_us".into(), fit.value("T2"));
            rec.fits.insert("echo".into(), fit);
        }
        Protocol::PowerSweep(p) => {
            if p.fit_transient {
                let tau_c = world.chain.time_constant_s();
                let mut taus = Vec::new();
                for (pt, tr) in rec.points.iter_mut().zip(&traces) {
                    let tr = tr.as_ref().expect("traces kept for power sweeps");
                    let fit = fit_release(tr, tau_c)?;
                    pt.extra.insert("tau_s".into(), fit.value("tau_s"));
                    taus.push(fit.value("tau_s"));
                    rec.fits.insert(format!("transient_{}", pt.index), fit);
                }
                rec.traces = rec.points.iter().map(|p| p.index).zip(traces.into_iter().flatten()).collect();
                let decreasing = taus.windows(2).all(|w| w[1] < w[0]);
                rec.derived.insert("tau_s_strictly_decreasing".into(), if decreasing { 1.0 } else { 0.0 });
            }
        }
        Protocol::FillVsTime(_) => {
            for v in rec.variants() {
                let series = rec.series(&v);
                let mut pts: Vec<(f64, f64)> = series.iter().map(|p| (p.sweep_value, p.value)).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let qsat = pts.last().map_or(0.0, |p| p.1);
                rec.derived.insert(format!("qsat_{v}"), qsat);
                if let Some(t) = crossing_time(&pts, 0.1 * qsat) {
                    rec.derived.insert(format!("t10_{v}"), t);
                }
            }
        }
        Protocol::DarkStability(_) => {
            let mut worst: f64 = 0.0;
            for i in 0..rec.points.len() {
                for j in i + 1..rec.points.len() {
                    let (a, b) = (&rec.points[i], &rec.points[j]);
                    let s = (a.sigma.powi(2) + b.sigma.powi(2)).sqrt();
                    worst = worst.max((a.value - b.value).abs() / s.max(f64::MIN_POSITIVE));
                }
            }
            rec.derived.insert("max_pairwise_z".into(), worst);
        }
        Protocol::ReadoutMap(_) => {
            rec.maps.push(imaging::readout_scan_map(&rec)?);
        }
        _ => {}
    }
    Ok(rec)
}

/// First pump time at which Q reaches `level`, interpolated in log time.
fn crossing_time(pts: &[(f64, f64)], level: f64) -> Option<f64> {
    let k = pts.iter().position(|p| p.1 >= level)?;
    if k == 0 {
        return Some(pts[0].0);
    }
    let (t0, q0) = pts[k - 1];
    let (t1, q1) = pts[k];
    let u = (level - q0) / (q1 - q0);
    Some((t0.ln() + u * (t1.ln() - t0.ln())).exp())
}

/// Double-exponential fit of a release transient from t ≥ 5 filter time
/// constants, averaged into about 400 log-spaced bins so the fast and slow
/// components both keep enough points.
pub fn fit_release(trace: &CurrentTrace, tau_c: f64) -> Result<fit::FitResult> {
    const BINS: f64 = 400.0;
    let t0 = 5.0 * tau_c;
    let times = trace.times();
    let first = times.iter().position(|&t| t >= t0).unwrap_or(0);
    let t_end = *times.last().unwrap_or(&t0);
    let lo = times[first].max(trace.dt_s);
    let ratio = (t_end / lo).max(1.0).powf(1.0 / BINS);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut i = first;
    let mut edge = lo;
    while i < trace.samples.len() {
        edge *= ratio;
        let mut j = i + 1;
        while j < trace.samples.len() && times[j] < edge {
            j += 1;
        }
        let c = (j - i) as f64;
        x.push(times[i..j].iter().sum::<f64>() / c);
        y.push(trace.samples[i..j].iter().sum::<f64>() / c * 1e12);
        w.push(c);
        i = j;
    }
    let noise = trace.meta.noise_rms_a * 1e12;
    let s = if noise > 0.0 {
        let sig = w.iter().map(|c| noise / c.sqrt()).collect();
        Spectrum::new(x, y, sig)?
    } else {
        Spectrum::unweighted(x, y)?
    };
    fit::fit_double_exponential(&s, DoubleExpOptions { filter_tau_s: Some(tau_c) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DeviceLayout, NvRecord};
    use crate::photophysics::{PhotoParams, SpinManifold};
    use crate::traps::TrapBank;

    fn world() -> World {
        let layout = DeviceLayout::facing_pads(10.0, 10.0, 10.0).unwrap();
        let nv = NvRecord::new("nv1", Point3::new(0.0, 0.0, 4.0)).unwrap();
        World::new(layout, vec![nv], PhotoParams::preset_default(), SpinManifold::Lumped, TrapBank::default()).unwrap()
    }

    #[test]
    fn ccdmr_defaults() {
        let plan = build_protocol(&Protocol::default_for(ProtocolKind::Ccdmr), &world()).unwrap();
        assert_eq!(plan.points.len(), 41);
        assert_eq!(plan.cycles, Some(245_901));
        assert_eq!(plan.cycles.unwrap(), (1.5 / 6.1e-6f64).floor() as u64);
        let seg = &plan.points[0].sequence.segments[0];
        assert_eq!(seg.repeat, 245_901);
        assert!((seg.period() - 6.1e-6).abs() < 1e-15);
        assert!(super::super::validate(&plan.points[0].sequence).is_empty());
    }

    #[test]
    fn unknown_kind_and_bad_range() {
        assert!(matches!(ProtocolKind::parse("odmr"), Err(Error::UnknownProtocol(_))));
        let mut p = CcdmrParams::default();
        p.read.bias = Quantity::new(25.0);
        match build_protocol(&Protocol::Ccdmr(p), &world()) {
            Err(Error::OutOfRange { name, max, .. }) => {
                assert!(name.contains("bias"));
                assert_eq!(max, 10.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_forms() {
        let s: Sweep<FrequencyDim> = toml::from_str("start = \"2.77GHz\"\nstop = \"2.97GHz\"\npoints = 3").unwrap();
        assert_eq!(s.values("f").unwrap(), vec![2.77e9, 2.87e9, 2.97e9]);
        let l: Sweep<TimeDim> = toml::from_str("values = [\"1s\", \"1h\"]").unwrap();
        assert_eq!(l.values("t").unwrap(), vec![1.0, 3600.0]);
        let bad: Sweep<TimeDim> = toml::from_str("start = \"1s\"").unwrap();
        assert!(bad.values("t").is_err());
    }

    #[test]
    fn protocol_is_tagged_by_kind() {
        let p: Protocol = toml::from_str("kind = \"rabi\"\nmw_amplitude = 1.0").unwrap();
        assert_eq!(p.kind(), ProtocolKind::Rabi);
        assert!(toml::from_str::<Protocol>("kind = \"rabi\"\nmw_amplitud = 1.0").is_err());
        for k in ProtocolKind::ALL {
            let p = Protocol::default_for(k);
            let text = toml::to_string(&p).unwrap();
            assert_eq!(toml::from_str::<Protocol>(&text).unwrap(), p, "{text}");
        }
    }

    #[test]
    fn echo_measures_both_projections() {
        let plan = build_protocol(&Protocol::default_for(ProtocolKind::Echo), &world()).unwrap();
        assert_eq!(plan.points.len(), 32);
        assert_eq!(plan.points[0].variant, "half_pi");
        assert_eq!(plan.points[1].variant, "three_halves_pi");
    }

    #[test]
    fn crossing_interpolates_in_log_time() {
        let pts = [(1.0, 0.0), (100.0, 2.0)];
        assert!((crossing_time(&pts, 1.0).unwrap() - 10.0).abs() < 1e-12);
    }
}

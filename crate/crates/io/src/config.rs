//! Experiment configuration files.
//!
//! A configuration is a TOML document. Every physical quantity is written
//! with a unit suffix (`"3.5mW"`, `"2.87GHz"`, `"4G"`) and held in SI (or the
//! unit noted on the field) after parsing. Unknown keys are rejected with the
//! nearest valid key as a suggestion.

use std::fmt;
use std::path::PathBuf;

use ccdmr_core::geometry::{DeviceLayout, NvRecord, Point3};
use ccdmr_core::photophysics::{PhotoParams, SpinManifold};
use ccdmr_core::readout::{AmplifierChain, EgpcModel, Saturation};
use ccdmr_core::sequence::protocols::build_protocol;
use ccdmr_core::sequence::{Protocol, World};
use ccdmr_core::spin::SpinParams;
use ccdmr_core::transport::CaptureModel;
use ccdmr_core::traps::{AbovePeak, SpectralResponse, TrapBank, DEFAULT_CAPACITY};
use ccdmr_core::units::{Current, Field, Frequency, Length, Quantity, RatePerPower, Time, Voltage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Every random draw of a run is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default, rename = "nv")]
    pub nvs: Vec<NvConfig>,
    #[serde(default)]
    pub photophysics: PhotoConfig,
    #[serde(default)]
    pub spin: SpinConfig,
    #[serde(default)]
    pub traps: TrapConfig,
    #[serde(default)]
    pub capture: CaptureModel,
    #[serde(default)]
    pub egpc: EgpcConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(rename = "block")]
    pub blocks: Vec<BlockConfig>,
}

/// Two rectangular pads facing each other across a gap, centred on the
/// origin; the right-hand pad carries the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub gap: Length,
    pub pad_width: Length,
    pub pad_height: Length,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            gap: Quantity::new(10.0),
            pad_width: Quantity::new(10.0),
            pad_height: Quantity::new(10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvConfig {
    pub id: String,
    /// (x, y, depth below the surface).
    pub position: [Length; 3],
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    #[serde(default = "default_rabi")]
    pub rabi_per_drive: Frequency,
    #[serde(default = "default_t2")]
    pub t2: Time,
    /// NV⁻→NV⁰ rate (s⁻¹) per A/µm of hole line density.
    #[serde(default = "default_capture_coeff")]
    pub hole_capture_coeff: f64,
}

fn default_axis() -> [f64; 3] {
    [1.0 / 3f64.sqrt(); 3]
}

fn default_rabi() -> Frequency {
    Quantity::new(NvRecord::DEFAULT_RABI_MHZ * 1e6)
}

fn default_t2() -> Time {
    Quantity::new(NvRecord::DEFAULT_T2_US * 1e-6)
}

fn default_capture_coeff() -> f64 {
    NvRecord::DEFAULT_HOLE_CAPTURE
}

impl NvConfig {
    pub fn new(id: &str, x_um: f64, y_um: f64, depth_um: f64) -> Self {
        Self {
            id: id.into(),
            position: [Quantity::new(x_um), Quantity::new(y_um), Quantity::new(depth_um)],
            axis: default_axis(),
            rabi_per_drive: default_rabi(),
            t2: default_t2(),
            hole_capture_coeff: default_capture_coeff(),
        }
    }

    fn record(&self) -> ccdmr_core::Result<NvRecord> {
        let [x, y, z] = self.position;
        let mut nv = NvRecord::new(self.id.clone(), Point3::new(x.value(), y.value(), z.value()))?;
        nv.axis = self.axis;
        nv.rabi_per_drive_mhz = self.rabi_per_drive.value() * 1e-6;
        nv.t2_us = self.t2.value() * 1e6;
        nv.hole_capture_coeff = self.hole_capture_coeff;
        nv.validate()?;
        Ok(nv)
    }
}

/// A named rate preset plus optional overrides of the two calibrated
/// charge-cycling strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotoConfig {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ionisation: Option<RatePerPower>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recombination: Option<RatePerPower>,
}

impl Default for PhotoConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            ionisation: None,
            recombination: None,
        }
    }
}

impl PhotoConfig {
    pub fn params(&self) -> ccdmr_core::Result<PhotoParams> {
        let mut p = PhotoParams::preset(&self.preset)?;
        if let Some(k) = self.ionisation {
            p.ionisation_per_watt = k.value();
        }
        if let Some(k) = self.recombination {
            p.recombination_per_watt = k.value();
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpinConfig {
    pub field: Field,
    pub zero_field: Frequency,
    pub gamma_mhz_per_g: f64,
    /// Echo envelope exponent.
    pub stretch: f64,
}

impl Default for SpinConfig {
    fn default() -> Self {
        let s = SpinParams::default();
        Self {
            field: Quantity::new(s.field_g),
            zero_field: Quantity::new(s.zero_field_mhz * 1e6),
            gamma_mhz_per_g: s.gamma_mhz_per_g,
            stretch: s.stretch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapConfig {
    /// Total capacity in elementary charges.
    pub capacity: f64,
    pub fast_split: f64,
    pub kappa_fast: RatePerPower,
    pub kappa_slow: RatePerPower,
    pub threshold_ev: f64,
    pub peak_ev: f64,
    pub above: AbovePeak,
}

impl Default for TrapConfig {
    fn default() -> Self {
        let b = TrapBank::default();
        Self {
            capacity: DEFAULT_CAPACITY,
            fast_split: b.fast.split,
            kappa_fast: Quantity::new(b.fast.kappa_per_w),
            kappa_slow: Quantity::new(b.slow.kappa_per_w),
            threshold_ev: b.spectral.threshold_ev,
            peak_ev: b.spectral.peak_ev,
            above: b.spectral.above,
        }
    }
}

impl TrapConfig {
    pub fn bank(&self) -> ccdmr_core::Result<TrapBank> {
        let spectral = SpectralResponse {
            threshold_ev: self.threshold_ev,
            peak_ev: self.peak_ev,
            above: self.above,
        };
        spectral.validate()?;
        let b = TrapBank::new(self.capacity, self.fast_split, self.kappa_fast.value(), self.kappa_slow.value(), spectral);
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgpcConfig {
    /// Baseline photocurrent in A per W of read light.
    pub photocurrent_per_watt: f64,
    pub v0: Voltage,
    pub saturation: Saturation,
    pub lateral_width: Length,
    pub axial_width: Length,
    /// Charges delivered to the contact per released hole.
    pub gain_collection: f64,
}

impl Default for EgpcConfig {
    fn default() -> Self {
        let m = EgpcModel::default();
        Self {
            photocurrent_per_watt: m.photocurrent_per_watt,
            v0: Quantity::new(m.v0_v),
            saturation: m.saturation,
            lateral_width: Quantity::new(m.lateral_width_um),
            axial_width: Quantity::new(m.axial_width_um),
            gain_collection: m.gain_collection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// Transimpedance sensitivity in A per V of output.
    pub sensitivity_a_per_v: f64,
    pub cutoff: Frequency,
    pub sample_rate: Frequency,
    /// Input-referred white noise per sample; `"0A"` disables noise.
    pub noise_rms: Current,
}

impl Default for ChainConfig {
    fn default() -> Self {
        let c = AmplifierChain::default();
        Self {
            sensitivity_a_per_v: c.sensitivity_a_per_v,
            cutoff: Quantity::new(c.cutoff_hz),
            sample_rate: Quantity::new(c.sample_rate_hz),
            noise_rms: Quantity::new(c.noise_rms_a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    pub waist: Length,
    pub rayleigh: Length,
    /// Off-focus charge-cycling yield scales as (intensity fraction)^p.
    pub yield_exponent: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            waist: Quantity::new(ccdmr_core::geometry::LaserSpot::DEFAULT_WAIST_UM),
            rayleigh: Quantity::new(ccdmr_core::geometry::LaserSpot::DEFAULT_RAYLEIGH_UM),
            yield_exponent: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// File stem of the block's outputs; `{index}_{kind}` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub protocol: Protocol,
}

impl BlockConfig {
    pub fn new(name: &str, protocol: Protocol) -> Self {
        Self {
            name: Some(name.into()),
            protocol,
        }
    }
}

/// One problem found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// Dotted key path, e.g. `block[0].protocol.read.power`.
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
    pub suggestion: Option<String>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if !self.path.is_empty() {
            write!(f, "{}: ", self.path)?;
        }
        f.write_str(&self.message)?;
        if let Some(s) = &self.suggestion {
            write!(f, " (did you mean `{s}`?)")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<Diagnostic>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Backticked words of a serde message: the offending key first, then the
/// accepted alternatives.
fn backticked(msg: &str) -> Vec<&str> {
    msg.split('`').skip(1).step_by(2).collect()
}

/// Nearest accepted key for an "unknown field/variant" message.
fn suggest(msg: &str) -> Option<String> {
    if !(msg.starts_with("unknown field") || msg.starts_with("unknown variant")) {
        return None;
    }
    let words = backticked(msg);
    let (bad, options) = words.split_first()?;
    options
        .iter()
        .map(|o| (strsim::damerau_levenshtein(bad, o), *o))
        .filter(|(d, o)| *d <= bad.len().max(o.len()).div_ceil(2))
        .min()
        .map(|(_, o)| o.to_string())
}

/// Strict parse. Syntax and schema problems come back with the key path and
/// line; semantic checks are left to [`validate`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let de = toml::Deserializer::parse(text).map_err(|e| {
        ConfigErrors(vec![Diagnostic {
            path: String::new(),
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
            suggestion: None,
        }])
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.inner();
        let message = inner.message().trim().to_string();
        ConfigErrors(vec![Diagnostic {
            path: if path == "." { String::new() } else { path },
            line: inner.span().map(|s| line_of(text, s.start)),
            suggestion: suggest(&message),
            message,
        }])
    })
}

/// Parse, then check everything that can be checked without running:
/// layout, NV registry, rate constants and every protocol block.
pub fn load_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let cfg = parse_config(text)?;
    let errs = validate(&cfg);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(errs))
    }
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configuration always serializes")
}

impl ExperimentConfig {
    /// A configuration with the reference device, one NV 4 µm deep at the gap
    /// centre and the given blocks.
    pub fn reference(seed: u64, blocks: Vec<BlockConfig>) -> Self {
        Self {
            seed,
            output_dir: None,
            device: DeviceConfig::default(),
            nvs: vec![NvConfig::new("nv1", 0.0, 0.0, 4.0)],
            photophysics: PhotoConfig::default(),
            spin: SpinConfig::default(),
            traps: TrapConfig::default(),
            capture: CaptureModel::default(),
            egpc: EgpcConfig::default(),
            chain: ChainConfig::default(),
            optics: OpticsConfig::default(),
            blocks,
        }
    }

    pub fn world(&self) -> ccdmr_core::Result<World> {
        let d = &self.device;
        let layout = DeviceLayout::facing_pads(d.gap.value(), d.pad_width.value(), d.pad_height.value())?;
        let nvs = self.nvs.iter().map(NvConfig::record).collect::<ccdmr_core::Result<Vec<_>>>()?;
        let mut w = World::new(layout, nvs, self.photophysics.params()?, SpinManifold::Lumped, self.traps.bank()?)?;
        w.spin = SpinParams {
            zero_field_mhz: self.spin.zero_field.value() * 1e-6,
            gamma_mhz_per_g: self.spin.gamma_mhz_per_g,
            stretch: self.spin.stretch,
            ..w.spin
        };
        w.spin.validate()?;
        w.set_field(self.spin.field.value())?;
        self.capture.validate()?;
        w.capture = self.capture;
        let e = &self.egpc;
        w.egpc = EgpcModel {
            photocurrent_per_watt: e.photocurrent_per_watt,
            v0_v: e.v0.value(),
            saturation: e.saturation,
            lateral_width_um: e.lateral_width.value(),
            axial_width_um: e.axial_width.value(),
            gain_collection: e.gain_collection,
        };
        w.egpc.validate()?;
        let c = &self.chain;
        w.chain = AmplifierChain {
            sensitivity_a_per_v: c.sensitivity_a_per_v,
            cutoff_hz: c.cutoff.value(),
            sample_rate_hz: c.sample_rate.value(),
            noise_rms_a: c.noise_rms.value(),
        };
        w.chain.validate()?;
        w.waist_um = self.optics.waist.value();
        w.rayleigh_um = self.optics.rayleigh.value();
        w.yield_exponent = self.optics.yield_exponent;
        if !(w.waist_um > 0.0 && w.rayleigh_um > 0.0 && w.yield_exponent >= 1.0) {
            return Err(ccdmr_core::Error::InvalidParameter {
                name: "optics".into(),
                reason: "waist and Rayleigh range must be > 0 and yield_exponent ≥ 1".into(),
            });
        }
        Ok(w)
    }

    /// Output file stem of block `i`.
    pub fn block_name(&self, i: usize) -> String {
        match &self.blocks[i].name {
            Some(n) => n.clone(),
            None => format!("{i}_{}", self.blocks[i].protocol.kind().name()),
        }
    }
}

/// Semantic checks. Each problem is reported separately; an invalid block
/// does not hide problems in later blocks.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let diag = |path: String, e: &dyn fmt::Display| Diagnostic {
        path,
        line: None,
        message: e.to_string(),
        suggestion: None,
    };
    let mut seen = std::collections::HashSet::new();
    for (i, nv) in cfg.nvs.iter().enumerate() {
        if !seen.insert(nv.id.as_str()) {
            out.push(diag(format!("nv[{i}].id"), &format!("duplicate NV identifier `{}`", nv.id)));
        }
    }
    let mut names = std::collections::HashSet::new();
    for i in 0..cfg.blocks.len() {
        let n = cfg.block_name(i);
        if n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            out.push(diag(format!("block[{i}].name"), &"names may only use letters, digits, `_` and `-`"));
        }
        if !names.insert(n.clone()) {
            out.push(diag(format!("block[{i}].name"), &format!("duplicate block name `{n}`")));
        }
    }
    if cfg.blocks.is_empty() {
        out.push(diag("block".into(), &"at least one [[block]] is required"));
    }
    if !out.is_empty() {
        return out;
    }
    let world = match cfg.world() {
        Ok(w) => w,
        Err(e) => {
            out.push(diag(String::new(), &e));
            return out;
        }
    };
    for (i, b) in cfg.blocks.iter().enumerate() {
        if let Err(e) = build_protocol(&b.protocol, &world) {
            out.push(diag(format!("block[{i}].protocol"), &e));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccdmr_core::sequence::protocols::CcdmrParams;

    const MINIMAL: &str = "seed = 7\n\n[[nv]]\nid = \"a\"\nposition = [\"0um\", \"0um\", \"4um\"]\n\n[[block]]\n\n[block.protocol]\nkind = \"ccdmr\"\n";

    #[test]
    fn minimal_config_uses_reference_defaults() {
        let cfg = load_config(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.nvs[0].id, "a");
        assert_eq!(cfg.block_name(0), "0_ccdmr");
        assert_eq!(cfg.blocks[0].protocol, Protocol::Ccdmr(CcdmrParams::default()));
    }

    #[test]
    fn power_with_unit_suffix_is_stored_in_watts() {
        let text = format!("{MINIMAL}read = {{ power = \"3.5mW\" }}\n");
        let cfg = parse_config(&text).unwrap();
        let Protocol::Ccdmr(p) = &cfg.blocks[0].protocol else { panic!() };
        approx::assert_relative_eq!(p.read.power.value(), 3.5e-3, max_relative = 1e-15);
        let text = format!("{MINIMAL}read = {{ power = \"3500uW\" }}\n");
        let Protocol::Ccdmr(q) = &parse_config(&text).unwrap().blocks[0].protocol else { panic!() };
        approx::assert_relative_eq!(q.read.power.value(), 3.5e-3, max_relative = 1e-12);
    }

    #[test]
    fn bare_numbers_are_rejected() {
        let text = format!("{MINIMAL}read = {{ power = 0.0035 }}\n");
        let e = parse_config(&text).unwrap_err();
        assert!(e.0[0].message.contains("bare number 0.0035"), "{e}");
        assert_eq!(e.0[0].path, "block[0].protocol");
    }

    #[test]
    fn unknown_key_names_nearest_valid_key() {
        let text = "seed = 1\n\n[optics]\nwaste = \"1um\"\n\n[[block]]\n[block.protocol]\nkind = \"rabi\"\n";
        let e = parse_config(text).unwrap_err();
        let d = &e.0[0];
        assert_eq!(d.line, Some(4), "{e}");
        assert!(d.message.contains("`waste`"), "{e}");
        assert_eq!(d.suggestion.as_deref(), Some("waist"));
        assert!(e.to_string().contains("did you mean `waist`"));
    }

    #[test]
    fn misspelt_read_key_suggestion_matches_edit_distance_oracle() {
        let text = format!("{MINIMAL}read = {{ lazer = \"3.5mW\" }}\n");
        let e = parse_config(&text).unwrap_err();
        let d = &e.0[0];
        assert!(d.message.contains("`lazer`"), "{e}");
        let keys = ["power", "wavelength", "duration", "bias", "position", "electrode", "window", "baseline"];
        // oracle: plain Levenshtein by dynamic programming
        fn lev(a: &str, b: &str) -> usize {
            let b: Vec<char> = b.chars().collect();
            let mut row: Vec<usize> = (0..=b.len()).collect();
            for (i, ca) in a.chars().enumerate() {
                let mut prev = row[0];
                row[0] = i + 1;
                for j in 0..b.len() {
                    let cur = row[j + 1];
                    row[j + 1] = (prev + usize::from(ca != b[j])).min(row[j] + 1).min(cur + 1);
                    prev = cur;
                }
            }
            row[b.len()]
        }
        let best = keys.iter().min_by_key(|k| (lev("lazer", k), **k)).unwrap();
        assert_eq!(d.suggestion.as_deref(), Some(*best));
    }

    #[test]
    fn unknown_protocol_kind_is_suggested() {
        let e = parse_config("seed = 1\n[[block]]\n[block.protocol]\nkind = \"rabbi\"\n").unwrap_err();
        assert_eq!(e.0[0].suggestion.as_deref(), Some("rabi"), "{e}");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let e = parse_config("seed = 1\n\n[[block]\n").unwrap_err();
        assert_eq!(e.0[0].line, Some(3), "{e}");
    }

    #[test]
    fn validation_reports_every_problem() {
        let mut cfg = ExperimentConfig::reference(1, vec![BlockConfig::new("a b", Protocol::Ccdmr(CcdmrParams::default()))]);
        cfg.nvs.push(NvConfig::new("nv1", 1.0, 1.0, 4.0));
        let errs = validate(&cfg);
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert_eq!(errs[0].path, "nv[1].id");
        assert_eq!(errs[1].path, "block[0].name");
    }

    #[test]
    fn invalid_block_is_reported_with_its_path() {
        let mut p = CcdmrParams::default();
        p.read.power = Quantity::new(-1.0);
        let cfg = ExperimentConfig::reference(1, vec![BlockConfig::new("ok", Protocol::Ccdmr(CcdmrParams::default())), BlockConfig::new("bad", Protocol::Ccdmr(p))]);
        let errs = validate(&cfg);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "block[1].protocol");
    }

    #[test]
    fn nonzero_field_selects_split_manifold() {
        let text = format!("{MINIMAL}\n[spin]\nfield = \"4G\"\n");
        let cfg = load_config(&text).unwrap();
        let w = cfg.world().unwrap();
        assert_eq!(w.manifold, SpinManifold::Split);
        approx::assert_relative_eq!(w.spin.field_g, 4.0);
    }

    mod roundtrip {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn serialize_then_parse_is_identity(
                seed in any::<u64>(),
                field in 0.0f64..50.0,
                gap in 2.0f64..40.0,
                x in -5.0f64..5.0,
                z in 0.5f64..10.0,
                mw in 2.5e9f64..3.2e9,
                n in 2usize..60,
            ) {
                let mut p = CcdmrParams::default();
                p.frequencies = ccdmr_core::sequence::protocols::Sweep::linear(mw, mw + 1e7, n);
                let mut cfg = ExperimentConfig::reference(seed, vec![BlockConfig::new("b", Protocol::Ccdmr(p))]);
                cfg.spin.field = Quantity::new(field);
                cfg.device.gap = Quantity::new(gap);
                cfg.nvs.push(NvConfig::new("nv2", x, 1.0, z));
                let text = to_toml(&cfg);
                let back = parse_config(&text).unwrap();
                prop_assert_eq!(&back, &cfg);
                prop_assert_eq!(to_toml(&back), text);
            }
        }
    }
}

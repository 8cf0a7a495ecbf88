//! Interface trap bank: two classes of hole traps that fill from capture
//! flux, hold their charge in the dark and empty under super-threshold
//! illumination.
//!
//! Occupancies are counted in elementary charges internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{photon_energy_ev, ELEMENTARY_CHARGE};

/// Behaviour of the spectral response above the peak energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum AbovePeak {
    #[default]
    Plateau,
    /// Linear fall per eV above the peak, floored at 0.
    Linear { slope_per_ev: f64 },
    /// exp(−(E − E_pk)/width).
    Exponential { width_ev: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralResponse {
    pub threshold_ev: f64,
    pub peak_ev: f64,
    pub above: AbovePeak,
}

impl Default for SpectralResponse {
    fn default() -> Self {
        Self {
            threshold_ev: 2.2,
            // the 540 nm photon energy
            peak_ev: photon_energy_ev(540.0),
            above: AbovePeak::Plateau,
        }
    }
}

impl SpectralResponse {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_ev > 0.0 && self.peak_ev > self.threshold_ev) {
            return Err(Error::param("traps.spectral", "need 0 < threshold < peak energy"));
        }
        match self.above {
            AbovePeak::Linear { slope_per_ev } if !(slope_per_ev >= 0.0) => {
                Err(Error::param("traps.spectral.slope", "must be ≥ 0"))
            }
            AbovePeak::Exponential { width_ev } if !(width_ev > 0.0) => {
                Err(Error::param("traps.spectral.width", "must be > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn at_energy(&self, e_ev: f64) -> f64 {
        if e_ev < self.threshold_ev {
            0.0
        } else if e_ev <= self.peak_ev {
            (e_ev - self.threshold_ev) / (self.peak_ev - self.threshold_ev)
        } else {
            match self.above {
                AbovePeak::Plateau => 1.0,
                AbovePeak::Linear { slope_per_ev } => (1.0 - slope_per_ev * (e_ev - self.peak_ev)).max(0.0),
                AbovePeak::Exponential { width_ev } => (-(e_ev - self.peak_ev) / width_ev).exp(),
            }
        }
        .clamp(0.0, 1.0)
    }

    pub fn at_wavelength(&self, nm: f64) -> f64 {
        self.at_energy(photon_energy_ev(nm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapClass {
    /// Occupied traps (elementary charges).
    pub occupancy: f64,
    pub capacity: f64,
    /// Share of the capture flux directed to this class.
    pub split: f64,
    /// Release rate per watt of edge illumination at full spectral response.
    pub kappa_per_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapBank {
    pub fast: TrapClass,
    pub slow: TrapClass,
    pub spectral: SpectralResponse,
}

/// Total capacity such that a 1 s, 3.5 mW pump of a gap-centre NV at the
/// default calibration fills each bank halfway.
pub const DEFAULT_CAPACITY: f64 = 1.64e5;

impl Default for TrapBank {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, 0.3, 20.0 / 3.5e-3, 0.5 / 3.5e-3, SpectralResponse::default())
    }
}

impl TrapBank {
    /// Empty bank of total capacity `capacity` with fast share `fast_split`;
    /// each class gets capacity proportional to its flux share.
    pub fn new(capacity: f64, fast_split: f64, kappa_fast: f64, kappa_slow: f64, spectral: SpectralResponse) -> Self {
        Self {
            fast: TrapClass {
                occupancy: 0.0,
                capacity: capacity * fast_split,
                split: fast_split,
                kappa_per_w: kappa_fast,
            },
            slow: TrapClass {
                occupancy: 0.0,
                capacity: capacity * (1.0 - fast_split),
                split: 1.0 - fast_split,
                kappa_per_w: kappa_slow,
            },
            spectral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("fast", &self.fast), ("slow", &self.slow)] {
            if !(c.capacity > 0.0 && c.kappa_per_w >= 0.0 && (0.0..=1.0).contains(&c.split)) {
                return Err(Error::param(
                    format!("traps.{name}"),
                    "capacity must be > 0, κ ≥ 0 and split in [0, 1]",
                ));
            }
            if !(c.occupancy >= 0.0 && c.occupancy <= c.capacity) {
                return Err(Error::param(format!("traps.{name}.occupancy"), "must lie in [0, capacity]"));
            }
        }
        if ((self.fast.split + self.slow.split) - 1.0).abs() > 1e-12 {
            return Err(Error::param("traps.split", "class shares must sum to 1"));
        }
        self.spectral.validate()
    }

    pub fn classes(&self) -> [&TrapClass; 2] {
        [&self.fast, &self.slow]
    }

    pub fn total(&self) -> f64 {
        self.fast.occupancy + self.slow.occupancy
    }

    pub fn capacity(&self) -> f64 {
        self.fast.capacity + self.slow.capacity
    }

    pub fn total_coulombs(&self) -> f64 {
        self.total() * ELEMENTARY_CHARGE
    }

    pub fn emptied(&self) -> Self {
        let mut b = self.clone();
        b.fast.occupancy = 0.0;
        b.slow.occupancy = 0.0;
        b
    }

    /// Deliver `count` holes. The logistic law dQ/dn = f·(1 − Q/N) is
    /// integrated exactly, so any partition of a delivery composes to the
    /// same result.
    pub fn deliver(&self, count: f64) -> Self {
        let mut b = self.clone();
        for c in [&mut b.fast, &mut b.slow] {
            let n = c.capacity;
            c.occupancy = n - (n - c.occupancy) * (-c.split * count.max(0.0) / n).exp();
            c.occupancy = c.occupancy.clamp(0.0, n);
        }
        b
    }

    /// Fill under a constant capture flux (holes/s) for `dt`.
    pub fn fill(&self, flux: f64, dt: f64) -> Result<Self> {
        if !(flux >= 0.0 && flux.is_finite()) {
            return Err(Error::param("flux", "must be finite and ≥ 0"));
        }
        if !(dt > 0.0) {
            return Err(Error::param("dt", "must be > 0"));
        }
        Ok(self.deliver(flux * dt))
    }

    /// Holding in the dark. Thermal emission is zero, so nothing changes.
    pub fn wait(&self, _duration_s: f64) -> Self {
        self.clone()
    }

    /// Per-class release rates (s⁻¹) for `power_w` reaching the edge.
    pub fn release_rate(&self, power_w: f64, wavelength_nm: f64) -> Result<[f64; 2]> {
        if !(400.0..=800.0).contains(&wavelength_nm) {
            return Err(Error::OutOfRange {
                name: "read wavelength (nm)".into(),
                value: wavelength_nm,
                min: 400.0,
                max: 800.0,
            });
        }
        if !(power_w >= 0.0 && power_w.is_finite()) {
            return Err(Error::param("read power", "must be finite and ≥ 0"));
        }
        let s = self.spectral.at_wavelength(wavelength_nm);
        Ok([self.fast.kappa_per_w * power_w * s, self.slow.kappa_per_w * power_w * s])
    }

    /// Illuminate for `duration_s`; returns the depleted bank and the release
    /// profile r(t) = Σ k_c·Q_c(0)·e^{−k_c·t}.
    pub fn discharge(&self, power_w: f64, wavelength_nm: f64, duration_s: f64) -> Result<(Self, ReleaseProfile)> {
        if !(duration_s >= 0.0) {
            return Err(Error::param("duration", "must be ≥ 0"));
        }
        let k = self.release_rate(power_w, wavelength_nm)?;
        let profile = ReleaseProfile {
            initial: [self.fast.occupancy, self.slow.occupancy],
            rates: k,
            duration_s,
        };
        let mut b = self.clone();
        let released = profile.released_by_class(duration_s);
        b.fast.occupancy = (self.fast.occupancy - released[0]).max(0.0);
        b.slow.occupancy = (self.slow.occupancy - released[1]).max(0.0);
        Ok((b, profile))
    }
}

/// Analytic release profile of a discharge, in holes per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReleaseProfile {
    pub initial: [f64; 2],
    pub rates: [f64; 2],
    pub duration_s: f64,
}

impl ReleaseProfile {
    pub fn empty() -> Self {
        Self {
            initial: [0.0; 2],
            rates: [0.0; 2],
            duration_s: 0.0,
        }
    }

    /// r(t) for 0 ≤ t ≤ duration, 0 outside.
    pub fn rate(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.duration_s {
            return 0.0;
        }
        (0..2).map(|c| self.rates[c] * self.initial[c] * (-self.rates[c] * t).exp()).sum()
    }

    pub fn released_by_class(&self, t: f64) -> [f64; 2] {
        let t = t.clamp(0.0, self.duration_s);
        // −expm1 keeps small k·t accurate
        [0, 1].map(|c| self.initial[c] * -(-self.rates[c] * t).exp_m1())
    }

    pub fn released(&self, t: f64) -> f64 {
        self.released_by_class(t).iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.released(self.duration_s)
    }

    /// Exponential terms (amplitude in holes/s, rate in s⁻¹).
    pub fn terms(&self) -> [(f64, f64); 2] {
        [0, 1].map(|c| (self.rates[c] * self.initial[c], self.rates[c]))
    }
}

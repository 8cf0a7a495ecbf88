//! Unit-suffixed quantities for the configuration layer.
//!
//! A quantity is written as a number followed by a unit, e.g. `3.5mW` or
//! `2.87 GHz`. Prefixes are powers of ten, so scaling is done by shifting the
//! decimal exponent of the literal before converting it to `f64`; `3.5mW`
//! therefore lands on exactly the same double as the literal `3.5e-3`.

use std::fmt;
use std::marker::PhantomData;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A physical dimension with its canonical unit and accepted spellings.
pub trait Dimension {
    const NAME: &'static str;
    const CANONICAL: &'static str;
    /// (suffix, power of ten relative to the canonical unit)
    const UNITS: &'static [(&'static str, i32)];
}

macro_rules! dimension {
    ($(#[$m:meta])* $name:ident, $label:literal, $canon:literal, [$(($u:literal, $e:expr)),* $(,)?]) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub struct $name;
        impl Dimension for $name {
            const NAME: &'static str = $label;
            const CANONICAL: &'static str = $canon;
            const UNITS: &'static [(&'static str, i32)] = &[$(($u, $e)),*];
        }
    };
}

dimension!(PowerDim, "power", "W", [("W", 0), ("mW", -3), ("uW", -6), ("µW", -6), ("nW", -9)]);
dimension!(TimeDim, "time", "s", [
    ("s", 0), ("ms", -3), ("us", -6), ("µs", -6), ("ns", -9), ("min", i32::MIN), ("h", i32::MAX)
]);
dimension!(FrequencyDim, "frequency", "Hz", [("Hz", 0), ("kHz", 3), ("MHz", 6), ("GHz", 9)]);
dimension!(VoltageDim, "voltage", "V", [("V", 0), ("mV", -3)]);
dimension!(
    /// Lengths are kept in µm.
    LengthDim, "length", "um", [("um", 0), ("µm", 0), ("nm", -3), ("mm", 3)]
);
dimension!(
    /// Wavelengths are kept in nm.
    WavelengthDim, "wavelength", "nm", [("nm", 0), ("um", 3), ("µm", 3)]
);
dimension!(
    /// Magnetic field, kept in gauss.
    FieldDim, "magnetic field", "G", [("G", 0), ("mG", -3), ("T", 4), ("mT", 1), ("uT", -2), ("µT", -2)]
);
dimension!(CurrentDim, "current", "A", [("A", 0), ("mA", -3), ("uA", -6), ("µA", -6), ("nA", -9), ("pA", -12), ("fA", -15)]);
dimension!(RateDim, "rate", "/s", [("/s", 0), ("Hz", 0), ("kHz", 3), ("MHz", 6), ("GHz", 9)]);
dimension!(RatePerPowerDim, "rate per power", "/s/W", [("/s/W", 0), ("/s/mW", 3), ("/s/uW", 6)]);

pub type Power = Quantity<PowerDim>;
pub type Time = Quantity<TimeDim>;
pub type Frequency = Quantity<FrequencyDim>;
pub type Voltage = Quantity<VoltageDim>;
pub type Length = Quantity<LengthDim>;
pub type Wavelength = Quantity<WavelengthDim>;
pub type Field = Quantity<FieldDim>;
pub type Current = Quantity<CurrentDim>;
pub type Rate = Quantity<RateDim>;
pub type RatePerPower = Quantity<RatePerPowerDim>;

/// A value stored in the canonical unit of `D`.
pub struct Quantity<D> {
    value: f64,
    _dim: PhantomData<D>,
}

impl<D> Quantity<D> {
    pub const fn new(value: f64) -> Self {
        Self {
            value,
            _dim: PhantomData,
        }
    }

    pub const fn value(self) -> f64 {
        self.value
    }
}

impl<D> Clone for Quantity<D> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<D> Copy for Quantity<D> {}
impl<D> PartialEq for Quantity<D> {
    fn eq(&self, other: &Self) -> bool {
        self.value.to_bits() == other.value.to_bits() || self.value == other.value
    }
}

impl<D: Dimension> fmt::Debug for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, D::CANONICAL)
    }
}

impl<D: Dimension> fmt::Display for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, D::CANONICAL)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitError(pub String);

impl fmt::Display for UnitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UnitError {}

/// Split a decimal literal into its significand digits and exponent.
fn split_decimal(num: &str) -> Option<(&str, i32)> {
    if num.is_empty() {
        return None;
    }
    let (sig, exp) = match num.find(['e', 'E']) {
        Some(i) => (&num[..i], num[i + 1..].parse::<i32>().ok()?),
        None => (num, 0),
    };
    let digits = sig.trim_start_matches(['+', '-']);
    if digits.is_empty()
        || digits == "."
        || !digits.chars().all(|c| c.is_ascii_digit() || c == '.')
        || digits.matches('.').count() > 1
    {
        return None;
    }
    Some((sig, exp))
}

fn scale_exact(num: &str, shift: i32) -> Option<f64> {
    let (sig, exp) = split_decimal(num)?;
    format!("{sig}e{}", exp.checked_add(shift)?).parse().ok()
}

impl<D: Dimension> Quantity<D> {
    pub fn parse(text: &str) -> Result<Self, UnitError> {
        let s = text.trim();
        let split = s
            .char_indices()
            .find(|&(i, c)| {
                !(c.is_ascii_digit()
                    || c == '.'
                    || ((c == '+' || c == '-') && (i == 0 || matches!(s[..i].chars().last(), Some('e' | 'E'))))
                    || ((c == 'e' || c == 'E')
                        && s[i + 1..].starts_with(|n: char| n.is_ascii_digit() || n == '-' || n == '+')))
            })
            .map(|(i, _)| i)
            .unwrap_or(s.len());
        let (num, unit) = (s[..split].trim(), s[split..].trim());
        if unit.is_empty() {
            return Err(UnitError(format!(
                "`{s}` has no unit; expected a {} such as `1{}`",
                D::NAME,
                D::CANONICAL
            )));
        }
        let Some(&(_, shift)) = D::UNITS.iter().find(|(u, _)| *u == unit) else {
            let known: Vec<&str> = D::UNITS.iter().map(|(u, _)| *u).collect();
            return Err(UnitError(format!(
                "unknown {} unit `{unit}` in `{s}`; expected one of {}",
                D::NAME,
                known.join(", ")
            )));
        };
        let value = match shift {
            // minutes and hours are not decimal prefixes
            i32::MIN => scale_exact(num, 0).map(|v| v * 60.0),
            i32::MAX => scale_exact(num, 0).map(|v| v * 3600.0),
            k => scale_exact(num, k),
        };
        match value {
            Some(v) if v.is_finite() => Ok(Self::new(v)),
            _ => Err(UnitError(format!("`{s}` is not a finite number"))),
        }
    }
}

impl<D: Dimension> std::str::FromStr for Quantity<D> {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl<D: Dimension> Serialize for Quantity<D> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

struct QuantityVisitor<D>(PhantomData<D>);

impl<D: Dimension> Visitor<'_> for QuantityVisitor<D> {
    type Value = Quantity<D>;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a {} with a unit suffix, e.g. \"1{}\"", D::NAME, D::CANONICAL)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
        Quantity::parse(v).map_err(|e| E::custom(e.0))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
        Err(E::custom(format!(
            "bare number {v} given for a {}; add a unit suffix such as \"{v}{}\"",
            D::NAME,
            D::CANONICAL
        )))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
        self.visit_f64(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
        self.visit_f64(v as f64)
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Quantity<D> {
    fn deserialize<De: Deserializer<'de>>(deserializer: De) -> Result<Self, De::Error> {
        deserializer.deserialize_any(QuantityVisitor(PhantomData))
    }
}

/// Photon energy (eV) of light at `wavelength_nm`.
pub fn photon_energy_ev(wavelength_nm: f64) -> f64 {
    1239.84 / wavelength_nm
}

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

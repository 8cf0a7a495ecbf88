//! Device layout, NV registry and the confocal spot model.
//!
//! Coordinates are in µm: x runs across the inter-electrode gap, y along the
//! facing edges and z into the diamond (surface at z = 0, depth positive).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn lateral_distance(&self, other: &Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

/// Axis-aligned electrode footprint on the surface plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Distance from (x, y) to the rectangle; 0 on or inside it.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x_min - x).max(0.0).max(x - self.x_max);
        let dy = (self.y_min - y).max(0.0).max(y - self.y_max);
        dx.hypot(dy)
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * ((self.x_max - self.x_min) + (self.y_max - self.y_min))
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }

    fn separation(&self, other: &Rect) -> f64 {
        let dx = (other.x_min - self.x_max).max(self.x_min - other.x_max).max(0.0);
        let dy = (other.y_min - self.y_max).max(self.y_min - other.y_max).max(0.0);
        dx.hypot(dy)
    }
}

/// A straight boundary segment in the surface plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

impl Segment {
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let (ax, ay) = self.a;
        let (bx, by) = self.b;
        let (vx, vy) = (bx - ax, by - ay);
        let len2 = vx * vx + vy * vy;
        let t = if len2 > 0.0 {
            (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (x - (ax + t * vx)).hypot(y - (ay + t * vy))
    }

    pub fn length(&self) -> f64 {
        (self.b.0 - self.a.0).hypot(self.b.1 - self.a.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    /// Held at the applied bias.
    Biased,
    /// Held at 0 V.
    Ground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub footprint: Rect,
    pub terminal: Terminal,
}

/// Two planar pads separated by a gap, one on the bias line and one grounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLayout {
    electrodes: Vec<Electrode>,
}

impl DeviceLayout {
    pub fn new(electrodes: Vec<Electrode>) -> Result<Self> {
        if electrodes.len() != 2 {
            return Err(Error::InvalidLayout(format!(
                "expected exactly two electrodes, got {}",
                electrodes.len()
            )));
        }
        for e in &electrodes {
            let r = &e.footprint;
            if !(r.x_max > r.x_min && r.y_max > r.y_min) {
                return Err(Error::InvalidLayout(format!(
                    "electrode `{}` has a degenerate footprint",
                    e.name
                )));
            }
        }
        if electrodes[0].name == electrodes[1].name {
            return Err(Error::InvalidLayout("electrode names must differ".into()));
        }
        let biased = electrodes
            .iter()
            .filter(|e| e.terminal == Terminal::Biased)
            .count();
        if biased != 1 {
            return Err(Error::InvalidLayout(
                "exactly one electrode must be on the bias line".into(),
            ));
        }
        let (a, b) = (&electrodes[0].footprint, &electrodes[1].footprint);
        if a.overlaps(b) || a.separation(b) <= 0.0 {
            return Err(Error::InvalidLayout(
                "electrodes overlap or touch; the gap must be positive".into(),
            ));
        }
        Ok(Self { electrodes })
    }

    /// Two `pad_w × pad_h` pads facing each other across `gap`, centred on
    /// the origin. The right-hand pad is on the bias line.
    pub fn facing_pads(gap: f64, pad_w: f64, pad_h: f64) -> Result<Self> {
        if !(gap > 0.0 && pad_w > 0.0 && pad_h > 0.0) {
            return Err(Error::InvalidLayout(
                "gap and pad dimensions must be positive".into(),
            ));
        }
        let half = gap / 2.0;
        let (y0, y1) = (-pad_h / 2.0, pad_h / 2.0);
        Self::new(vec![
            Electrode {
                name: "left".into(),
                footprint: Rect::new(-half - pad_w, -half, y0, y1),
                terminal: Terminal::Ground,
            },
            Electrode {
                name: "right".into(),
                footprint: Rect::new(half, half + pad_w, y0, y1),
                terminal: Terminal::Biased,
            },
        ])
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn electrode(&self, idx: usize) -> &Electrode {
        &self.electrodes[idx]
    }

    pub fn electrode_index(&self, name: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.name == name)
    }

    pub fn gap_width(&self) -> f64 {
        self.electrodes[0]
            .footprint
            .separation(&self.electrodes[1].footprint)
    }

    /// Index of the electrode at the higher potential; `None` at zero bias.
    pub fn positive_electrode(&self, bias_v: f64) -> Option<usize> {
        let biased = self
            .electrodes
            .iter()
            .position(|e| e.terminal == Terminal::Biased)
            .expect("validated layout");
        if bias_v > 0.0 {
            Some(biased)
        } else if bias_v < 0.0 {
            Some(1 - biased)
        } else {
            None
        }
    }

    /// Potential of electrode `idx` under `bias_v`.
    pub fn potential(&self, idx: usize, bias_v: f64) -> f64 {
        match self.electrodes[idx].terminal {
            Terminal::Biased => bias_v,
            Terminal::Ground => 0.0,
        }
    }

    /// Lateral distance to the footprint of electrode `idx` (0 on or under it).
    pub fn distance_to_electrode(&self, idx: usize, point: &Point3) -> f64 {
        self.electrodes[idx].footprint.distance(point.x, point.y)
    }

    /// Electrode whose footprint is laterally closest to `point`.
    pub fn nearest_electrode(&self, point: &Point3) -> usize {
        let d0 = self.distance_to_electrode(0, point);
        let d1 = self.distance_to_electrode(1, point);
        if d1 < d0 {
            1
        } else {
            0
        }
    }

    /// Edge of electrode `idx` that faces the other pad across the gap.
    pub fn facing_edge(&self, idx: usize) -> Segment {
        let me = &self.electrodes[idx].footprint;
        let other = &self.electrodes[1 - idx].footprint;
        let dx = (other.x_min - me.x_max).max(me.x_min - other.x_max);
        let dy = (other.y_min - me.y_max).max(me.y_min - other.y_max);
        if dx >= dy {
            let x = if other.x_min >= me.x_max {
                me.x_max
            } else {
                me.x_min
            };
            Segment {
                a: (x, me.y_min),
                b: (x, me.y_max),
            }
        } else {
            let y = if other.y_min >= me.y_max {
                me.y_max
            } else {
                me.y_min
            };
            Segment {
                a: (me.x_min, y),
                b: (me.x_max, y),
            }
        }
    }
}

impl Default for DeviceLayout {
    fn default() -> Self {
        Self::facing_pads(10.0, 10.0, 10.0).expect("default layout is valid")
    }
}

/// Lateral distance from `point` to the nearest electrode boundary; 0 when
/// the point lies on or under an electrode footprint.
pub fn shortest_edge_distance(point: &Point3, layout: &DeviceLayout) -> f64 {
    layout
        .electrodes()
        .iter()
        .map(|e| e.footprint.distance(point.x, point.y))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvRecord {
    pub id: String,
    pub position: Point3,
    /// Symmetry axis, unit norm.
    pub axis: [f64; 3],
    /// Rabi frequency (MHz) produced by unit microwave drive amplitude.
    pub rabi_per_drive_mhz: f64,
    pub t2_us: f64,
    /// Hole-capture coefficient: NV⁻→NV⁰ rate (s⁻¹) per A/µm of hole line density.
    pub hole_capture_coeff: f64,
}

impl NvRecord {
    pub const DEFAULT_RABI_MHZ: f64 = 4.523;
    pub const DEFAULT_T2_US: f64 = 24.90;
    pub const DEFAULT_HOLE_CAPTURE: f64 = 1.33e13;

    pub fn new(id: impl Into<String>, position: Point3) -> Result<Self> {
        let s = 1.0 / 3f64.sqrt();
        let nv = Self {
            id: id.into(),
            position,
            axis: [s, s, s],
            rabi_per_drive_mhz: Self::DEFAULT_RABI_MHZ,
            t2_us: Self::DEFAULT_T2_US,
            hole_capture_coeff: Self::DEFAULT_HOLE_CAPTURE,
        };
        nv.validate()?;
        Ok(nv)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position.z > 0.0) {
            return Err(Error::param(
                format!("nv.{}.position", self.id),
                "NV must sit below the surface (z > 0)",
            ));
        }
        let norm = self.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                format!("nv.{}.axis", self.id),
                format!("axis must have unit norm, got {norm}"),
            ));
        }
        if !(self.rabi_per_drive_mhz >= 0.0 && self.t2_us > 0.0 && self.hole_capture_coeff >= 0.0)
        {
            return Err(Error::param(
                format!("nv.{}", self.id),
                "Rabi frequency and capture coefficient must be ≥ 0, T2 > 0",
            ));
        }
        Ok(())
    }
}

/// Focused Gaussian beam. `waist_um` is the 1/e² intensity radius at focus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserSpot {
    pub center: Point3,
    pub wavelength_nm: f64,
    pub power_w: f64,
    pub waist_um: f64,
    pub rayleigh_um: f64,
}

impl LaserSpot {
    pub const DEFAULT_WAIST_UM: f64 = 0.2;
    pub const DEFAULT_RAYLEIGH_UM: f64 = 0.6;

    pub fn new(center: Point3, wavelength_nm: f64, power_w: f64) -> Result<Self> {
        let spot = Self {
            center,
            wavelength_nm,
            power_w,
            waist_um: Self::DEFAULT_WAIST_UM,
            rayleigh_um: Self::DEFAULT_RAYLEIGH_UM,
        };
        spot.validate()?;
        Ok(spot)
    }

    pub fn with_waist(mut self, waist_um: f64) -> Self {
        self.waist_um = waist_um;
        self
    }

    pub fn validate(&self) -> Result<()> {
        crate::error::check_range("spot.power", self.power_w, 0.0, f64::MAX)?;
        crate::error::check_range("spot.wavelength", self.wavelength_nm, 500.0, 780.0)?;
        if !(self.waist_um > 0.0 && self.rayleigh_um > 0.0) {
            return Err(Error::param("spot.waist", "waist and Rayleigh range must be > 0"));
        }
        Ok(())
    }

    /// 1/e² radius at axial offset `dz` from focus.
    pub fn waist_at(&self, dz: f64) -> f64 {
        self.waist_um * (1.0 + (dz / self.rayleigh_um).powi(2)).sqrt()
    }

    /// Intensity FWHM of the focal spot.
    pub fn fwhm(&self) -> f64 {
        self.waist_um * (2.0 * std::f64::consts::LN_2).sqrt()
    }
}

/// Fraction of on-axis focal intensity reaching `target`: exp(−2r²/w²) with
/// the defocus-widened waist, scaled by (w₀/w)² so that it never exceeds 1.
pub fn spot_power_at(target: &Point3, spot: &LaserSpot) -> f64 {
    let w = spot.waist_at(target.z - spot.center.z);
    let r2 = (target.x - spot.center.x).powi(2) + (target.y - spot.center.y).powi(2);
    (spot.waist_um / w).powi(2) * (-2.0 * r2 / (w * w)).exp()
}

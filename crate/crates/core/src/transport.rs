//! Carrier routing: holes emitted by a pumped NV reaching the electrode
//! interface traps, and the hole current injected by an illuminated,
//! forward-biased electrode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{shortest_edge_distance, DeviceLayout, NvRecord, Point3};
use crate::photophysics::CarrierEmission;

/// Distance kernel k(d) with k(0) = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DistanceKernel {
    /// 1/(1 + d/d₀)
    Hyperbolic { d0_um: f64 },
    /// (1 + d/d₀)^(−n)
    PowerLaw { d0_um: f64, exponent: f64 },
}

impl DistanceKernel {
    pub fn at(&self, d_um: f64) -> f64 {
        let d = d_um.max(0.0);
        match *self {
            DistanceKernel::Hyperbolic { d0_um } => 1.0 / (1.0 + d / d0_um),
            DistanceKernel::PowerLaw { d0_um, exponent } => (1.0 + d / d0_um).powf(-exponent),
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            DistanceKernel::Hyperbolic { d0_um } => d0_um > 0.0,
            DistanceKernel::PowerLaw { d0_um, exponent } => d0_um > 0.0 && exponent > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(name, "kernel length and exponent must be > 0"))
        }
    }
}

/// Interface capture efficiency η(d) = η₀·k(d); the remainder is lost to
/// bulk traps that fill but never release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureModel {
    pub eta0: f64,
    pub kernel: DistanceKernel,
}

impl Default for CaptureModel {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            kernel: DistanceKernel::Hyperbolic { d0_um: 10.0 },
        }
    }
}

impl CaptureModel {
    pub fn validate(&self) -> Result<()> {
        crate::error::check_range("capture.eta0", self.eta0, 0.0, 1.0)?;
        self.kernel.validate("capture.kernel")
    }

    pub fn eta(&self, d_um: f64) -> f64 {
        self.eta0 * self.kernel.at(d_um)
    }
}

/// Holes delivered per electrode bank, plus the bulk share.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSplit {
    pub per_electrode: Vec<f64>,
    pub interface: f64,
    pub bulk_loss: f64,
}

/// Route an amount of holes emitted at `position`: the interface share is
/// η(shortest edge distance), divided between the electrodes in proportion
/// to η evaluated at each electrode's own distance.
pub fn route_holes(position: &Point3, holes: f64, layout: &DeviceLayout, m: &CaptureModel) -> CaptureSplit {
    let d = shortest_edge_distance(position, layout);
    let interface = holes * m.eta(d);
    let weights: Vec<f64> = (0..layout.electrodes().len())
        .map(|i| m.eta(layout.distance_to_electrode(i, position)))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let per_electrode = weights
        .iter()
        .map(|w| if wsum > 0.0 { interface * w / wsum } else { 0.0 })
        .collect();
    CaptureSplit {
        per_electrode,
        interface,
        bulk_loss: holes - interface,
    }
}

/// Holes per second delivered to the trap banks by `source` while it emits
/// `emission` (counts over `emission.interval_s`).
pub fn interface_capture_flux(
    source: &NvRecord,
    emission: &CarrierEmission,
    layout: &DeviceLayout,
    m: &CaptureModel,
) -> Result<CaptureSplit> {
    if emission.holes < 0.0 || emission.electrons < 0.0 {
        return Err(Error::param("emission", "counts must be ≥ 0"));
    }
    if !(emission.interval_s > 0.0) {
        return Err(Error::param("emission.interval", "must be > 0"));
    }
    Ok(route_holes(&source.position, emission.holes / emission.interval_s, layout, m))
}

/// Hole current density around the injecting electrode:
/// J(d) = (I_total / perimeter)·g(d), d the lateral distance to that electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct HoleCurrentField {
    layout: DeviceLayout,
    injector: Option<usize>,
    line_density_a_per_um: f64,
    kernel: DistanceKernel,
}

impl HoleCurrentField {
    /// `total_current_a` is the injected hole current; it flows from the
    /// electrode at the higher potential, so none flows at zero bias.
    pub fn new(layout: &DeviceLayout, bias_v: f64, total_current_a: f64, kernel: DistanceKernel) -> Result<Self> {
        if !(total_current_a >= 0.0 && total_current_a.is_finite()) {
            return Err(Error::param("hole_field.current", "must be finite and ≥ 0"));
        }
        kernel.validate("hole_field.kernel")?;
        let injector = layout.positive_electrode(bias_v);
        let line_density_a_per_um = match injector {
            Some(i) => total_current_a / layout.electrode(i).footprint.perimeter(),
            None => 0.0,
        };
        Ok(Self {
            layout: layout.clone(),
            injector,
            line_density_a_per_um,
            kernel,
        })
    }

    pub fn injector(&self) -> Option<usize> {
        self.injector
    }

    pub fn line_density(&self) -> f64 {
        self.line_density_a_per_um
    }

    pub fn injector_distance(&self, p: &Point3) -> f64 {
        match self.injector {
            Some(i) => self.layout.distance_to_electrode(i, p),
            None => f64::INFINITY,
        }
    }

    /// Density (A/µm) at `p`.
    pub fn density(&self, p: &Point3) -> f64 {
        match self.injector {
            Some(_) if self.line_density_a_per_um > 0.0 => {
                self.line_density_a_per_um * self.kernel.at(self.injector_distance(p))
            }
            _ => 0.0,
        }
    }

    /// Exponent added to the NV⁻ decay by an extra injected charge `q_c`
    /// (e.g. trapped holes released during the illumination).
    pub fn extra_dose(&self, nv: &NvRecord, q_c: f64) -> f64 {
        match self.injector {
            Some(i) => {
                let per_um = q_c / self.layout.electrode(i).footprint.perimeter();
                nv.hole_capture_coeff * per_um * self.kernel.at(self.injector_distance(&nv.position))
            }
            None => 0.0,
        }
    }
}

/// NV⁻→NV⁰ conversion rate (s⁻¹).
pub fn hole_capture_rate(nv: &NvRecord, field: &HoleCurrentField) -> f64 {
    nv.hole_capture_coeff * field.density(&nv.position)
}

/// p(T) = p₀·exp(−rate·T − extra), `extra` being any additional dose from
/// released trap charge accumulated up to T.
pub fn nv_population_decay(p0: f64, rate: f64, t_s: f64, extra: f64) -> Result<f64> {
    crate::error::check_range("p0", p0, 0.0, 1.0)?;
    if !(rate >= 0.0 && t_s >= 0.0 && extra >= 0.0) {
        return Err(Error::param("decay", "rate, time and extra dose must be ≥ 0"));
    }
    Ok(p0 * (-rate * t_s - extra).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Electrode, Rect, Terminal};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn em(holes: f64) -> CarrierEmission {
        CarrierEmission {
            electrons: holes,
            holes,
            photons: 0.0,
            interval_s: 1.0,
        }
    }

    fn nv_at(x: f64, y: f64) -> NvRecord {
        NvRecord::new("t", Point3::new(x, y, 4.0)).unwrap()
    }

    #[test]
    fn flux_at_edge_is_eta0() {
        let layout = DeviceLayout::default();
        let m = CaptureModel::default();
        let f = interface_capture_flux(&nv_at(5.0, 0.0), &em(1e6), &layout, &m).unwrap();
        assert_relative_eq!(f.interface, 0.1 * 1e6);
        assert_relative_eq!(f.interface + f.bulk_loss, 1e6);
        let zero = CaptureModel { eta0: 0.0, ..m };
        assert_eq!(interface_capture_flux(&nv_at(5.0, 0.0), &em(1e6), &layout, &zero).unwrap().interface, 0.0);
    }

    #[test]
    fn flux_decreases_with_source_distance() {
        let layout = DeviceLayout::default();
        let m = CaptureModel::default();
        let f: Vec<f64> = [0.0, 16.0, 50.0]
            .iter()
            .map(|y| interface_capture_flux(&nv_at(5.0, 5.0 + y), &em(1e6), &layout, &m).unwrap().interface)
            .collect();
        assert!(f[0] > f[1] && f[1] > f[2]);
    }

    fn long_pads() -> DeviceLayout {
        DeviceLayout::new(vec![
            Electrode {
                name: "ground".into(),
                footprint: Rect::new(-60.0, -20.0, -80.0, 80.0),
                terminal: Terminal::Ground,
            },
            Electrode {
                name: "bias".into(),
                footprint: Rect::new(20.0, 60.0, -80.0, 80.0),
                terminal: Terminal::Biased,
            },
        ])
        .unwrap()
    }

    #[test]
    fn rate_depends_on_edge_distance_only() {
        let layout = long_pads();
        let k = DistanceKernel::Hyperbolic { d0_um: 5.0 };
        let field = HoleCurrentField::new(&layout, 1.0, 3e-11, k).unwrap();
        let a = hole_capture_rate(&nv_at(10.0, -30.0), &field);
        let b = hole_capture_rate(&nv_at(10.0, -20.0), &field);
        assert_eq!(a, b);
        let zero = HoleCurrentField::new(&layout, 0.0, 3e-11, k).unwrap();
        assert_eq!(hole_capture_rate(&nv_at(10.0, 0.0), &zero), 0.0);
        let none = HoleCurrentField::new(&layout, 1.0, 0.0, k).unwrap();
        assert_eq!(hole_capture_rate(&nv_at(10.0, 0.0), &none), 0.0);
    }

    #[test]
    fn rate_linear_in_current() {
        let layout = long_pads();
        let k = DistanceKernel::Hyperbolic { d0_um: 5.0 };
        let nv = nv_at(12.0, 3.0);
        let r1 = hole_capture_rate(&nv, &HoleCurrentField::new(&layout, 1.0, 2e-11, k).unwrap());
        let r2 = hole_capture_rate(&nv, &HoleCurrentField::new(&layout, 1.0, 4e-11, k).unwrap());
        assert_relative_eq!(r2 / r1, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn decay_reference_values() {
        assert_eq!(nv_population_decay(0.7, 2.0, 0.0, 0.0).unwrap(), 0.7);
        assert_relative_eq!(nv_population_decay(0.7, 2.0, 0.5, 0.0).unwrap(), 0.7 / std::f64::consts::E);
        assert!(nv_population_decay(0.7, 2.0, 0.5, 0.3).unwrap() < nv_population_decay(0.7, 2.0, 0.5, 0.0).unwrap());
        assert!(nv_population_decay(0.7, -1.0, 0.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn conservation_and_monotone_laws(d1 in 0.0f64..40.0, dd in 0.01f64..40.0, holes in 0.0f64..1e7,
                                           power_law in proptest::bool::ANY) {
            let m = if power_law {
                CaptureModel { eta0: 0.2, kernel: DistanceKernel::PowerLaw { d0_um: 8.0, exponent: 1.7 } }
            } else {
                CaptureModel::default()
            };
            let layout = long_pads();
            let a = route_holes(&Point3::new(-20.0 + d1.min(19.9), 0.0, 4.0), holes, &layout, &m);
            prop_assert!((a.interface + a.bulk_loss - holes).abs() <= 1e-9 * holes.max(1.0));
            let s: f64 = a.per_electrode.iter().sum();
            prop_assert!((s - a.interface).abs() <= 1e-9 * a.interface.max(1.0));
            prop_assert!(m.eta(d1) > m.eta(d1 + dd));
            prop_assert!((0.0..=1.0).contains(&m.eta(d1)));
            let k = DistanceKernel::Hyperbolic { d0_um: 5.0 };
            let field = HoleCurrentField::new(&layout, 1.0, 3e-11, k).unwrap();
            let near = hole_capture_rate(&nv_at(20.0 - d1, 0.0), &field);
            let far = hole_capture_rate(&nv_at(20.0 - d1 - dd, 0.0), &field);
            prop_assert!(near > far);
        }

        #[test]
        fn spot_position_irrelevant(y1 in -70.0f64..70.0, y2 in -70.0f64..70.0, d in 0.0f64..30.0) {
            // The field carries no spot coordinate; two NVs at equal edge distance
            // see equal rates wherever the pump sits along the edge.
            let layout = long_pads();
            let field = HoleCurrentField::new(&layout, 1.0, 3e-11, DistanceKernel::Hyperbolic { d0_um: 5.0 }).unwrap();
            prop_assert_eq!(hole_capture_rate(&nv_at(20.0 - d, y1), &field), hole_capture_rate(&nv_at(20.0 - d, y2), &field));
        }
    }
}

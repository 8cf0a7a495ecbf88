use nalgebra::DVector;

use crate::geometry::{DeviceLayout, LaserSpot, NvRecord, Point3};
use crate::photophysics::{photo_steady_state, Beam, PhotoParams, SpinManifold, E1, EP1, G1, GP1};
use crate::readout::{AmplifierChain, EgpcModel, QIntOptions};
use crate::spin::SpinParams;
use crate::transport::CaptureModel;
use crate::traps::TrapBank;
use crate::{Error, Result};

/// Everything a sequence acts on: the device, its NVs and their trap banks.
#[derive(Debug, Clone)]
pub struct World {
    pub layout: DeviceLayout,
    pub nvs: Vec<NvRecord>,
    /// Level populations per NV, in `manifold` order.
    pub populations: Vec<DVector<f64>>,
    /// One bank per electrode, in layout order.
    pub banks: Vec<TrapBank>,
    pub bias_v: f64,
    pub photo: PhotoParams,
    pub manifold: SpinManifold,
    /// Field and resonance constants; Rabi frequency and T2 come per NV.
    pub spin: SpinParams,
    pub capture: CaptureModel,
    pub egpc: EgpcModel,
    pub chain: AmplifierChain,
    pub qint: QIntOptions,
    /// Focal spot used by every laser the protocol builders place.
    pub waist_um: f64,
    pub rayleigh_um: f64,
    /// Charge-cycling yield of an NV at a fraction f of the focal intensity
    /// scales as f^p; p = 1 keeps the bare level-model yield.
    pub yield_exponent: f64,
}

impl World {
    /// NVs start photo-steady under 3.5 mW green, banks empty, bias 0 V.
    pub fn new(layout: DeviceLayout, nvs: Vec<NvRecord>, photo: PhotoParams, manifold: SpinManifold, bank: TrapBank) -> Result<Self> {
        photo.validate()?;
        bank.validate()?;
        let mut ids = std::collections::HashSet::new();
        for nv in &nvs {
            nv.validate()?;
            if !ids.insert(nv.id.as_str()) {
                return Err(Error::param("nv.id", format!("duplicate NV identifier `{}`", nv.id)));
            }
        }
        let ss = photo_steady_state(&photo, manifold, &[Beam::green(3.5e-3)])?;
        let n_el = layout.electrodes().len();
        Ok(Self {
            populations: vec![ss; nvs.len()],
            banks: vec![bank.emptied(); n_el],
            layout,
            nvs,
            bias_v: 0.0,
            photo,
            manifold,
            spin: SpinParams::default(),
            capture: CaptureModel::default(),
            egpc: EgpcModel::default(),
            chain: AmplifierChain::default(),
            qint: QIntOptions::default(),
            waist_um: LaserSpot::DEFAULT_WAIST_UM,
            rayleigh_um: LaserSpot::DEFAULT_RAYLEIGH_UM,
            yield_exponent: 1.5,
        })
    }

    /// A single NV 4 µm deep at the centre of a 10 µm gap between two
    /// 10 µm × 10 µm pads. The photophysics presets are calibrated on it.
    pub fn reference(photo: PhotoParams) -> Result<Self> {
        let layout = DeviceLayout::facing_pads(10.0, 10.0, 10.0)?;
        let nv = NvRecord::new("nv1", Point3::new(0.0, 0.0, 4.0))?;
        Self::new(layout, vec![nv], photo, SpinManifold::Lumped, TrapBank::default())
    }

    /// Set the static field. The ±1 pair is tracked as one level at zero
    /// field and as two once |B| > 0; populations are carried over.
    pub fn set_field(&mut self, field_g: f64) -> Result<()> {
        if !field_g.is_finite() {
            return Err(Error::param("spin.field_g", "must be finite"));
        }
        self.spin.field_g = field_g;
        let want = if field_g == 0.0 { SpinManifold::Lumped } else { SpinManifold::Split };
        if want != self.manifold {
            for x in &mut self.populations {
                *x = convert_populations(x, want);
            }
            self.manifold = want;
        }
        Ok(())
    }

    pub fn nv_index(&self, id: &str) -> Result<usize> {
        self.nvs.iter().position(|n| n.id == id).ok_or_else(|| Error::UnknownNv(id.to_string()))
    }

    pub fn nv(&self, id: &str) -> Result<&NvRecord> {
        Ok(&self.nvs[self.nv_index(id)?])
    }

    pub fn reset_banks(&mut self) {
        for b in &mut self.banks {
            *b = b.emptied();
        }
    }

    /// Spin constants for one NV.
    pub fn spin_for(&self, nv: usize) -> SpinParams {
        SpinParams {
            rabi_mhz: self.nvs[nv].rabi_per_drive_mhz,
            t2_us: self.nvs[nv].t2_us,
            ..self.spin
        }
    }

    /// Focal spot with this world's optics.
    pub fn spot(&self, center: Point3, wavelength_nm: f64, power_w: f64) -> Result<LaserSpot> {
        let mut s = LaserSpot::new(center, wavelength_nm, power_w)?;
        s.waist_um = self.waist_um;
        s.rayleigh_um = self.rayleigh_um;
        s.validate()?;
        Ok(s)
    }

    /// Holes currently stored across all banks.
    pub fn stored_holes(&self) -> f64 {
        self.banks.iter().map(TrapBank::total).sum()
    }
}

fn convert_populations(x: &DVector<f64>, to: SpinManifold) -> DVector<f64> {
    let mut y = DVector::zeros(to.levels());
    match to {
        SpinManifold::Split => {
            y.rows_mut(0, x.len()).copy_from(x);
            for (a, b) in [(G1, GP1), (E1, EP1)] {
                y[a] = 0.5 * x[a];
                y[b] = 0.5 * x[a];
            }
        }
        SpinManifold::Lumped => {
            y.copy_from(&x.rows(0, y.len()));
            y[G1] += x[GP1];
            y[E1] += x[EP1];
        }
    }
    y
}

//! Seven-level (nine when the ±1 branches are split) Markov rate model of a
//! single NV centre under illumination.
//!
//! Level order: NV⁻ ground m=0, NV⁻ ground m=±1 (m=−1 when split), NV⁻ excited
//! m=0, NV⁻ excited m=±1 (m=−1 when split), NV⁻ singlet, NV⁰ ground, NV⁰
//! excited, and in split mode NV⁻ ground m=+1, NV⁻ excited m=+1.
//!
//! Populations evolve as dx/dt = A·x with A assembled from labelled
//! transitions. Each piecewise-constant interval is propagated exactly with a
//! matrix exponential of the augmented generator [[A, 0], [I, 0]], whose lower
//! block is the time integral of the populations; emission counts follow from
//! it without any quadrature.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const G0: usize = 0;
pub const G1: usize = 1;
pub const E0: usize = 2;
pub const E1: usize = 3;
pub const SINGLET: usize = 4;
pub const N0_G: usize = 5;
pub const N0_E: usize = 6;
pub const GP1: usize = 7;
pub const EP1: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpinManifold {
    /// m=+1 and m=−1 share one population.
    #[default]
    Lumped,
    /// m=+1 and m=−1 tracked separately.
    Split,
}

impl SpinManifold {
    pub fn levels(self) -> usize {
        match self {
            SpinManifold::Lumped => 7,
            SpinManifold::Split => 9,
        }
    }

    /// Ground levels carrying m=±1 population.
    pub fn ground_pm(self) -> &'static [usize] {
        match self {
            SpinManifold::Lumped => &[G1],
            SpinManifold::Split => &[G1, GP1],
        }
    }

    pub fn minus_levels(self) -> &'static [usize] {
        match self {
            SpinManifold::Lumped => &[G0, G1, E0, E1, SINGLET],
            SpinManifold::Split => &[G0, G1, E0, E1, SINGLET, GP1, EP1],
        }
    }
}

/// How ionisation and recombination scale with laser power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum PowerLaw {
    /// One-photon step out of the excited state.
    #[default]
    Linear,
    /// Rate ∝ P²/P_ref, matching the linear law at P = P_ref.
    Quadratic { reference_w: f64 },
}

impl PowerLaw {
    fn apply(self, p: f64) -> f64 {
        match self {
            PowerLaw::Linear => p,
            PowerLaw::Quadratic { reference_w } => p * p / reference_w,
        }
    }
}

/// Relative absorption versus wavelength, piecewise linear and zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionTable(pub Vec<(f64, f64)>);

impl AbsorptionTable {
    pub fn at(&self, nm: f64) -> f64 {
        let pts = &self.0;
        match pts.iter().position(|&(x, _)| x >= nm) {
            None => 0.0,
            Some(0) => {
                if pts[0].0 == nm {
                    pts[0].1
                } else {
                    0.0
                }
            }
            Some(i) => {
                let (x0, y0) = pts[i - 1];
                let (x1, y1) = pts[i];
                y0 + (y1 - y0) * (nm - x0) / (x1 - x0)
            }
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.0.is_empty()
            || self.0.windows(2).any(|w| w[1].0 <= w[0].0)
            || self.0.iter().any(|&(x, y)| !x.is_finite() || !(0.0..=1.0).contains(&y))
        {
            return Err(Error::param(
                name,
                "needs strictly increasing wavelengths and values in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Rate constants of the level model. Optical rates are per watt at the NV
/// and scaled by the absorption tables; everything else is in s⁻¹.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoParams {
    pub excitation_per_watt: f64,
    pub excitation0_per_watt: f64,
    pub absorption_minus: AbsorptionTable,
    pub absorption_zero: AbsorptionTable,
    pub radiative: f64,
    pub radiative0: f64,
    pub isc_m0: f64,
    pub isc_m1: f64,
    pub singlet_to_m0: f64,
    pub singlet_to_m1: f64,
    pub ionisation_per_watt: f64,
    pub recombination_per_watt: f64,
    /// Share of recombination events landing in NV⁻ ground m=0.
    pub recombination_m0_fraction: f64,
    pub power_law: PowerLaw,
    /// Share of radiative decays emitted into the 650–750 nm band.
    pub band_fraction_minus: f64,
    pub band_fraction_zero: f64,
    /// Dark interval after each polarising pulse.
    pub relaxation_gap_s: f64,
    /// Minimum m=0 share required after polarisation.
    pub polarisation_fidelity: f64,
}

impl PhotoParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("excitation_per_watt", self.excitation_per_watt),
            ("excitation0_per_watt", self.excitation0_per_watt),
            ("radiative", self.radiative),
            ("radiative0", self.radiative0),
            ("isc_m0", self.isc_m0),
            ("isc_m1", self.isc_m1),
            ("singlet_to_m0", self.singlet_to_m0),
            ("singlet_to_m1", self.singlet_to_m1),
            ("ionisation_per_watt", self.ionisation_per_watt),
            ("recombination_per_watt", self.recombination_per_watt),
            ("relaxation_gap", self.relaxation_gap_s),
        ];
        for (name, v) in rates {
            if !v.is_finite() {
                return Err(Error::NonFiniteRate(name.into()));
            }
            if v < 0.0 {
                return Err(Error::param(name, "rates must be non-negative"));
            }
        }
        if !(self.isc_m1 > self.isc_m0) {
            return Err(Error::param(
                "isc_m1",
                "intersystem crossing from m=±1 must exceed that from m=0",
            ));
        }
        for (name, v) in [
            ("recombination_m0_fraction", self.recombination_m0_fraction),
            ("band_fraction_minus", self.band_fraction_minus),
            ("band_fraction_zero", self.band_fraction_zero),
            ("polarisation_fidelity", self.polarisation_fidelity),
        ] {
            crate::error::check_range(name, v, 0.0, 1.0)?;
        }
        if let PowerLaw::Quadratic { reference_w } = self.power_law {
            if !(reference_w > 0.0 && reference_w.is_finite()) {
                return Err(Error::param("power_law.reference_w", "must be > 0"));
            }
        }
        self.absorption_minus.validate("absorption_minus")?;
        self.absorption_zero.validate("absorption_zero")
    }

    /// Defaults calibrated so that a zero-field CCDMR sweep of a gap-centre
    /// NV shows a 5.4% dip.
    pub fn preset_default() -> Self {
        Self {
            ionisation_per_watt: presets::DEFAULT_IONISATION,
            recombination_per_watt: presets::DEFAULT_RECOMBINATION,
            ..Self::base()
        }
    }

    /// Stronger-contrast calibration used for the Rabi and echo runs
    /// (18.4% peak-to-peak Rabi contrast).
    pub fn preset_rabi() -> Self {
        Self {
            ionisation_per_watt: presets::RABI_IONISATION,
            recombination_per_watt: presets::RABI_RECOMBINATION,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::preset_default()),
            "rabi" => Ok(Self::preset_rabi()),
            other => Err(Error::param(
                "photophysics.preset",
                format!("unknown preset `{other}` (expected `default` or `rabi`)"),
            )),
        }
    }

    /// Uncalibrated literature-scale rates; charge-cycling strengths are
    /// placeholders until [`calibrate_contrast`] sets them.
    pub fn base() -> Self {
        Self {
            excitation_per_watt: 2.0e10,
            excitation0_per_watt: 1.5e10,
            absorption_minus: AbsorptionTable(vec![
                (500.0, 0.8),
                (532.0, 1.0),
                (560.0, 0.9),
                (594.0, 0.7),
                (633.0, 0.35),
                (700.0, 0.05),
                (780.0, 0.0),
            ]),
            absorption_zero: AbsorptionTable(vec![
                (500.0, 1.0),
                (532.0, 0.8),
                (575.0, 0.4),
                (594.0, 0.05),
                (633.0, 0.0005),
                (700.0, 0.0),
            ]),
            radiative: 6.6e7,
            radiative0: 5.0e7,
            isc_m0: 7.9e6,
            isc_m1: 8.0e7,
            singlet_to_m0: 1.5e6,
            singlet_to_m1: 0.3e6,
            ionisation_per_watt: 1.0e10,
            recombination_per_watt: 4.0e9,
            recombination_m0_fraction: 0.5,
            power_law: PowerLaw::Linear,
            band_fraction_minus: 0.9,
            band_fraction_zero: 0.25,
            relaxation_gap_s: 1.0e-6,
            polarisation_fidelity: 0.85,
        }
    }
}

/// Calibrated charge-cycling strengths (s⁻¹/W), produced by
/// [`calibrate_contrast`] against the end-to-end CCDMR chain.
pub mod presets {
    pub const DEFAULT_IONISATION: f64 = 3.5889426499978905e10;
    pub const DEFAULT_RECOMBINATION: f64 = 1.2336753372439125e10;
    pub const RABI_IONISATION: f64 = 9.26721544792445e9;
    pub const RABI_RECOMBINATION: f64 = 3.857135354629538e9;
}

/// One beam as seen by the NV: power at the NV (W) and wavelength (nm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    pub power_w: f64,
    pub wavelength_nm: f64,
}

impl Beam {
    pub fn new(power_w: f64, wavelength_nm: f64) -> Self {
        Self {
            power_w,
            wavelength_nm,
        }
    }

    pub fn green(power_w: f64) -> Self {
        Self::new(power_w, 532.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Excite,
    Radiative,
    Isc,
    SingletDecay,
    Ionise,
    Recombine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
    pub kind: TransitionKind,
    /// Photon band weight for radiative transitions.
    pub band: f64,
}

/// All transitions active under the given beams.
pub fn transitions(params: &PhotoParams, manifold: SpinManifold, beams: &[Beam]) -> Vec<Transition> {
    let mut exc = 0.0;
    let mut exc0 = 0.0;
    let mut drive = 0.0;
    for b in beams {
        exc += params.excitation_per_watt * params.absorption_minus.at(b.wavelength_nm) * b.power_w;
        exc0 += params.excitation0_per_watt * params.absorption_zero.at(b.wavelength_nm) * b.power_w;
        drive += params.power_law.apply(b.power_w);
    }
    let ion = params.ionisation_per_watt * drive;
    let rec = params.recombination_per_watt * drive;
    let fm0 = params.recombination_m0_fraction;
    let mut t = Vec::with_capacity(24);
    let mut add = |from, to, rate: f64, kind, band| {
        if rate > 0.0 {
            t.push(Transition {
                from,
                to,
                rate,
                kind,
                band,
            });
        }
    };
    use TransitionKind::*;
    let bm = params.band_fraction_minus;
    let pairs: &[(usize, usize)] = match manifold {
        SpinManifold::Lumped => &[(G1, E1)],
        SpinManifold::Split => &[(G1, E1), (GP1, EP1)],
    };
    add(G0, E0, exc, Excite, 0.0);
    add(E0, G0, params.radiative, Radiative, bm);
    add(E0, SINGLET, params.isc_m0, Isc, 0.0);
    add(E0, N0_G, ion, Ionise, 0.0);
    let share = 1.0 / pairs.len() as f64;
    for &(g, e) in pairs {
        add(g, e, exc, Excite, 0.0);
        add(e, g, params.radiative, Radiative, bm);
        add(e, SINGLET, params.isc_m1, Isc, 0.0);
        add(e, N0_G, ion, Ionise, 0.0);
        add(SINGLET, g, params.singlet_to_m1 * share, SingletDecay, 0.0);
        add(N0_E, g, rec * (1.0 - fm0) * share, Recombine, 0.0);
    }
    add(SINGLET, G0, params.singlet_to_m0, SingletDecay, 0.0);
    add(N0_G, N0_E, exc0, Excite, 0.0);
    add(N0_E, N0_G, params.radiative0, Radiative, params.band_fraction_zero);
    add(N0_E, G0, rec * fm0, Recombine, 0.0);
    t
}

/// Column-convention generator: `a[(to, from)]` holds the rate from→to.
pub fn generator(params: &PhotoParams, manifold: SpinManifold, beams: &[Beam]) -> DMatrix<f64> {
    let n = manifold.levels();
    let mut a = DMatrix::zeros(n, n);
    for t in transitions(params, manifold, beams) {
        a[(t.to, t.from)] += t.rate;
        a[(t.from, t.from)] -= t.rate;
    }
    a
}

/// Expected emissions over an interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarrierEmission {
    pub electrons: f64,
    pub holes: f64,
    /// Photons in the 650–750 nm band.
    pub photons: f64,
    pub interval_s: f64,
}

impl std::ops::AddAssign for CarrierEmission {
    fn add_assign(&mut self, o: Self) {
        self.electrons += o.electrons;
        self.holes += o.holes;
        self.photons += o.photons;
        self.interval_s += o.interval_s;
    }
}

impl CarrierEmission {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            electrons: self.electrons * k,
            holes: self.holes * k,
            photons: self.photons * k,
            interval_s: self.interval_s * k,
        }
    }
}

/// Emission rate per unit population of each level.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionWeights {
    pub electrons: DVector<f64>,
    pub holes: DVector<f64>,
    pub photons: DVector<f64>,
}

impl EmissionWeights {
    fn from_transitions(n: usize, ts: &[Transition]) -> Self {
        let mut w = Self {
            electrons: DVector::zeros(n),
            holes: DVector::zeros(n),
            photons: DVector::zeros(n),
        };
        for t in ts {
            match t.kind {
                TransitionKind::Ionise => w.electrons[t.from] += t.rate,
                TransitionKind::Recombine => w.holes[t.from] += t.rate,
                TransitionKind::Radiative => w.photons[t.from] += t.rate * t.band,
                _ => {}
            }
        }
        w
    }

    pub fn rates(&self, x: &DVector<f64>) -> CarrierEmission {
        CarrierEmission {
            electrons: self.electrons.dot(x),
            holes: self.holes.dot(x),
            photons: self.photons.dot(x),
            interval_s: 0.0,
        }
    }
}

/// Exact propagator of one constant-illumination interval. `electrons`,
/// `holes` and `photons` map an initial population vector to expected counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub u: DMatrix<f64>,
    pub electrons: DVector<f64>,
    pub holes: DVector<f64>,
    pub photons: DVector<f64>,
    pub dt: f64,
}

impl Propagator {
    pub fn new(params: &PhotoParams, manifold: SpinManifold, beams: &[Beam], dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {dt}")));
        }
        check_beams(beams)?;
        let n = manifold.levels();
        let ts = transitions(params, manifold, beams);
        if let Some(t) = ts.iter().find(|t| !t.rate.is_finite()) {
            return Err(Error::NonFiniteRate(format!("{:?} {}→{}", t.kind, t.from, t.to)));
        }
        let a = generator(params, manifold, beams);
        let mut aug = DMatrix::zeros(2 * n, 2 * n);
        aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
        for i in 0..n {
            aug[(n + i, i)] = dt;
        }
        let e = aug.exp();
        let u = e.view((0, 0), (n, n)).into_owned();
        let integ = e.view((n, 0), (n, n)).into_owned();
        let w = EmissionWeights::from_transitions(n, &ts);
        Ok(Self {
            electrons: integ.tr_mul(&w.electrons),
            holes: integ.tr_mul(&w.holes),
            photons: integ.tr_mul(&w.photons),
            u,
            dt,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            u: DMatrix::identity(n, n),
            electrons: DVector::zeros(n),
            holes: DVector::zeros(n),
            photons: DVector::zeros(n),
            dt: 0.0,
        }
    }

    /// Population-only linear map (e.g. a microwave flip) with no emissions.
    pub fn map(u: DMatrix<f64>) -> Self {
        let n = u.nrows();
        Self { u, ..Self::identity(n) }
    }

    pub fn apply(&self, x: &DVector<f64>) -> (DVector<f64>, CarrierEmission) {
        let em = CarrierEmission {
            electrons: self.electrons.dot(x),
            holes: self.holes.dot(x),
            photons: self.photons.dot(x),
            interval_s: self.dt,
        };
        (&self.u * x, em)
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Propagator) -> Propagator {
        Propagator {
            u: &next.u * &self.u,
            electrons: &self.electrons + self.u.tr_mul(&next.electrons),
            holes: &self.holes + self.u.tr_mul(&next.holes),
            photons: &self.photons + self.u.tr_mul(&next.photons),
            dt: self.dt + next.dt,
        }
    }

    /// `n` back-to-back repetitions, by binary powering. Emission rows
    /// accumulate Σₖ wᵀ·Uᵏ exactly.
    pub fn repeated(&self, mut n: u64) -> Propagator {
        let mut acc = Propagator::identity(self.u.nrows());
        let mut base = self.clone();
        while n > 0 {
            if n & 1 == 1 {
                acc = acc.then(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.then(&base);
            }
        }
        acc
    }
}

fn check_beams(beams: &[Beam]) -> Result<()> {
    for b in beams {
        if !(b.power_w >= 0.0 && b.power_w.is_finite()) {
            return Err(Error::param("power", format!("must be finite and ≥ 0, got {}", b.power_w)));
        }
        if !b.wavelength_nm.is_finite() {
            return Err(Error::param("wavelength", "must be finite"));
        }
    }
    Ok(())
}

/// Populations of one NV plus the model it evolves under.
#[derive(Debug, Clone, PartialEq)]
pub struct NvLevelModel {
    pub params: PhotoParams,
    pub manifold: SpinManifold,
    pub populations: DVector<f64>,
}

impl NvLevelModel {
    /// Fully NV⁻ with the ground triplet thermally mixed.
    pub fn thermal(params: PhotoParams, manifold: SpinManifold) -> Self {
        let n = manifold.levels();
        let mut x = DVector::zeros(n);
        x[G0] = 1.0 / 3.0;
        for &g in manifold.ground_pm() {
            x[g] = (2.0 / 3.0) / manifold.ground_pm().len() as f64;
        }
        Self {
            params,
            manifold,
            populations: x,
        }
    }

    pub fn with_populations(params: PhotoParams, manifold: SpinManifold, populations: DVector<f64>) -> Result<Self> {
        if populations.len() != manifold.levels() {
            return Err(Error::param("populations", "length does not match the level count"));
        }
        check_simplex(&populations)?;
        Ok(Self {
            params,
            manifold,
            populations,
        })
    }

    pub fn nv_minus_fraction(&self) -> f64 {
        nv_minus_fraction(&self.populations, self.manifold)
    }

    /// m=0 share of the NV⁻ ground triplet.
    pub fn polarisation(&self) -> f64 {
        ground_polarisation(&self.populations, self.manifold)
    }
}

pub fn nv_minus_fraction(x: &DVector<f64>, manifold: SpinManifold) -> f64 {
    manifold.minus_levels().iter().map(|&i| x[i]).sum()
}

pub fn ground_polarisation(x: &DVector<f64>, manifold: SpinManifold) -> f64 {
    let pm: f64 = manifold.ground_pm().iter().map(|&i| x[i]).sum();
    let tot = x[G0] + pm;
    if tot > 0.0 {
        x[G0] / tot
    } else {
        0.0
    }
}

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(x: &DVector<f64>) -> Result<()> {
    let s: f64 = x.iter().sum();
    if x.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) || (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::param("populations", "must be non-negative and sum to 1"));
    }
    Ok(())
}

/// Remove round-off below zero; the generator conserves the total exactly.
pub(crate) fn clean(mut x: DVector<f64>) -> DVector<f64> {
    for v in x.iter_mut() {
        if *v < 0.0 && *v > -SIMPLEX_TOL {
            *v = 0.0;
        }
    }
    x
}

/// Advance `model` by `dt` under constant illumination.
pub fn evolve(model: &NvLevelModel, beams: &[Beam], dt: f64) -> Result<(NvLevelModel, CarrierEmission)> {
    model.params.validate()?;
    check_simplex(&model.populations)?;
    let p = Propagator::new(&model.params, model.manifold, beams, dt)?;
    let (x, em) = p.apply(&model.populations);
    let next = NvLevelModel {
        populations: clean(x),
        ..model.clone()
    };
    Ok((next, em))
}

/// Advance under illumination that varies within the step. The interval is
/// split adaptively: a step is accepted when one midpoint-frozen step and two
/// half steps agree to `tol` on populations.
pub fn evolve_varying(
    model: &NvLevelModel,
    beams_at: &dyn Fn(f64) -> Vec<Beam>,
    dt: f64,
    tol: f64,
) -> Result<(NvLevelModel, CarrierEmission)> {
    model.params.validate()?;
    check_simplex(&model.populations)?;
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be > 0"));
    }
    let (x, em) = adaptive(model, beams_at, 0.0, dt, model.populations.clone(), tol, 0)?;
    Ok((
        NvLevelModel {
            populations: clean(x),
            ..model.clone()
        },
        em,
    ))
}

fn adaptive(
    m: &NvLevelModel,
    beams_at: &dyn Fn(f64) -> Vec<Beam>,
    t0: f64,
    dt: f64,
    x: DVector<f64>,
    tol: f64,
    depth: u32,
) -> Result<(DVector<f64>, CarrierEmission)> {
    let step = |a: f64, h: f64, x: &DVector<f64>| -> Result<(DVector<f64>, CarrierEmission)> {
        let p = Propagator::new(&m.params, m.manifold, &beams_at(a + h / 2.0), h)?;
        Ok(p.apply(x))
    };
    let (full, em_full) = step(t0, dt, &x)?;
    let (half, mut em) = step(t0, dt / 2.0, &x)?;
    let (two, em2) = step(t0 + dt / 2.0, dt / 2.0, &half)?;
    em += em2;
    let err = (&full - &two).amax();
    if err <= tol || depth >= 24 {
        let _ = em_full;
        return Ok((two, em));
    }
    let (xa, mut ea) = adaptive(m, beams_at, t0, dt / 2.0, x, tol, depth + 1)?;
    let (xb, eb) = adaptive(m, beams_at, t0 + dt / 2.0, dt / 2.0, xa, tol, depth + 1)?;
    ea += eb;
    Ok((xb, ea))
}

/// Stationary populations under continuous illumination.
pub fn photo_steady_state(params: &PhotoParams, manifold: SpinManifold, beams: &[Beam]) -> Result<DVector<f64>> {
    params.validate()?;
    check_beams(beams)?;
    if beams.iter().all(|b| b.power_w == 0.0) {
        return Err(Error::param("power", "no unique steady state in the dark"));
    }
    let n = manifold.levels();
    let mut a = generator(params, manifold, beams);
    for j in 0..n {
        a[(0, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[0] = 1.0;
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::param("photophysics", "steady state is not unique for these rates"))?;
    Ok(clean(x))
}

/// Green pulse followed by the dark relaxation gap.
pub fn polarise(model: &NvLevelModel, power_w: f64, duration_s: f64) -> Result<NvLevelModel> {
    if !(duration_s > 0.0) {
        return Err(Error::param("duration", "must be > 0"));
    }
    let (m, _) = evolve(model, &[Beam::green(power_w)], duration_s)?;
    if m.params.relaxation_gap_s > 0.0 {
        let gap = m.params.relaxation_gap_s;
        Ok(evolve(&m, &[], gap)?.0)
    } else {
        Ok(m)
    }
}

/// Default ionising window used to define the cycling rate.
pub const CYCLE_WINDOW_S: f64 = 500e-9;

/// Ionisation events per second during a green window of
/// [`CYCLE_WINDOW_S`], starting from the photo-steady charge state with the
/// NV⁻ ground population split (1−p, p) between m=0 and m=±1.
pub fn spin_dependent_cycle_rate(params: &PhotoParams, power_w: f64, p_pm: f64) -> Result<f64> {
    crate::error::check_range("p(±1)", p_pm, 0.0, 1.0)?;
    if power_w == 0.0 {
        return Ok(0.0);
    }
    let manifold = SpinManifold::Lumped;
    let beam = [Beam::green(power_w)];
    let ss = photo_steady_state(params, manifold, &beam)?;
    let f = nv_minus_fraction(&ss, manifold);
    let mut x = DVector::zeros(manifold.levels());
    x[G0] = f * (1.0 - p_pm);
    x[G1] = f * p_pm;
    x[N0_G] = 1.0 - f;
    let p = Propagator::new(params, manifold, &beam, CYCLE_WINDOW_S)?;
    Ok(p.electrons.dot(&x) / CYCLE_WINDOW_S)
}

/// Relative drop of the cycling rate between pure m=0 and pure m=±1.
pub fn model_contrast(params: &PhotoParams, power_w: f64) -> Result<f64> {
    let r0 = spin_dependent_cycle_rate(params, power_w, 0.0)?;
    let r1 = spin_dependent_cycle_rate(params, power_w, 1.0)?;
    Ok(1.0 - r1 / r0)
}

/// Bisection on a monotone function over a log-spaced bracket.
fn log_bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let flo = f(lo)?;
    let fhi = f(hi)?;
    if flo.signum() == fhi.signum() {
        return Err(Error::param(
            "calibration",
            format!("target not bracketed in [{lo:e}, {hi:e}] ({flo:e}, {fhi:e})"),
        ));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Recombination strength giving NV⁻ fraction `target` at steady state.
pub fn calibrate_recombination(params: &PhotoParams, beam: Beam, target: f64) -> Result<f64> {
    crate::error::check_range("target NV⁻ fraction", target, 1e-6, 1.0 - 1e-6)?;
    log_bisect(1e3, 1e15, |b| {
        let p = PhotoParams {
            recombination_per_watt: b,
            ..params.clone()
        };
        let x = photo_steady_state(&p, SpinManifold::Lumped, &[beam])?;
        Ok(nv_minus_fraction(&x, SpinManifold::Lumped) - target)
    })
}

/// Find the ionisation strength for which `contrast_of` returns `target`,
/// re-solving recombination each time so the green photo-steady NV⁻
/// fraction stays at `nv_minus_target`.
pub fn calibrate_contrast(
    params: &PhotoParams,
    green: Beam,
    nv_minus_target: f64,
    target: f64,
    bracket: (f64, f64),
    mut contrast_of: impl FnMut(&PhotoParams) -> Result<f64>,
) -> Result<PhotoParams> {
    let with = |b_ion: f64| -> Result<PhotoParams> {
        let mut p = PhotoParams {
            ionisation_per_watt: b_ion,
            ..params.clone()
        };
        p.recombination_per_watt = calibrate_recombination(&p, green, nv_minus_target)?;
        Ok(p)
    };
    let b = log_bisect(bracket.0, bracket.1, |b| {
        let p = with(b)?;
        Ok(contrast_of(&p)? - target)
    })?;
    with(b)
}

/// Per-level jump tables for exact stochastic simulation of one interval.
#[derive(Debug, Clone)]
pub struct JumpTable {
    exit: Vec<f64>,
    out: Vec<Vec<Transition>>,
}

/// Counts from a stochastic trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JumpCounts {
    pub electrons: u64,
    pub holes: u64,
    pub photons: u64,
}

impl JumpTable {
    pub fn new(params: &PhotoParams, manifold: SpinManifold, beams: &[Beam]) -> Self {
        let n = manifold.levels();
        let mut out = vec![Vec::new(); n];
        let mut exit = vec![0.0; n];
        for t in transitions(params, manifold, beams) {
            exit[t.from] += t.rate;
            out[t.from].push(t);
        }
        Self { exit, out }
    }

    /// Gillespie trajectory from `level` over `dt`; returns the final level.
    pub fn run<R: Rng + ?Sized>(&self, mut level: usize, dt: f64, rng: &mut R, counts: &mut JumpCounts) -> usize {
        let mut t = 0.0;
        loop {
            let k = self.exit[level];
            if k <= 0.0 {
                return level;
            }
            let u: f64 = rng.random();
            t += -(1.0 - u).ln() / k;
            if t >= dt {
                return level;
            }
            let mut pick = rng.random::<f64>() * k;
            let tr = self.out[level]
                .iter()
                .find(|tr| {
                    pick -= tr.rate;
                    pick < 0.0
                })
                .unwrap_or_else(|| self.out[level].last().expect("non-empty"));
            match tr.kind {
                TransitionKind::Ionise => counts.electrons += 1,
                TransitionKind::Recombine => counts.holes += 1,
                TransitionKind::Radiative => {
                    if rng.random::<f64>() < tr.band {
                        counts.photons += 1;
                    }
                }
                _ => {}
            }
            level = tr.to;
        }
    }
}

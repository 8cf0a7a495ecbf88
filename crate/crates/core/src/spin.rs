//! Ground-state spin control: resonance frequencies, microwave rotations on
//! a Bloch vector, and Hahn-echo projections.
//!
//! Frequencies are in MHz and times in µs throughout this module, so
//! `Ω·t` is a number of Rabi cycles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinParams {
    pub zero_field_mhz: f64,
    pub gamma_mhz_per_g: f64,
    pub field_g: f64,
    /// Rabi frequency under unit drive.
    pub rabi_mhz: f64,
    pub t2_us: f64,
    pub stretch: f64,
}

impl Default for SpinParams {
    fn default() -> Self {
        Self {
            zero_field_mhz: 2870.0,
            gamma_mhz_per_g: 2.8025,
            field_g: 0.0,
            rabi_mhz: 4.523,
            t2_us: 24.90,
            stretch: 1.0,
        }
    }
}

impl SpinParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.zero_field_mhz > 0.0) {
            return Err(Error::param("spin.zero_field", "must be > 0"));
        }
        if !(self.gamma_mhz_per_g > 0.0) {
            return Err(Error::param("spin.gamma", "must be > 0"));
        }
        if !(self.t2_us > 0.0) {
            return Err(Error::param("spin.t2", "must be > 0"));
        }
        if !(self.rabi_mhz >= 0.0) || !self.field_g.is_finite() {
            return Err(Error::param("spin", "Rabi frequency must be ≥ 0 and the field finite"));
        }
        crate::error::check_range("spin.stretch", self.stretch, 1.0, 3.0)
    }

    /// Echo envelope exp(−(t/T2)ⁿ) after total free evolution `t_us`.
    pub fn envelope(&self, t_us: f64) -> f64 {
        (-(t_us / self.t2_us).powf(self.stretch)).exp()
    }
}

/// (f₋, f₊) in MHz.
pub fn resonance_frequencies(p: &SpinParams) -> (f64, f64) {
    let z = p.gamma_mhz_per_g * p.field_g;
    (p.zero_field_mhz - z, p.zero_field_mhz + z)
}

/// Transition probability of a square pulse: (Ω²/(Ω²+Δ²))·sin²(π√(Ω²+Δ²)·t).
pub fn flip_probability(omega_mhz: f64, detuning_mhz: f64, t_us: f64) -> f64 {
    let w2 = omega_mhz * omega_mhz + detuning_mhz * detuning_mhz;
    if w2 == 0.0 {
        return 0.0;
    }
    let s = (std::f64::consts::PI * w2.sqrt() * t_us).sin();
    (omega_mhz * omega_mhz / w2 * s * s).clamp(0.0, 1.0)
}

/// Bloch vector of the driven two-level pair (m=0 ↔ target branch) in the
/// frame rotating at the drive frequency. `z = +1` is pure m=0.
///
/// `clock_us` counts free-evolution time since the first pulse; transverse
/// components are scaled by E(t_b)/E(t_a) over each free interval so that
/// the accumulated dephasing after total time t is exactly E(t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub clock_us: f64,
}

impl Default for SpinState {
    fn default() -> Self {
        Self::ground()
    }
}

impl SpinState {
    pub fn ground() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 1.0,
            clock_us: 0.0,
        }
    }

    pub fn population_m0(&self) -> f64 {
        ((1.0 + self.z) / 2.0).clamp(0.0, 1.0)
    }

    /// Square pulse with Rabi frequency Ω, drive phase φ (rad, 0 = x axis)
    /// and detuning Δ = f_drive − f_resonance.
    pub fn pulse(self, omega_mhz: f64, detuning_mhz: f64, phase_rad: f64, t_us: f64) -> Self {
        let (nx, ny, nz) = (omega_mhz * phase_rad.cos(), omega_mhz * phase_rad.sin(), detuning_mhz);
        let w = (nx * nx + ny * ny + nz * nz).sqrt();
        if w == 0.0 || t_us == 0.0 {
            return self;
        }
        let (ux, uy, uz) = (nx / w, ny / w, nz / w);
        let theta = 2.0 * std::f64::consts::PI * w * t_us;
        let (s, c) = theta.sin_cos();
        let (x, y, z) = (self.x, self.y, self.z);
        let dot = ux * x + uy * y + uz * z;
        // Rodrigues rotation of v about u by θ
        let (cx, cy, cz) = (uy * z - uz * y, uz * x - ux * z, ux * y - uy * x);
        Self {
            x: x * c + cx * s + ux * dot * (1.0 - c),
            y: y * c + cy * s + uy * dot * (1.0 - c),
            z: z * c + cz * s + uz * dot * (1.0 - c),
            clock_us: self.clock_us,
        }
    }

    /// Free precession at detuning Δ for `t_us`, with dephasing.
    pub fn free(self, detuning_mhz: f64, t_us: f64, p: &SpinParams) -> Self {
        let phi = 2.0 * std::f64::consts::PI * detuning_mhz * t_us;
        let (s, c) = phi.sin_cos();
        let before = p.envelope(self.clock_us);
        let after_clock = self.clock_us + t_us;
        let ratio = if before > 0.0 {
            p.envelope(after_clock) / before
        } else {
            0.0
        };
        Self {
            x: (self.x * c - self.y * s) * ratio,
            y: (self.x * s + self.y * c) * ratio,
            z: self.z,
            clock_us: after_clock,
        }
    }
}

/// Projection pulse ending a Hahn echo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalPulse {
    HalfPi,
    ThreeHalvesPi,
}

/// m=0 population after π/2(x)–τ–π(y)–τ–{π/2, 3π/2}(x) from pure m=0:
/// (1 − E)/2 for π/2 and (1 + E)/2 for 3π/2, unless `flip_sign` swaps them.
pub fn echo_amplitude(tau_us: f64, p: &SpinParams, final_pulse: FinalPulse, flip_sign: bool) -> f64 {
    let e = p.envelope(2.0 * tau_us.max(0.0));
    let sign = match (final_pulse, flip_sign) {
        (FinalPulse::HalfPi, false) | (FinalPulse::ThreeHalvesPi, true) => -1.0,
        _ => 1.0,
    };
    (1.0 + sign * e) / 2.0
}

/// Normalised echo S(3π/2) − S(π/2) = exp(−(2τ/T2)ⁿ).
pub fn normalized_echo(tau_us: f64, p: &SpinParams) -> f64 {
    echo_amplitude(tau_us, p, FinalPulse::ThreeHalvesPi, false) - echo_amplitude(tau_us, p, FinalPulse::HalfPi, false)
}

/// One element of a microwave block: a pulse or a dark free interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpinStep {
    Pulse {
        freq_mhz: f64,
        amplitude: f64,
        phase_rad: f64,
        t_us: f64,
    },
    Free {
        t_us: f64,
    },
}

/// Net population exchange produced by a microwave block on a state with no
/// initial coherence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockTransfer {
    /// m=0 ↔ m=−1 exchange probability (the lumped ±1 level at zero field).
    pub minus: f64,
    /// m=0 ↔ m=+1 exchange probability (split mode only).
    pub plus: f64,
    /// Both branches were driven near-degenerately; probabilities were
    /// summed and capped.
    pub degenerate: bool,
}

/// Evaluate a microwave block. In lumped mode (`split = false`) the ±1 pair
/// is one level driven at f₋ = f₊. In split mode the branch nearer the drive
/// frequency of the first pulse is followed coherently and the other one
/// incoherently, pulse by pulse; when the two branches are closer than
/// `2·Ω` both are treated incoherently and summed with a cap at 1.
pub fn block_transfer(steps: &[SpinStep], p: &SpinParams, split: bool) -> BlockTransfer {
    let (f_minus, f_plus) = resonance_frequencies(p);
    let first = steps.iter().find_map(|s| match *s {
        SpinStep::Pulse { freq_mhz, amplitude, .. } => Some((freq_mhz, amplitude)),
        _ => None,
    });
    let Some((f0, a0)) = first else {
        return BlockTransfer::default();
    };
    let coherent = |res: f64| -> f64 {
        let mut s = SpinState::ground();
        for st in steps {
            s = match *st {
                SpinStep::Pulse {
                    freq_mhz,
                    amplitude,
                    phase_rad,
                    t_us,
                } => s.pulse(p.rabi_mhz * amplitude, freq_mhz - res, phase_rad, t_us),
                SpinStep::Free { t_us } => s.free(f0 - res, t_us, p),
            };
        }
        1.0 - s.population_m0()
    };
    let incoherent = |res: f64| -> f64 {
        let mut q: f64 = 0.0;
        for st in steps {
            if let SpinStep::Pulse {
                freq_mhz,
                amplitude,
                t_us,
                ..
            } = *st
            {
                let f = flip_probability(p.rabi_mhz * amplitude, freq_mhz - res, t_us);
                q = q * (1.0 - f) + (1.0 - q) * f;
            }
        }
        q
    };
    if !split {
        return BlockTransfer {
            minus: coherent(f_minus),
            ..Default::default()
        };
    }
    let omega = p.rabi_mhz * a0;
    if (f_plus - f_minus).abs() < 2.0 * omega {
        let total = (incoherent(f_minus) + incoherent(f_plus)).min(1.0);
        return BlockTransfer {
            minus: total / 2.0,
            plus: total / 2.0,
            degenerate: true,
        };
    }
    if (f0 - f_minus).abs() <= (f0 - f_plus).abs() {
        BlockTransfer {
            minus: coherent(f_minus),
            plus: incoherent(f_plus),
            degenerate: false,
        }
    } else {
        BlockTransfer {
            minus: incoherent(f_minus),
            plus: coherent(f_plus),
            degenerate: false,
        }
    }
}

/// Hahn echo block with a π pulse of `pi_us` at amplitude `amplitude`.
pub fn echo_block(freq_mhz: f64, amplitude: f64, pi_us: f64, tau_us: f64, final_pulse: FinalPulse) -> Vec<SpinStep> {
    use std::f64::consts::FRAC_PI_2;
    let last = match final_pulse {
        FinalPulse::HalfPi => 0.5,
        FinalPulse::ThreeHalvesPi => 1.5,
    };
    let pulse = |frac: f64, phase: f64| SpinStep::Pulse {
        freq_mhz,
        amplitude,
        phase_rad: phase,
        t_us: pi_us * frac,
    };
    vec![
        pulse(0.5, 0.0),
        SpinStep::Free { t_us: tau_us },
        pulse(1.0, FRAC_PI_2),
        SpinStep::Free { t_us: tau_us },
        pulse(last, 0.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_field_resonance() {
        let p = SpinParams::default();
        assert_eq!(resonance_frequencies(&p), (2870.0, 2870.0));
        let none = SpinParams {
            gamma_mhz_per_g: 1e-300,
            field_g: 4.0,
            ..p
        };
        let (a, b) = resonance_frequencies(&none);
        assert_relative_eq!(a, 2870.0);
        assert_relative_eq!(b, 2870.0);
    }

    #[test]
    fn four_gauss_split() {
        let p = SpinParams {
            field_g: 4.0,
            ..Default::default()
        };
        let (lo, hi) = resonance_frequencies(&p);
        assert_relative_eq!(lo, 2870.0 - 4.0 * 2.8025, epsilon = 1e-9);
        assert_relative_eq!(hi, 2881.21, epsilon = 1e-9);
        assert_relative_eq!(hi - lo, 22.42, epsilon = 1e-9);
        assert_relative_eq!((lo + hi) / 2.0, 2870.0, max_relative = 1e-15);
    }

    #[test]
    fn pi_pulse_flips() {
        let omega = 4.523;
        assert_relative_eq!(flip_probability(omega, 0.0, 1.0 / (2.0 * omega)), 1.0, epsilon = 1e-15);
        let s = SpinState::ground().pulse(omega, 0.0, 0.0, 1.0 / (2.0 * omega));
        assert_relative_eq!(s.population_m0(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rabi_period_is_configured() {
        let omega = 4.523;
        let period_us = 1.0 / omega;
        assert_relative_eq!(period_us * 1e3, 221.1, max_relative = 1e-4);
        for k in 0..20 {
            let t = 0.013 * k as f64;
            assert_relative_eq!(
                flip_probability(omega, 0.0, t),
                flip_probability(omega, 0.0, t + period_us),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn far_detuned_is_identity() {
        assert!(flip_probability(5.0, 270.0, 0.1) < 1e-3);
    }

    #[test]
    fn bloch_matches_rabi_formula() {
        for &(om, d, t) in &[(5.0, 0.0, 0.1), (5.0, 3.0, 0.07), (2.0, -7.0, 0.33)] {
            let s = SpinState::ground().pulse(om, d, 0.7, t);
            assert_relative_eq!(1.0 - s.population_m0(), flip_probability(om, d, t), epsilon = 1e-12);
        }
    }

    #[test]
    fn echo_reference_values() {
        let p = SpinParams::default();
        assert_relative_eq!(normalized_echo(0.0, &p), 1.0);
        assert_relative_eq!(normalized_echo(p.t2_us / 2.0, &p), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(echo_amplitude(0.0, &p, FinalPulse::HalfPi, false), 0.0);
        assert_relative_eq!(echo_amplitude(0.0, &p, FinalPulse::HalfPi, true), 1.0);
    }

    #[test]
    fn bloch_echo_reproduces_closed_form() {
        let p = SpinParams::default();
        for &tau in &[0.0, 3.0, 12.45, 30.0] {
            for (fp, _) in [(FinalPulse::HalfPi, 0), (FinalPulse::ThreeHalvesPi, 1)] {
                // detuned by 0.3 MHz: the π pulse refocuses the phase.
                let block = echo_block(2870.3, 1.0, 1.0 / (2.0 * p.rabi_mhz), tau, fp);
                let steps: Vec<_> = block;
                let mut s = SpinState::ground();
                for st in &steps {
                    s = match *st {
                        SpinStep::Pulse { amplitude, phase_rad, t_us, .. } => s.pulse(p.rabi_mhz * amplitude, 0.0, phase_rad, t_us),
                        SpinStep::Free { t_us } => s.free(0.3, t_us, &p),
                    };
                }
                assert_relative_eq!(s.population_m0(), echo_amplitude(tau, &p, fp, false), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stretched_echo() {
        let p = SpinParams {
            stretch: 2.0,
            ..Default::default()
        };
        let tau = 10.0;
        let b = echo_block(2870.0, 1.0, 1.0 / (2.0 * p.rabi_mhz), tau, FinalPulse::HalfPi);
        let t = block_transfer(&b, &p, false);
        assert_relative_eq!(1.0 - t.minus, echo_amplitude(tau, &p, FinalPulse::HalfPi, false), epsilon = 1e-12);
    }

    #[test]
    fn split_block_targets_nearest_branch() {
        let p = SpinParams {
            field_g: 4.0,
            ..Default::default()
        };
        let (lo, hi) = resonance_frequencies(&p);
        let pi = [SpinStep::Pulse {
            freq_mhz: lo,
            amplitude: 5.0 / 4.523,
            phase_rad: 0.0,
            t_us: 0.1,
        }];
        let t = block_transfer(&pi, &p, true);
        assert_relative_eq!(t.minus, 1.0, epsilon = 1e-12);
        assert!(t.plus < 0.05);
        assert!(!t.degenerate);
        let pi_hi = [SpinStep::Pulse {
            freq_mhz: hi,
            amplitude: 5.0 / 4.523,
            phase_rad: 0.0,
            t_us: 0.1,
        }];
        let t = block_transfer(&pi_hi, &p, true);
        assert_relative_eq!(t.plus, 1.0, epsilon = 1e-12);
        // zero field in split mode is degenerate and capped
        let t = block_transfer(&pi, &SpinParams::default(), true);
        assert!(t.degenerate);
        assert!(t.minus + t.plus <= 1.0 + 1e-15);
    }

    proptest! {
        #[test]
        fn flip_probability_bounded_and_even(om in 0.0f64..20.0, d in -50.0f64..50.0, t in 0.0f64..2.0) {
            let a = flip_probability(om, d, t);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, flip_probability(om, -d, t));
        }

        #[test]
        fn double_pi_is_identity(om in 0.5f64..20.0, phase in 0.0f64..6.3) {
            let t = 1.0 / (2.0 * om);
            let s0 = SpinState { x: 0.3, y: -0.2, z: 0.5, clock_us: 0.0 };
            let s = s0.pulse(om, 0.0, phase, t).pulse(om, 0.0, phase, t);
            prop_assert!((s.x - s0.x).abs() < 1e-12);
            prop_assert!((s.y - s0.y).abs() < 1e-12);
            prop_assert!((s.z - s0.z).abs() < 1e-12);
        }

        #[test]
        fn resonances_affine(b in -100.0f64..100.0, g in 0.1f64..5.0) {
            let p = SpinParams { field_g: b, gamma_mhz_per_g: g, ..Default::default() };
            let (lo, hi) = resonance_frequencies(&p);
            prop_assert!(((lo + hi) / 2.0 - 2870.0).abs() <= 2870.0 * 1e-15);
            let p2 = SpinParams { field_g: 2.0 * b, ..p };
            let (lo2, _) = resonance_frequencies(&p2);
            prop_assert!(((2870.0 - lo2) - 2.0 * (2870.0 - lo)).abs() < 1e-9);
        }
    }
}

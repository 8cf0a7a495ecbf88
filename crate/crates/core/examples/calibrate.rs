//! Recomputes the charge-cycling presets against the reference world.
//!
//! cargo run --release -p ccdmr-core --example calibrate

use ccdmr_core::photophysics::{calibrate_contrast, Beam, PhotoParams};
use ccdmr_core::sequence::protocols::{CcdmrParams, RabiParams, Sweep};
use ccdmr_core::sequence::{build_protocol, execute, ExecOptions, Protocol, World};
use ccdmr_core::Result;

fn expected(protocol: &Protocol, p: &PhotoParams) -> Result<Vec<f64>> {
    let world = World::reference(p.clone())?;
    let plan = build_protocol(protocol, &world)?;
    plan.points
        .iter()
        .map(|pt| {
            let mut w = world.clone();
            let out = execute(&pt.sequence, &mut w, 1, &ExecOptions::default())?;
            Ok(out.reads.last().expect("read").expected_charge_c)
        })
        .collect()
}

fn main() -> Result<()> {
    let green = Beam::green(3.5e-3);
    let ccdmr = Protocol::Ccdmr(CcdmrParams { frequencies: Sweep::list(&[2.77e9, 2.87e9]), ..Default::default() });
    let half = 0.5 / 4.523e6;
    let rabi = Protocol::Rabi(RabiParams { durations: Sweep::list(&[0.0, half]), ..Default::default() });
    let dip = |p: &PhotoParams| -> Result<f64> {
        let q = expected(&ccdmr, p)?;
        Ok(1.0 - q[1] / q[0])
    };
    if std::env::args().any(|a| a == "--scan") {
        for k in 0..13 {
            let b = 1e8 * 10f64.powf(k as f64 * 0.25);
            let p = PhotoParams { ionisation_per_watt: b, ..PhotoParams::base() };
            match ccdmr_core::photophysics::calibrate_recombination(&p, green, 0.70) {
                Ok(r) => {
                    let p = PhotoParams { recombination_per_watt: r, ..p };
                    println!("{b:e} {r:e} dip {} rabi-dip {}", dip(&p)?, 1.0 - expected(&rabi, &p)?[1] / expected(&rabi, &p)?[0]);
                }
                Err(e) => println!("{b:e} {e}"),
            }
        }
        return Ok(());
    }
    let d = calibrate_contrast(&PhotoParams::base(), green, 0.70, 0.054, (1e8, 1e11), dip)?;
    println!("default: ionisation {:e}, recombination {:e}, dip {}", d.ionisation_per_watt, d.recombination_per_watt, dip(&d)?);

    let contrast = |p: &PhotoParams| -> Result<f64> {
        let q = expected(&rabi, p)?;
        Ok(2.0 * (q[0] - q[1]) / (q[0] + q[1]))
    };
    let r = calibrate_contrast(&PhotoParams::base(), green, 0.70, 0.184, (1e8, 1e11), contrast)?;
    println!("rabi: ionisation {:e}, recombination {:e}, contrast {}", r.ionisation_per_watt, r.recombination_per_watt, contrast(&r)?);
    Ok(())
}

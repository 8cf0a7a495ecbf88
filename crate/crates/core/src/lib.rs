//! Digital twin of charge-capture detected magnetic resonance on single NV
//! centres: photophysics, spin control, trap storage, photocurrent readout,
//! pulse-sequence execution, imaging and the fitting chain on top.

pub mod error;
pub mod units;
pub mod geometry;
pub mod photophysics;
pub mod spin;
pub mod transport;
pub mod traps;
pub mod fit;
pub mod readout;
pub mod seeds;
pub mod record;
pub mod sequence;
pub mod imaging;

pub use error::{Error, Result};

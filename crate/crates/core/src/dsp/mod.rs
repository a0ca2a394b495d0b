//! Lock-in demodulation, filter design and swept-sine excitation.

mod filters;
mod lockin;
mod sweep;

pub use filters::{design_lowpass, design_notch, NotchBank, NotchSpec};
pub use lockin::{HarmonicEstimate, LockIn, LockInConfig, LockInMode};
pub use sweep::{swept_sine, Sweep};

//! PI regulation in the log-current domain, stability-region design, LBH
//! estimation and gain adaptation.

pub mod design;
pub mod lbh;
mod pi;

pub use design::{design_region, Designer, RegionPoint, StabilityRegion};
pub use lbh::{adapt_gains, check_modulation_placement, DcGainRatio, GainAdapter, GapModulation, LbhEstimate, LbhMethod};
pub use pi::{error_signal, PiController, PiGains};

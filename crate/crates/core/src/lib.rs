//! Desk-scale simulator and control toolkit for the z-axis feedback loop of
//! a scanning tunneling microscope.

pub mod error;
pub mod junction;
pub mod linear;
pub mod control;
pub mod dsp;
pub mod plant;
pub mod sim;
pub mod scan;
pub mod adaptive;
pub mod sysid;
pub mod spectroscopy;
pub mod litho;
pub mod io;
pub mod scenario;

pub use error::{Error, Result};

//! Coarse approach from a millimetre-scale gap down to a tunneling setpoint.
//!
//! ```text
//! cargo run --release --example approach
//! ```

use stmlab::junction::{Site, SurfaceModel};
use stmlab::scan::{approach, ApproachConfig};
use stmlab::sim::{Microscope, MicroscopeConfig};

fn main() -> stmlab::Result<()> {
    let surface = SurfaceModel::uniform(8, 8, 0.384, Site::h_si());
    let mut mic = Microscope::new(MicroscopeConfig::default(), surface)?;
    mic.move_to(1.0, 1.0)?;
    mic.set_z_coarse(9000.0);

    let rep = approach(&mut mic, &ApproachConfig::default())?;
    println!("coarse steps      {}", rep.coarse_steps);
    println!("fine extensions   {}", rep.extensions);
    println!("fine range used   {:.1} %", 100.0 * rep.extension_fraction);
    println!("engaged           {}", mic.is_engaged());
    let s = mic.settle(0.01)?;
    println!("gap {:.3} A, current {:.3e} A", s.gap, s.i_tunnel);
    Ok(())
}

//! Vertical-manipulation lithography with feedback-controlled stop: the bias
//! modulation ramps at each target until the z monitor sees the retraction
//! of a fresh dangling bond.

use stmlab::junction::{Site, SurfaceModel};
use stmlab::litho::{vmfcl, DesorptionModel, EventKind, Target, VmfclConfig};
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig, Modulation, NotchConfig};

fn main() -> stmlab::Result<()> {
    let surface = SurfaceModel::uniform(13, 13, 0.384, Site::h_si());
    let targets: Vec<Target> = [(3, 3), (3, 9), (6, 6), (9, 3), (9, 9)]
        .iter()
        .map(|&(r, c)| Target::Site { site: surface.index(r, c) })
        .collect();
    let cfg = MicroscopeConfig {
        modulation: Some(Modulation { vm: 0.0, freq_hz: 1e3 }),
        notch: Some(NotchConfig::default()),
        ..Default::default()
    };
    let mut mic = Microscope::new(cfg, surface)?;
    mic.engage_at(1.152, 1.152, Feedback::Current { setpoint: 1e-9 })?;
    mic.settle(0.02)?;

    let rep = vmfcl(
        &mut mic,
        &DesorptionModel::default(),
        &VmfclConfig {
            targets,
            ..Default::default()
        },
        &mut (),
    )?;
    println!("completed {} ({} z jumps)", rep.completed, rep.count(EventKind::ZJump));
    for e in &rep.events {
        println!("{:8.4} s  {:?}  site {:?}  dz {:?}", e.t, e.kind, e.site, e.z_jump);
    }
    let peak_vm = rep.telemetry.iter().map(|r| r.vm).fold(0.0, f64::max);
    println!("largest modulation reached {peak_vm:.3} V");
    Ok(())
}

//! Atomically precise hydrogen depassivation along one lattice row, then a
//! field-emission stripe, with the event log replayed onto the pristine
//! surface.

use stmlab::junction::{SiteKind, Site, SurfaceModel};
use stmlab::litho::{events_to_jsonl, fe_write, hdl_line, replay, DesorptionModel, HdlConfig};
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig};

const A: f64 = 0.384;

fn main() -> stmlab::Result<()> {
    let mut surface = SurfaceModel::uniform(40, 40, A, Site::h_si());
    surface.capacitance = 0.0;
    let mut mic = Microscope::new(MicroscopeConfig::default(), surface.clone())?;
    mic.engage_at(3.0 * A, 6.0 * A, Feedback::Current { setpoint: 1e-9 })?;
    let model = DesorptionModel::default();

    let line = HdlConfig {
        path: vec![[3.0 * A, 6.0 * A], [7.0 * A, 6.0 * A]],
        bias: 3.5,
        setpoint: 1e-9,
        speed: 5.0,
        ..Default::default()
    };
    let rep = hdl_line(&mut mic, &model, &line, &mut ())?;
    println!("AP line: {} sites depassivated {:?}", rep.desorbed_sites().len(), rep.desorbed_sites());

    let stripe = HdlConfig {
        path: vec![[4.0, 10.0], [12.0, 10.0]],
        bias: 7.5,
        setpoint: 1e-9,
        speed: 5.0,
        ..Default::default()
    };
    let rep2 = fe_write(&mut mic, &model, &stripe, &mut ())?;
    println!("FE stripe: {} sites", rep2.desorbed_sites().len());

    for r in (0..mic.surface.rows).step_by(2) {
        let row: String = (0..mic.surface.cols)
            .map(|c| match mic.surface.sites[mic.surface.index(r, c)].kind {
                SiteKind::DanglingBond => '#',
                _ => '.',
            })
            .collect();
        println!("{row}");
    }

    let mut log = rep.events.clone();
    log.extend(rep2.events);
    let rebuilt = replay(&surface, &log)?;
    println!("replay reproduces the surface: {}", rebuilt == mic.surface);
    print!("{}", events_to_jsonl(&log[..3])?);
    Ok(())
}

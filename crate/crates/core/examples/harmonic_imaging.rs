//! Higher-harmonic current images of a patch with stronger nonlinearity.
//! A large modulation with the notch bank engaged brings the patch out in
//! the third harmonic while the topography stays flat.

use stmlab::junction::{Conductance, Site, SiteKind, SurfaceModel};
use stmlab::scan::RasterConfig;
use stmlab::sim::{DemodConfig, Feedback, Microscope, MicroscopeConfig, Modulation, NotchConfig};
use stmlab::spectroscopy::{harmonic_scan, HarmonicScanConfig};

fn main() -> stmlab::Result<()> {
    let site = Site {
        kind: SiteKind::HSi,
        height: 0.0,
        phi: 4.0,
        conduct: Conductance::new(&[0.0, 1e-4])?,
        v_desorb: 3.3,
    };
    let mut surface = SurfaceModel::uniform(16, 16, 0.384, site);
    surface.capacitance = 0.0;
    for r in 6..10 {
        for c in 6..10 {
            let i = surface.index(r, c);
            surface.sites[i].conduct = Conductance::new(&[0.0, 1e-4, 0.0, 4e-5])?;
        }
    }

    let vm = 1.5;
    let cfg = MicroscopeConfig {
        modulation: Some(Modulation { vm, freq_hz: 2000.0 }),
        notch: Some(NotchConfig::default()),
        demod: DemodConfig {
            harmonics: vec![1, 2, 3],
            ..Default::default()
        },
        ..Default::default()
    };
    let mut mic = Microscope::new(cfg, surface)?;
    mic.engage_at(0.2, 0.2, Feedback::Current { setpoint: 0.5e-9 })?;
    let set = harmonic_scan(
        &mut mic,
        &HarmonicScanConfig {
            raster: RasterConfig {
                x0: 0.2,
                y0: 0.2,
                width: 5.2,
                height: 5.2,
                rows: 14,
                cols: 14,
                speed: 20.0,
                ..Default::default()
            },
            vm,
            notch: true,
            ..Default::default()
        },
    )?;

    let i3 = set.harmonic(3).expect("third harmonic tracked");
    println!("|I3| map, pA:");
    for r in 0..i3.rows {
        let line: Vec<String> = (0..i3.cols).map(|c| format!("{:5.1}", 1e12 * i3.at(r, c).abs())).collect();
        println!("{}", line.join(""));
    }
    Ok(())
}

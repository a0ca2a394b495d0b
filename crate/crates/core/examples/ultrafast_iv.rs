//! I-V curves recovered from the harmonics of a large bias modulation while
//! the loop regulates on the first harmonic, against a conventional CITS
//! acquisition of the same grid.

use std::f64::consts::PI;

use stmlab::junction::{Conductance, Site, SiteKind, SurfaceModel};
use stmlab::plant::PlantConfig;
use stmlab::scan::RasterConfig;
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig, Modulation};
use stmlab::spectroscopy::{cits, ultrafast_iv, CitsConfig, UltrafastConfig};

fn surface() -> SurfaceModel {
    let site = Site {
        kind: SiteKind::HSi,
        height: 0.0,
        phi: 4.0,
        conduct: Conductance::new(&[0.0, 1e-4, 0.0, 2e-5]).unwrap(),
        v_desorb: 3.3,
    };
    let mut s = SurfaceModel::uniform(16, 16, 0.384, site);
    s.capacitance = 0.5e-12;
    s
}

fn raster() -> RasterConfig {
    RasterConfig {
        x0: 1.0,
        y0: 1.0,
        width: 2.0,
        height: 2.0,
        rows: 6,
        cols: 6,
        speed: 10.0,
        ..Default::default()
    }
}

fn main() -> stmlab::Result<()> {
    let cfg = MicroscopeConfig {
        fs: 128e3,
        bias: 0.0,
        plant: PlantConfig {
            preamp_gain: 1e7,
            ..Default::default()
        },
        modulation: Some(Modulation { vm: 2.5, freq_hz: 2000.0 }),
        ..Default::default()
    };
    let mut mic = Microscope::new(cfg, surface())?;
    mic.engage_at(1.0, 1.0, Feedback::FirstHarmonic { setpoint: 1e-9 })?;
    mic.apply_recommended_gains(2.0 * PI * 1000.0, 20.0, 3.0)?;
    let fast = ultrafast_iv(
        &mut mic,
        &UltrafastConfig {
            raster: raster(),
            ..Default::default()
        },
    )?;
    println!(
        "ultrafast: {} curves, {} flagged, {:.3} s",
        fast.curves.len(),
        fast.flagged,
        fast.acquisition_time_s
    );
    let q = |img: &stmlab::scan::Image| img.forward.iter().map(|v| v.abs()).sum::<f64>() / img.forward.len() as f64;
    println!(
        "capacitive quadrature before/after subtraction: {:.3e} / {:.3e} A",
        q(&fast.quadrature_pre),
        q(&fast.quadrature_post)
    );

    let mut slow = Microscope::new(
        MicroscopeConfig {
            bias: -2.5,
            ..Default::default()
        },
        surface(),
    )?;
    slow.engage_at(1.0, 1.0, Feedback::Current { setpoint: 0.5e-9 })?;
    let conv = cits(
        &mut slow,
        &CitsConfig {
            raster: raster(),
            ..Default::default()
        },
    )?;
    println!("CITS: {} curves, {:.3} s", conv.curves.len(), conv.acquisition_time_s);
    println!("speed-up {:.0}x", conv.acquisition_time_s / fast.acquisition_time_s);
    Ok(())
}

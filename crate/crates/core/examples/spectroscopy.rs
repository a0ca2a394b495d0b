//! Point spectroscopy and a small CITS grid on a surface with a cubic
//! conductance, compared against the closed-form junction current.

use stmlab::junction::{gap_factor, Conductance, Site, SiteKind, SurfaceModel};
use stmlab::scan::RasterConfig;
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig};
use stmlab::spectroscopy::{cits, current_slice, single_point_iv, CitsConfig, SweepConfig};

const COEFFS: [f64; 4] = [0.0, 1e-4, 0.0, 2e-5];

fn main() -> stmlab::Result<()> {
    let site = Site {
        kind: SiteKind::HSi,
        height: 0.0,
        phi: 4.0,
        conduct: Conductance::new(&COEFFS)?,
        v_desorb: 3.3,
    };
    let mut surface = SurfaceModel::uniform(16, 16, 0.384, site);
    surface.capacitance = 0.0;
    let cfg = MicroscopeConfig {
        bias: -2.5,
        ..Default::default()
    };
    let mut mic = Microscope::new(cfg, surface)?;
    let fb = Feedback::Current { setpoint: 0.5e-9 };
    mic.engage_at(2.0, 2.0, fb)?;
    mic.settle(0.01)?;

    let gap = mic.equilibrium_gap(fb)?;
    let sweep = SweepConfig {
        v_start: -2.0,
        v_stop: 2.0,
        points: 9,
        rate: 20.0,
    };
    let iv = single_point_iv(&mut mic, &sweep)?;
    println!("gap {gap:.3} A");
    println!("{:>6} {:>12} {:>12}", "V", "I_meas", "I_model");
    for (v, i) in iv.v.iter().zip(&iv.i) {
        let model = COEFFS.iter().rev().fold(0.0, |a, c| a * v + c) * gap_factor(gap, 4.0);
        println!("{v:6.2} {i:12.4e} {model:12.4e}");
    }

    let grid = CitsConfig {
        raster: RasterConfig {
            x0: 1.0,
            y0: 1.0,
            width: 3.0,
            height: 3.0,
            rows: 4,
            cols: 4,
            ..Default::default()
        },
        v_grid: (0..9).map(|k| -2.0 + 0.5 * k as f64).collect(),
        ..Default::default()
    };
    let res = cits(&mut mic, &grid)?;
    let slice = current_slice(&res.curves, 4, 4, 1.0)?;
    println!("CITS: {} curves in {:.2} s of instrument time", res.curves.len(), res.acquisition_time_s);
    let (lo, hi) = slice.forward.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("I(1 V) across the grid: {lo:.4e} .. {hi:.4e}");
    Ok(())
}

//! PI stability region across corner frequencies and the recommended gain
//! at each, then a check that the recommended loop settles.

use std::f64::consts::PI;

use stmlab::junction::{Site, SurfaceModel};
use stmlab::sim::{Excitation, Feedback, Microscope, MicroscopeConfig};

fn main() -> stmlab::Result<()> {
    let mut mic = Microscope::new(MicroscopeConfig::default(), SurfaceModel::uniform(8, 8, 0.384, Site::h_si()))?;
    mic.engage_at(1.0, 1.0, Feedback::Current { setpoint: 0.5e-9 })?;

    let fc = [400.0, 800.0, 1600.0, 2400.0, 3200.0];
    let wc: Vec<f64> = fc.iter().map(|f| 2.0 * PI * f).collect();
    let region = mic.design_region(&wc, 50.0, 3.0)?;
    println!("{:>8} {:>10} {:>10} {:>10} {:>10}", "fc_Hz", "ki_lower", "ki_upper", "ki_hinf", "ki_rec");
    for (f, p) in fc.iter().zip(&region.points) {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{f:8.0} {:>10} {:>10} {:10.3} {:10.3}",
            show(p.ki_lower),
            show(p.ki_upper),
            p.ki_hinf,
            p.ki_recommended
        );
    }

    let gains = mic.apply_recommended_gains(2.0 * PI * 1600.0, 50.0, 3.0)?;
    println!("applied ki {:.3} at fc 1600 Hz", gains.ki);
    let fs = mic.fs();
    let mut peak = 0.0f64;
    for n in 0..(0.2 * fs) as usize {
        let s = mic.step(&Excitation {
            gap: 0.2,
            ..Default::default()
        })?;
        if n as f64 > 0.15 * fs {
            peak = peak.max(s.error.abs());
        }
    }
    println!("residual error after a 0.2 A step: {peak:.2e}");
    Ok(())
}

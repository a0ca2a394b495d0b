//! A line scan across a barrier-height step. Fixed gains tuned on the low
//! barrier side go unstable where the gap sensitivity rises; the local
//! barrier height estimate rescales ki and the scan completes.

use std::f64::consts::PI;

use stmlab::adaptive::DcGainTracker;
use stmlab::control::{DcGainRatio, Designer, GainAdapter, PiGains};
use stmlab::junction::{Conductance, Site, SiteKind, SurfaceModel};
use stmlab::scan::{scan_with, RasterConfig, ScanConfig};
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig};

fn surface() -> SurfaceModel {
    let site = |phi| Site {
        kind: SiteKind::HSi,
        height: 0.0,
        phi,
        conduct: Conductance::new(&[0.0, 1e-4]).unwrap(),
        v_desorb: 3.3,
    };
    let mut s = SurfaceModel::uniform(24, 24, 0.384, site(2.0));
    s.capacitance = 0.0;
    for r in 0..24 {
        for c in 12..24 {
            let i = s.index(r, c);
            s.sites[i] = site(5.0);
        }
    }
    s
}

fn engaged() -> stmlab::Result<Microscope> {
    let mut mic = Microscope::new(MicroscopeConfig::default(), surface())?;
    mic.engage_at(1.0, 1.0, Feedback::Current { setpoint: 0.5e-9 })?;
    Ok(mic)
}

fn tracker(fs: f64) -> stmlab::Result<DcGainTracker> {
    Ok(DcGainTracker::new(DcGainRatio::new(400.0, 0.05, 100.0, fs)?).record_every(50))
}

fn main() -> stmlab::Result<()> {
    let wc = 2.0 * PI * 1600.0;
    let probe = engaged()?;
    let m = probe.loop_model()?;
    let g = |f: f64| m.g(f);
    let k_crit = Designer::new(&g, None, probe.fs()).critical_ki(wc).expect("finite critical gain");
    let nominal = PiGains::new(0.8 * k_crit, wc)?;
    let line = ScanConfig {
        raster: RasterConfig {
            x0: 1.0,
            y0: 1.0,
            width: 6.0,
            height: 0.0,
            rows: 1,
            cols: 64,
            speed: 2.0,
            ..Default::default()
        },
        ..Default::default()
    };

    let mut fixed = engaged()?;
    fixed.set_gains(nominal)?;
    let res = scan_with(&mut fixed, &line, &mut ())?;
    println!("fixed ki {:.3}: {}", nominal.ki, res.unfinished().unwrap_or_else(|| "completed".into()));

    let mut mic = engaged()?;
    mic.set_gains(nominal)?;
    let mut cal = tracker(mic.fs())?;
    mic.run(0.1, &mut cal, |_| {})?;
    let desired = cal.estimate().value;
    let period = 10.0 / (2.0 * PI * 100.0);
    let mut t = tracker(mic.fs())?.with_adapter(GainAdapter::new(nominal, desired, period));
    let res = scan_with(&mut mic, &line, &mut t)?;
    println!("adaptive: {}", res.unfinished().unwrap_or_else(|| "completed".into()));
    println!("{:>7} {:>9} {:>8} {:>8}", "x_nm", "estimate", "ki", "ki*est");
    let valid: Vec<_> = t.history.iter().filter(|r| r.valid).collect();
    for r in valid.iter().step_by((valid.len() / 24).max(1)) {
        println!("{:7.2} {:9.3} {:8.3} {:8.3}", r.x, r.estimate, r.ki, r.ki * r.estimate);
    }
    Ok(())
}

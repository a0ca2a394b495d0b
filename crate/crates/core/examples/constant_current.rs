//! Constant-current image of a dimer-row surface with an atomic step,
//! written as 16-bit PGM files plus sidecars.
//!
//! ```text
//! cargo run --release --example constant_current -- out/cc
//! ```

use stmlab::io::ArtifactWriter;
use stmlab::junction::{GeneratorSpec, StepSpec};
use stmlab::scan::{rms_diff, scan, Channel, RasterConfig, ScanConfig};
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig};

fn main() -> stmlab::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/constant_current".into());
    let surface = GeneratorSpec {
        rows: 24,
        cols: 24,
        dimers: true,
        steps: vec![StepSpec { col: 12, height: 1.36 }],
        defect_density: 0.01,
        seed: 3,
        ..Default::default()
    }
    .generate()?;

    let mut mic = Microscope::new(MicroscopeConfig::default(), surface)?;
    mic.engage_at(1.0, 1.0, Feedback::Current { setpoint: 0.5e-9 })?;
    let cfg = ScanConfig {
        raster: RasterConfig {
            x0: 1.0,
            y0: 1.0,
            width: 6.0,
            height: 6.0,
            rows: 32,
            cols: 32,
            speed: 30.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg)?;
    if let Some(why) = res.unfinished() {
        eprintln!("scan stopped early: {why}");
    }

    let topo = res.image(Channel::Topography).unwrap();
    let (lo, hi) = topo.forward.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("topography range  {:.3} A", hi - lo);
    println!("trace/retrace rms {:.4} A", rms_diff(&topo.forward, &topo.reverse));

    let mut w = ArtifactWriter::new(&out, "cc")?;
    w.image(topo, "A")?;
    w.image(res.image(Channel::Feedback).unwrap(), "V")?;
    w.image(res.image(Channel::Error).unwrap(), "ln A")?;
    let m = w.finish("scan", 0, String::new(), None)?;
    println!("{} files in {out}", m.outputs.len());
    Ok(())
}

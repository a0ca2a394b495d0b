//! Closed-loop frequency response of the z loop, then a rational fit of
//! the plant compared against the model the simulator was built from.

use stmlab::junction::{Site, SurfaceModel};
use stmlab::linear::db;
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig};
use stmlab::sysid::{default_grid, fit_rational, measure_closed_loop_frf, FrfOptions};

fn main() -> stmlab::Result<()> {
    let mut mic = Microscope::new(MicroscopeConfig::default(), SurfaceModel::uniform(6, 6, 0.384, Site::h_si()))?;
    mic.engage_at(1.0, 1.0, Feedback::Current { setpoint: 0.5e-9 })?;
    mic.settle(0.02)?;
    let model = mic.loop_model()?;

    let frf = measure_closed_loop_frf(&mut mic, &default_grid(30), &FrfOptions::default())?;
    let fit = fit_rational(&frf, 6, None)?;
    println!("{:>9} {:>10} {:>10} {:>10} {:>6}", "f_Hz", "meas_dB", "fit_dB", "model_dB", "coh");
    for (k, &f) in frf.freq_hz.iter().enumerate() {
        println!(
            "{f:9.1} {:10.2} {:10.2} {:10.2} {:6.3}",
            db(frf.response[k]),
            db(fit.response(f)),
            db(model.g(f)),
            frf.coherence[k]
        );
    }
    println!("fit order {} rms error {:.3} dB", fit.order, fit.rmse_db);
    Ok(())
}

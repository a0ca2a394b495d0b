//! Multi-harmonic lock-in on a synthetic signal, with and without the
//! harmonic notch bank ahead of it.

use std::f64::consts::PI;

use stmlab::dsp::{LockIn, LockInConfig, NotchBank};

fn main() -> stmlab::Result<()> {
    let fs = 100e3;
    let f = 2000.0;
    let amps = [1.0, 0.3, 0.1];
    let signal = |t: f64| {
        0.5 + amps
            .iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * 2.0 * PI * f * t + 0.2 * k as f64).sin())
            .sum::<f64>()
    };

    let mut li = LockIn::new(
        LockInConfig {
            freq_hz: f,
            harmonics: vec![1, 2, 3],
            ..Default::default()
        },
        fs,
    )?;
    let mut notch = NotchBank::harmonics(f, 3, 5.0, fs)?;
    let mut peak_out = 0.0f64;
    for n in 0..(0.05 * fs) as usize {
        let t = n as f64 / fs;
        let x = signal(t);
        li.step(t, x);
        let y = notch.apply(x);
        if t > 0.03 {
            peak_out = peak_out.max((y - 0.5).abs());
        }
    }
    for e in li.estimates() {
        println!("harmonic {}: amplitude {:.4} phase {:+.3} rad", e.harmonic, e.amplitude(), e.phase());
    }
    println!("ripple left after the notch bank: {peak_out:.2e}");
    Ok(())
}
